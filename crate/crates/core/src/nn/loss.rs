use ndarray::{Array2, ArrayView2, Zip};

use crate::task::LossKind;

fn log_cosh(r: f64) -> f64 {
    let a = r.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Mean loss over every entry of the prediction matrix.
pub fn loss_value(kind: LossKind, pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> f64 {
    let n = pred.len() as f64;
    let mut sum = 0.0;
    Zip::from(&pred).and(&target).for_each(|&p, &t| {
        let r = p - t;
        sum += match kind {
            LossKind::Mse => r * r,
            LossKind::LogCosh => log_cosh(r),
        };
    });
    sum / n
}

/// Derivative of [`loss_value`] with respect to `pred`.
pub fn loss_gradient(
    kind: LossKind,
    pred: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let n = pred.len() as f64;
    Zip::from(&pred).and(&target).map_collect(|&p, &t| {
        let r = p - t;
        match kind {
            LossKind::Mse => 2.0 * r / n,
            LossKind::LogCosh => r.tanh() / n,
        }
    })
}
