use serde::{Deserialize, Serialize};

use super::param::Params;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Heavy-ball momentum buffers shaped like the parameters they update.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: SgdConfig,
    buffers: Params,
}

impl OptimizerState {
    pub fn new(config: SgdConfig, like: &Params) -> Self {
        OptimizerState {
            config,
            buffers: like.zeros_like(),
        }
    }

    pub fn buffers(&self) -> &Params {
        &self.buffers
    }

    pub fn reset(&mut self) {
        self.buffers = self.buffers.zeros_like();
    }
}

/// One SGD step with momentum and L2 weight decay:
///
/// ```text
/// v <- momentum * v + grad + weight_decay * param
/// param <- param - lr * v
/// ```
///
/// The update is computed in full before anything is written, so a
/// non-finite result leaves `params` and `state` untouched.
pub fn sgd_step(
    params: &mut Params,
    grads: &Params,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.buffers) {
        return Err(Error::ShapeMismatch {
            context: "sgd step".into(),
            expected: vec![params.len()],
            found: vec![grads.len(), state.buffers.len()],
        });
    }
    let SgdConfig {
        momentum,
        weight_decay,
        ..
    } = state.config;

    let mut new_params = params.clone();
    let mut new_buffers = state.buffers.clone();
    for (((task, p), (_, v)), (_, g)) in new_params
        .iter_mut()
        .zip(new_buffers.iter_mut())
        .zip(grads.iter())
    {
        for (i, ((pi, vi), gi)) in p
            .values_mut()
            .iter_mut()
            .zip(v.values_mut().iter_mut())
            .zip(g.values())
            .enumerate()
        {
            *vi = momentum * *vi + gi + weight_decay * *pi;
            *pi -= lr * *vi;
            if !pi.is_finite() || !vi.is_finite() {
                let layer = task.map_or_else(|| "trunk".to_string(), |t| format!("head {t}"));
                return Err(Error::NonFiniteUpdate {
                    layer: format!("{layer}[{i}]"),
                });
            }
        }
    }
    *params = new_params;
    state.buffers = new_buffers;
    Ok(())
}

/// Polynomial decay `eta0 * (1 - round / total)^0.9`.
pub fn poly_lr(round: usize, total: usize, eta0: f64) -> Result<f64> {
    if total == 0 || round > total {
        return Err(Error::ScheduleOutOfRange { round, total });
    }
    Ok(eta0 * (1.0 - round as f64 / total as f64).powf(0.9))
}
