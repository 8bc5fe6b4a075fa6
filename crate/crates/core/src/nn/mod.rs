//! Dense shared-trunk networks with hand-written reverse-mode gradients.
//!
//! The layer menu is fixed: a trunk of fully-connected layers with a smooth
//! activation, followed by one linear head per task. All arithmetic is f64
//! and every routine is a pure function of its inputs.

mod loss;
mod net;
mod optim;
mod param;

pub use loss::{loss_gradient, loss_value};
pub use net::{
    backward, backward_weighted, forward, task_losses, trunk_gradient, Activation, Arch,
    BackwardPass, Batch, ForwardPass, HeadArch, TrunkArch,
};
pub use optim::{poly_lr, sgd_step, OptimizerState, SgdConfig};
pub use param::{LayerShape, ParamVector, Params};
