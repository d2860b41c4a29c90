//! Dense tensors, layer kernels with manual backward passes, losses and
//! optimizers. Everything runs in `f64`.

pub mod gradcheck;
pub mod layers;
pub mod loss;
mod optim;
mod params;
mod tensor;

pub use optim::{adam_step, sgd_step, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use params::{AdamSlot, GradMap, Param, ParameterSet, Partition, PartitionSet};
pub use tensor::Tensor;

use crate::error::Result;

/// A differentiable loss over some batch type. The meta-learning routines
/// are written against this trait so they can be checked on toy objectives
/// with closed-form Hessians as well as on the real models.
pub trait Objective {
    type Batch: ?Sized;

    /// Mean loss over `batch` and its gradient for every parameter whose
    /// partition is in `filter`. Parameters outside the filter get no entry.
    fn loss_and_grad(
        &self,
        params: &ParameterSet,
        batch: &Self::Batch,
        filter: &PartitionSet,
    ) -> Result<(f64, GradMap)>;
}
