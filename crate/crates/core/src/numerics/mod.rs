//! Dense tensors, reverse-mode differentiation, Adam, learning-rate
//! schedules and gradient clipping.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod schedule;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, clip_global_norm, global_grad_norm, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use schedule::{lr_at, LrSchedule, ScheduleKind};
pub use tensor::{lit, Scalar, Tensor};
