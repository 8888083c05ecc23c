//! Reverse-mode differentiation, parameters and optimization.

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
mod params;
mod tape;
mod tensor;

pub use params::{lr_schedule, AdamConfig, LrSchedule, ParamId, ParamStore};
pub use tape::{BackwardCtx, BackwardFn, Tape, Var};
pub use tensor::{Real, Tensor};
