//! Minimal reverse-mode automatic differentiation over dense arrays.

pub mod gradcheck;
mod kernels;
pub mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use kernels::{BatchStats, BsplineGrid, Conv2dGeometry, ResizePlan};
pub use params::{apply_updates, Ctx, Mode, Param, ParamGrads, ParamId, ParamKind, ParamStore, TraceEntry};
pub use tape::{Gradients, Tape, Unary, Var};
pub use tensor::{Float, Tensor};

