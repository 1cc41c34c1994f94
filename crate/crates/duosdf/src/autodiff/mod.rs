//! Minimal reverse-mode automatic differentiation over flat real buffers.
//!
//! Everything is generic over [`Real`] so the training path runs at `f32`
//! (matching the 32-bit checkpoint format) while oracle-grade tests run the
//! identical code at `f64`. Spatial derivatives of fields are recorded as
//! first-class tape operations (forward chain rule), so a single reverse pass
//! differentiates losses that consume gradients such as the eikonal term.

pub mod checkpoint;
pub mod fd;
pub mod linalg;
pub mod mlp;
pub mod params;
pub mod tape;

pub use linalg::{Buf, Real};
pub use mlp::{Activation, Mlp};
pub use params::{Adam, LrGroup, ParamId, ParamSet};
pub use tape::{spatial_gradient, Tape, Var};
