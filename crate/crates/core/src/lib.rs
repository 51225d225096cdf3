//! Interspace pruning toolkit.
//!
//! Convolution filters can be stored either spatially (one weight per pixel)
//! or as coefficients of a trainable filter basis. Pruning the basis
//! coefficients instead of the pixels ("interspace pruning", IP) is compared
//! against standard pixel pruning (SP) throughout this crate:
//!
//! * [`fbconv`]: standard and filter-basis convolutions with gradients,
//!   change-of-basis rules.
//! * [`init`]: basis and coefficient initializations.
//! * [`model`]: a small configurable CNN in SP or IP form, SGD training,
//!   checkpoints.
//! * [`scores`] / [`schedules`]: pruning criteria and pruning regimes.
//! * [`costs`]: FLOP, memory and pruning-rate accounting.
//! * [`sdl`]: sparse dictionary learning view of pruning.
//! * [`sparsexec`]: CSR execution and speedup benchmarks.
//! * [`data`]: IDX loader and synthetic oriented-bar images.

pub mod costs;
pub mod data;
pub mod error;
pub mod fbconv;
pub mod init;
pub mod model;
pub mod rng;
pub mod schedules;
pub mod scores;
pub mod sdl;
pub mod sparsexec;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
