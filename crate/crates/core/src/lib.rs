//! Impact-based cherry parameter selection and mixed-precision
//! quantization-aware training, at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! * [`autograd`] — define-by-run reverse-mode autodiff, Adam, LR schedule.
//! * [`quant`] — symmetric/asymmetric quantizers, grouping, bit packing and
//!   average-bit accounting.
//! * [`lm`] — the byte-level toy transformer, corpus handling, perplexity and
//!   the checkpoint format.
//! * [`impact`] — Fisher-diagonal impact estimation and competing importance
//!   metrics, heterogeneity scores, overlap ratios.
//! * [`cherry`] — cherry column selection and mixed-precision matrices.
//! * [`qat`] — base training and end-to-end mixed-precision QAT with the
//!   straight-through estimator, plus the 2-bit per-column scale search.

pub mod autograd;
pub mod cherry;
mod error;
pub mod impact;
pub mod lm;
pub mod qat;
pub mod quant;

pub use error::{Error, Result};
