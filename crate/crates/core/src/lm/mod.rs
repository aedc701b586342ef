//! Byte-level decoder-only transformer, corpus windows, perplexity and the
//! `CHRQ` checkpoint format.
//!
//! Parameter names follow the usual Hugging Face layout
//! (`layers.0.self_attn.v_proj.weight`, `layers.1.mlp.down_proj.weight`, ...)
//! so per-matrix reports read the same way as in the literature.

mod checkpoint;
mod data;
mod eval;
mod model;

pub use checkpoint::{Checkpoint, Payload, Section, Storage, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{batch_windows, detokenize, ingest, make_batches, make_windows, window_count, Corpus, Split, TokenBatch};
pub use eval::{batch_nll, perplexity, Perplexity};
pub use model::{is_quantizable, Forward, ModelConfig, ToyLm};
