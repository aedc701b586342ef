//! mdbook cannot run listings that depend on an external crate, so every
//! chapter of the guide is pulled in here as module docs and `cargo test
//! --doc` runs its code blocks. One module per chapter keeps failures
//! traceable to a file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/quantization.md")]
pub mod quantization {}
#[doc = include_str!("../../../book/src/impact.md")]
pub mod impact {}
#[doc = include_str!("../../../book/src/cherries.md")]
pub mod cherries {}
#[doc = include_str!("../../../book/src/qat.md")]
pub mod qat {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
