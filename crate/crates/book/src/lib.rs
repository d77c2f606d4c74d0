//! Runs every code block in `book/` as a doc-test.
//!
//! mdbook cannot test snippets that depend on the library itself, so each
//! chapter is included here as module documentation and `cargo test --doc`
//! does the work. One module per chapter keeps failures attributable.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/audio.md")]
pub mod audio {}

#[doc = include_str!("../../../book/src/architecture.md")]
pub mod architecture {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/generation.md")]
pub mod generation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
