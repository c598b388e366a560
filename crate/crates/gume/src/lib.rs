//! Long-tail multimodal recommender built around three ideas: enhancing the
//! user-item graph with cross-modality semantic neighbors, separating coarse
//! and fine-grained modality attributes with behavior gates, and contrastive
//! objectives that align behavior, modality, and user-interest views.
//!
//! The crate is a library first; see the `examples/` directory for one
//! runnable walkthrough per capability and the `gume` binary for the
//! file-based pipeline (`synth`, `prepare`, `train`, `evaluate`, `ablate`,
//! `gradcheck`, `tail-report`).

pub mod dataio;
pub mod encoders;
pub mod fusion;
pub mod objectives;
pub mod error;
pub mod graphs;
pub mod tape;

pub use error::{GumeError, Result};

/// Entry point used by the `gume` binary; returns the process exit code.
pub fn cli_main() -> i32 {
    eprintln!("cli not wired yet");
    1
}
