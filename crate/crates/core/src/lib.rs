//! Self-supervised audio representation learning toolkit.
//!
//! Pipeline: WAV ingestion -> log-mel features -> twin augmented views
//! (normalize, mixup, random resized crop) -> ConvNet encoder + projection
//! head -> cross-correlation redundancy-reduction objective -> LARS
//! pretraining, with linear-probe and fine-tune evaluation downstream.

pub mod error;
pub mod eval;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dsp;
pub mod model;
pub mod objective;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Size the global compute pool. One thread gives the fully deterministic
/// single-threaded mode; the kernels produce identical bits either way.
/// Returns false if a pool was already installed.
pub fn set_compute_threads(n: usize) -> bool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .is_ok()
}
