//! Core algorithms for likelihood-based out-of-distribution screening of 3D volumes.
//!
//! The pipeline compresses a volume to a discrete latent grid with a
//! vector-quantized autoencoder ([`codec`]), models the flattened token
//! sequence with a causal transformer ([`density`]) and uses the resulting
//! log-likelihood as an OOD score. The [`seg`] module holds the segmentation
//! baselines (softmax, deep ensemble, MC dropout) whose per-lesion certainty
//! is compared against the likelihood filter, and [`eval`] the AUC and
//! bootstrap statistics used for every report.
//!
//! Everything runs on the CPU on top of the small reverse-mode engine in
//! [`autodiff`].

pub mod autodiff;
pub mod codec;
pub mod corrupt;
pub mod density;
pub mod error;
pub mod eval;
pub mod seed;
pub mod seg;
pub mod volume;
pub mod vq;

pub use autodiff::{Real, Tape, Tensor, Var};
pub use codec::{CodecConfig, CodecModel};
pub use corrupt::{CorruptionKind, CorruptionRecord};
pub use density::{DensityModel, PerformerConfig, TokenSequence};
pub use eval::{AucResult, BootstrapResult, ScoreSet};
pub use vq::{Codebook, QuantizedGrid};
pub use volume::{IntensityDomain, LabelMask, PhantomSpec, Volume};
pub use error::{Error, Result};
