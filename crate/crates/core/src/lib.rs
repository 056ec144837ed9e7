//! Cross-domain singer embeddings: a joint space for monophonic vocal
//! tracks and mixed (vocals + accompaniment) tracks.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`audio`] — framing, spectrograms, chroma, tempo/beats, key, voice
//!   activity, loudness.
//! * [`mashup`] — mashability testing and beat-aligned, SNR-controlled
//!   mixing of vocal and background segments.
//! * [`synth`] — procedural singers and backgrounds with known ground truth.
//! * [`model`] — the 1-D convolutional embedding network with exact
//!   gradients, classification pre-training and hinge-rank metric learning.
//! * [`gmm`] — the MFCC GMM-UBM baseline with MAP adaptation.
//! * [`eval`] — singer identification, query-by-singer, scenario drivers and
//!   t-SNE projection.
//! * [`dataset`] and [`pipeline`] — corpus loading, training banks,
//!   evaluation mixes, and the train/baseline orchestration.

pub mod audio;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod mashup;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
