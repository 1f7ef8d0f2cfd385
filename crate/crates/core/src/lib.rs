//! Source cell-phone recognition from recorded speech.
//!
//! The pipeline runs MFCC extraction ([`dsp`]), fits a universal background
//! GMM and MAP-adapts it per time segment to build normalized temporal mean
//! tensors ([`gmm`]), and classifies those tensors with a 3D-convolutional +
//! bidirectional LSTM network ([`nn`], [`model`]). [`corpus`] ingests WAV
//! audio and synthesises labelled multi-device recordings for testing.

mod binio;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod gmm;
pub mod model;
pub mod nn;
pub mod seed;

pub use corpus::{AudioClip, Corpus, CorpusConfig, CorpusManifest, DeviceProfile, Split};
pub use dsp::{FrameConfig, MelConfig, MfccMatrix};
pub use error::{Error, Result};
pub use gmm::{DiagGmm, Frames, SgmmConfig, SgmmTensor};
