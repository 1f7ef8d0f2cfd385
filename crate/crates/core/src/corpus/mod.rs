//! Audio ingestion and synthetic multi-device corpora.
//!
//! A recording is modelled as `a = (s + n) * d`: a source signal `s` plus
//! ambient noise `n`, convolved with the recording device's channel `d`.
//! The generator here realises `d` as a short FIR per device so that the rest
//! of the pipeline can be trained and tested without a real phone dataset.

mod channel;
mod generate;
mod manifest;
mod synth;
mod wav;

pub use channel::{apply_channel, DeviceProfile, DEFAULT_EQ_DB, FIR_LEN};
pub use generate::{generate_corpus, synth_corpus, Corpus, CorpusConfig, LabeledClip};
pub use manifest::{CorpusManifest, ManifestEntry, Split, MANIFEST_FILE};
pub use synth::{synth_source, synth_source_with, SourceParams};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

/// A mono audio signal with nominal amplitude range [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("audio clip has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    /// Returns a copy with every sample multiplied by `gain`.
    pub fn scaled(&self, gain: f64) -> Result<Self> {
        Self::new(
            self.samples.iter().map(|s| s * gain).collect(),
            self.sample_rate,
        )
    }
}
