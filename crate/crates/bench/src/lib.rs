//! Shared fixtures for the benchmarks.

use sgmm_core::corpus::{apply_channel, synth_source, DeviceProfile};
use sgmm_core::dsp::extract_mfcc;
use sgmm_core::gmm::SgmmMeta;
use sgmm_core::{AudioClip, FrameConfig, Frames, MelConfig, MfccMatrix, SgmmTensor};

pub const SAMPLE_RATE: u32 = 16000;

/// A 3 s recording through a random device.
pub fn recording(seed: u64) -> AudioClip {
    let source = synth_source(3.0, SAMPLE_RATE, seed).expect("valid source");
    let device = DeviceProfile::random("bench", SAMPLE_RATE, 0.01, seed).expect("valid device");
    apply_channel(&source, &device, seed).expect("valid channel")
}

pub fn mfcc(seed: u64) -> MfccMatrix {
    extract_mfcc(&recording(seed), &FrameConfig::default(), &MelConfig::full_band(SAMPLE_RATE)).expect("long enough")
}

/// Frames pooled from `n_clips` recordings.
pub fn frames(n_clips: u64) -> Frames {
    let mut all = Frames::from(&mfcc(0));
    for s in 1..n_clips {
        all.extend(&Frames::from(&mfcc(s))).expect("same dimension");
    }
    all
}

/// A deterministic `12 x 8 x 4` tensor with entries in [0, 1].
pub fn tensor(k: usize) -> SgmmTensor {
    let data = (0..12 * 8 * 4).map(|i| ((i * 31 + k * 17) % 97) as f64 / 96.0).collect();
    let meta = SgmmMeta { n_components: 8, frames_per_segment: 10, relevance: 16.0, append_covariances: false };
    SgmmTensor::new(data, (12, 8, 4), meta).expect("valid tensor")
}
