use std::f64::consts::PI;

use rand::Rng;

use super::AudioClip;
use crate::error::{Error, Result};
use crate::seed;

/// Knobs for the speech-like source generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceParams {
    pub pitch_min_hz: f64,
    pub pitch_max_hz: f64,
    /// Harmonics whose instantaneous frequency exceeds this are muted.
    pub max_harmonic_hz: f64,
    /// Peak absolute amplitude of the returned clip.
    pub peak: f64,
    /// Pause lengths between voiced runs, in seconds.
    pub gap_min_s: f64,
    pub gap_max_s: f64,
}

impl Default for SourceParams {
    fn default() -> Self {
        Self {
            pitch_min_hz: 90.0,
            pitch_max_hz: 220.0,
            max_harmonic_hz: 3800.0,
            peak: 0.9,
            gap_min_s: 0.3,
            gap_max_s: 0.8,
        }
    }
}

/// Synthesises a speech-like source with [`SourceParams::default`].
pub fn synth_source(duration_s: f64, sample_rate: u32, seed: u64) -> Result<AudioClip> {
    synth_source_with(duration_s, sample_rate, seed, &SourceParams::default())
}

/// Harmonic stack with drifting pitch, three slowly moving formant bumps and a
/// syllabic amplitude envelope interrupted by silent gaps.
pub fn synth_source_with(
    duration_s: f64,
    sample_rate: u32,
    seed: u64,
    params: &SourceParams,
) -> Result<AudioClip> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "duration must be positive, got {duration_s}"
        )));
    }
    if sample_rate == 0 {
        return Err(Error::InvalidArgument("sample rate must be positive".into()));
    }
    if !(params.gap_min_s >= 0.0 && params.gap_min_s <= params.gap_max_s) {
        return Err(Error::InvalidArgument(format!(
            "gap range [{}, {}] is invalid",
            params.gap_min_s, params.gap_max_s
        )));
    }
    let sr = f64::from(sample_rate);
    let n = (duration_s * sr).round().max(1.0) as usize;
    let mut rng = seed::rng_for(seed, &[seed::TAG_SOURCE]);

    let f0_base = rng.gen_range(params.pitch_min_hz..=params.pitch_max_hz);
    let drift = [
        (rng.gen_range(0.05..0.12), rng.gen_range(0.3..1.2), rng.gen_range(0.0..2.0 * PI)),
        (rng.gen_range(0.01..0.05), rng.gen_range(2.0..5.0), rng.gen_range(0.0..2.0 * PI)),
    ];
    let formants = [
        (rng.gen_range(300.0..900.0), rng.gen_range(80.0..160.0)),
        (rng.gen_range(900.0..2300.0), rng.gen_range(120.0..250.0)),
        (rng.gen_range(2300.0..3400.0), rng.gen_range(180.0..350.0)),
    ];
    let formant_wobble = rng.gen_range(0.5..2.0);
    let tilt_hz = rng.gen_range(400.0..1200.0);
    let syllable_rate = rng.gen_range(2.5..5.0);
    let syllable_phase = rng.gen_range(0.0..2.0 * PI);

    // Alternating voiced/silent intervals, in samples.
    let mut gate = vec![0.0f64; n];
    let ramp = ((0.01 * sr) as usize).max(1);
    let mut pos = 0usize;
    while pos < n {
        let voiced = (rng.gen_range(0.3..1.2) * sr) as usize;
        let end = (pos + voiced).min(n);
        let len = end - pos;
        for (k, g) in gate[pos..end].iter_mut().enumerate() {
            let edge = k.min(len - 1 - k);
            *g = if edge < ramp {
                0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
            } else {
                1.0
            };
        }
        pos = end + (rng.gen_range(params.gap_min_s..=params.gap_max_s) * sr) as usize;
    }

    let n_harm = ((params.max_harmonic_hz / params.pitch_min_hz).floor() as usize).max(1);
    let mut out = vec![0.0f64; n];
    let mut phase = 0.0f64;
    for (i, (y, &g)) in out.iter_mut().zip(&gate).enumerate() {
        let t = i as f64 / sr;
        let f0 = f0_base
            * (1.0
                + drift
                    .iter()
                    .map(|&(depth, rate, ph)| depth * (2.0 * PI * rate * t + ph).sin())
                    .sum::<f64>());
        phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
        if g == 0.0 {
            continue;
        }
        let shift = 1.0 + 0.06 * (2.0 * PI * formant_wobble * t).sin();
        let mut acc = 0.0;
        for k in 1..=n_harm {
            let fk = k as f64 * f0;
            if fk > params.max_harmonic_hz {
                break;
            }
            let bumps: f64 = formants
                .iter()
                .map(|&(fc, bw)| {
                    let z = (fk - fc * shift) / bw;
                    (-z * z).exp()
                })
                .sum();
            let amp = (0.15 + bumps) / (1.0 + fk / tilt_hz);
            acc += amp * (k as f64 * phase).sin();
        }
        let env = (2.0 * PI * syllable_rate * t + syllable_phase).sin().abs().powf(0.7);
        *y = g * (0.2 + 0.8 * env) * acc;
    }

    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let scale = params.peak.min(1.0) / peak;
        out.iter_mut().for_each(|v| *v *= scale);
    }
    AudioClip::new(out, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    #[test]
    fn deterministic_and_sized() {
        let a = synth_source(1.0, 16000, 42).unwrap();
        let b = synth_source(1.0, 16000, 42).unwrap();
        assert_eq!(a.len(), 16000);
        assert_eq!(a.samples(), b.samples());
        let c = synth_source(1.0, 16000, 43).unwrap();
        assert_ne!(a.samples(), c.samples());
        let peak = a.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak <= 1.0 && peak > 0.5);
    }

    #[test]
    fn contains_silent_gaps() {
        let clip = synth_source(3.0, 16000, 5).unwrap();
        let zeros = clip.samples().iter().filter(|v| **v == 0.0).count();
        assert!(zeros > 800, "expected silent stretches, found {zeros} zero samples");
    }

    #[test]
    fn energy_concentrated_below_4khz() {
        for seed in 0..5 {
            let clip = synth_source(1.0, 16000, seed).unwrap();
            let n = clip.len();
            let mut buf: Vec<Complex<f64>> =
                clip.samples().iter().map(|&v| Complex::new(v, 0.0)).collect();
            FftPlanner::new().plan_fft_forward(n).process(&mut buf);
            let cutoff = 4000 * n / 16000;
            let (low, total) = buf[..=n / 2]
                .iter()
                .enumerate()
                .fold((0.0, 0.0), |(l, t), (k, c)| {
                    let e = c.norm_sqr();
                    (if k < cutoff { l + e } else { l }, t + e)
                });
            assert!(low / total > 0.99, "seed {seed}: ratio {}", low / total);
        }
    }

    #[test]
    fn rejects_nonpositive_duration() {
        assert!(synth_source(0.0, 16000, 1).is_err());
        assert!(synth_source(-1.0, 16000, 1).is_err());
        let p = SourceParams { gap_min_s: 0.5, gap_max_s: 0.1, ..SourceParams::default() };
        assert!(synth_source_with(1.0, 16000, 1, &p).is_err());
    }

    #[test]
    fn pauses_span_whole_frames() {
        // A 0.3 s pause holds at least one silent 256 ms window.
        let clip = synth_source(3.0, 16000, 9).unwrap();
        let longest = clip
            .samples()
            .split(|v| *v != 0.0)
            .map(<[f64]>::len)
            .max()
            .unwrap_or(0);
        assert!(longest >= 4096, "longest pause {longest} samples");
    }
}
