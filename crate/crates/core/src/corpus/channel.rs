use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::AudioClip;
use crate::error::{Error, Result};
use crate::seed;

/// Number of taps in generated device channels.
pub const FIR_LEN: usize = 64;
/// Default depth range of the random peaking sections, in dB.
pub const DEFAULT_EQ_DB: [f64; 2] = [4.0, 9.0];

/// A recording device: an FIR channel plus the std-dev of additive ambient noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    pub device_id: String,
    pub fir: Vec<f64>,
    pub noise_level: f64,
}

impl DeviceProfile {
    pub fn new(device_id: impl Into<String>, fir: Vec<f64>, noise_level: f64) -> Result<Self> {
        let profile = Self {
            device_id: device_id.into(),
            fir,
            noise_level,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fir.is_empty() {
            return Err(Error::InvalidProfile(format!("{}: empty FIR", self.device_id)));
        }
        if !self.fir.iter().all(|v| v.is_finite()) || self.fir.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidProfile(format!(
                "{}: FIR needs at least one finite nonzero tap",
                self.device_id
            )));
        }
        if !(self.noise_level >= 0.0) || !self.noise_level.is_finite() {
            return Err(Error::InvalidProfile(format!(
                "{}: noise level must be finite and non-negative",
                self.device_id
            )));
        }
        Ok(())
    }

    /// Builds a seeded device channel: 2-4 peaking band emphases and a gentle
    /// high shelf, cascaded and truncated to [`FIR_LEN`] taps.
    pub fn random(
        device_id: impl Into<String>,
        sample_rate: u32,
        noise_level: f64,
        seed: u64,
    ) -> Result<Self> {
        Self::random_with_eq(device_id, sample_rate, noise_level, DEFAULT_EQ_DB, seed)
    }

    /// Like [`DeviceProfile::random`] with peaking-section depths drawn from
    /// `eq_db` (in dB, either sign).
    pub fn random_with_eq(
        device_id: impl Into<String>,
        sample_rate: u32,
        noise_level: f64,
        eq_db: [f64; 2],
        seed: u64,
    ) -> Result<Self> {
        if !(eq_db[0] >= 0.0 && eq_db[0] < eq_db[1]) || !eq_db[1].is_finite() {
            return Err(Error::InvalidProfile(format!("EQ depth range {eq_db:?} is invalid")));
        }
        let sr = f64::from(sample_rate);
        let nyquist = sr / 2.0;
        let mut rng = seed::rng_for(seed, &[seed::TAG_DEVICE]);
        let mut sections = Vec::new();
        for _ in 0..rng.gen_range(2..=4) {
            let lo = 200f64.ln();
            let hi = (0.85 * nyquist).ln();
            let fc = rng.gen_range(lo..hi).exp();
            let gain_db = rng.gen_range(eq_db[0]..eq_db[1]) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let q = rng.gen_range(0.6..1.6);
            sections.push(Biquad::peaking(fc, gain_db, q, sr));
        }
        let shelf_fc = rng.gen_range(0.25 * nyquist..0.8 * nyquist);
        sections.push(Biquad::high_shelf(shelf_fc, rng.gen_range(-3.0..3.0), sr));

        let mut fir = vec![0.0; FIR_LEN];
        fir[0] = 1.0;
        for s in &mut sections {
            s.run(&mut fir);
        }
        // Half-Hann taper over the tail hides the truncation edge.
        let taper = FIR_LEN / 4;
        for k in 0..taper {
            let w = 0.5 + 0.5 * (PI * (k + 1) as f64 / (taper + 1) as f64).cos();
            fir[FIR_LEN - taper + k] *= w;
        }
        Self::new(device_id, fir, noise_level)
    }

    /// Magnitude response in dB at `freq_hz`.
    pub fn response_db(&self, freq_hz: f64, sample_rate: u32) -> f64 {
        let w = 2.0 * PI * freq_hz / f64::from(sample_rate);
        let (re, im) = self
            .fir
            .iter()
            .enumerate()
            .fold((0.0, 0.0), |(re, im), (k, &h)| {
                (re + h * (w * k as f64).cos(), im - h * (w * k as f64).sin())
            });
        10.0 * (re * re + im * im).max(1e-300).log10()
    }
}

/// RBJ cookbook biquad in direct form I.
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn peaking(fc: f64, gain_db: f64, q: f64, sr: f64) -> Self {
        let a_lin = 10f64.powf(gain_db / 40.0);
        let w0 = 2.0 * PI * fc / sr;
        let alpha = w0.sin() / (2.0 * q);
        let cw = w0.cos();
        let a0 = 1.0 + alpha / a_lin;
        Self {
            b: [
                (1.0 + alpha * a_lin) / a0,
                -2.0 * cw / a0,
                (1.0 - alpha * a_lin) / a0,
            ],
            a: [-2.0 * cw / a0, (1.0 - alpha / a_lin) / a0],
        }
    }

    fn high_shelf(fc: f64, gain_db: f64, sr: f64) -> Self {
        let a_lin = 10f64.powf(gain_db / 40.0);
        let w0 = 2.0 * PI * fc / sr;
        let cw = w0.cos();
        let alpha = w0.sin() / 2.0 * std::f64::consts::SQRT_2;
        let sq = 2.0 * a_lin.sqrt() * alpha;
        let a0 = (a_lin + 1.0) - (a_lin - 1.0) * cw + sq;
        Self {
            b: [
                a_lin * ((a_lin + 1.0) + (a_lin - 1.0) * cw + sq) / a0,
                -2.0 * a_lin * ((a_lin - 1.0) + (a_lin + 1.0) * cw) / a0,
                a_lin * ((a_lin + 1.0) + (a_lin - 1.0) * cw - sq) / a0,
            ],
            a: [
                2.0 * ((a_lin - 1.0) - (a_lin + 1.0) * cw) / a0,
                ((a_lin + 1.0) - (a_lin - 1.0) * cw - sq) / a0,
            ],
        }
    }

    fn run(&mut self, x: &mut [f64]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in x.iter_mut() {
            let x0 = *v;
            let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            *v = y0;
        }
    }
}

/// Passes `source` through a device: adds white Gaussian noise at the
/// profile's level, then convolves with the FIR. Output keeps the source length.
pub fn apply_channel(source: &AudioClip, profile: &DeviceProfile, seed: u64) -> Result<AudioClip> {
    profile.validate()?;
    let mut noisy = source.samples().to_vec();
    if profile.noise_level > 0.0 {
        let normal = Normal::new(0.0, profile.noise_level)
            .map_err(|e| Error::InvalidProfile(e.to_string()))?;
        let mut rng = seed::rng_for(seed, &[seed::TAG_NOISE]);
        noisy.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let fir = &profile.fir;
    let out: Vec<f64> = (0..noisy.len())
        .map(|i| {
            let taps = fir.len().min(i + 1);
            (0..taps).map(|k| fir[k] * noisy[i - k]).sum()
        })
        .collect();
    AudioClip::new(out, source.sample_rate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_clip(n: usize, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), 16000).unwrap()
    }

    #[test]
    fn identity_and_scaling_channels() {
        let src = random_clip(500, 1);
        let unit = DeviceProfile::new("u", vec![1.0], 0.0).unwrap();
        assert_eq!(apply_channel(&src, &unit, 0).unwrap().samples(), src.samples());
        let half = DeviceProfile::new("h", vec![0.5], 0.0).unwrap();
        let out = apply_channel(&src, &half, 0).unwrap();
        for (a, b) in out.samples().iter().zip(src.samples()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn matches_direct_convolution() {
        let src = random_clip(300, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fir: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let profile = DeviceProfile::new("r", fir.clone(), 0.0).unwrap();
        let out = apply_channel(&src, &profile, 0).unwrap();
        // Full linear convolution, then truncation to the source length.
        let x = src.samples();
        let mut full = vec![0.0; x.len() + fir.len() - 1];
        for (i, xi) in x.iter().enumerate() {
            for (k, hk) in fir.iter().enumerate() {
                full[i + k] += xi * hk;
            }
        }
        for (a, b) in out.samples().iter().zip(&full[..x.len()]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_in_source() {
        let src = random_clip(200, 4);
        let profile = DeviceProfile::random("d", 16000, 0.0, 9).unwrap();
        let base = apply_channel(&src, &profile, 1).unwrap();
        for alpha in [-2.0, 0.3, 7.5] {
            let scaled = apply_channel(&src.scaled(alpha).unwrap(), &profile, 1).unwrap();
            for (a, b) in scaled.samples().iter().zip(base.samples()) {
                assert!((a - alpha * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noise_is_seeded() {
        let src = random_clip(100, 5);
        let profile = DeviceProfile::new("n", vec![1.0], 0.1).unwrap();
        let a = apply_channel(&src, &profile, 11).unwrap();
        let b = apply_channel(&src, &profile, 11).unwrap();
        let c = apply_channel(&src, &profile, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_profiles() {
        assert!(matches!(
            DeviceProfile::new("e", vec![], 0.0),
            Err(Error::InvalidProfile(_))
        ));
        assert!(DeviceProfile::new("z", vec![0.0, 0.0], 0.0).is_err());
        assert!(DeviceProfile::new("n", vec![1.0], f64::NAN).is_err());
        let bad = DeviceProfile {
            device_id: "x".into(),
            fir: vec![],
            noise_level: 0.0,
        };
        assert!(apply_channel(&random_clip(10, 0), &bad, 0).is_err());
    }

    #[test]
    fn random_devices_differ_by_3db() {
        for seed in 0..10u64 {
            let a = DeviceProfile::random("a", 16000, 0.0, seed * 2).unwrap();
            let b = DeviceProfile::random("b", 16000, 0.0, seed * 2 + 1).unwrap();
            assert_eq!(a.fir.len(), FIR_LEN);
            let max_diff = (0..=256)
                .map(|k| {
                    let f = 8000.0 * k as f64 / 256.0;
                    (a.response_db(f, 16000) - b.response_db(f, 16000)).abs()
                })
                .fold(0.0, f64::max);
            assert!(max_diff >= 3.0, "seed {seed}: {max_diff} dB");
        }
    }
}
