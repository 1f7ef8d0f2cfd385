//! MFCC front-end: framing, Hamming window, FFT magnitude, Mel filterbank,
//! log compression and orthonormal DCT-II.

mod io;

pub use io::{read_mfcc, write_mfcc, write_mfcc_csv, MFCC_MAGIC};

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};

use crate::corpus::AudioClip;
use crate::error::{Error, Result};

/// Floor applied to filterbank energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

/// Frame geometry in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameConfig {
    pub frame_len_ms: f64,
    pub frame_shift_ms: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            frame_len_ms: 256.0,
            frame_shift_ms: 64.0,
        }
    }
}

impl FrameConfig {
    /// Frame length and shift converted to samples (rounded to nearest).
    pub fn to_samples(&self, sample_rate: u32) -> Result<(usize, usize)> {
        let sr = f64::from(sample_rate);
        let len = (self.frame_len_ms * sr / 1000.0).round();
        let shift = (self.frame_shift_ms * sr / 1000.0).round();
        if !(self.frame_shift_ms > 0.0) || self.frame_shift_ms > self.frame_len_ms {
            return Err(Error::Config(format!(
                "frame shift {} ms must lie in (0, frame length {} ms]",
                self.frame_shift_ms, self.frame_len_ms
            )));
        }
        if !(len >= 2.0) || !(shift >= 1.0) {
            return Err(Error::Config(format!(
                "frame of {} ms is under 2 samples at {sample_rate} Hz",
                self.frame_len_ms
            )));
        }
        Ok((len as usize, shift as usize))
    }
}

/// Mel filterbank geometry and cepstral order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub n_filters: usize,
    pub f_low: f64,
    pub f_high: f64,
    pub n_ceps: usize,
    /// Keep c0; when false the coefficients returned are c1..=c_M.
    pub include_c0: bool,
}

impl MelConfig {
    /// 26 filters spanning 0 Hz to Nyquist, 12 cepstra including c0.
    pub fn full_band(sample_rate: u32) -> Self {
        Self {
            n_filters: 26,
            f_low: 0.0,
            f_high: f64::from(sample_rate) / 2.0,
            n_ceps: 12,
            include_c0: true,
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = f64::from(sample_rate) / 2.0;
        if !(self.f_low >= 0.0 && self.f_low < self.f_high && self.f_high <= nyquist) {
            return Err(Error::Config(format!(
                "band [{}, {}] Hz must satisfy 0 <= low < high <= {nyquist}",
                self.f_low, self.f_high
            )));
        }
        let max_ceps = if self.include_c0 {
            self.n_filters
        } else {
            self.n_filters.saturating_sub(1)
        };
        if self.n_ceps == 0 || self.n_ceps > max_ceps {
            return Err(Error::Config(format!(
                "n_ceps {} must lie in [1, {max_ceps}] for {} filters",
                self.n_ceps, self.n_filters
            )));
        }
        Ok(())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Splits `samples` into frames of `len` starting every `shift` samples.
/// Frames that would run past the end are dropped.
pub fn frame_samples(samples: &[f64], len: usize, shift: usize) -> Result<Vec<&[f64]>> {
    if len == 0 || shift == 0 {
        return Err(Error::InvalidArgument("frame length and shift must be positive".into()));
    }
    if samples.len() < len {
        return Err(Error::TooShort(format!(
            "{} samples cannot fill one frame of {len}",
            samples.len()
        )));
    }
    let n = (samples.len() - len) / shift + 1;
    Ok((0..n).map(|i| &samples[i * shift..i * shift + len]).collect())
}

pub fn frame_signal<'a>(clip: &'a AudioClip, cfg: &FrameConfig) -> Result<Vec<&'a [f64]>> {
    let (len, shift) = cfg.to_samples(clip.sample_rate())?;
    frame_samples(clip.samples(), len, shift)
}

/// Symmetric Hamming window coefficients of length `len` (>= 2).
pub fn hamming(len: usize) -> Vec<f64> {
    assert!(len >= 2, "Hamming window needs at least 2 points");
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / denom).cos())
        .collect()
}

/// Multiplies `frame` by a Hamming window. Panics if `frame.len() < 2`.
pub fn hamming_window(frame: &[f64]) -> Vec<f64> {
    frame.iter().zip(hamming(frame.len())).map(|(x, w)| x * w).collect()
}

/// Reusable FFT plan for magnitude spectra of frames of a fixed length.
pub struct Spectrum {
    fft: Arc<dyn Fft<f64>>,
    n_fft: usize,
    buf: Vec<Complex<f64>>,
}

impl Spectrum {
    /// Plans for frames of `frame_len` samples, zero-padded to the next power of two.
    pub fn new(frame_len: usize) -> Self {
        let n_fft = frame_len.max(2).next_power_of_two();
        Self {
            fft: FftPlanner::new().plan_fft_forward(n_fft),
            n_fft,
            buf: vec![Complex::default(); n_fft],
        }
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn magnitude(&mut self, frame: &[f64]) -> Vec<f64> {
        assert!(frame.len() <= self.n_fft, "frame longer than planned FFT");
        for (b, x) in self.buf.iter_mut().zip(frame.iter().chain(std::iter::repeat(&0.0))) {
            *b = Complex::new(*x, 0.0);
        }
        self.fft.process(&mut self.buf);
        self.buf[..self.n_bins()].iter().map(|c| c.norm()).collect()
    }
}

/// One-sided magnitude spectrum of `frame` zero-padded to a power of two.
/// Returns `n_fft / 2 + 1` bins.
pub fn fft_magnitude(frame: &[f64]) -> Vec<f64> {
    Spectrum::new(frame.len()).magnitude(frame)
}

/// Triangular filters with centers uniformly spaced on the Mel scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// `n_filters` rows of `n_bins` weights.
    pub weights: Vec<Vec<f64>>,
    /// Center frequency of each filter in Hz (before snapping to bins).
    pub centers_hz: Vec<f64>,
    /// Bin index where each filter peaks.
    pub center_bins: Vec<usize>,
}

impl MelFilterbank {
    pub fn apply(&self, spectrum: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(spectrum).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Builds the filterbank for a spectrum of `n_bins` bins.
///
/// Band edges and centers are snapped to the nearest FFT bin; each triangle
/// rises from its left neighbour's bin to 1 at its own bin and falls to 0 at
/// the right neighbour's bin.
pub fn mel_filterbank(cfg: &MelConfig, sample_rate: u32, n_bins: usize) -> Result<MelFilterbank> {
    cfg.validate(sample_rate)?;
    if n_bins < 2 {
        return Err(Error::Resolution(format!("{n_bins} FFT bins")));
    }
    let n_fft = 2 * (n_bins - 1);
    let bin_hz = f64::from(sample_rate) / n_fft as f64;
    let (mel_lo, mel_hi) = (hz_to_mel(cfg.f_low), hz_to_mel(cfg.f_high));
    let step = (mel_hi - mel_lo) / (cfg.n_filters + 1) as f64;
    let edges_hz: Vec<f64> = (0..cfg.n_filters + 2)
        .map(|i| mel_to_hz(mel_lo + step * i as f64))
        .collect();
    let edge_bins: Vec<usize> = edges_hz
        .iter()
        .map(|f| ((f / bin_hz).round() as usize).min(n_bins - 1))
        .collect();
    if edge_bins.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Resolution(format!(
            "{} filters over [{}, {}] Hz need more than {n_bins} FFT bins",
            cfg.n_filters, cfg.f_low, cfg.f_high
        )));
    }
    let weights = edge_bins
        .windows(3)
        .map(|w| {
            let (l, c, r) = (w[0], w[1], w[2]);
            let mut row = vec![0.0; n_bins];
            for (k, v) in row.iter_mut().enumerate().take(r + 1).skip(l) {
                *v = if k <= c {
                    (k - l) as f64 / (c - l) as f64
                } else {
                    (r - k) as f64 / (r - c) as f64
                };
            }
            row
        })
        .collect();
    Ok(MelFilterbank {
        weights,
        centers_hz: edges_hz[1..=cfg.n_filters].to_vec(),
        center_bins: edge_bins[1..=cfg.n_filters].to_vec(),
    })
}

/// Orthonormal DCT-II basis, `n_out` rows of length `n_in`.
pub fn dct_matrix(n_in: usize, n_out: usize) -> Vec<Vec<f64>> {
    let n = n_in as f64;
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            (0..n_in)
                .map(|i| scale * (PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos())
                .collect()
        })
        .collect()
}

pub fn dct2(x: &[f64]) -> Vec<f64> {
    dct_matrix(x.len(), x.len())
        .iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Inverse of [`dct2`] (orthonormal DCT-III).
pub fn idct2(c: &[f64]) -> Vec<f64> {
    let basis = dct_matrix(c.len(), c.len());
    (0..c.len())
        .map(|i| basis.iter().zip(c).map(|(row, ck)| row[i] * ck).sum())
        .collect()
}

/// Cepstral feature matrix: `n_ceps` rows by `n_frames` columns, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccMatrix {
    coeffs: Vec<f64>,
    n_ceps: usize,
    n_frames: usize,
    pub frame_config: FrameConfig,
    pub mel_config: MelConfig,
}

impl MfccMatrix {
    pub fn from_rows(
        coeffs: Vec<f64>,
        n_ceps: usize,
        n_frames: usize,
        frame_config: FrameConfig,
        mel_config: MelConfig,
    ) -> Result<Self> {
        if n_ceps == 0 || n_frames == 0 || coeffs.len() != n_ceps * n_frames {
            return Err(Error::Shape(format!(
                "{} values for a {n_ceps}x{n_frames} MFCC matrix",
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite MFCC value".into()));
        }
        Ok(Self {
            coeffs,
            n_ceps,
            n_frames,
            frame_config,
            mel_config,
        })
    }

    pub fn n_ceps(&self) -> usize {
        self.n_ceps
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    /// Row-major `n_ceps x n_frames` values.
    pub fn as_slice(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn get(&self, coeff: usize, frame: usize) -> f64 {
        self.coeffs[coeff * self.n_frames + frame]
    }

    pub fn column(&self, frame: usize) -> Vec<f64> {
        (0..self.n_ceps).map(|m| self.get(m, frame)).collect()
    }

    /// Frame-major copy: `n_frames` rows of `n_ceps`.
    pub fn frames_major(&self) -> Vec<f64> {
        (0..self.n_frames).flat_map(|j| self.column(j)).collect()
    }

    /// Mean of each coefficient over all frames.
    pub fn mean_vector(&self) -> Vec<f64> {
        self.coeffs
            .chunks_exact(self.n_frames)
            .map(|row| row.iter().sum::<f64>() / self.n_frames as f64)
            .collect()
    }
}

/// Stateful extractor that reuses the FFT plan, window, filterbank and DCT basis.
pub struct MfccExtractor {
    frame_config: FrameConfig,
    mel_config: MelConfig,
    sample_rate: u32,
    frame_len: usize,
    frame_shift: usize,
    window: Vec<f64>,
    spectrum: Spectrum,
    filterbank: MelFilterbank,
    dct: Vec<Vec<f64>>,
}

impl MfccExtractor {
    pub fn new(frame_config: FrameConfig, mel_config: MelConfig, sample_rate: u32) -> Result<Self> {
        let (frame_len, frame_shift) = frame_config.to_samples(sample_rate)?;
        let spectrum = Spectrum::new(frame_len);
        let filterbank = mel_filterbank(&mel_config, sample_rate, spectrum.n_bins())?;
        let skip = usize::from(!mel_config.include_c0);
        let dct = dct_matrix(mel_config.n_filters, mel_config.n_ceps + skip)
            .into_iter()
            .skip(skip)
            .collect();
        Ok(Self {
            frame_config,
            mel_config,
            sample_rate,
            frame_len,
            frame_shift,
            window: hamming(frame_len),
            spectrum,
            filterbank,
            dct,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    /// Cepstra of a single frame of exactly `frame_len` samples.
    pub fn frame_cepstrum(&mut self, frame: &[f64]) -> Vec<f64> {
        let windowed: Vec<f64> = frame.iter().zip(&self.window).map(|(x, w)| x * w).collect();
        let mag = self.spectrum.magnitude(&windowed);
        let log_energies: Vec<f64> = self
            .filterbank
            .apply(&mag)
            .into_iter()
            .map(|e| e.max(LOG_FLOOR).ln())
            .collect();
        self.dct
            .iter()
            .map(|row| row.iter().zip(&log_energies).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn extract(&mut self, clip: &AudioClip) -> Result<MfccMatrix> {
        if clip.sample_rate() != self.sample_rate {
            return Err(Error::Data(format!(
                "clip at {} Hz given to a {} Hz extractor",
                clip.sample_rate(),
                self.sample_rate
            )));
        }
        let frames = frame_samples(clip.samples(), self.frame_len, self.frame_shift)?;
        let n_frames = frames.len();
        let m = self.mel_config.n_ceps;
        let mut coeffs = vec![0.0; m * n_frames];
        for (j, frame) in frames.iter().enumerate() {
            for (i, c) in self.frame_cepstrum(frame).into_iter().enumerate() {
                coeffs[i * n_frames + j] = c;
            }
        }
        MfccMatrix::from_rows(coeffs, m, n_frames, self.frame_config, self.mel_config)
    }
}

pub fn extract_mfcc(clip: &AudioClip, frame_cfg: &FrameConfig, mel_cfg: &MelConfig) -> Result<MfccMatrix> {
    MfccExtractor::new(*frame_cfg, *mel_cfg, clip.sample_rate())?.extract(clip)
}
