use std::fmt;

use super::map::{adapted_means, adapted_variances, map_statistics, minmax_normalize, segment_frames, SegmentedMfcc};
use super::DiagGmm;
use crate::dsp::MfccMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgmmConfig {
    /// Frames per segment (`t`).
    pub frames_per_segment: usize,
    /// MAP relevance factor (`r`).
    pub relevance: f64,
    /// Append MAP-adapted diagonal variances after the means, doubling the G axis.
    pub append_covariances: bool,
}

impl Default for SgmmConfig {
    fn default() -> Self {
        Self {
            frames_per_segment: 10,
            relevance: 16.0,
            append_covariances: false,
        }
    }
}

/// Provenance carried alongside an [`SgmmTensor`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgmmMeta {
    pub n_components: usize,
    pub frames_per_segment: usize,
    pub relevance: f64,
    pub append_covariances: bool,
}

pub(crate) const NORM_RULE: &str = "minmax-row-per-segment";

impl fmt::Display for SgmmMeta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "sgmm-meta v1 G={} t={} r={} norm={NORM_RULE} cov={}",
            self.n_components, self.frames_per_segment, self.relevance, self.append_covariances
        )
    }
}

impl SgmmMeta {
    pub fn parse(line: &str) -> Result<Self> {
        let err = |d: &str| Error::Format {
            what: "SGMM metadata",
            detail: d.to_string(),
        };
        let rest = line
            .trim()
            .strip_prefix("sgmm-meta v1")
            .ok_or_else(|| err("missing 'sgmm-meta v1' prefix"))?;
        let (mut g, mut t, mut r, mut cov, mut norm) = (None, None, None, None, None);
        for field in rest.split_whitespace() {
            match field.split_once('=') {
                Some(("G", v)) => g = v.parse().ok(),
                Some(("t", v)) => t = v.parse().ok(),
                Some(("r", v)) => r = v.parse().ok(),
                Some(("cov", v)) => cov = v.parse().ok(),
                Some(("norm", v)) => norm = Some(v.to_string()),
                _ => return Err(err(&format!("unknown field '{field}'"))),
            }
        }
        if norm.as_deref() != Some(NORM_RULE) {
            return Err(err("unknown normalization rule"));
        }
        Ok(Self {
            n_components: g.ok_or_else(|| err("G"))?,
            frames_per_segment: t.ok_or_else(|| err("t"))?,
            relevance: r.ok_or_else(|| err("r"))?,
            append_covariances: cov.ok_or_else(|| err("cov"))?,
        })
    }
}

/// Normalized temporal mean tensor of shape `M x G x T`, row-major
/// (`T` varies fastest). With covariances appended the middle axis is `2G`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgmmTensor {
    data: Vec<f64>,
    dims: (usize, usize, usize),
    pub meta: SgmmMeta,
}

impl SgmmTensor {
    pub fn new(data: Vec<f64>, dims: (usize, usize, usize), meta: SgmmMeta) -> Result<Self> {
        let (m, g, t) = dims;
        if m == 0 || g == 0 || t == 0 || data.len() != m * g * t {
            return Err(Error::Shape(format!(
                "{} values for a {m}x{g}x{t} tensor",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("SGMM entries must lie in [0, 1]".into()));
        }
        Ok(Self { data, dims, meta })
    }

    /// `(M, G, T)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, m: usize, g: usize, t: usize) -> f64 {
        let (_, gs, ts) = self.dims;
        self.data[(m * gs + g) * ts + t]
    }

    /// The `M x G` matrix of segment `t`, row-major.
    pub fn slice_t(&self, t: usize) -> Vec<f64> {
        let (ms, gs, _) = self.dims;
        (0..ms)
            .flat_map(|m| (0..gs).map(move |g| (m, g)))
            .map(|(m, g)| self.get(m, g, t))
            .collect()
    }

    /// Flattened values, used as a fixed-length vector by linear baselines.
    pub fn to_vector(&self) -> Vec<f64> {
        self.data.clone()
    }
}

fn transpose(values: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..cols)
        .flat_map(|c| (0..rows).map(move |r| values[r * cols + c]))
        .collect()
}

/// Builds the tensor from pre-segmented frames. Segment order maps to the T axis.
pub fn extract_sgmm_segments(ubm: &DiagGmm, segmented: &SegmentedMfcc, cfg: &SgmmConfig) -> Result<SgmmTensor> {
    if !(cfg.relevance >= 0.0) {
        return Err(Error::InvalidArgument(format!("relevance factor {} < 0", cfg.relevance)));
    }
    let (m, k) = (ubm.dim(), ubm.n_components());
    let t_len = segmented.n_segments();
    if t_len == 0 {
        return Err(Error::TooShort("no segments".into()));
    }
    let width = if cfg.append_covariances { 2 * k } else { k };
    let mut data = vec![0.0; m * width * t_len];
    for (t, seg) in segmented.segments.iter().enumerate() {
        let stats = map_statistics(ubm, seg)?;
        let means = adapted_means(ubm, &stats, cfg.relevance);
        let mut blocks = vec![minmax_normalize(&transpose(&means, k, m), m, k)?];
        if cfg.append_covariances {
            let vars = adapted_variances(ubm, &stats, cfg.relevance, &means);
            blocks.push(minmax_normalize(&transpose(&vars, k, m), m, k)?);
        }
        for (b, block) in blocks.iter().enumerate() {
            for row in 0..m {
                for g in 0..k {
                    data[(row * width + b * k + g) * t_len + t] = block[row * k + g];
                }
            }
        }
    }
    SgmmTensor::new(
        data,
        (m, width, t_len),
        SgmmMeta {
            n_components: k,
            frames_per_segment: segmented.frames_per_segment,
            relevance: cfg.relevance,
            append_covariances: cfg.append_covariances,
        },
    )
}

/// Segments the MFCC frames, MAP-adapts the UBM means per segment, transposes
/// each to `M x G`, min-max normalizes each row and stacks segments along T.
pub fn extract_sgmm(ubm: &DiagGmm, mfcc: &MfccMatrix, cfg: &SgmmConfig) -> Result<SgmmTensor> {
    if mfcc.n_ceps() != ubm.dim() {
        return Err(Error::Shape(format!(
            "{} cepstra against a dimension {} UBM",
            mfcc.n_ceps(),
            ubm.dim()
        )));
    }
    let segmented = segment_frames(mfcc, cfg.frames_per_segment)?;
    extract_sgmm_segments(ubm, &segmented, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{FrameConfig, MelConfig};
    use crate::gmm::Frames;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gmm(k: usize, d: usize, seed: u64) -> DiagGmm {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DiagGmm::new(
            vec![1.0 / k as f64; k],
            (0..k * d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            (0..k * d).map(|_| rng.gen_range(0.5..2.0)).collect(),
            d,
        )
        .unwrap()
    }

    fn mfcc_from(frames: &[f64], m: usize) -> MfccMatrix {
        let n = frames.len() / m;
        let rows: Vec<f64> = (0..m).flat_map(|i| (0..n).map(move |j| frames[j * m + i])).collect();
        MfccMatrix::from_rows(rows, m, n, FrameConfig::default(), MelConfig::full_band(16000)).unwrap()
    }

    fn random_mfcc(m: usize, n: usize, seed: u64) -> MfccMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        mfcc_from(&frames, m)
    }

    #[test]
    fn shape_contract() {
        let ubm = random_gmm(8, 12, 1);
        let t = extract_sgmm(&ubm, &random_mfcc(12, 40, 2), &SgmmConfig::default()).unwrap();
        assert_eq!(t.dims(), (12, 8, 4));
        assert!(t.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identical_halves_identical_slices() {
        let ubm = random_gmm(4, 3, 3);
        let half = random_mfcc(3, 10, 4).frames_major();
        let mfcc = mfcc_from(&[half.clone(), half].concat(), 3);
        let t = extract_sgmm(&ubm, &mfcc, &SgmmConfig::default()).unwrap();
        assert_eq!(t.dims().2, 2);
        assert_eq!(t.slice_t(0), t.slice_t(1));
    }

    #[test]
    fn prior_limit_is_normalized_ubm() {
        let ubm = random_gmm(5, 4, 5);
        let cfg = SgmmConfig {
            relevance: 1e15,
            ..SgmmConfig::default()
        };
        let t = extract_sgmm(&ubm, &random_mfcc(4, 30, 6), &cfg).unwrap();
        let expected = minmax_normalize(&transpose(ubm.means(), 5, 4), 4, 5).unwrap();
        for s in 0..3 {
            for (a, b) in t.slice_t(s).iter().zip(&expected) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn segment_permutation_permutes_t_axis() {
        let ubm = random_gmm(4, 3, 7);
        let seg = segment_frames(&random_mfcc(3, 50, 8), 10).unwrap();
        let base = extract_sgmm_segments(&ubm, &seg, &SgmmConfig::default()).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let shuffled = SegmentedMfcc {
            segments: perm.iter().map(|&i| seg.segments[i].clone()).collect(),
            frames_per_segment: 10,
        };
        let out = extract_sgmm_segments(&ubm, &shuffled, &SgmmConfig::default()).unwrap();
        for (new_t, &old_t) in perm.iter().enumerate() {
            assert_eq!(out.slice_t(new_t), base.slice_t(old_t));
        }
    }

    #[test]
    fn covariance_append_doubles_width() {
        let ubm = random_gmm(4, 3, 9);
        let cfg = SgmmConfig {
            append_covariances: true,
            ..SgmmConfig::default()
        };
        let t = extract_sgmm(&ubm, &random_mfcc(3, 20, 10), &cfg).unwrap();
        assert_eq!(t.dims(), (3, 8, 2));
        let means_only = extract_sgmm(&ubm, &random_mfcc(3, 20, 10), &SgmmConfig::default()).unwrap();
        for m in 0..3 {
            for g in 0..4 {
                assert_eq!(t.get(m, g, 1), means_only.get(m, g, 1));
            }
        }
    }

    #[test]
    fn meta_line_round_trips() {
        let meta = SgmmMeta {
            n_components: 8,
            frames_per_segment: 10,
            relevance: 16.0,
            append_covariances: false,
        };
        let line = meta.to_string();
        assert_eq!(line, "sgmm-meta v1 G=8 t=10 r=16 norm=minmax-row-per-segment cov=false");
        assert_eq!(SgmmMeta::parse(&line).unwrap(), meta);
        assert!(SgmmMeta::parse("sgmm-meta v1 G=8").is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let ubm = random_gmm(2, 5, 0);
        assert!(extract_sgmm(&ubm, &random_mfcc(4, 20, 0), &SgmmConfig::default()).is_err());
        let _ = Frames::new(vec![0.0; 4], 2).unwrap();
    }
}
