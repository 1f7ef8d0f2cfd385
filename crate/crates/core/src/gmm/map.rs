use super::{DiagGmm, Frames};
use crate::dsp::MfccMatrix;
use crate::error::{Error, Result};

/// Zeroth, first and second order occupancy statistics of a segment under a UBM.
#[derive(Debug, Clone, PartialEq)]
pub struct MapStats {
    /// `n_g = sum_t gamma_g(t)`, length G.
    pub occupancy: Vec<f64>,
    /// `sum_t gamma_g(t) x_t`, `G x M`.
    pub first: Vec<f64>,
    /// `sum_t gamma_g(t) x_t^2`, `G x M`.
    pub second: Vec<f64>,
}

impl MapStats {
    /// Adaptation coefficient `n_g / (n_g + r)`, taken as 0 when `n_g = 0`.
    pub fn alpha(&self, g: usize, relevance: f64) -> f64 {
        let n = self.occupancy[g];
        if n > 0.0 {
            n / (n + relevance)
        } else {
            0.0
        }
    }
}

pub fn map_statistics(ubm: &DiagGmm, segment: &Frames) -> Result<MapStats> {
    if segment.dim() != ubm.dim() {
        return Err(Error::Shape(format!(
            "segment dimension {} does not match UBM dimension {}",
            segment.dim(),
            ubm.dim()
        )));
    }
    if segment.is_empty() {
        return Err(Error::InvalidArgument("empty segment".into()));
    }
    let (k, d) = (ubm.n_components(), ubm.dim());
    let scorer = ubm.scorer();
    let mut gamma = vec![0.0; k];
    let mut stats = MapStats {
        occupancy: vec![0.0; k],
        first: vec![0.0; k * d],
        second: vec![0.0; k * d],
    };
    for x in segment.rows() {
        scorer.responsibilities(x, &mut gamma);
        for g in 0..k {
            stats.occupancy[g] += gamma[g];
            for j in 0..d {
                stats.first[g * d + j] += gamma[g] * x[j];
                stats.second[g * d + j] += gamma[g] * x[j] * x[j];
            }
        }
    }
    Ok(stats)
}

/// MAP-adapted component means (`G x M`): `alpha_g E_g + (1 - alpha_g) mu_g`
/// with `alpha_g = n_g / (n_g + r)`. Weights and variances are not adapted.
pub fn map_adapt_means(ubm: &DiagGmm, segment: &Frames, relevance: f64) -> Result<Vec<f64>> {
    if !(relevance >= 0.0) {
        return Err(Error::InvalidArgument(format!("relevance factor {relevance} < 0")));
    }
    let stats = map_statistics(ubm, segment)?;
    Ok(adapted_means(ubm, &stats, relevance))
}

pub(crate) fn adapted_means(ubm: &DiagGmm, stats: &MapStats, relevance: f64) -> Vec<f64> {
    let d = ubm.dim();
    let mut out = ubm.means().to_vec();
    for g in 0..ubm.n_components() {
        let alpha = stats.alpha(g, relevance);
        if alpha == 0.0 {
            continue;
        }
        let n = stats.occupancy[g];
        for j in 0..d {
            let data_mean = stats.first[g * d + j] / n;
            out[g * d + j] = alpha * data_mean + (1.0 - alpha) * ubm.means()[g * d + j];
        }
    }
    out
}

/// MAP-adapted diagonal variances (`G x M`), from the same statistics:
/// `alpha E_g[x^2] + (1 - alpha)(var_g + mu_g^2) - mu_hat_g^2`.
pub(crate) fn adapted_variances(ubm: &DiagGmm, stats: &MapStats, relevance: f64, means: &[f64]) -> Vec<f64> {
    let d = ubm.dim();
    let mut out = ubm.variances().to_vec();
    for g in 0..ubm.n_components() {
        let alpha = stats.alpha(g, relevance);
        if alpha == 0.0 {
            continue;
        }
        let n = stats.occupancy[g];
        for j in 0..d {
            let i = g * d + j;
            let prior = ubm.variances()[i] + ubm.means()[i] * ubm.means()[i];
            let v = alpha * stats.second[i] / n + (1.0 - alpha) * prior - means[i] * means[i];
            out[i] = v.max(1e-12);
        }
    }
    out
}

/// Consecutive non-overlapping windows of `t` frames; a trailing partial window is dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedMfcc {
    /// Each segment holds `t` frames of dimension M.
    pub segments: Vec<Frames>,
    pub frames_per_segment: usize,
}

impl SegmentedMfcc {
    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }
}

pub fn segment_frames(mfcc: &MfccMatrix, t: usize) -> Result<SegmentedMfcc> {
    if t == 0 {
        return Err(Error::InvalidArgument("segment length must be positive".into()));
    }
    if mfcc.n_frames() < t {
        return Err(Error::TooShort(format!(
            "{} frames cannot fill a {t}-frame segment",
            mfcc.n_frames()
        )));
    }
    let all = Frames::from(mfcc);
    let m = mfcc.n_ceps();
    let segments = (0..mfcc.n_frames() / t)
        .map(|s| Frames::new(all.as_slice()[s * t * m..(s + 1) * t * m].to_vec(), m))
        .collect::<Result<_>>()?;
    Ok(SegmentedMfcc {
        segments,
        frames_per_segment: t,
    })
}

/// Rescales each row of a row-major `rows x cols` matrix to [0, 1]. Constant rows become 0.
pub fn minmax_normalize(values: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if rows == 0 || cols == 0 || values.len() != rows * cols {
        return Err(Error::Shape(format!(
            "{} values for a {rows}x{cols} matrix",
            values.len()
        )));
    }
    Ok(values
        .chunks_exact(cols)
        .flat_map(|row| {
            let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            row.iter()
                .map(move |v| if span > 0.0 { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{FrameConfig, MelConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gmm(k: usize, d: usize, seed: u64) -> DiagGmm {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        DiagGmm::new(
            w,
            (0..k * d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            (0..k * d).map(|_| rng.gen_range(0.5..2.0)).collect(),
            d,
        )
        .unwrap()
    }

    fn random_frames(n: usize, d: usize, seed: u64) -> Frames {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frames::new((0..n * d).map(|_| rng.gen_range(-3.0..3.0)).collect(), d).unwrap()
    }

    #[test]
    fn huge_relevance_keeps_ubm_means() {
        let ubm = random_gmm(4, 3, 1);
        let seg = random_frames(10, 3, 2);
        let adapted = map_adapt_means(&ubm, &seg, 1e12).unwrap();
        for (a, b) in adapted.iter().zip(ubm.means()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_relevance_gives_posterior_means() {
        let ubm = random_gmm(4, 3, 3);
        let seg = random_frames(10, 3, 4);
        let adapted = map_adapt_means(&ubm, &seg, 0.0).unwrap();
        let stats = map_statistics(&ubm, &seg).unwrap();
        for g in 0..4 {
            if stats.occupancy[g] > 0.0 {
                for j in 0..3 {
                    assert_eq!(adapted[g * 3 + j], stats.first[g * 3 + j] / stats.occupancy[g]);
                }
            }
        }
    }

    #[test]
    fn single_component_closed_form() {
        let ubm = DiagGmm::new(vec![1.0], vec![0.3, -1.2], vec![1.0, 2.0], 2).unwrap();
        let seg = random_frames(7, 2, 5);
        for r in [0.0, 0.5, 16.0, 300.0] {
            let adapted = map_adapt_means(&ubm, &seg, r).unwrap();
            for j in 0..2 {
                let mean: f64 = seg.rows().map(|x| x[j]).sum::<f64>() / 7.0;
                let expected = (7.0 * mean + r * ubm.means()[j]) / (7.0 + r);
                assert!((adapted[j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn negative_relevance_rejected() {
        let ubm = random_gmm(2, 2, 0);
        assert!(map_adapt_means(&ubm, &random_frames(3, 2, 0), -1.0).is_err());
        assert!(map_adapt_means(&ubm, &random_frames(3, 3, 0), 1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn adapted_means_are_convex_combinations(seed in 0u64..10_000, r in 0.0f64..100.0) {
            let ubm = random_gmm(3, 2, seed);
            let seg = random_frames(6, 2, seed + 1);
            let adapted = map_adapt_means(&ubm, &seg, r).unwrap();
            let stats = map_statistics(&ubm, &seg).unwrap();
            for g in 0..3 {
                if stats.occupancy[g] == 0.0 { continue; }
                for j in 0..2 {
                    let e = stats.first[g * 2 + j] / stats.occupancy[g];
                    let mu = ubm.means()[g * 2 + j];
                    let (lo, hi) = (e.min(mu), e.max(mu));
                    let a = adapted[g * 2 + j];
                    prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
                }
            }
        }
    }

    fn mfcc_with_frames(n: usize, m: usize) -> MfccMatrix {
        let values: Vec<f64> = (0..m * n).map(|i| i as f64).collect();
        MfccMatrix::from_rows(values, m, n, FrameConfig::default(), MelConfig::full_band(16000)).unwrap()
    }

    #[test]
    fn segmentation_drops_remainder() {
        let mfcc = mfcc_with_frames(10, 2);
        let seg = segment_frames(&mfcc, 3).unwrap();
        assert_eq!(seg.n_segments(), 3);
        let joined: Vec<f64> = seg.segments.iter().flat_map(|s| s.as_slice().to_vec()).collect();
        assert_eq!(joined, mfcc.frames_major()[..9 * 2].to_vec());
        let whole = segment_frames(&mfcc, 10).unwrap();
        assert_eq!(whole.n_segments(), 1);
        assert_eq!(whole.segments[0].as_slice(), mfcc.frames_major().as_slice());
        assert!(matches!(segment_frames(&mfcc, 11), Err(Error::TooShort(_))));
    }

    #[test]
    fn minmax_rules() {
        assert_eq!(minmax_normalize(&[2.0, 4.0, 6.0], 1, 3).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[5.0, 5.0, 5.0], 1, 3).unwrap(), vec![0.0; 3]);
        let out = minmax_normalize(&[3.0, -1.0, 8.0, 0.1, 0.2, 0.15], 2, 3).unwrap();
        for row in out.chunks(3) {
            assert_eq!(row.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
            assert_eq!(row.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
        }
        assert!(minmax_normalize(&[1.0], 2, 1).is_err());
    }
}
