use std::fmt::Write;

use rand::seq::index::sample;
use rayon::prelude::*;

use super::baseline::{LogisticConfig, LogisticRegression};
use super::{evaluate, train, ArchitectureConfig, C3dBiLstm, History, Metrics, TrainConfig};
use crate::corpus::{Corpus, Split};
use crate::dsp::{FrameConfig, MelConfig, MfccExtractor, MfccMatrix};
use crate::error::{Error, Result};
use crate::gmm::{em_fit, extract_sgmm, DiagGmm, EmConfig, EmFit, Frames, SgmmConfig, SgmmTensor};
use crate::seed;

/// Everything downstream of the audio: front-end, UBM, SGMM, network, baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub frame: FrameConfig,
    pub mel: MelConfig,
    pub em: EmConfig,
    pub sgmm: SgmmConfig,
    pub hidden: usize,
    pub attention: bool,
    pub train: TrainConfig,
    pub baseline: LogisticConfig,
}

impl ExperimentConfig {
    /// Desk-scale settings: G=8, t=10, H=64.
    pub fn toy(sample_rate: u32) -> Self {
        Self {
            frame: FrameConfig::default(),
            mel: MelConfig::full_band(sample_rate),
            em: EmConfig {
                n_components: 8,
                ..EmConfig::default()
            },
            sgmm: SgmmConfig::default(),
            hidden: 64,
            attention: true,
            train: TrainConfig::default(),
            baseline: LogisticConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub c3d: Metrics,
    pub baseline: Metrics,
    pub history: History,
    pub ubm: EmFit,
    /// SGMM tensors of the clips that took part, in corpus order.
    pub sgmm: Vec<SgmmTensor>,
    /// Corpus indices of the clips that took part.
    pub clip_indices: Vec<usize>,
}

/// MFCCs of the selected clips, extracted in parallel with one extractor per worker.
pub fn extract_corpus_mfcc(corpus: &Corpus, indices: &[usize], frame: &FrameConfig, mel: &MelConfig) -> Result<Vec<MfccMatrix>> {
    MfccExtractor::new(*frame, *mel, corpus.sample_rate)?;
    indices
        .par_iter()
        .map_init(
            || MfccExtractor::new(*frame, *mel, corpus.sample_rate).expect("validated above"),
            |ex, &i| ex.extract(&corpus.clips[i].clip),
        )
        .collect()
}

/// Pools frames of the given matrices in order.
pub fn pool_frames<'a>(mfccs: impl IntoIterator<Item = &'a MfccMatrix>) -> Result<Frames> {
    let mut it = mfccs.into_iter();
    let first = it.next().ok_or_else(|| Error::Data("no feature matrices to pool".into()))?;
    let mut frames = Frames::from(first);
    for m in it {
        frames.extend(&Frames::from(m))?;
    }
    Ok(frames)
}

pub fn sgmm_features(ubm: &DiagGmm, mfccs: &[MfccMatrix], cfg: &SgmmConfig) -> Result<Vec<SgmmTensor>> {
    mfccs.par_iter().map(|m| extract_sgmm(ubm, m, cfg)).collect()
}

fn run_selected(corpus: &Corpus, indices: &[usize], cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let k = corpus.n_classes();
    let mfccs = extract_corpus_mfcc(corpus, indices, &cfg.frame, &cfg.mel)?;
    let is_train: Vec<bool> = indices.iter().map(|&i| corpus.clips[i].split == Split::Train).collect();
    let labels: Vec<usize> = indices.iter().map(|&i| corpus.clips[i].label).collect();

    let ubm = em_fit(
        &pool_frames(mfccs.iter().zip(&is_train).filter(|(_, &t)| t).map(|(m, _)| m))?,
        &cfg.em,
    )?;
    let sgmm = sgmm_features(&ubm.gmm, &mfccs, &cfg.sgmm)?;

    let pick = |train: bool| -> Vec<(SgmmTensor, usize)> {
        sgmm.iter()
            .zip(&labels)
            .zip(&is_train)
            .filter(|(_, &t)| t == train)
            .map(|((s, &l), _)| (s.clone(), l))
            .collect()
    };
    let (train_set, test_set) = (pick(true), pick(false));
    if test_set.is_empty() {
        return Err(Error::Data("no test clips".into()));
    }
    let (m, g, t) = train_set
        .first()
        .map(|(s, _)| s.dims())
        .ok_or_else(|| Error::Data("no training clips".into()))?;
    let mut arch = ArchitectureConfig::toy(m, g, t, k);
    arch.hidden = cfg.hidden;
    arch.attention = cfg.attention;
    let mut model = C3dBiLstm::new(&arch, cfg.train.seed)?;
    let history = train(&mut model, &train_set, &cfg.train)?;
    let c3d = evaluate(&mut model, &test_set)?;

    let means: Vec<Vec<f64>> = mfccs.iter().map(MfccMatrix::mean_vector).collect();
    let split_means = |train: bool| -> (Vec<Vec<f64>>, Vec<usize>) {
        means
            .iter()
            .zip(&labels)
            .zip(&is_train)
            .filter(|(_, &t)| t == train)
            .map(|((f, &l), _)| (f.clone(), l))
            .unzip()
    };
    let (bx, by) = split_means(true);
    let (tx, ty) = split_means(false);
    let baseline = LogisticRegression::fit(&bx, &by, &cfg.baseline)?.evaluate(&tx, &ty)?;

    Ok(ExperimentOutcome {
        c3d,
        baseline,
        history,
        ubm,
        sgmm,
        clip_indices: indices.to_vec(),
    })
}

/// Full pipeline on the corpus's own train/test split.
pub fn run_experiment(corpus: &Corpus, cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let all: Vec<usize> = (0..corpus.clips.len()).collect();
    run_selected(corpus, &all, cfg)
}

/// Corpus indices kept when each device's train split is cut to `n_per_class`
/// clips by a seeded draw; kept clips stay in corpus order and every test clip is kept.
pub fn small_sample_indices(corpus: &Corpus, n_per_class: usize, seed_value: u64) -> Result<Vec<usize>> {
    if n_per_class == 0 {
        return Err(Error::Data("need at least one training clip per class".into()));
    }
    let mut keep = vec![false; corpus.clips.len()];
    for label in 0..corpus.n_classes() {
        let train: Vec<usize> = (0..corpus.clips.len())
            .filter(|&i| corpus.clips[i].label == label && corpus.clips[i].split == Split::Train)
            .collect();
        let total = corpus.clips.iter().filter(|c| c.label == label).count();
        if train.len() < n_per_class || total < n_per_class + 1 {
            return Err(Error::Data(format!(
                "device {} has {} training clips, {n_per_class} requested",
                corpus.device_ids[label],
                train.len()
            )));
        }
        let mut rng = seed::rng_for(seed_value, &[seed::TAG_SUBSET, label as u64]);
        for j in sample(&mut rng, train.len(), n_per_class) {
            keep[train[j]] = true;
        }
    }
    for (k, c) in keep.iter_mut().zip(&corpus.clips) {
        *k |= c.split == Split::Test;
    }
    Ok((0..corpus.clips.len()).filter(|&i| keep[i]).collect())
}

/// Trains on `n_per_class` clips per device and evaluates on the full test split.
/// The UBM is refit on the reduced training pool.
pub fn small_sample_protocol(
    corpus: &Corpus,
    n_per_class: usize,
    cfg: &ExperimentConfig,
    seed_value: u64,
) -> Result<ExperimentOutcome> {
    let indices = small_sample_indices(corpus, n_per_class, seed_value)?;
    run_selected(corpus, &indices, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub frame: FrameConfig,
    pub mel: MelConfig,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Frame length, frame shift, band and accuracy columns.
    pub fn format(&self) -> String {
        let mut s = String::from("frame length (ms) | frame shift (ms) | band (Hz)       | M  | accuracy (%)\n");
        for r in &self.rows {
            let band = format!("{:.0}-{:.0}", r.mel.f_low, r.mel.f_high);
            let _ = writeln!(
                s,
                "{:>17} | {:>16} | {:<15} | {:<2} | {:.2}",
                r.frame.frame_len_ms,
                r.frame.frame_shift_ms,
                band,
                r.mel.n_ceps,
                100.0 * r.accuracy
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame_len_ms,frame_shift_ms,f_low,f_high,n_filters,n_ceps,accuracy\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.frame.frame_len_ms, r.frame.frame_shift_ms, r.mel.f_low, r.mel.f_high, r.mel.n_filters, r.mel.n_ceps, r.accuracy
            );
        }
        s
    }
}

/// Baseline accuracy on per-clip MFCC means for each front-end setting.
pub fn ablate_frontend(corpus: &Corpus, grid: &[(FrameConfig, MelConfig)], baseline: &LogisticConfig) -> Result<AblationTable> {
    if grid.is_empty() {
        return Err(Error::Config("empty ablation grid".into()));
    }
    let all: Vec<usize> = (0..corpus.clips.len()).collect();
    let mut rows = Vec::with_capacity(grid.len());
    for (frame, mel) in grid {
        let mfccs = extract_corpus_mfcc(corpus, &all, frame, mel)?;
        let (mut tr, mut te) = ((Vec::new(), Vec::new()), (Vec::new(), Vec::new()));
        for (m, c) in mfccs.iter().zip(&corpus.clips) {
            let target = if c.split == Split::Train { &mut tr } else { &mut te };
            target.0.push(m.mean_vector());
            target.1.push(c.label);
        }
        let model = LogisticRegression::fit(&tr.0, &tr.1, baseline)?;
        rows.push(AblationRow {
            frame: *frame,
            mel: *mel,
            accuracy: model.evaluate(&te.0, &te.1)?.accuracy,
        });
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};

    fn tiny_corpus() -> Corpus {
        generate_corpus(&CorpusConfig {
            n_devices: 3,
            clips_per_device: 8,
            duration_s: 1.5,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn subset_keeps_order_and_tests() {
        let c = tiny_corpus();
        let idx = small_sample_indices(&c, 2, 7).unwrap();
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        let n_train = idx.iter().filter(|&&i| c.clips[i].split == Split::Train).count();
        assert_eq!(n_train, 6);
        let n_test = c.split(Split::Test).count();
        assert_eq!(idx.len(), 6 + n_test);
        assert_eq!(idx, small_sample_indices(&c, 2, 7).unwrap());
        let full = c.split(Split::Train).count() / 3;
        assert_eq!(small_sample_indices(&c, full, 3).unwrap(), (0..c.clips.len()).collect::<Vec<_>>());
        assert!(matches!(small_sample_indices(&c, full + 1, 3), Err(Error::Data(_))));
    }

    #[test]
    fn ablation_is_deterministic() {
        let c = tiny_corpus();
        let grid = [(FrameConfig::default(), MelConfig::full_band(16000))];
        let a = ablate_frontend(&c, &grid, &LogisticConfig::default()).unwrap();
        let b = ablate_frontend(&c, &grid, &LogisticConfig::default()).unwrap();
        assert_eq!(a.rows.len(), 1);
        assert_eq!(a, b);
        assert_eq!(a.format().lines().count(), 2);
        assert!(ablate_frontend(&c, &[], &LogisticConfig::default()).is_err());
    }

    #[test]
    fn tiny_experiment_runs() {
        let c = tiny_corpus();
        let mut cfg = ExperimentConfig::toy(16000);
        cfg.sgmm.frames_per_segment = 5;
        cfg.hidden = 8;
        cfg.train.epochs = 2;
        cfg.train.initial_lr = 0.01;
        let out = run_experiment(&c, &cfg).unwrap();
        assert_eq!(out.sgmm.len(), c.clips.len());
        assert_eq!(out.sgmm[0].dims().0, 12);
        assert_eq!(out.history.epochs.len(), 2);
        assert_eq!(out.c3d.total(), c.split(Split::Test).count());
    }
}
