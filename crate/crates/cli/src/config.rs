//! Flat `section.key = value` pipeline configuration.
//!
//! Every key has a default, unknown keys are rejected and [`PipelineConfig::to_text`]
//! emits the canonical form, which parses back to an equal config.

use std::fmt::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use sgmm_core::gmm::EmConfig;
use sgmm_core::model::{ExperimentConfig, LogisticConfig, TrainConfig};
use sgmm_core::{CorpusConfig, FrameConfig, MelConfig, SgmmConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub corpus: CorpusConfig,
    pub frame: FrameConfig,
    pub mel: MelConfig,
    pub em: EmConfig,
    pub sgmm: SgmmConfig,
    pub hidden: usize,
    pub attention: bool,
    pub train: TrainConfig,
    pub baseline: LogisticConfig,
    /// Frame length and shift pairs, in ms.
    pub ablate_frames: Vec<[f64; 2]>,
    /// Filterbank band edges, in Hz.
    pub ablate_bands: Vec<[f64; 2]>,
    pub small_per_class: usize,
    pub workdir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        Self {
            mel: MelConfig::full_band(corpus.sample_rate),
            corpus,
            frame: FrameConfig::default(),
            em: EmConfig::default(),
            sgmm: SgmmConfig::default(),
            hidden: 64,
            attention: true,
            train: TrainConfig::default(),
            baseline: LogisticConfig::default(),
            ablate_frames: vec![[128.0, 32.0], [256.0, 64.0], [512.0, 128.0]],
            ablate_bands: vec![[0.0, 8000.0], [300.0, 3400.0]],
            small_per_class: 5,
            workdir: PathBuf::from("work"),
        }
    }
}

trait Value: Sized {
    fn parse(raw: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(raw: &str) -> Option<Self> {
                raw.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(usize, u32, u64, f64, bool);

impl Value for PathBuf {
    fn parse(raw: &str) -> Option<Self> {
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl Value for [f64; 2] {
    fn parse(raw: &str) -> Option<Self> {
        let (a, b) = raw.split_once(':')?;
        Some([a.trim().parse().ok()?, b.trim().parse().ok()?])
    }
    fn render(&self) -> String {
        format!("{}:{}", self[0], self[1])
    }
}

impl Value for Vec<[f64; 2]> {
    fn parse(raw: &str) -> Option<Self> {
        let v: Option<Vec<_>> = raw.split(',').map(|p| <[f64; 2]>::parse(p.trim())).collect();
        v.filter(|v| !v.is_empty())
    }
    fn render(&self) -> String {
        self.iter().map(Value::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! fields {
    ($($key:literal => $($field:ident).+ ,)*) => {
        /// Every accepted key, in canonical order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl PipelineConfig {
            fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$($field).+.render()),)*
                    _ => None,
                }
            }

            fn set(&mut self, key: &str, raw: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$($field).+ = Value::parse(raw)
                            .with_context(|| format!("invalid value '{raw}' for {key}"))?;
                    })*
                    _ => bail!("unknown config key '{key}'"),
                }
                Ok(())
            }
        }
    };
}

fields! {
    "corpus.devices" => corpus.n_devices,
    "corpus.clips" => corpus.clips_per_device,
    "corpus.train_fraction" => corpus.train_fraction,
    "corpus.seed" => corpus.seed,
    "corpus.sample_rate" => corpus.sample_rate,
    "corpus.duration" => corpus.duration_s,
    "corpus.noise_level" => corpus.noise_level,
    "corpus.noise_spread" => corpus.noise_spread,
    "corpus.eq_db" => corpus.eq_db,
    "dsp.fl" => frame.frame_len_ms,
    "dsp.fs" => frame.frame_shift_ms,
    "dsp.band_low" => mel.f_low,
    "dsp.band_high" => mel.f_high,
    "dsp.m" => mel.n_ceps,
    "dsp.n_filters" => mel.n_filters,
    "dsp.c0" => mel.include_c0,
    "gmm.g" => em.n_components,
    "gmm.t" => sgmm.frames_per_segment,
    "gmm.r" => sgmm.relevance,
    "gmm.max_iters" => em.max_iters,
    "gmm.tol" => em.tol,
    "gmm.covariances" => sgmm.append_covariances,
    "arch.hidden" => hidden,
    "arch.attention" => attention,
    "train.lr" => train.initial_lr,
    "train.decay_every" => train.lr_decay_every,
    "train.decay_factor" => train.lr_decay_factor,
    "train.epochs" => train.epochs,
    "train.batch" => train.batch_size,
    "baseline.lr" => baseline.learning_rate,
    "baseline.l2" => baseline.l2,
    "baseline.iterations" => baseline.iterations,
    "ablate.frames" => ablate_frames,
    "ablate.bands" => ablate_bands,
    "small.per_class" => small_per_class,
    "paths.workdir" => workdir,
}

impl PipelineConfig {
    /// Parses config text over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected 'section.key = value'", i + 1))?;
            cfg.set(key.trim(), value.trim())
                .with_context(|| format!("line {}", i + 1))?;
        }
        cfg.sync_seeds();
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn to_text(&self) -> String {
        self.section_text("")
    }

    /// Canonical lines of every key under `prefix`.
    pub fn section_text(&self, prefix: &str) -> String {
        KEYS.iter().filter(|k| k.starts_with(prefix)).fold(String::new(), |mut s, k| {
            let _ = writeln!(s, "{k} = {}", self.get(k).unwrap_or_default());
            s
        })
    }

    /// The corpus seed drives EM initialisation and training too.
    pub fn set_seed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.sync_seeds();
    }

    fn sync_seeds(&mut self) {
        self.em.seed = self.corpus.seed;
        self.train.seed = self.corpus.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.frame.to_samples(self.corpus.sample_rate)?;
        self.mel.validate(self.corpus.sample_rate)?;
        self.train.validate()?;
        if self.em.n_components == 0 || self.sgmm.frames_per_segment == 0 {
            bail!("gmm.g and gmm.t must be positive");
        }
        if self.hidden == 0 {
            bail!("arch.hidden must be positive");
        }
        if self.small_per_class == 0 {
            bail!("small.per_class must be positive");
        }
        Ok(())
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            frame: self.frame,
            mel: self.mel,
            em: self.em.clone(),
            sgmm: self.sgmm,
            hidden: self.hidden,
            attention: self.attention,
            train: self.train.clone(),
            baseline: self.baseline.clone(),
        }
    }

    pub fn ablation_grid(&self) -> Vec<(FrameConfig, MelConfig)> {
        self.ablate_frames
            .iter()
            .flat_map(|&[len, shift]| {
                self.ablate_bands.iter().map(move |&[low, high]| {
                    (
                        FrameConfig { frame_len_ms: len, frame_shift_ms: shift },
                        MelConfig { f_low: low, f_high: high, ..self.mel },
                    )
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_describe_the_reference_corpus() {
        let c = PipelineConfig::default();
        assert_eq!((c.corpus.n_devices, c.corpus.clips_per_device), (5, 40));
        assert_eq!(c.corpus.train_per_device(), 30);
        assert_eq!(c.em.n_components, 64);
        c.validate().unwrap();
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut c = PipelineConfig::default();
        c.set_seed(9);
        c.train.initial_lr = 0.003;
        c.em.tol = 1e-8;
        c.ablate_frames = vec![[100.0, 25.5]];
        c.workdir = PathBuf::from("/tmp/x y");
        let text = c.to_text();
        assert_eq!(PipelineConfig::parse(&text).unwrap(), c);
        assert_eq!(text.lines().count(), KEYS.len());
        assert_eq!(PipelineConfig::parse(&text).unwrap().to_text(), text);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let e = PipelineConfig::parse("gmm.q = 3").unwrap_err();
        assert!(format!("{e:#}").contains("unknown config key 'gmm.q'"));
        assert!(PipelineConfig::parse("gmm.g = many").is_err());
        assert!(PipelineConfig::parse("gmm.g 8").is_err());
        assert!(PipelineConfig::parse("ablate.frames = ").is_err());
    }

    #[test]
    fn comments_blank_lines_and_overrides() {
        let c = PipelineConfig::parse("# grid\n\ncorpus.devices = 45  # paper scale\ncorpus.seed=4\n").unwrap();
        assert_eq!(c.corpus.n_devices, 45);
        assert_eq!((c.em.seed, c.train.seed), (4, 4));
        assert_eq!(c.section_text("corpus.").lines().count(), 9);
    }

    #[test]
    fn grid_is_frames_by_bands() {
        let c = PipelineConfig::default();
        let grid = c.ablation_grid();
        assert_eq!(grid.len(), 6);
        assert_eq!(grid[1].1.f_low, 300.0);
        assert_eq!(grid[1].0.frame_len_ms, 128.0);
    }
}
