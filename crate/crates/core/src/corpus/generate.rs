use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use super::{
    apply_channel, synth_source, write_wav, AudioClip, CorpusManifest, DeviceProfile,
    ManifestEntry, Split, DEFAULT_EQ_DB,
};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub n_devices: usize,
    pub clips_per_device: usize,
    pub train_fraction: f64,
    pub sample_rate: u32,
    pub seed: u64,
    pub duration_s: f64,
    pub noise_level: f64,
    /// Each device's noise floor is `noise_level * noise_spread^u`, u uniform in [-1, 1].
    pub noise_spread: f64,
    /// Depth range of each device's peaking EQ sections, in dB.
    pub eq_db: [f64; 2],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_devices: 5,
            clips_per_device: 40,
            train_fraction: 0.75,
            sample_rate: 16000,
            seed: 1,
            duration_s: 3.0,
            noise_level: 0.01,
            noise_spread: 8.0,
            eq_db: DEFAULT_EQ_DB,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_devices < 2 {
            return Err(Error::Config("corpus needs at least 2 devices".into()));
        }
        if self.clips_per_device < 2 {
            return Err(Error::Config("corpus needs at least 2 clips per device".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train fraction must lie in (0, 1)".into()));
        }
        if self.sample_rate == 0 || !(self.duration_s > 0.0) {
            return Err(Error::Config("sample rate and duration must be positive".into()));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::Config("noise level must be non-negative".into()));
        }
        if !(self.noise_spread >= 1.0) || !self.noise_spread.is_finite() {
            return Err(Error::Config("noise spread must be at least 1".into()));
        }
        Ok(())
    }

    /// Train clips per device; at least one clip lands in each split.
    pub fn train_per_device(&self) -> usize {
        let n = (self.clips_per_device as f64 * self.train_fraction).round() as usize;
        n.clamp(1, self.clips_per_device - 1)
    }

    pub fn device_id(index: usize) -> String {
        format!("dev{index:02}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    /// File stem, unique within the corpus.
    pub name: String,
    /// Class index: position of the device in [`Corpus::device_ids`].
    pub label: usize,
    pub split: Split,
    pub clip: AudioClip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub device_ids: Vec<String>,
    pub sample_rate: u32,
    pub clips: Vec<LabeledClip>,
}

impl Corpus {
    pub fn n_classes(&self) -> usize {
        self.device_ids.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledClip> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    /// Loads every clip listed in a manifest, resolving paths against `base_dir`.
    pub fn from_manifest(manifest: &CorpusManifest, base_dir: &Path) -> Result<Self> {
        let device_ids = manifest.device_ids();
        let clips = manifest
            .entries
            .par_iter()
            .map(|e| {
                let clip = manifest.load_clip(base_dir, e)?;
                let label = device_ids
                    .iter()
                    .position(|d| *d == e.device_id)
                    .expect("device ids come from the same manifest");
                let name = Path::new(&e.path)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| e.path.clone());
                Ok(LabeledClip {
                    name,
                    label,
                    split: e.split,
                    clip,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            device_ids,
            sample_rate: manifest.sample_rate,
            clips,
        })
    }
}

/// Device channels for a config, one per device index.
pub fn device_profiles(cfg: &CorpusConfig) -> Result<Vec<DeviceProfile>> {
    (0..cfg.n_devices)
        .map(|d| {
            let u: f64 = seed::rng_for(cfg.seed, &[seed::TAG_DEVICE, d as u64, seed::TAG_NOISE])
                .gen_range(-1.0..=1.0);
            DeviceProfile::random_with_eq(
                CorpusConfig::device_id(d),
                cfg.sample_rate,
                cfg.noise_level * cfg.noise_spread.powf(u),
                cfg.eq_db,
                seed::derive_seed(cfg.seed, &[seed::TAG_DEVICE, d as u64]),
            )
        })
        .collect()
}

/// Synthesises the corpus in memory. Each clip draws a fresh source, so
/// content carries no information about the device label.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let profiles = device_profiles(cfg)?;
    let n_train = cfg.train_per_device();
    let jobs: Vec<(usize, usize)> = (0..cfg.n_devices)
        .flat_map(|d| (0..cfg.clips_per_device).map(move |c| (d, c)))
        .collect();
    let clips = jobs
        .par_iter()
        .map(|&(d, c)| {
            let key = [d as u64, c as u64];
            let source = synth_source(
                cfg.duration_s,
                cfg.sample_rate,
                seed::derive_seed(cfg.seed, &[seed::TAG_SOURCE, key[0], key[1]]),
            )?;
            let gain = seed::rng_for(cfg.seed, &[seed::TAG_GAIN, key[0], key[1]]).gen_range(0.4..1.0);
            let recorded = apply_channel(
                &source.scaled(gain)?,
                &profiles[d],
                seed::derive_seed(cfg.seed, &[seed::TAG_NOISE, key[0], key[1]]),
            )?;
            Ok(LabeledClip {
                name: format!("{}_c{c:03}", profiles[d].device_id),
                label: d,
                split: if c < n_train { Split::Train } else { Split::Test },
                clip: recorded,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        device_ids: profiles.into_iter().map(|p| p.device_id).collect(),
        sample_rate: cfg.sample_rate,
        clips,
    })
}

/// Synthesises the corpus and writes `clips/*.wav` plus the manifest under `out_dir`.
pub fn synth_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<CorpusManifest> {
    let corpus = generate_corpus(cfg)?;
    let clip_dir = out_dir.join("clips");
    std::fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
    corpus
        .clips
        .par_iter()
        .try_for_each(|c| write_wav(clip_dir.join(format!("{}.wav", c.name)), &c.clip))?;
    let manifest = CorpusManifest {
        entries: corpus
            .clips
            .iter()
            .map(|c| ManifestEntry {
                path: format!("clips/{}.wav", c.name),
                device_id: corpus.device_ids[c.label].clone(),
                split: c.split,
            })
            .collect(),
        sample_rate: cfg.sample_rate,
        seed: cfg.seed,
    };
    manifest.validate()?;
    manifest.write(out_dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            n_devices: 2,
            clips_per_device: 2,
            train_fraction: 0.5,
            duration_s: 0.25,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn counts_per_split() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_corpus(&small(), dir.path()).unwrap();
        assert_eq!(m.entries.len(), 4);
        for (_, (train, test)) in m.split_counts() {
            assert_eq!((train, test), (1, 1));
        }
        assert_eq!(CorpusConfig::default().train_per_device(), 30);
    }

    #[test]
    fn deterministic_bytes_and_manifest() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = synth_corpus(&small(), a.path()).unwrap();
        let mb = synth_corpus(&small(), b.path()).unwrap();
        assert_eq!(ma, mb);
        for e in &ma.entries {
            let x = std::fs::read(a.path().join(&e.path)).unwrap();
            let y = std::fs::read(b.path().join(&e.path)).unwrap();
            assert_eq!(x, y, "{}", e.path);
        }
    }

    #[test]
    fn manifest_paths_load_at_declared_rate() {
        let dir = tempfile::tempdir().unwrap();
        synth_corpus(&small(), dir.path()).unwrap();
        let m = CorpusManifest::read(&dir.path().join(super::super::MANIFEST_FILE)).unwrap();
        let corpus = Corpus::from_manifest(&m, dir.path()).unwrap();
        assert_eq!(corpus.clips.len(), 4);
        assert!(corpus.clips.iter().all(|c| c.clip.sample_rate() == m.sample_rate));
        assert_eq!(corpus.clips[0].clip.len(), 4000);
    }

    #[test]
    fn parallel_matches_sequential() {
        let cfg = small();
        let par = generate_corpus(&cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let seq = pool.install(|| generate_corpus(&cfg)).unwrap();
        assert_eq!(par, seq);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small();
        c.n_devices = 1;
        assert!(generate_corpus(&c).is_err());
        let mut c = small();
        c.train_fraction = 1.0;
        assert!(generate_corpus(&c).is_err());
        let mut c = small();
        c.noise_spread = 0.5;
        assert!(generate_corpus(&c).is_err());
        let mut c = small();
        c.eq_db = [6.0, 2.0];
        assert!(generate_corpus(&c).is_err());
    }

    #[test]
    fn device_noise_floors_stay_within_spread() {
        let cfg = CorpusConfig::default();
        let levels: Vec<f64> = device_profiles(&cfg).unwrap().iter().map(|p| p.noise_level).collect();
        for l in &levels {
            assert!(*l >= cfg.noise_level / cfg.noise_spread && *l <= cfg.noise_level * cfg.noise_spread);
        }
        assert!(levels.windows(2).any(|w| w[0] != w[1]));
        let flat = CorpusConfig { noise_spread: 1.0, ..cfg.clone() };
        assert!(device_profiles(&flat).unwrap().iter().all(|p| p.noise_level == cfg.noise_level));
    }
}
