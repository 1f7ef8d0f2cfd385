use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

const STAMP: &str = ".stamp";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Corpus,
    Mfcc,
    Ubm,
    Sgmm,
    Model,
    Eval,
    Ablate,
    SmallSample,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::Mfcc => "mfcc",
            Stage::Ubm => "ubm",
            Stage::Sgmm => "sgmm",
            Stage::Model => "model",
            Stage::Eval => "eval",
            Stage::Ablate => "ablate",
            Stage::SmallSample => "small-sample",
        }
    }
}

/// Incremental SHA-256 over length-prefixed parts.
#[derive(Default)]
pub struct Hasher(Sha256);

impl Hasher {
    pub fn part(&mut self, bytes: impl AsRef<[u8]>) -> &mut Self {
        let b = bytes.as_ref();
        self.0.update((b.len() as u64).to_le_bytes());
        self.0.update(b);
        self
    }

    pub fn file(&mut self, path: &Path) -> Result<&mut Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(self.part(bytes))
    }

    pub fn hex(&self) -> String {
        self.0.clone().finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub struct Workdir {
    root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    pub fn ensure(&self, stage: Stage) -> Result<PathBuf> {
        let d = self.dir(stage);
        fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }

    /// Key recorded by the last successful run of `stage`, if any.
    pub fn stamp(&self, stage: Stage) -> Option<String> {
        fs::read_to_string(self.dir(stage).join(STAMP)).ok().map(|s| s.trim().to_string())
    }

    /// True when `stage` last ran with `key` and all `outputs` still exist.
    pub fn is_fresh(&self, stage: Stage, key: &str, outputs: &[PathBuf]) -> bool {
        self.stamp(stage).as_deref() == Some(key) && outputs.iter().all(|p| p.exists())
    }

    pub fn mark(&self, stage: Stage, key: &str) -> Result<()> {
        let p = self.ensure(stage)?.join(STAMP);
        fs::write(&p, format!("{key}\n")).with_context(|| format!("writing {}", p.display()))
    }

    /// The stamp of a prerequisite stage, or an error telling the user which command to run.
    pub fn require(&self, stage: Stage, command: &str) -> Result<String> {
        self.stamp(stage).with_context(|| {
            format!(
                "missing {} outputs in {}; run `sgmm {command}` first",
                stage.name(),
                self.dir(stage).display()
            )
        })
    }
}

/// Output file for a clip: its manifest path with separators flattened and
/// the extension replaced.
pub fn feature_name(clip_path: &str, ext: &str) -> String {
    let stem = clip_path.rsplit_once('.').map_or(clip_path, |(s, _)| s);
    format!("{}.{ext}", stem.replace(['/', '\\'], "__"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_are_part_aware() {
        let a = Hasher::default().part("ab").part("c").hex();
        let b = Hasher::default().part("a").part("bc").hex();
        assert_ne!(a, b);
        assert_eq!(a.len(), 64);
        assert_eq!(a, Hasher::default().part("ab").part("c").hex());
    }

    #[test]
    fn freshness_needs_key_and_outputs() {
        let tmp = tempfile::tempdir().unwrap();
        let w = Workdir::new(tmp.path());
        let out = w.ensure(Stage::Ubm).unwrap().join("ubm.dgmm");
        assert!(!w.is_fresh(Stage::Ubm, "k", &[]));
        w.mark(Stage::Ubm, "k").unwrap();
        assert!(w.is_fresh(Stage::Ubm, "k", &[]));
        assert!(!w.is_fresh(Stage::Ubm, "other", &[]));
        assert!(!w.is_fresh(Stage::Ubm, "k", std::slice::from_ref(&out)));
        fs::write(&out, b"x").unwrap();
        assert!(w.is_fresh(Stage::Ubm, "k", &[out]));
        let e = w.require(Stage::Mfcc, "mfcc").unwrap_err().to_string();
        assert!(e.contains("run `sgmm mfcc` first"), "{e}");
    }

    #[test]
    fn feature_names_are_flat_and_deterministic() {
        assert_eq!(feature_name("clips/dev00_c001.wav", "mfcc"), "clips__dev00_c001.mfcc");
        assert_eq!(feature_name("a", "sgmm"), "a.sgmm");
    }
}
