use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{read_wav, AudioClip};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";
const HEADER_PREFIX: &str = "#sgmm-manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Format {
                what: "manifest",
                detail: format!("unknown split '{other}'"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Clip location, relative to the manifest's directory.
    pub path: String,
    pub device_id: String,
    pub split: Split,
}

/// Line-oriented corpus index:
///
/// ```text
/// #sgmm-manifest v1 sr=16000 seed=7
/// clips/dev00_c000.wav<TAB>dev00<TAB>train
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    pub sample_rate: u32,
    pub seed: u64,
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.path.as_str()) {
                return Err(Error::Format {
                    what: "manifest",
                    detail: format!("duplicate path {}", e.path),
                });
            }
            if e.path.contains('\t') || e.device_id.contains('\t') || e.path.contains('\n') {
                return Err(Error::Format {
                    what: "manifest",
                    detail: "fields may not contain tabs or newlines".into(),
                });
            }
        }
        let has_train = self.entries.iter().any(|e| e.split == Split::Train);
        let has_test = self.entries.iter().any(|e| e.split == Split::Test);
        if has_train && has_test {
            for (device, (train, test)) in self.split_counts() {
                if train == 0 || test == 0 {
                    return Err(Error::Format {
                        what: "manifest",
                        detail: format!("device {device} lacks a train or test clip"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Per-device (train, test) counts, ordered by device id.
    pub fn split_counts(&self) -> BTreeMap<String, (usize, usize)> {
        let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for e in &self.entries {
            let c = counts.entry(e.device_id.clone()).or_default();
            match e.split {
                Split::Train => c.0 += 1,
                Split::Test => c.1 += 1,
            }
        }
        counts
    }

    /// Sorted, de-duplicated device ids; a device's class index is its position here.
    pub fn device_ids(&self) -> Vec<String> {
        self.split_counts().into_keys().collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER_PREFIX} sr={} seed={}\n", self.sample_rate, self.seed);
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.path, e.device_id, e.split));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let fmt_err = |detail: String| Error::Format {
            what: "manifest",
            detail,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| fmt_err("empty manifest".into()))?;
        let rest = header
            .strip_prefix(HEADER_PREFIX)
            .ok_or_else(|| fmt_err(format!("bad header line '{header}'")))?;
        let mut sample_rate = None;
        let mut seed = None;
        for field in rest.split_whitespace() {
            match field.split_once('=') {
                Some(("sr", v)) => sample_rate = v.parse().ok(),
                Some(("seed", v)) => seed = v.parse().ok(),
                _ => return Err(fmt_err(format!("unknown header field '{field}'"))),
            }
        }
        let sample_rate = sample_rate
            .filter(|&sr: &u32| sr > 0)
            .ok_or_else(|| fmt_err("header lacks a valid sr=".into()))?;
        let seed = seed.ok_or_else(|| fmt_err("header lacks a valid seed=".into()))?;
        let mut entries = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(fmt_err(format!(
                    "line {}: expected 3 tab-separated fields",
                    lineno + 2
                )));
            }
            entries.push(ManifestEntry {
                path: fields[0].to_string(),
                device_id: fields[1].to_string(),
                split: fields[2].parse()?,
            });
        }
        let manifest = Self {
            entries,
            sample_rate,
            seed,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Loads one entry's clip, rejecting sample-rate mismatches.
    pub fn load_clip(&self, base_dir: &Path, entry: &ManifestEntry) -> Result<AudioClip> {
        let clip = read_wav(base_dir.join(&entry.path))?;
        if clip.sample_rate() != self.sample_rate {
            return Err(Error::Data(format!(
                "{} has sample rate {} but the manifest declares {}",
                entry.path,
                clip.sample_rate(),
                self.sample_rate
            )));
        }
        Ok(clip)
    }
}
