use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioClip;
use crate::error::{Error, Result};

fn map_write(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::io(path, e),
        other => map_hound(path, other),
    }
}

fn map_hound(path: &Path, err: hound::Error) -> Error {
    match err {
        // The file itself opened fine, so read failures here mean short or malformed data.
        hound::Error::IoError(e) => Error::Format {
            what: "WAV file",
            detail: format!("{}: {e}", path.display()),
        },
        hound::Error::FormatError(msg) => Error::Format {
            what: "WAV header",
            detail: msg.to_string(),
        },
        hound::Error::Unsupported => Error::Unsupported(format!("{}", path.display())),
        hound::Error::TooWide => Error::Unsupported("sample width exceeds 32 bits".into()),
        hound::Error::InvalidSampleFormat => Error::Unsupported("invalid bits/format pair".into()),
        other => Error::Format {
            what: "WAV data",
            detail: other.to_string(),
        },
    }
}

/// Reads a PCM integer or IEEE float WAV file into a mono clip.
///
/// Integer samples are scaled by `1 / 2^(bits-1)`; multi-channel audio is
/// averaged across channels.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = WavReader::new(std::io::BufReader::new(file)).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let channels = usize::from(spec.channels);
    if channels == 0 {
        return Err(Error::Format {
            what: "WAV header",
            detail: "zero channels".into(),
        });
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        SampleFormat::Int => {
            if spec.bits_per_sample == 0 || spec.bits_per_sample > 32 {
                return Err(Error::Unsupported(format!(
                    "{}-bit integer PCM",
                    spec.bits_per_sample
                )));
            }
            let scale = 1.0 / f64::from(1u32 << (spec.bits_per_sample - 1));
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| map_hound(path, e))?
        }
        SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(Error::Unsupported(format!(
                    "{}-bit float PCM",
                    spec.bits_per_sample
                )));
            }
            reader
                .into_samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| map_hound(path, e))?
        }
    };
    if !interleaved.len().is_multiple_of(channels) {
        return Err(Error::Format {
            what: "WAV data",
            detail: "sample count is not a multiple of the channel count".into(),
        });
    }
    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    if mono.is_empty() {
        return Err(Error::Format {
            what: "WAV data",
            detail: "no samples".into(),
        });
    }
    AudioClip::new(mono, spec.sample_rate)
}

/// Writes a clip as 16-bit little-endian mono PCM.
///
/// Samples are rounded to the nearest multiple of `1/32768` and clamped to the
/// representable range, so `read_wav` recovers them within one quantization step.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| map_write(path, e))?;
    for &s in clip.samples() {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(|e| map_write(path, e))?;
    }
    writer.finalize().map_err(|e| map_write(path, e))
}
