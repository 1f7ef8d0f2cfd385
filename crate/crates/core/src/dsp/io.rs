use std::fmt::Write as _;
use std::path::Path;

use super::{FrameConfig, MelConfig, MfccMatrix};
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const MFCC_MAGIC: &[u8] = b"MFCC1";

impl MfccMatrix {
    /// `MFCC1`, M and N as u32, then M*N row-major f64 (all little-endian).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MFCC_MAGIC);
        w.u32(self.n_ceps()).u32(self.n_frames()).f64s(self.as_slice());
        w.finish()
    }

    /// Decodes [`MfccMatrix::to_bytes`] output. Frame and Mel settings are not
    /// part of the record, so the caller supplies them.
    pub fn from_bytes(data: &[u8], frame_config: FrameConfig, mel_config: MelConfig) -> Result<Self> {
        let mut r = Reader::new(data, MFCC_MAGIC, "MFCC record")?;
        let m = r.u32()?;
        let n = r.u32()?;
        let values = r.f64s(m * n)?;
        r.finish()?;
        MfccMatrix::from_rows(values, m, n, frame_config, mel_config)
    }

    /// One line per frame: `frame,c0,c1,...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame");
        for k in 0..self.n_ceps() {
            let _ = write!(out, ",c{k}");
        }
        out.push('\n');
        for j in 0..self.n_frames() {
            let _ = write!(out, "{j}");
            for k in 0..self.n_ceps() {
                let _ = write!(out, ",{}", self.get(k, j));
            }
            out.push('\n');
        }
        out
    }
}

pub fn write_mfcc(path: &Path, mfcc: &MfccMatrix) -> Result<()> {
    write_file(path, &mfcc.to_bytes())
}

pub fn read_mfcc(path: &Path, frame_config: FrameConfig, mel_config: MelConfig) -> Result<MfccMatrix> {
    MfccMatrix::from_bytes(&read_file(path)?, frame_config, mel_config).map_err(|e| match e {
        Error::Format { what, detail } => Error::Format {
            what,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

pub fn write_mfcc_csv(path: &Path, mfcc: &MfccMatrix) -> Result<()> {
    write_file(path, mfcc.to_csv().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MfccMatrix {
        MfccMatrix::from_rows(
            vec![1.0, 2.0, 3.0, -4.5, 5.25, 6.0],
            2,
            3,
            FrameConfig::default(),
            MelConfig::full_band(16000),
        )
        .unwrap()
    }

    #[test]
    fn binary_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..5], b"MFCC1");
        assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &3u32.to_le_bytes());
        assert_eq!(&bytes[13..21], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[29..37], &3.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 13 + 6 * 8);
        let back = MfccMatrix::from_bytes(&bytes, FrameConfig::default(), MelConfig::full_band(16000)).unwrap();
        assert_eq!(back, sample());
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let bytes = sample().to_bytes();
        let fc = FrameConfig::default();
        let mc = MelConfig::full_band(16000);
        assert!(MfccMatrix::from_bytes(&bytes[..bytes.len() - 1], fc, mc).is_err());
        assert!(MfccMatrix::from_bytes(b"MFCC2xxxxxxxx", fc, mc).is_err());
    }

    #[test]
    fn csv_has_one_row_per_frame() {
        let csv = sample().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "frame,c0,c1");
        assert_eq!(lines[1], "0,1,-4.5");
        assert_eq!(lines.len(), 4);
    }
}
