use std::path::{Path, PathBuf};

use super::{DiagGmm, SgmmMeta, SgmmTensor};
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const DGMM_MAGIC: &[u8] = b"DGMM1";
pub const SGMM_MAGIC: &[u8] = b"SGMM1";

impl DiagGmm {
    /// `DGMM1`, G and M as u32, then weights, means (`G x M`), variances (`G x M`) as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(DGMM_MAGIC);
        w.u32(self.n_components())
            .u32(self.dim())
            .f64s(self.weights())
            .f64s(self.means())
            .f64s(self.variances());
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data, DGMM_MAGIC, "GMM record")?;
        let g = r.u32()?;
        let m = r.u32()?;
        let weights = r.f64s(g)?;
        let means = r.f64s(g * m)?;
        let variances = r.f64s(g * m)?;
        r.finish()?;
        DiagGmm::new(weights, means, variances, m)
    }
}

impl SgmmTensor {
    /// `SGMM1`, M, G, T as u32, then values row-major as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (m, g, t) = self.dims();
        let mut w = Writer::new(SGMM_MAGIC);
        w.u32(m).u32(g).u32(t).f64s(self.as_slice());
        w.finish()
    }

    pub fn from_bytes(data: &[u8], meta: SgmmMeta) -> Result<Self> {
        let mut r = Reader::new(data, SGMM_MAGIC, "SGMM record")?;
        let m = r.u32()?;
        let g = r.u32()?;
        let t = r.u32()?;
        let values = r.f64s(m * g * t)?;
        r.finish()?;
        SgmmTensor::new(values, (m, g, t), meta)
    }
}

pub fn write_ubm(path: &Path, gmm: &DiagGmm) -> Result<()> {
    write_file(path, &gmm.to_bytes())
}

pub fn read_ubm(path: &Path) -> Result<DiagGmm> {
    DiagGmm::from_bytes(&read_file(path)?)
}

fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta");
    path.with_file_name(name)
}

/// Writes the tensor to `path` and its metadata line to `path` + `.meta`.
pub fn write_sgmm(path: &Path, tensor: &SgmmTensor) -> Result<()> {
    write_file(path, &tensor.to_bytes())?;
    write_file(&meta_path(path), format!("{}\n", tensor.meta).as_bytes())
}

pub fn read_sgmm(path: &Path) -> Result<SgmmTensor> {
    let meta_file = meta_path(path);
    let text = String::from_utf8(read_file(&meta_file)?).map_err(|_| Error::Format {
        what: "SGMM metadata",
        detail: format!("{} is not UTF-8", meta_file.display()),
    })?;
    let meta = SgmmMeta::parse(text.lines().next().unwrap_or(""))?;
    SgmmTensor::from_bytes(&read_file(path)?, meta)
}
