//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! "IDPO"                      magic, 4 bytes
//! u32 version                 currently 1
//! u32 T, f64 alpha[T + 1]     schedule block
//! u32 data_dim, u32 time_dim, u32 num_conditions, u32 hidden
//! u64 count, f64 params[count]
//! ```
//!
//! Parameters follow [`Architecture::offsets`]: `w1 b1 w2 b2 w3 b3`, weights
//! input-major.

use std::fs;
use std::path::Path;

use super::{Architecture, Denoiser};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IDPO";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(model: &Denoiser, schedule: &NoiseSchedule) -> Vec<u8> {
    let arch = model.architecture();
    let params = crate::denoiser::Differentiable::params(model);
    let mut out = Vec::with_capacity(64 + 8 * (params.len() + schedule.alphas().len()));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(schedule.steps() as u32).to_le_bytes());
    for a in schedule.alphas() {
        out.extend_from_slice(&a.to_le_bytes());
    }
    for dim in [arch.data_dim, arch.time_dim, arch.num_conditions, arch.hidden] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(Denoiser, NoiseSchedule)> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(r.error(0, "magic", format!("expected \"IDPO\", found {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.error(4, "version", format!("unsupported version {version}")));
    }
    let schedule_at = r.pos as u64;
    let steps = r.u32("schedule block")? as usize;
    let alpha = (0..=steps)
        .map(|_| r.f64("schedule block"))
        .collect::<Result<Vec<_>>>()?;
    let schedule = NoiseSchedule::from_alphas(alpha)
        .map_err(|e| r.error(schedule_at, "schedule block", e.to_string()))?;
    let dims_at = r.pos as u64;
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u32("layer-dim block")? as usize;
    }
    let arch = Architecture {
        data_dim: dims[0],
        time_dim: dims[1],
        num_conditions: dims[2],
        hidden: dims[3],
    };
    arch.validate()
        .map_err(|e| r.error(dims_at, "layer-dim block", e.to_string()))?;
    let count_at = r.pos as u64;
    let count = r.u64("parameter block")? as usize;
    if count != arch.num_params() {
        return Err(r.error(
            count_at,
            "parameter block",
            format!("{count} parameters, architecture needs {}", arch.num_params()),
        ));
    }
    let params_at = r.pos as u64;
    let params = (0..count)
        .map(|_| r.f64("parameter block"))
        .collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(r.error(r.pos as u64, "trailer", "unexpected trailing bytes".into()));
    }
    let model = Denoiser::from_params(arch, params)
        .map_err(|e| r.error(params_at, "parameter block", e.to_string()))?;
    Ok((model, schedule))
}

pub fn save_checkpoint(model: &Denoiser, schedule: &NoiseSchedule, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(model, schedule))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Denoiser, NoiseSchedule)> {
    read_checkpoint(&fs::read(path)?)
}

/// Little-endian cursor reporting the byte offset of any short read.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn error(&self, offset: u64, section: &'static str, message: String) -> Error {
        Error::Format {
            offset,
            section,
            message,
        }
    }

    pub(crate) fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(
                self.pos as u64,
                section,
                format!(
                    "truncated: needed {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self, section: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, section: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, section: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }
}
