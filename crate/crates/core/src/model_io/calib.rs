//! `calib.bin`: a 16-byte little-endian header followed by `f32` samples.
//!
//! | bytes | field                      |
//! |-------|----------------------------|
//! | 0..4  | magic `MRCB`               |
//! | 4..6  | dtype code (u16, 1 = f32)  |
//! | 6..10 | N (u32)                    |
//! | 10..12| C (u16)                    |
//! | 12..14| H (u16)                    |
//! | 14..16| W (u16)                    |

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CALIB_MAGIC: [u8; 4] = *b"MRCB";
const DTYPE_F32: u16 = 1;
const HEADER: usize = 16;

/// Calibration samples split into `num_batches` batches of `batch_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub samples: Tensor,
    pub batch_size: usize,
    pub num_batches: usize,
}

impl CalibrationSet {
    pub fn new(samples: Tensor, batch_size: usize, num_batches: usize) -> Result<Self> {
        samples.dims4()?;
        if batch_size == 0 || num_batches == 0 {
            return Err(Error::InvalidArgument("batch size and batch count must be positive".into()));
        }
        if samples.outer() != batch_size * num_batches {
            return Err(Error::shape(
                "calibration sample count",
                batch_size * num_batches,
                samples.outer(),
            ));
        }
        Ok(Self {
            samples,
            batch_size,
            num_batches,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.outer()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn batch(&self, i: usize) -> Result<Tensor> {
        self.samples.slice_outer(i * self.batch_size..(i + 1) * self.batch_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    /// Standard normal.
    Gaussian,
    /// Uniform on `[-1, 1)`.
    Uniform,
}

impl std::str::FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "uniform" => Ok(Self::Uniform),
            _ => Err(Error::InvalidArgument(format!("unknown distribution `{s}` (gaussian|uniform)"))),
        }
    }
}

/// Seeded calibration data of shape `(batch_size * num_batches, C, H, W)`.
pub fn generate_calibration(
    chw: [usize; 3],
    batch_size: usize,
    num_batches: usize,
    distribution: Distribution,
    seed: u64,
) -> Result<CalibrationSet> {
    let n = batch_size * num_batches;
    if n == 0 || chw.contains(&0) {
        return Err(Error::InvalidArgument("calibration dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * chw.iter().product::<usize>();
    let data: Vec<f64> = match distribution {
        Distribution::Gaussian => (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        Distribution::Uniform => (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    // Stored as f32 on disk; keep the in-memory values identical to a reload.
    let data = data.into_iter().map(|v| v as f32 as f64).collect();
    CalibrationSet::new(Tensor::new(vec![n, chw[0], chw[1], chw[2]], data)?, batch_size, num_batches)
}

pub fn save_calibration(samples: &Tensor, path: &Path) -> Result<()> {
    let (n, c, h, w) = samples.dims4()?;
    let narrow = |v: usize, what: &str, max: usize| {
        if v > max {
            Err(Error::InvalidArgument(format!("{what} = {v} does not fit the calibration header")))
        } else {
            Ok(v)
        }
    };
    let n = narrow(n, "N", u32::MAX as usize)? as u32;
    let c = narrow(c, "C", u16::MAX as usize)? as u16;
    let h = narrow(h, "H", u16::MAX as usize)? as u16;
    let w = narrow(w, "W", u16::MAX as usize)? as u16;
    let mut bytes = Vec::with_capacity(HEADER + 4 * samples.len());
    bytes.extend_from_slice(&CALIB_MAGIC);
    bytes.extend_from_slice(&DTYPE_F32.to_le_bytes());
    bytes.extend_from_slice(&n.to_le_bytes());
    bytes.extend_from_slice(&c.to_le_bytes());
    bytes.extend_from_slice(&h.to_le_bytes());
    bytes.extend_from_slice(&w.to_le_bytes());
    for &v in samples.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Every sample stored in `path`.
pub fn read_calibration(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER {
        return Err(Error::CalibrationFormat(format!(
            "{} bytes is shorter than the {HEADER}-byte header",
            bytes.len()
        )));
    }
    if bytes[0..4] != CALIB_MAGIC {
        return Err(Error::CalibrationFormat("bad magic".into()));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
    let dtype = u16_at(4);
    if dtype != DTYPE_F32 as usize {
        return Err(Error::CalibrationFormat(format!("unsupported dtype code {dtype}")));
    }
    let n = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let (c, h, w) = (u16_at(10), u16_at(12), u16_at(14));
    let expected = HEADER + 4 * n * c * h * w;
    if bytes.len() != expected {
        return Err(Error::CalibrationFormat(format!(
            "header describes {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let data = bytes[HEADER..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::new(vec![n, c, h, w], data)
}

/// The first `batch_size * num_batches` samples of `path`, in stored order.
pub fn load_calibration(path: &Path, batch_size: usize, num_batches: usize) -> Result<CalibrationSet> {
    let all = read_calibration(path)?;
    let requested = batch_size * num_batches;
    if requested > all.outer() {
        return Err(Error::InsufficientSamples {
            requested,
            available: all.outer(),
        });
    }
    if requested == 0 {
        return Err(Error::InvalidArgument("batch size and batch count must be positive".into()));
    }
    CalibrationSet::new(all.slice_outer(0..requested)?, batch_size, num_batches)
}
