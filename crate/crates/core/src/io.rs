//! On-disk formats: Vol1 volumes, CSV tables and PGM slice previews.
//!
//! A Vol1 file is a 43-byte little-endian header followed by the payload:
//!
//! | offset | size | field                              |
//! |--------|------|------------------------------------|
//! | 0      | 4    | magic `VOL1`                       |
//! | 4      | 2    | version (`u16`, currently 1)       |
//! | 6      | 12   | dims `nx, ny, nz` (`u32` each)     |
//! | 18     | 24   | spacing (`f64` each)               |
//! | 42     | 1    | dtype: 1 = `f32`, 2 = `u8`         |
//! | 43     | …    | `nx·ny·nz` values, x fastest       |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::{Grid3, Mask};

pub const VOL1_MAGIC: [u8; 4] = *b"VOL1";
pub const VOL1_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 43;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 1,
    U8 = 2,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

/// A dense `f32` volume over a full grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Grid3,
    /// `nx·ny·nz` values in x-fastest order.
    pub values: Vec<f32>,
}

impl Volume {
    pub fn new(grid: Grid3, values: Vec<f32>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a grid of {} voxels",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    /// Scatters rank-indexed values into the grid, writing `fill` outside
    /// the mask.
    pub fn from_ranks(mask: &Mask, values: &[f64], fill: f32) -> Self {
        let mut out = vec![fill; mask.grid().len()];
        for (r, &id) in mask.voxels().iter().enumerate() {
            out[id] = values[r] as f32;
        }
        Self {
            grid: mask.grid().clone(),
            values: out,
        }
    }

    /// Values at the active voxels, in rank order.
    pub fn to_ranks(&self, mask: &Mask) -> Result<Vec<f64>> {
        if mask.grid() != &self.grid {
            return Err(Error::DimensionMismatch(
                "volume and mask grids differ".into(),
            ));
        }
        Ok(mask
            .voxels()
            .iter()
            .map(|&id| self.values[id] as f64)
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = header_bytes(&self.grid, Dtype::F32);
        out.reserve(self.values.len() * 4);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a Vol1 `f32` volume. `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (grid, dtype) = parse_header(bytes, path)?;
        if dtype != Dtype::F32 {
            return Err(format_error(path, "expected an f32 volume, found u8"));
        }
        let payload = payload(bytes, &grid, dtype, path)?;
        let mut values = Vec::with_capacity(grid.len());
        for (index, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    path: path.to_owned(),
                    index,
                });
            }
            values.push(v);
        }
        Ok(Self { grid, values })
    }
}

fn format_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_owned(),
        message: message.into(),
    }
}

fn header_bytes(grid: &Grid3, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + grid.len() * dtype.size());
    out.extend_from_slice(&VOL1_MAGIC);
    out.extend_from_slice(&VOL1_VERSION.to_le_bytes());
    for d in grid.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in grid.spacing() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(dtype as u8);
    out
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(Grid3, Dtype)> {
    if bytes.len() >= 4 && bytes[..4] != VOL1_MAGIC {
        return Err(format_error(path, "bad magic, not a Vol1 file"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_owned(),
            offset: bytes.len(),
            expected: HEADER_LEN,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VOL1_VERSION {
        return Err(format_error(
            path,
            format!("unsupported Vol1 version {version}"),
        ));
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let o = 6 + 4 * a;
        *d = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    }
    let mut spacing = [0.0; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let o = 18 + 8 * a;
        *s = f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    }
    let dtype = match bytes[42] {
        1 => Dtype::F32,
        2 => Dtype::U8,
        other => return Err(format_error(path, format!("unknown dtype code {other}"))),
    };
    let grid = Grid3::new(dims, spacing).map_err(|e| format_error(path, e.to_string()))?;
    Ok((grid, dtype))
}

fn payload<'a>(bytes: &'a [u8], grid: &Grid3, dtype: Dtype, path: &Path) -> Result<&'a [u8]> {
    let expected = HEADER_LEN + grid.len() * dtype.size();
    match bytes.len() {
        n if n < expected => Err(Error::Truncated {
            path: path.to_owned(),
            offset: n,
            expected,
        }),
        n if n > expected => Err(format_error(
            path,
            format!("{} trailing bytes after the payload", n - expected),
        )),
        _ => Ok(&bytes[HEADER_LEN..]),
    }
}

pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    if let Some(index) = volume.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            path: path.to_owned(),
            index,
        });
    }
    fs::write(path, volume.to_bytes())?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    Volume::from_bytes(&fs::read(path)?, path)
}

/// Writes a mask as a `u8` Vol1 file (1 = active).
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let mut out = header_bytes(mask.grid(), Dtype::U8);
    out.extend(mask.flags().into_iter().map(u8::from));
    fs::write(path, out)?;
    Ok(())
}

/// Reads a `u8` Vol1 mask; any nonzero byte is active.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path)?;
    let (grid, dtype) = parse_header(&bytes, path)?;
    if dtype != Dtype::U8 {
        return Err(format_error(path, "expected a u8 mask, found f32"));
    }
    let flags: Vec<bool> = payload(&bytes, &grid, dtype, path)?
        .iter()
        .map(|&b| b != 0)
        .collect();
    Mask::from_flags(grid, &flags).map_err(|e| format_error(path, e.to_string()))
}

/// Reads a set of subject volumes that must share one grid. Returns the grid
/// and an `n × (nx·ny·nz)` matrix, one subject per row.
pub fn read_subjects(paths: &[PathBuf]) -> Result<(Grid3, DMatrix<f64>)> {
    let first_path = paths
        .first()
        .ok_or_else(|| Error::InvalidArgument("no subject volumes given".into()))?;
    let first = read_volume(first_path)?;
    let grid = first.grid.clone();
    let mut y = DMatrix::zeros(paths.len(), grid.len());
    for (i, path) in paths.iter().enumerate() {
        let vol = if i == 0 {
            first.clone()
        } else {
            read_volume(path)?
        };
        if vol.grid != grid {
            return Err(Error::GridMismatch {
                first: first_path.clone(),
                other: path.clone(),
                detail: format!(
                    "dims {:?} spacing {:?} vs dims {:?} spacing {:?}",
                    vol.grid.dims(),
                    vol.grid.spacing(),
                    grid.dims(),
                    grid.spacing()
                ),
            });
        }
        for (d, &v) in vol.values.iter().enumerate() {
            y[(i, d)] = v as f64;
        }
    }
    Ok((grid, y))
}

/// Voxels whose values are not constant across subjects.
pub fn auto_mask(grid: &Grid3, y: &DMatrix<f64>) -> Result<Mask> {
    let flags: Vec<bool> = (0..y.ncols())
        .map(|d| {
            let col = y.column(d);
            col.iter().any(|&v| v != col[0])
        })
        .collect();
    Mask::from_flags(grid.clone(), &flags)
}

/// Formats with 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes slice `z` as an 8-bit binary PGM, scaling the finite range of the
/// slice to `0..=255`.
pub fn write_pgm_slice(path: &Path, volume: &Volume, z: usize) -> Result<()> {
    let [nx, ny, nz] = volume.grid.dims();
    if z >= nz {
        return Err(Error::InvalidArgument(format!(
            "slice {z} out of range for {nz} slices"
        )));
    }
    let slice = &volume.values[z * nx * ny..(z + 1) * nx * ny];
    let (lo, hi) = slice
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    for row in (0..ny).rev() {
        for col in 0..nx {
            let v = slice[row * nx + col];
            out.push((((v - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}
