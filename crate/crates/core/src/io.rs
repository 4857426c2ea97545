//! Binary field files, CSV endpoint-error tables and JSON summaries.
//!
//! Field file layout (little endian): magic `AMVF`, version `u16`, rows, cols and
//! channels as `u32`, dtype tag `u8` (1 = f64, 2 = u8), then the row-major payload
//! channel by channel.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{AmvError, Result};
use crate::model::{
    DisplacementField, ImageStack, ObservationMask, ObservationSet, PixelGrid, StateVector,
};
use crate::uq::EpeReport;

pub const MAGIC: [u8; 4] = *b"AMVF";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 19;

#[derive(Debug, Clone, PartialEq)]
pub enum FieldData {
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl FieldData {
    fn tag(&self) -> u8 {
        match self {
            FieldData::F64(_) => 1,
            FieldData::U8(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            FieldData::F64(v) => v.len(),
            FieldData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldFile {
    pub rows: u32,
    pub cols: u32,
    pub channels: u32,
    pub data: FieldData,
}

impl FieldFile {
    pub fn f64(grid: PixelGrid, channels: usize, values: Vec<f64>) -> Self {
        Self {
            rows: grid.rows() as u32,
            cols: grid.cols() as u32,
            channels: channels as u32,
            data: FieldData::F64(values),
        }
    }

    pub fn grid(&self) -> Result<PixelGrid> {
        PixelGrid::new(self.rows as usize, self.cols as usize)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let expected = self.rows as usize * self.cols as usize * self.channels as usize;
        if self.data.len() != expected {
            return Err(AmvError::DimensionMismatch {
                expected,
                actual: self.data.len(),
            });
        }
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * expected);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.rows.to_le_bytes());
        out.extend_from_slice(&self.cols.to_le_bytes());
        out.extend_from_slice(&self.channels.to_le_bytes());
        out.push(self.data.tag());
        match &self.data {
            FieldData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            FieldData::U8(v) => out.extend_from_slice(v),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(AmvError::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(AmvError::BadMagic(magic));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(AmvError::UnsupportedVersion(version));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let (rows, cols, channels) = (u32_at(6), u32_at(10), u32_at(14));
        let tag = bytes[18];
        let width = match tag {
            1 => 8,
            2 => 1,
            t => return Err(AmvError::UnknownDtype(t)),
        };
        let count = rows as usize * cols as usize * channels as usize;
        let payload = &bytes[HEADER_LEN..];
        let expected = count * width;
        if payload.len() != expected {
            return Err(AmvError::Truncated {
                expected: HEADER_LEN + expected,
                found: bytes.len(),
            });
        }
        let data = if tag == 1 {
            FieldData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            )
        } else {
            FieldData::U8(payload.to_vec())
        };
        Ok(Self {
            rows,
            cols,
            channels,
            data,
        })
    }

    fn into_f64(self) -> Result<(PixelGrid, usize, Vec<f64>)> {
        let grid = self.grid()?;
        match self.data {
            FieldData::F64(v) => Ok((grid, self.channels as usize, v)),
            FieldData::U8(_) => Err(AmvError::UnknownDtype(2)),
        }
    }
}

pub fn write_field(path: &Path, field: &FieldFile) -> Result<()> {
    fs::write(path, field.to_bytes()?)?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<FieldFile> {
    FieldFile::from_bytes(&fs::read(path)?)
}

fn expect_channels(found: usize, want: usize) -> Result<()> {
    if found == want {
        Ok(())
    } else {
        Err(AmvError::DimensionMismatch {
            expected: want,
            actual: found,
        })
    }
}

pub fn write_image(path: &Path, x: &ImageStack) -> Result<()> {
    write_field(
        path,
        &FieldFile::f64(x.grid(), x.channels(), x.values().to_vec()),
    )
}

pub fn read_image(path: &Path) -> Result<ImageStack> {
    let (grid, k, v) = read_field(path)?.into_f64()?;
    ImageStack::new(grid, k, v)
}

pub fn write_displacement(path: &Path, d: &DisplacementField) -> Result<()> {
    write_field(path, &FieldFile::f64(d.grid(), 2, d.values().to_vec()))
}

pub fn read_displacement(path: &Path) -> Result<DisplacementField> {
    let (grid, k, v) = read_field(path)?.into_f64()?;
    expect_channels(k, 2)?;
    DisplacementField::new(grid, v)
}

/// State files hold `2 + k` channels: `d1`, `d2`, then the image channels.
pub fn write_state(path: &Path, theta: &StateVector) -> Result<()> {
    write_field(
        path,
        &FieldFile::f64(
            theta.grid(),
            2 + theta.channels(),
            theta.as_slice().to_vec(),
        ),
    )
}

pub fn read_state(path: &Path) -> Result<StateVector> {
    let (grid, c, v) = read_field(path)?.into_f64()?;
    if c < 3 {
        return Err(AmvError::DimensionMismatch {
            expected: 3,
            actual: c,
        });
    }
    StateVector::from_vec(grid, c - 2, v)
}

/// Raw per-pixel map (NaN allowed), one channel per map.
pub fn write_map(path: &Path, grid: PixelGrid, maps: &[&[f64]]) -> Result<()> {
    let values: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    write_field(path, &FieldFile::f64(grid, maps.len(), values))
}

pub fn read_map(path: &Path) -> Result<(PixelGrid, usize, Vec<f64>)> {
    read_field(path)?.into_f64()
}

/// Two `u8` channels: observed at `t0`, observed at `t1`.
pub fn write_mask(path: &Path, mask: &ObservationMask) -> Result<()> {
    let g = mask.grid();
    let data: Vec<u8> = mask
        .t0()
        .iter()
        .chain(mask.t1())
        .map(|&b| b as u8)
        .collect();
    write_field(
        path,
        &FieldFile {
            rows: g.rows() as u32,
            cols: g.cols() as u32,
            channels: 2,
            data: FieldData::U8(data),
        },
    )
}

pub fn read_mask(path: &Path) -> Result<ObservationMask> {
    let f = read_field(path)?;
    let grid = f.grid()?;
    expect_channels(f.channels as usize, 2)?;
    let FieldData::U8(data) = f.data else {
        return Err(AmvError::UnknownDtype(1));
    };
    let m = grid.len();
    let t0 = data[..m].iter().map(|&b| b != 0).collect();
    let t1 = data[m..].iter().map(|&b| b != 0).collect();
    ObservationMask::new_allow_empty(grid, t0, t1)
}

/// Observation images with NaN at unobserved pixels.
pub fn write_observation_image(path: &Path, y: &ImageStack, observed: &[bool]) -> Result<()> {
    let m = y.grid().len();
    let values: Vec<f64> = y
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| if observed[i % m] { v } else { f64::NAN })
        .collect();
    write_field(path, &FieldFile::f64(y.grid(), y.channels(), values))
}

/// Read an observation image; NaN entries become 0 and the mask decides what is observed.
pub fn read_observation_image(path: &Path) -> Result<ImageStack> {
    let (grid, k, mut v) = read_field(path)?.into_f64()?;
    v.iter_mut().filter(|x| x.is_nan()).for_each(|x| *x = 0.0);
    ImageStack::new(grid, k, v)
}

pub fn write_observations(y0: &Path, y1: &Path, mask: &Path, obs: &ObservationSet) -> Result<()> {
    write_observation_image(y0, &obs.y_t0, obs.mask.t0())?;
    write_observation_image(y1, &obs.y_t1, obs.mask.t1())?;
    write_mask(mask, &obs.mask)
}

pub fn read_observations(y0: &Path, y1: &Path, mask: &Path) -> Result<ObservationSet> {
    ObservationSet::new(
        read_observation_image(y0)?,
        read_observation_image(y1)?,
        read_mask(mask)?,
    )
}

pub const EPE_CSV_HEADER: &str =
    "method,standard,weighted_p1,weighted_p2,masked,sparse,sparse_masked";

pub fn epe_csv(rows: &[(String, EpeReport)]) -> String {
    let mut out = String::from(EPE_CSV_HEADER);
    out.push('\n');
    for (name, r) in rows {
        out.push_str(name);
        for v in r.values() {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn write_epe_csv(path: &Path, rows: &[(String, EpeReport)]) -> Result<()> {
    fs::write(path, epe_csv(rows))?;
    Ok(())
}

pub fn read_epe_csv(path: &Path) -> Result<Vec<(String, EpeReport)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == EPE_CSV_HEADER => {}
        _ => {
            return Err(AmvError::Config {
                line: 1,
                msg: "missing EPE header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(AmvError::Config {
                line: i + 1,
                msg: format!("expected 7 columns, got {}", cols.len()),
            });
        }
        let mut v = [0.0; 6];
        for (j, c) in cols[1..].iter().enumerate() {
            v[j] = c.trim().parse().map_err(|e| AmvError::Config {
                line: i + 1,
                msg: format!("{e}"),
            })?;
        }
        let report = EpeReport {
            standard: v[0],
            weighted_p1: v[1],
            weighted_p2: v[2],
            masked: v[3],
            sparse: v[4],
            sparse_masked: v[5],
        };
        rows.push((cols[0].to_string(), report));
    }
    Ok(rows)
}

pub fn write_summary<T: Serialize>(path: &Path, summary: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, summary)?;
    f.write_all(b"\n")?;
    Ok(())
}
