//! Binary grid file format.
//!
//! Layout: magic `NWPG`, u32 version (=1), u32 sample count, u32 C, u32 H,
//! u32 W, then C variable names (u16 length + UTF-8), then per sample a
//! timestamp (u16 length + UTF-8), `C*H*W` little-endian f32 variables and
//! `H*W` little-endian f32 QPE. All reads produce typed errors; loading
//! validates dataset invariants.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{GridDataset, GridError, GridHeader, GridSample, Provenance, Result};
use crate::tensor::Tensor;

pub const GRID_MAGIC: [u8; 4] = *b"NWPG";
pub const GRID_VERSION: u32 = 1;

/// Hard cap on total element count, guarding against corrupted headers.
const MAX_ELEMENTS: u64 = 1 << 31;

fn trunc(section: &'static str) -> impl FnOnce(std::io::Error) -> GridError {
    move |e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            GridError::Truncated(section)
        } else {
            GridError::Io(e)
        }
    }
}

fn read_string<R: Read>(r: &mut R, section: &'static str) -> Result<String> {
    let len = r.read_u16::<LittleEndian>().map_err(trunc(section))? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(trunc(section))?;
    String::from_utf8(buf).map_err(|_| GridError::InvalidData(format!("{section}: invalid UTF-8")))
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    if s.len() > u16::MAX as usize {
        return Err(GridError::InvalidData(format!("string too long ({} bytes)", s.len())));
    }
    w.write_u16::<LittleEndian>(s.len() as u16)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_f32_block<R: Read>(r: &mut R, n: usize, section: &'static str) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(trunc(section))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

fn write_f32_block<W: Write>(w: &mut W, data: &[f32]) -> Result<()> {
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_grid<W: Write>(w: &mut W, ds: &GridDataset) -> Result<()> {
    ds.validate()?;
    w.write_all(&GRID_MAGIC)?;
    w.write_u32::<LittleEndian>(GRID_VERSION)?;
    w.write_u32::<LittleEndian>(ds.samples.len() as u32)?;
    w.write_u32::<LittleEndian>(ds.header.channels as u32)?;
    w.write_u32::<LittleEndian>(ds.header.height as u32)?;
    w.write_u32::<LittleEndian>(ds.header.width as u32)?;
    for name in &ds.header.variable_names {
        write_string(w, name)?;
    }
    for s in &ds.samples {
        write_string(w, &s.timestamp)?;
        write_f32_block(w, s.variables.data())?;
        write_f32_block(w, &s.qpe)?;
    }
    Ok(())
}

pub fn read_grid<R: Read>(r: &mut R) -> Result<GridDataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc("magic"))?;
    if magic != GRID_MAGIC {
        return Err(GridError::BadMagic {
            expected: GRID_MAGIC,
            found: magic,
        });
    }
    let version = r.read_u32::<LittleEndian>().map_err(trunc("version"))?;
    if version != GRID_VERSION {
        return Err(GridError::UnsupportedVersion(version));
    }
    let samples = r.read_u32::<LittleEndian>().map_err(trunc("header"))? as u64;
    let c = r.read_u32::<LittleEndian>().map_err(trunc("header"))? as u64;
    let h = r.read_u32::<LittleEndian>().map_err(trunc("header"))? as u64;
    let w = r.read_u32::<LittleEndian>().map_err(trunc("header"))? as u64;
    if c == 0 || h == 0 || w == 0 {
        return Err(GridError::InvalidData("zero dimension in header".into()));
    }
    let per_sample = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| GridError::DimOverflow(format!("{c}x{h}x{w}")))?;
    let total = per_sample
        .checked_mul(samples.max(1))
        .ok_or_else(|| GridError::DimOverflow(format!("{samples} samples of {c}x{h}x{w}")))?;
    if total > MAX_ELEMENTS {
        return Err(GridError::DimOverflow(format!(
            "{samples} samples of {c}x{h}x{w} exceeds element cap"
        )));
    }
    let (c, h, w) = (c as usize, h as usize, w as usize);
    let mut names = Vec::with_capacity(c);
    for _ in 0..c {
        names.push(read_string(r, "variable names")?);
    }
    let mut out = Vec::with_capacity(samples as usize);
    for _ in 0..samples {
        let timestamp = read_string(r, "sample timestamp")?;
        let vars = read_f32_block(r, c * h * w, "sample variables")?;
        let qpe = read_f32_block(r, h * w, "sample qpe")?;
        out.push(GridSample {
            variables: Tensor::new(vec![c, h, w], vars)
                .map_err(|e| GridError::InvalidData(e.to_string()))?,
            qpe,
            timestamp,
        });
    }
    let ds = GridDataset {
        header: GridHeader {
            channels: c,
            height: h,
            width: w,
            variable_names: names,
        },
        samples: out,
        provenance: Provenance::InMemory,
    };
    ds.validate()?;
    Ok(ds)
}

/// Atomic store: writes to a temp file in the target directory, then
/// renames.
pub fn store_grid(ds: &GridDataset, path: &Path) -> Result<()> {
    let tmp = path.with_extension("nwpg.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_grid(&mut w, ds)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_grid(path: &Path) -> Result<GridDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut ds = read_grid(&mut r)?;
    ds.provenance = Provenance::File(path.display().to_string());
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_dataset() -> GridDataset {
        GridDataset {
            header: GridHeader {
                channels: 2,
                height: 2,
                width: 3,
                variable_names: vec!["hum_850".into(), "tmp_850".into()],
            },
            samples: vec![GridSample {
                variables: Tensor::from_fn(&[2, 2, 3], |i| i as f32 * 0.25 - 1.0),
                qpe: vec![0.0, 0.05, 0.2, 5.0, 15.0, 99.9],
                timestamp: "2022-08-10T00Z".into(),
            }],
            provenance: Provenance::InMemory,
        }
    }

    fn to_bytes(ds: &GridDataset) -> Vec<u8> {
        let mut buf = Vec::new();
        write_grid(&mut buf, ds).unwrap();
        buf
    }

    #[test]
    fn round_trip_preserves_everything() {
        let ds = sample_dataset();
        let bytes = to_bytes(&ds);
        let loaded = read_grid(&mut bytes.as_slice()).unwrap();
        assert_eq!(loaded.header, ds.header);
        assert_eq!(loaded.samples, ds.samples);
        // Re-serialization is byte-identical.
        assert_eq!(to_bytes(&loaded), bytes);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let mut ds = sample_dataset();
        ds.samples.clear();
        let bytes = to_bytes(&ds);
        let loaded = read_grid(&mut bytes.as_slice()).unwrap();
        assert!(loaded.samples.is_empty());
        assert_eq!(loaded.header, ds.header);
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = to_bytes(&sample_dataset());
        bytes[0] = b'X';
        assert!(matches!(
            read_grid(&mut bytes.as_slice()),
            Err(GridError::BadMagic { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = to_bytes(&sample_dataset());
        bytes[4] = 9;
        assert!(matches!(
            read_grid(&mut bytes.as_slice()),
            Err(GridError::UnsupportedVersion(_))
        ));
    }

    #[test]
    fn truncation_is_reported_not_panicked() {
        let bytes = to_bytes(&sample_dataset());
        for cut in [3, 7, 11, 20, 30, bytes.len() - 1] {
            let r = read_grid(&mut bytes[..cut].as_ref());
            assert!(
                matches!(r, Err(GridError::Truncated(_)) | Err(GridError::InvalidData(_))),
                "cut at {cut}: {r:?}"
            );
        }
    }

    #[test]
    fn absurd_dims_are_rejected() {
        let mut bytes = to_bytes(&sample_dataset());
        // Overwrite the channel count with u32::MAX.
        bytes[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            read_grid(&mut bytes.as_slice()),
            Err(GridError::DimOverflow(_))
        ));
    }

    #[test]
    fn store_load_via_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.nwpg");
        let ds = sample_dataset();
        store_grid(&ds, &path).unwrap();
        let loaded = load_grid(&path).unwrap();
        assert_eq!(loaded.samples, ds.samples);
        assert_eq!(loaded.provenance, Provenance::File(path.display().to_string()));
    }
}
