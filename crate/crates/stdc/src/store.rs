//! On-disk container format.
//!
//! Layout: magic `STDC`, u32 version (LE), u64 header length (LE), a JSON
//! header, then zero padding so every section starts on a 64-byte boundary.
//! Section offsets in the header are relative to the payload base, which is
//! the first aligned position after the header. That keeps offsets a pure
//! function of the section lengths, so identical content always produces
//! byte-identical files.
//!
//! Three container kinds share the layout: `cube` (values + valid + optional
//! ground-truth masks), `climatology`, and `checkpoint` (named f64 parameter
//! sections plus a JSON hyperparameter blob).

use crate::cube::{Climatology, DataCube, MaskSet};
use crate::error::{Error, Result};
use crate::grid::{BitGrid, Dims};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"STDC";
pub const FORMAT_VERSION: u32 = 1;
const ALIGN: u64 = 64;
const PREAMBLE: u64 = 4 + 4 + 8;
/// Streaming buffer size for section payloads.
const CHUNK: usize = 1 << 20;

fn align_up(x: u64) -> u64 {
    x.div_ceil(ALIGN) * ALIGN
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SectionMeta {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<u64>,
    /// Byte offset relative to the payload base.
    pub offset: u64,
    /// Byte length of the section.
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub dims: Dims,
    pub var_names: Vec<String>,
    pub units: Vec<String>,
    pub weeks_per_year: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Free-form extra metadata (checkpoint hyperparameters and the like).
    pub meta: serde_json::Value,
    pub sections: Vec<SectionMeta>,
}

/// Payload of one section, borrowed from the caller.
pub enum SectionData<'a> {
    F32(&'a [f32]),
    F64(&'a [f64]),
    U8(&'a [u8]),
    /// Bit-packed mask, serialized as 0/1 bytes.
    Bits(&'a BitGrid),
}

impl SectionData<'_> {
    fn dtype(&self) -> &'static str {
        match self {
            SectionData::F32(_) => "f32",
            SectionData::F64(_) => "f64",
            SectionData::U8(_) | SectionData::Bits(_) => "u8",
        }
    }

    fn byte_len(&self) -> u64 {
        match self {
            SectionData::F32(v) => 4 * v.len() as u64,
            SectionData::F64(v) => 8 * v.len() as u64,
            SectionData::U8(v) => v.len() as u64,
            SectionData::Bits(g) => g.len() as u64,
        }
    }

    fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(CHUNK);
        match self {
            SectionData::F32(vals) => {
                for chunk in vals.chunks(CHUNK / 4) {
                    buf.clear();
                    for v in chunk {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                    w.write_all(&buf)?;
                }
            }
            SectionData::F64(vals) => {
                for chunk in vals.chunks(CHUNK / 8) {
                    buf.clear();
                    for v in chunk {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                    w.write_all(&buf)?;
                }
            }
            SectionData::U8(bytes) => w.write_all(bytes)?,
            SectionData::Bits(grid) => {
                let mut start = 0;
                while start < grid.len() {
                    let n = CHUNK.min(grid.len() - start);
                    buf.resize(n, 0);
                    grid.expand_range(start, &mut buf[..n]);
                    w.write_all(&buf[..n])?;
                    start += n;
                }
            }
        }
        Ok(())
    }
}

/// Writes a container with the given sections in order. The section list and
/// all header fields fully determine the bytes on disk.
pub fn write_container(
    path: &Path,
    mut header: Header,
    sections: &[(&str, Vec<u64>, SectionData)],
) -> Result<()> {
    header.sections.clear();
    let mut rel = 0u64;
    for (name, shape, data) in sections {
        let count: u64 = shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d)).ok_or_else(
            || Error::Validation(format!("section {name}: shape product overflows u64")),
        )?;
        let elem: u64 = match data.dtype() {
            "f32" => 4,
            "f64" => 8,
            _ => 1,
        };
        let len = data.byte_len();
        if count.checked_mul(elem) != Some(len) {
            return Err(Error::Shape(format!(
                "section {name}: shape {shape:?} does not match payload of {len} bytes"
            )));
        }
        header.sections.push(SectionMeta {
            name: name.to_string(),
            dtype: data.dtype().to_string(),
            shape: shape.clone(),
            offset: rel,
            len,
        });
        rel = align_up(rel + len);
    }

    let header_json = serde_json::to_vec(&header)?;
    let payload_base = align_up(PREAMBLE + header_json.len() as u64);

    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    let mut pos = PREAMBLE + header_json.len() as u64;
    for (meta, (_, _, data)) in header.sections.iter().zip(sections) {
        let target = payload_base + meta.offset;
        while pos < target {
            let pad = ((target - pos) as usize).min(CHUNK);
            w.write_all(&vec![0u8; pad])?;
            pos += pad as u64;
        }
        data.write_to(&mut w)?;
        pos += meta.len;
    }
    w.flush()?;
    Ok(())
}

/// Parses the preamble and header; returns the header and payload base.
pub fn read_header(r: &mut (impl Read + Seek)) -> Result<(Header, u64)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::BadMagic)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)
        .map_err(|_| Error::Corrupt("truncated preamble".into()))?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)
        .map_err(|_| Error::Corrupt("truncated preamble".into()))?;
    let header_len = u64::from_le_bytes(b8);
    let file_len = r.seek(SeekFrom::End(0))?;
    if PREAMBLE + header_len > file_len {
        return Err(Error::Corrupt("header length exceeds file size".into()));
    }
    r.seek(SeekFrom::Start(PREAMBLE))?;
    let mut json = vec![0u8; header_len as usize];
    r.read_exact(&mut json)?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| Error::Corrupt(format!("bad header: {e}")))?;
    let payload_base = align_up(PREAMBLE + header_len);

    // Validate the section table against the file before anyone reads it.
    for s in &header.sections {
        let end = payload_base
            .checked_add(s.offset)
            .and_then(|o| o.checked_add(s.len))
            .ok_or_else(|| Error::Corrupt(format!("section {}: offset overflow", s.name)))?;
        if end > file_len {
            return Err(Error::Corrupt(format!("section {} truncated", s.name)));
        }
        let elem: u64 = match s.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            "u8" => 1,
            other => return Err(Error::Corrupt(format!("unknown dtype {other}"))),
        };
        let count = s
            .shape
            .iter()
            .try_fold(1u64, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Corrupt(format!("section {}: shape overflow", s.name)))?;
        if count * elem != s.len {
            return Err(Error::Corrupt(format!("section {}: shape/len mismatch", s.name)));
        }
        if count > usize::MAX as u64 {
            return Err(Error::Corrupt(format!("section {}: too large for memory", s.name)));
        }
    }
    Ok((header, payload_base))
}

fn find_section<'h>(header: &'h Header, name: &str) -> Result<&'h SectionMeta> {
    header
        .sections
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Corrupt(format!("missing section {name}")))
}

fn read_f32_section(
    r: &mut BufReader<File>,
    base: u64,
    s: &SectionMeta,
) -> Result<Vec<f32>> {
    r.seek(SeekFrom::Start(base + s.offset))?;
    let n = (s.len / 4) as usize;
    let mut out = Vec::with_capacity(n);
    let mut buf = vec![0u8; CHUNK.min(s.len as usize)];
    let mut remaining = s.len as usize;
    while remaining > 0 {
        let take = buf.len().min(remaining);
        r.read_exact(&mut buf[..take])?;
        for b in buf[..take].chunks_exact(4) {
            out.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
        remaining -= take;
    }
    Ok(out)
}

fn read_u8_section(r: &mut BufReader<File>, base: u64, s: &SectionMeta) -> Result<Vec<u8>> {
    r.seek(SeekFrom::Start(base + s.offset))?;
    let mut out = vec![0u8; s.len as usize];
    r.read_exact(&mut out)?;
    Ok(out)
}

fn read_bits_section(
    r: &mut BufReader<File>,
    base: u64,
    s: &SectionMeta,
    bit_start: u64,
    bit_count: usize,
) -> Result<BitGrid> {
    r.seek(SeekFrom::Start(base + s.offset + bit_start))?;
    let mut grid = BitGrid::zeros(bit_count);
    let mut buf = vec![0u8; CHUNK.min(bit_count.max(1))];
    let mut done = 0usize;
    while done < bit_count {
        let take = buf.len().min(bit_count - done);
        r.read_exact(&mut buf[..take])?;
        for (k, &b) in buf[..take].iter().enumerate() {
            if b != 0 {
                grid.set(done + k);
            }
        }
        done += take;
    }
    Ok(grid)
}

/// Writes a cube (and its ground-truth masks, when present) to `path`.
/// `meta` lands in the header verbatim; generators put the full recipe
/// there so downstream consumers can recover splits and coupling.
pub fn write_cube(
    path: &Path,
    cube: &DataCube,
    masks: Option<&MaskSet>,
    meta: serde_json::Value,
) -> Result<()> {
    cube.validate()?;
    if let Some(m) = masks {
        m.validate(cube.dims)?;
    }
    let d = cube.dims;
    let header = Header {
        kind: "cube".into(),
        dims: d,
        var_names: cube.var_names.clone(),
        units: cube.units.clone(),
        weeks_per_year: cube.weeks_per_year,
        seed: cube.seed,
        config_hash: cube.config_hash.clone(),
        meta,
        sections: Vec::new(),
    };
    let dims4 = vec![d.vars as u64, d.t as u64, d.lat as u64, d.lon as u64];
    let dims3 = vec![d.t as u64, d.lat as u64, d.lon as u64];
    let dims2 = vec![d.lat as u64, d.lon as u64];

    let mut sections: Vec<(&str, Vec<u64>, SectionData)> = vec![
        ("values", dims4.clone(), SectionData::F32(&cube.values)),
        ("valid", dims2, SectionData::U8(&cube.valid)),
    ];
    // Per-variable masks are written back to back as one (V,T,Lat,Lon)
    // section, so concatenate the grids through a small shim.
    let concat_driver;
    let concat_random;
    if let Some(m) = masks {
        sections.push(("extremes", dims3, SectionData::U8(&m.extremes)));
        concat_driver = concat_bits(&m.drivers);
        concat_random = concat_bits(&m.random);
        sections.push(("drivers", dims4.clone(), SectionData::Bits(&concat_driver)));
        sections.push(("random", dims4, SectionData::Bits(&concat_random)));
    }
    write_container(path, header, &sections)
}

fn concat_bits(grids: &[BitGrid]) -> BitGrid {
    let total: usize = grids.iter().map(|g| g.len()).sum();
    let mut out = BitGrid::zeros(total);
    let mut base = 0;
    let mut buf = vec![0u8; CHUNK];
    for g in grids {
        let mut start = 0;
        while start < g.len() {
            let n = CHUNK.min(g.len() - start);
            g.expand_range(start, &mut buf[..n]);
            for (k, &b) in buf[..n].iter().enumerate() {
                if b != 0 {
                    out.set(base + start + k);
                }
            }
            start += n;
        }
        base += g.len();
    }
    out
}

/// Reads a cube container written by [`write_cube`], returning the header
/// metadata alongside the data.
pub fn read_cube(path: &Path) -> Result<(DataCube, Option<MaskSet>, serde_json::Value)> {
    let mut r = BufReader::new(File::open(path)?);
    let (header, base) = read_header(&mut r)?;
    if header.kind != "cube" {
        return Err(Error::Corrupt(format!("expected cube container, found {}", header.kind)));
    }
    let d = header.dims;
    let values_meta = find_section(&header, "values")?.clone();
    if values_meta.dtype != "f32" || values_meta.len != 4 * d.len() as u64 {
        return Err(Error::Corrupt("values section does not match dims".into()));
    }
    let values = read_f32_section(&mut r, base, &values_meta)?;
    let valid_meta = find_section(&header, "valid")?.clone();
    if valid_meta.len != d.plane() as u64 {
        return Err(Error::Corrupt("valid section does not match dims".into()));
    }
    let valid = read_u8_section(&mut r, base, &valid_meta)?;

    let cube = DataCube {
        dims: d,
        var_names: header.var_names.clone(),
        units: header.units.clone(),
        weeks_per_year: header.weeks_per_year,
        seed: header.seed,
        config_hash: header.config_hash.clone(),
        values,
        valid,
    };

    let masks = if header.sections.iter().any(|s| s.name == "extremes") {
        let per_var = d.per_var();
        let ext_meta = find_section(&header, "extremes")?.clone();
        if ext_meta.len != per_var as u64 {
            return Err(Error::Corrupt("extremes section does not match dims".into()));
        }
        let extremes = read_u8_section(&mut r, base, &ext_meta)?;
        let mut drivers = Vec::with_capacity(d.vars);
        let mut random = Vec::with_capacity(d.vars);
        for name in ["drivers", "random"] {
            let meta = find_section(&header, name)?.clone();
            if meta.len != d.len() as u64 {
                return Err(Error::Corrupt(format!("{name} section does not match dims")));
            }
            for v in 0..d.vars {
                let grid =
                    read_bits_section(&mut r, base, &meta, (v * per_var) as u64, per_var)?;
                if name == "drivers" {
                    drivers.push(grid);
                } else {
                    random.push(grid);
                }
            }
        }
        Some(MaskSet { dims: d, extremes, drivers, random })
    } else {
        None
    };
    Ok((cube, masks, header.meta))
}

/// Writes a climatology container.
pub fn write_climatology(path: &Path, clim: &Climatology) -> Result<()> {
    let header = Header {
        kind: "climatology".into(),
        dims: Dims { vars: clim.vars, t: clim.weeks_per_year, lat: clim.lat, lon: clim.lon },
        var_names: Vec::new(),
        units: Vec::new(),
        weeks_per_year: clim.weeks_per_year,
        seed: 0,
        config_hash: String::new(),
        meta: serde_json::Value::Null,
        sections: Vec::new(),
    };
    let shape = vec![
        clim.vars as u64,
        clim.weeks_per_year as u64,
        clim.lat as u64,
        clim.lon as u64,
    ];
    write_container(
        path,
        header,
        &[
            ("median", shape.clone(), SectionData::F32(&clim.median)),
            ("std", shape, SectionData::F32(&clim.std)),
        ],
    )
}

pub fn read_climatology(path: &Path) -> Result<Climatology> {
    let mut r = BufReader::new(File::open(path)?);
    let (header, base) = read_header(&mut r)?;
    if header.kind != "climatology" {
        return Err(Error::Corrupt(format!(
            "expected climatology container, found {}",
            header.kind
        )));
    }
    let d = header.dims;
    let expect = (d.vars * d.t * d.lat * d.lon) as u64 * 4;
    let med_meta = find_section(&header, "median")?.clone();
    let std_meta = find_section(&header, "std")?.clone();
    if med_meta.len != expect || std_meta.len != expect {
        return Err(Error::Corrupt("climatology sections do not match dims".into()));
    }
    let median = read_f32_section(&mut r, base, &med_meta)?;
    let std = read_f32_section(&mut r, base, &std_meta)?;
    Ok(Climatology {
        vars: d.vars,
        weeks_per_year: d.t,
        lat: d.lat,
        lon: d.lon,
        median,
        std,
    })
}

/// Writes a checkpoint: JSON hyperparameters plus named f64 sections.
pub fn write_checkpoint(
    path: &Path,
    meta: serde_json::Value,
    params: &[(String, Vec<u64>, &[f64])],
) -> Result<()> {
    let header = Header {
        kind: "checkpoint".into(),
        dims: Dims { vars: 0, t: 0, lat: 0, lon: 0 },
        var_names: Vec::new(),
        units: Vec::new(),
        weeks_per_year: 0,
        seed: 0,
        config_hash: String::new(),
        meta,
        sections: Vec::new(),
    };
    let sections: Vec<(&str, Vec<u64>, SectionData)> = params
        .iter()
        .map(|(name, shape, data)| (name.as_str(), shape.clone(), SectionData::F64(data)))
        .collect();
    write_container(path, header, &sections)
}

/// Reads a checkpoint back as (meta, named f64 arrays with shapes).
pub fn read_checkpoint(path: &Path) -> Result<(serde_json::Value, Vec<(String, Vec<u64>, Vec<f64>)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let (header, base) = read_header(&mut r)?;
    if header.kind != "checkpoint" {
        return Err(Error::Corrupt(format!(
            "expected checkpoint container, found {}",
            header.kind
        )));
    }
    let mut params = Vec::with_capacity(header.sections.len());
    for s in &header.sections {
        if s.dtype != "f64" {
            return Err(Error::Corrupt(format!("parameter section {} must be f64", s.name)));
        }
        r.seek(SeekFrom::Start(base + s.offset))?;
        let mut bytes = vec![0u8; s.len as usize];
        r.read_exact(&mut bytes)?;
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
            .collect();
        params.push((s.name.clone(), s.shape.clone(), vals));
    }
    Ok((header.meta, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Dims;
    use tempfile::tempdir;

    fn tiny_cube() -> (DataCube, MaskSet) {
        let dims = Dims { vars: 1, t: 2, lat: 2, lon: 2 };
        let mut cube = DataCube {
            dims,
            var_names: vec!["a".into()],
            units: vec!["K".into()],
            weeks_per_year: 1,
            seed: 42,
            config_hash: "deadbeef".into(),
            values: vec![0f32; dims.len()],
            valid: vec![1, 1, 1, 0],
        };
        // NaN with a specific payload at the invalid pixel must survive.
        cube.values[3] = f32::from_bits(0x7fc0_0123);
        let mut masks = MaskSet::empty(dims);
        masks.extremes[1] = 1;
        masks.drivers[0].set(5);
        masks.random[0].set(2);
        (cube, masks)
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.stdc");
        let (cube, masks) = tiny_cube();
        let meta = serde_json::json!({"splits": {"train_years": 1}});
        write_cube(&path, &cube, Some(&masks), meta.clone()).unwrap();
        let (back, bmasks, bmeta) = read_cube(&path).unwrap();
        let bmasks = bmasks.unwrap();
        assert_eq!(bmeta, meta);
        assert_eq!(back.dims, cube.dims);
        assert_eq!(back.var_names, cube.var_names);
        assert_eq!(back.units, cube.units);
        assert_eq!(back.seed, cube.seed);
        assert_eq!(back.config_hash, cube.config_hash);
        assert_eq!(back.valid, cube.valid);
        for (a, b) in back.values.iter().zip(&cube.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(bmasks.extremes, masks.extremes);
        assert_eq!(bmasks.drivers, masks.drivers);
        assert_eq!(bmasks.random, masks.random);
    }

    #[test]
    fn values_section_is_packed_f32() {
        // 1x2x2x2 cube of zeros: the values section is exactly 32 bytes and
        // every section offset lands on the 64-byte grid.
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.stdc");
        let (cube, masks) = tiny_cube();
        write_cube(&path, &cube, Some(&masks), serde_json::Value::Null).unwrap();
        let mut r = BufReader::new(File::open(&path).unwrap());
        let (header, base) = read_header(&mut r).unwrap();
        assert_eq!(base % ALIGN, 0);
        let values = header.sections.iter().find(|s| s.name == "values").unwrap();
        assert_eq!(values.len, 32);
        for s in &header.sections {
            assert_eq!(s.offset % ALIGN, 0, "section {} misaligned", s.name);
        }
    }

    #[test]
    fn writes_are_byte_identical() {
        let dir = tempdir().unwrap();
        let (cube, masks) = tiny_cube();
        let p1 = dir.path().join("a.stdc");
        let p2 = dir.path().join("b.stdc");
        write_cube(&p1, &cube, Some(&masks), serde_json::Value::Null).unwrap();
        write_cube(&p2, &cube, Some(&masks), serde_json::Value::Null).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.stdc");
        let (cube, _) = tiny_cube();
        write_cube(&path, &cube, None, serde_json::Value::Null).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_cube(&path), Err(Error::BadMagic)));

        let mut bad = good.clone();
        bad[4] = 99;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_cube(&path), Err(Error::BadVersion(99))));

        std::fs::write(&path, &good[..good.len() - 8]).unwrap();
        assert!(matches!(read_cube(&path), Err(Error::Corrupt(_))));
    }

    #[test]
    fn rejects_nonfinite_at_valid_pixel() {
        let dir = tempdir().unwrap();
        let (mut cube, _) = tiny_cube();
        cube.values[0] = f32::INFINITY;
        assert!(write_cube(&dir.path().join("x.stdc"), &cube, None, serde_json::Value::Null).is_err());
    }

    #[test]
    fn climatology_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.stdc");
        let clim = Climatology {
            vars: 2,
            weeks_per_year: 3,
            lat: 2,
            lon: 2,
            median: (0..24).map(|i| i as f32).collect(),
            std: (0..24).map(|i| 1.0 + i as f32).collect(),
        };
        write_climatology(&path, &clim).unwrap();
        let back = read_climatology(&path).unwrap();
        assert_eq!(back.median, clim.median);
        assert_eq!(back.std, clim.std);
        assert_eq!(back.weeks_per_year, 3);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let w1 = vec![0.5f64, -1.5, 2.25];
        let w2 = vec![3.0f64; 4];
        let meta = serde_json::json!({"k": 8, "t_window": 6});
        write_checkpoint(
            &path,
            meta.clone(),
            &[
                ("enc.w".to_string(), vec![3], w1.as_slice()),
                ("head.w".to_string(), vec![2, 2], w2.as_slice()),
            ],
        )
        .unwrap();
        let (back_meta, params) = read_checkpoint(&path).unwrap();
        assert_eq!(back_meta, meta);
        assert_eq!(params[0].0, "enc.w");
        assert_eq!(params[0].2, w1);
        assert_eq!(params[1].1, vec![2, 2]);
        assert_eq!(params[1].2, w2);
    }
}
