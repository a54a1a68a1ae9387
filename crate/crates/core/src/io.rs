//! The portable on-disk container and the case/dataset layout built on it.
//!
//! Every array file starts with a 19-byte header:
//!
//! | bytes | field                                     |
//! |-------|-------------------------------------------|
//! | 0..4  | magic `DSEG`                              |
//! | 4..6  | format version, `u16` little endian (= 1) |
//! | 6     | dtype code (1 = f32, 2 = u8, 3 = table)   |
//! | 7..19 | shape `(d, h, w)` as three `u32` LE       |
//!
//! followed by the row-major little-endian payload. A table (used for
//! checkpoints) stores its entry count in the first shape slot and then, per
//! entry, a `u16` name length, the UTF-8 name and a nested array record.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::phantom::{CaseRecord, Label, Split};
use crate::volume::{Grid3, Mask, Volume};

pub const MAGIC: &[u8; 4] = b"DSEG";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 19;
pub const MANIFEST: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    U8 = 2,
    Table = 3,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::U8),
            3 => Ok(DType::Table),
            c => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
            DType::Table => 0,
        }
    }
}

/// A decoded array record.
#[derive(Clone, Debug, PartialEq)]
pub enum Array {
    F32 { shape: [u32; 3], data: Vec<f32> },
    U8 { shape: [u32; 3], data: Vec<u8> },
}

impl Array {
    pub fn shape(&self) -> [usize; 3] {
        let s = match self {
            Array::F32 { shape, .. } | Array::U8 { shape, .. } => shape,
        };
        s.map(|v| v as usize)
    }
}

fn put_header(buf: &mut Vec<u8>, dtype: DType, shape: [u32; 3]) {
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(dtype as u8);
    for s in shape {
        buf.extend_from_slice(&s.to_le_bytes());
    }
}

fn shape_u32(dims: [usize; 3]) -> Result<[u32; 3]> {
    let mut out = [0u32; 3];
    for (o, d) in out.iter_mut().zip(dims) {
        *o = u32::try_from(d).map_err(|_| Error::Data(format!("dimension {d} exceeds u32")))?;
    }
    Ok(out)
}

pub fn encode_f32(dims: [usize; 3], data: &[f32]) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    put_header(&mut buf, DType::F32, shape_u32(dims)?);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn encode_u8(dims: [usize; 3], data: &[u8]) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(HEADER_LEN + data.len());
    put_header(&mut buf, DType::U8, shape_u32(dims)?);
    buf.extend_from_slice(data);
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated container: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn header(&mut self) -> Result<(DType, [u32; 3])> {
        let magic = self.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = u16::from_le_bytes(self.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let dtype = DType::from_code(self.take(1)?[0])?;
        let mut shape = [0u32; 3];
        for s in &mut shape {
            *s = u32::from_le_bytes(self.take(4)?.try_into().unwrap());
        }
        Ok((dtype, shape))
    }

    fn array(&mut self) -> Result<Array> {
        let (dtype, shape) = self.header()?;
        let count = shape.iter().try_fold(1usize, |acc, &s| acc.checked_mul(s as usize));
        let count = count.ok_or_else(|| Error::Format("shape overflows".into()))?;
        let bytes = count
            .checked_mul(dtype.width())
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        let payload = self.take(bytes)?;
        match dtype {
            DType::F32 => Ok(Array::F32 {
                shape,
                data: payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            }),
            DType::U8 => Ok(Array::U8 { shape, data: payload.to_vec() }),
            DType::Table => Err(Error::Format("nested table where an array was expected".into())),
        }
    }
}

pub fn decode_array(bytes: &[u8]) -> Result<Array> {
    let mut r = Reader { bytes, pos: 0 };
    let a = r.array()?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after array", bytes.len() - r.pos)));
    }
    Ok(a)
}

pub fn encode_table(entries: &[(String, Array)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let n = u32::try_from(entries.len()).map_err(|_| Error::Data("too many table entries".into()))?;
    put_header(&mut buf, DType::Table, [n, 0, 0]);
    for (name, array) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Data(format!("name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let rec = match array {
            Array::F32 { shape, data } => encode_f32(shape.map(|v| v as usize), data)?,
            Array::U8 { shape, data } => encode_u8(shape.map(|v| v as usize), data)?,
        };
        buf.extend_from_slice(&rec);
    }
    Ok(buf)
}

pub fn decode_table(bytes: &[u8]) -> Result<Vec<(String, Array)>> {
    let mut r = Reader { bytes, pos: 0 };
    let (dtype, shape) = r.header()?;
    if dtype != DType::Table {
        return Err(Error::Format("expected a table container".into()));
    }
    let mut entries = Vec::with_capacity(shape[0] as usize);
    for _ in 0..shape[0] {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        entries.push((name, r.array()?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after table".into()));
    }
    Ok(entries)
}

/// Writes `bytes` to a sibling temporary file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_volume(path: &Path, vol: &Grid3) -> Result<()> {
    write_atomic(path, &encode_f32(vol.dims(), vol.data())?)
}

pub fn read_grid(path: &Path) -> Result<Grid3> {
    match decode_array(&read_bytes(path)?)? {
        Array::F32 { shape, data } => Grid3::from_vec(shape.map(|v| v as usize), data),
        Array::U8 { shape, data } => {
            Grid3::from_vec(shape.map(|v| v as usize), data.into_iter().map(f32::from).collect())
        }
    }
}

/// Stores a binary mask as `u8`.
pub fn write_binary_mask(path: &Path, mask: &Mask) -> Result<()> {
    if !mask.is_binary() {
        return Err(Error::Data(format!("{}: mask is not binary", path.display())));
    }
    let data: Vec<u8> = mask.data().iter().map(|&v| v as u8).collect();
    write_atomic(path, &encode_u8(mask.dims(), &data)?)
}

/// Writes `volume.dseg`, `mask.dseg` and `case.tsv` into `dir`.
pub fn write_case(record: &CaseRecord, dir: &Path) -> Result<()> {
    if record.volume.dims() != record.gt_mask.dims() {
        return Err(Error::Data(format!(
            "case {}: mask shape {:?} differs from volume shape {:?}",
            record.case_id,
            record.gt_mask.dims(),
            record.volume.dims()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_volume(&dir.join("volume.dseg"), &record.volume)?;
    write_binary_mask(&dir.join("mask.dseg"), &record.gt_mask)?;
    let meta = format!("{}\t{}\t{}\n", record.case_id, record.label, record.split);
    write_atomic(&dir.join("case.tsv"), meta.as_bytes())
}

pub fn read_case(dir: &Path) -> Result<CaseRecord> {
    let meta_path = dir.join("case.tsv");
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let fields: Vec<&str> = meta.trim_end().split('\t').collect();
    let [case_id, label, split] = fields[..] else {
        return Err(Error::Format(format!("{}: expected 3 fields", meta_path.display())));
    };
    let volume = Volume(read_grid(&dir.join("volume.dseg"))?);
    let gt_mask = Mask(read_grid(&dir.join("mask.dseg"))?);
    if volume.dims() != gt_mask.dims() {
        return Err(Error::Data(format!(
            "case {case_id}: mask shape {:?} differs from volume shape {:?}",
            gt_mask.dims(),
            volume.dims()
        )));
    }
    Ok(CaseRecord { volume, gt_mask, label: label.parse()?, case_id: case_id.to_string(), split: split.parse()? })
}

/// Writes every case into `dir/<case_id>/` plus `dir/manifest.tsv`.
pub fn write_dataset(dir: &Path, cases: &[CaseRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("case_id\tlabel\tsplit\tvolume\tmask\n");
    for case in cases {
        write_case(case, &dir.join(&case.case_id))?;
        manifest.push_str(&format!(
            "{id}\t{}\t{}\t{id}/volume.dseg\t{id}/mask.dseg\n",
            case.label,
            case.split,
            id = case.case_id
        ));
    }
    write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Vec<CaseRecord>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut cases = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(Error::Format(format!("{}:{}: expected 5 columns", path.display(), lineno + 1)));
        }
        let volume = Volume(read_grid(&dir.join(f[3]))?);
        let gt_mask = Mask(read_grid(&dir.join(f[4]))?);
        let case = CaseRecord {
            volume,
            gt_mask,
            label: f[1].parse()?,
            case_id: f[0].to_string(),
            split: f[2].parse()?,
        };
        case.validate()?;
        cases.push(case);
    }
    Ok(cases)
}

pub fn case_paths(dir: &Path, case_id: &str) -> (PathBuf, PathBuf) {
    (dir.join(case_id).join("volume.dseg"), dir.join(case_id).join("mask.dseg"))
}

/// Keeps only cases of `split`.
pub fn filter_split(cases: &[CaseRecord], split: Split) -> Vec<CaseRecord> {
    cases.iter().filter(|c| c.split == split).cloned().collect()
}

pub fn count_label(cases: &[CaseRecord], label: Label) -> usize {
    cases.iter().filter(|c| c.label == label).count()
}
