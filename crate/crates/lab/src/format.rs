//! Binary containers.
//!
//! Tensor container (`RFCK`, version 1, little-endian):
//!
//! ```text
//! "RFCK" u32:version u32:count
//! count x { u32:name_len utf8:name u32:rank u32:dims[rank] f32:data[prod(dims)] }
//! ```
//!
//! JSON side-records (`config`, `meta`) are stored as rank-1 tensors with one
//! byte value per element, so any reader of the container can skip them.
//!
//! Dataset (`RFDS`, version 1): `"RFDS" u32:version u32:count`, then per item
//! a tensor container holding `x1` and `c` followed by a `u8` null flag.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rflow_core::estimator::ConditionSeq;
use rflow_core::rfm::TrainItem;
use rflow_core::Tensor;

use crate::error::{LabError, LabResult};

pub const CONTAINER_MAGIC: &[u8; 4] = b"RFCK";
pub const DATASET_MAGIC: &[u8; 4] = b"RFDS";
pub const VERSION: u32 = 1;

pub type Entries = Vec<(String, Tensor<f32>)>;

pub fn encode_container(entries: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Byte cursor that reports failures with their offset.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!(
                "truncated at byte {}: wanted {n} more bytes, {} left",
                self.pos,
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn magic(&mut self, want: &[u8; 4]) -> Result<(), String> {
        let at = self.pos;
        let got = self.take(4)?;
        if got != want {
            return Err(format!(
                "bad magic at byte {at}: expected {:?}, found {:02x?}",
                std::str::from_utf8(want).unwrap(),
                got
            ));
        }
        let at = self.pos;
        let v = self.u32()?;
        if v != VERSION {
            return Err(format!("unsupported version {v} at byte {at} (expected {VERSION})"));
        }
        Ok(())
    }

    pub(crate) fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub(crate) fn read_container(r: &mut Reader<'_>) -> Result<Entries, String> {
    r.magic(CONTAINER_MAGIC)?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.pos();
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| format!("tensor name at byte {at} is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format!("tensor `{name}` shape {shape:?} overflows"))?;
        let bytes = r.take(n.checked_mul(4).ok_or("tensor too large")?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("tensor `{name}`: {e}"))?;
        entries.push((name, t));
    }
    Ok(entries)
}

pub fn decode_container(bytes: &[u8]) -> Result<Entries, String> {
    let mut r = Reader::new(bytes);
    let e = read_container(&mut r)?;
    if !r.done() {
        return Err(format!("{} trailing bytes after byte {}", bytes.len() - r.pos(), r.pos()));
    }
    Ok(e)
}

pub fn read_file(path: &Path) -> LabResult<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(LabError::Missing(path.into())),
        Err(e) => Err(LabError::io(path, e)),
    }
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_file(path: &Path, bytes: &[u8]) -> LabResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| LabError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| LabError::io(&tmp, e))?;
    f.sync_all().map_err(|e| LabError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
}

pub fn format_err(path: &Path, msg: String) -> LabError {
    LabError::Format {
        path: PathBuf::from(path),
        msg,
    }
}

pub fn load_container(path: &Path) -> LabResult<Entries> {
    decode_container(&read_file(path)?).map_err(|m| format_err(path, m))
}

pub fn save_container(path: &Path, entries: &[(String, Tensor<f32>)]) -> LabResult<()> {
    write_file(path, &encode_container(entries))
}

/// Stores text as a rank-1 tensor of byte values.
pub fn text_tensor(s: &str) -> Tensor<f32> {
    let data: Vec<f32> = s.bytes().map(f32::from).collect();
    if data.is_empty() {
        return Tensor::new(vec![1], vec![0.0]).unwrap();
    }
    Tensor::new(vec![data.len()], data).unwrap()
}

pub fn tensor_text(t: &Tensor<f32>) -> Result<String, String> {
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(format!("value {v} is not a byte"))
            }
        })
        .collect::<Result<_, _>>()?;
    let bytes = if bytes == [0] { Vec::new() } else { bytes };
    String::from_utf8(bytes).map_err(|_| "side-record is not UTF-8".to_string())
}

pub fn encode_dataset(items: &[TrainItem]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for it in items {
        out.extend(encode_container(&[
            ("x1".to_string(), it.x1.clone()),
            ("c".to_string(), it.c.features.clone()),
        ]));
        out.push(it.c.null as u8);
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<TrainItem>, String> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let count = r.u32()? as usize;
    let mut items = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let at = r.pos();
        let mut e = read_container(&mut r)?;
        let null = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(format!("item {i}: null flag {b} at byte {} is not 0 or 1", r.pos() - 1)),
        };
        if e.len() != 2 || e[0].0 != "x1" || e[1].0 != "c" {
            return Err(format!("item {i} at byte {at}: expected tensors x1, c"));
        }
        let (_, c) = e.pop().unwrap();
        let (_, x1) = e.pop().unwrap();
        items.push(TrainItem {
            x1,
            c: ConditionSeq { features: c, null },
        });
    }
    if !r.done() {
        return Err(format!("{} trailing bytes after byte {}", bytes.len() - r.pos(), r.pos()));
    }
    Ok(items)
}

pub fn save_dataset(path: &Path, items: &[TrainItem]) -> LabResult<()> {
    write_file(path, &encode_dataset(items))
}

pub fn load_dataset(path: &Path) -> LabResult<Vec<TrainItem>> {
    decode_dataset(&read_file(path)?).map_err(|m| format_err(path, m))
}

/// Short content hash used as an artifact id.
pub fn content_id(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(bytes);
    d[..8].iter().map(|b| format!("{b:02x}")).collect()
}
