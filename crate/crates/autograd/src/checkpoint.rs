//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "M4OE"
//! version  u32      currently 1
//! count    u64      number of records
//! record:  name_len u32, name utf-8 bytes,
//!          rank u32, extents u64 x rank,
//!          payload f32 x prod(extents)
//! ```
//!
//! Save/load round-trips are bit-exact: payloads are raw f32 bit patterns.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::param::Module;
use crate::{Error, Result, Tensor};

pub const MAGIC: &[u8; 4] = b"M4OE";
pub const VERSION: u32 = 1;

/// One named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn ck_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.display().to_string(), reason: reason.into() }
}

pub fn save_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(r.shape.len() as u32).to_le_bytes())?;
        for &e in &r.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let expected: usize = r.shape.iter().product();
        if expected != r.data.len() {
            return Err(Error::DataLength { expected, got: r.data.len() });
        }
        for &v in &r.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<Record>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path, "magic")?;
    if &magic != MAGIC {
        return Err(ck_err(path, format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r, path, "version")?;
    if version != VERSION {
        return Err(ck_err(path, format!("unsupported version {version}")));
    }
    let count = read_u64(&mut r, path, "record count")?;
    let mut records = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = read_u32(&mut r, path, "name length")? as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut r, &mut name_buf, path, "name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| ck_err(path, format!("record {i}: name is not utf-8")))?;
        let rank = read_u32(&mut r, path, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, path, "extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        read_exact(&mut r, &mut payload, path, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        records.push(Record { name, shape, data });
    }
    Ok(records)
}

/// Snapshot of every parameter of a module, in visitation order.
pub fn records_from_module(m: &dyn Module) -> Vec<Record> {
    let mut out = Vec::new();
    m.visit_params(&mut |p| {
        out.push(Record {
            name: p.name.clone(),
            shape: p.tensor.shape.clone(),
            data: p.tensor.data.clone(),
        })
    });
    out
}

pub fn save_module(path: &Path, m: &dyn Module) -> Result<()> {
    save_records(path, &records_from_module(m))
}

/// Copies record values into matching parameters by exact name.
/// With `strict`, every parameter must be covered and every record consumed.
pub fn load_into_module(path: &Path, m: &mut dyn Module, strict: bool) -> Result<()> {
    let records = load_records(path)?;
    let mut by_name: std::collections::HashMap<&str, &Record> =
        records.iter().map(|r| (r.name.as_str(), r)).collect();
    let mut err: Option<Error> = None;
    m.visit_params_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        match by_name.remove(p.name.as_str()) {
            Some(rec) => {
                if rec.shape != p.tensor.shape {
                    err = Some(ck_err(
                        path,
                        format!("'{}' shape {:?} does not match model {:?}", p.name, rec.shape, p.tensor.shape),
                    ));
                    return;
                }
                p.tensor.data = rec.data.clone();
                p.tensor.grad = None;
            }
            None if strict => err = Some(ck_err(path, format!("missing parameter '{}'", p.name))),
            None => {}
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if strict && !by_name.is_empty() {
        let mut extra: Vec<_> = by_name.keys().map(|s| s.to_string()).collect();
        extra.sort();
        return Err(ck_err(path, format!("unused records: {}", extra.join(", "))));
    }
    Ok(())
}

pub fn tensor_from_record(r: &Record) -> Result<Tensor> {
    Tensor::new(r.shape.clone(), r.data.clone())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| ck_err(path, format!("truncated while reading {what}")))
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path, what)?;
    Ok(u64::from_le_bytes(b))
}
