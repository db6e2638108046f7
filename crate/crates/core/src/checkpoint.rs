//! Binary tensor container used for model checkpoints and dataset files.
//!
//! Layout: magic "F2MF", format version u32 LE, then records until EOF.
//! Each record: name length u32 LE, name bytes (UTF-8), dtype u8
//! (0 = f32, 1 = f64), rank u8, dims as u32 LE each, raw little-endian
//! values in row-major order.

use crate::error::{CoreError, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"F2MF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Data {
    pub fn len(&self) -> usize {
        match self {
            Data::F32(v) => v.len(),
            Data::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match self {
            Data::F32(v) => Some(v),
            Data::F64(_) => None,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Data::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Data::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Data,
}

impl Record {
    pub fn f32(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        let r = Record {
            name: name.into(),
            dims,
            data: Data::F32(data),
        };
        r.check();
        r
    }

    pub fn f64(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        let r = Record {
            name: name.into(),
            dims,
            data: Data::F64(data),
        };
        r.check();
        r
    }

    fn check(&self) {
        let numel: usize = self.dims.iter().product();
        assert_eq!(numel, self.data.len(), "record {} dims/data mismatch", self.name);
    }
}

pub fn save_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for r in records {
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let dtype: u8 = match &r.data {
            Data::F32(_) => 0,
            Data::F64(_) => 1,
        };
        w.write_all(&[dtype, r.dims.len() as u8])?;
        for &d in &r.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        match &r.data {
            Data::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            Data::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| CoreError::Checkpoint(format!("truncated while reading {what}")))
}

pub fn load_records(path: &Path) -> Result<Vec<Record>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(CoreError::Checkpoint(format!(
            "bad magic {magic:?} in {}",
            path.display()
        )));
    }
    let mut v4 = [0u8; 4];
    read_exact_or(&mut r, &mut v4, "version")?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(CoreError::Checkpoint(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }

    let mut records = Vec::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read_exact(&mut len4) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact_or(&mut r, &mut name_bytes, "record name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CoreError::Checkpoint("record name is not UTF-8".into()))?;
        let mut hdr = [0u8; 2];
        read_exact_or(&mut r, &mut hdr, "record header")?;
        let (dtype, rank) = (hdr[0], hdr[1] as usize);
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d4 = [0u8; 4];
            read_exact_or(&mut r, &mut d4, "record dims")?;
            dims.push(u32::from_le_bytes(d4) as usize);
        }
        let numel: usize = dims.iter().product();
        let data = match dtype {
            0 => {
                let mut raw = vec![0u8; numel * 4];
                read_exact_or(&mut r, &mut raw, &format!("data of {name}"))?;
                Data::F32(
                    raw.chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect(),
                )
            }
            1 => {
                let mut raw = vec![0u8; numel * 8];
                read_exact_or(&mut r, &mut raw, &format!("data of {name}"))?;
                Data::F64(
                    raw.chunks_exact(8)
                        .map(|b| {
                            f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]])
                        })
                        .collect(),
                )
            }
            other => {
                return Err(CoreError::Checkpoint(format!(
                    "unknown dtype code {other} in record {name}"
                )))
            }
        };
        records.push(Record { name, dims, data });
    }
    Ok(records)
}

/// Looks up a record by name.
pub fn find<'a>(records: &'a [Record], name: &str) -> Result<&'a Record> {
    records
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| CoreError::Checkpoint(format!("missing record {name}")))
}

/// Serializes a parameter in its own element type.
pub fn param_record<E: crate::tensor::Scalar>(p: &crate::param::Param<E>) -> Record {
    let dims = p.ckpt_dims().to_vec();
    match E::DTYPE {
        crate::tensor::Dtype::F32 => Record::f32(
            p.name(),
            dims,
            p.value().data().iter().map(|v| v.as_f64() as f32).collect(),
        ),
        crate::tensor::Dtype::F64 => Record::f64(
            p.name(),
            dims,
            p.value().data().iter().map(|v| v.as_f64()).collect(),
        ),
    }
}

/// Serializes a flat statistics vector (batchnorm running stats and similar).
pub fn stat_record<E: crate::tensor::Scalar>(name: String, vals: &[E]) -> Record {
    match E::DTYPE {
        crate::tensor::Dtype::F32 => Record::f32(
            name,
            vec![vals.len()],
            vals.iter().map(|v| v.as_f64() as f32).collect(),
        ),
        crate::tensor::Dtype::F64 => {
            Record::f64(name, vec![vals.len()], vals.iter().map(|v| v.as_f64()).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("f2mf-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_preserves_bits() {
        let path = tmp("roundtrip.f2mf");
        let recs = vec![
            Record::f32(
                "w",
                vec![2, 1, 1, 2],
                vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25e-40],
            ),
            Record::f64("stats.mean", vec![3], vec![0.1, -2.0, 1e-300]),
        ];
        save_records(&path, &recs).unwrap();
        let loaded = load_records(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        // Compare raw bit patterns, not float equality.
        let a = loaded[0].data.as_f32().unwrap();
        let b = recs[0].data.as_f32().unwrap();
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(loaded[1], recs[1]);
    }

    #[test]
    fn same_content_writes_identical_bytes() {
        let p1 = tmp("det1.f2mf");
        let p2 = tmp("det2.f2mf");
        let recs = vec![Record::f32("a", vec![4], vec![0.25, 0.5, 0.75, 1.0])];
        save_records(&p1, &recs).unwrap();
        save_records(&p2, &recs).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn bad_magic_truncation_and_dtype_are_errors() {
        let path = tmp("bad.f2mf");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_records(&path).is_err());

        let path2 = tmp("trunc.f2mf");
        let recs = vec![Record::f32("a", vec![4], vec![1.0; 4])];
        save_records(&path2, &recs).unwrap();
        let bytes = std::fs::read(&path2).unwrap();
        std::fs::write(&path2, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_records(&path2).is_err());

        let path3 = tmp("dtype.f2mf");
        save_records(&path3, &recs).unwrap();
        let mut bytes = std::fs::read(&path3).unwrap();
        // Flip the dtype byte (magic 4 + version 4 + name_len 4 + name 1).
        bytes[13] = 9;
        std::fs::write(&path3, &bytes).unwrap();
        assert!(load_records(&path3).is_err());
    }
}
