// Named-tensor container: magic, u32 version, then records of
// (u32 name length, name, u32 rank, u32 dims, f64 payload), little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSFCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One named tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor,
}

impl Record {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Record {
            name: name.into(),
            tensor,
        }
    }

    /// Arbitrary bytes carried as a rank-1 tensor of byte values.
    pub fn bytes(name: impl Into<String>, bytes: &[u8]) -> Self {
        Record::new(name, Tensor::vector(bytes.iter().map(|&b| b as f64).collect()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.tensor
            .data()
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::CorruptCheckpoint(format!(
                        "record `{}` does not hold bytes",
                        self.name
                    )))
                }
            })
            .collect()
    }
}

pub fn save_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(r.tensor.rank() as u32).to_le_bytes());
        for &d in r.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in r.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_records(path: &Path) -> Result<Vec<Record>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("record name is not UTF-8".into()))?;
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::CorruptCheckpoint(format!("record `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n.saturating_mul(8), "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        records.push(Record { name, tensor });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_failures() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let records = vec![
            Record::new("a", Tensor::from_rows(&[[1.0, -0.0], [f64::MIN_POSITIVE, 1e300]])),
            Record::new("s", Tensor::scalar(3.5)),
            Record::bytes("b", b"{\"x\":1}"),
        ];
        save_records(&path, &records).unwrap();
        let back = load_records(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (x, y) in records.iter().zip(&back) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.tensor.shape(), y.tensor.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.tensor), bits(&y.tensor));
        }
        assert_eq!(back[2].to_bytes().unwrap(), b"{\"x\":1}");

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_records(&path), Err(Error::CorruptCheckpoint(_))));

        let mut wrong = bytes.clone();
        wrong[8] = 9;
        std::fs::write(&path, &wrong).unwrap();
        assert!(matches!(
            load_records(&path),
            Err(Error::CheckpointVersion { found: 9, expected: 1 })
        ));
    }
}
