//! Binary checkpoint format.
//!
//! Layout, all little-endian:
//!   magic "SSTX" | format version u16 | entry count u32 |
//!   entries: name (u16 length + utf8), rank u8, dims u32 each,
//!            values f32 per element |
//!   step u64 | rng state 32 bytes
//!
//! The table holds model parameters under their own names and Adam moments
//! as `adam.m.<name>` / `adam.v.<name>`. Values are stored single
//! precision; computation stays double precision.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SSTX";
pub const VERSION: u16 = 1;

/// One named tensor snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointData {
    pub entries: Vec<Entry>,
    pub step: u64,
    pub rng_state: [u8; 32],
}

pub fn save(data: &CheckpointData, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(data.entries.len())
        .map_err(|_| Error::Format("too many checkpoint entries".to_string()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for e in &data.entries {
        let name_len = u16::try_from(e.name.len())
            .map_err(|_| Error::Format(format!("entry name too long: {}", e.name)))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        let rank = u8::try_from(e.tensor.shape().len())
            .map_err(|_| Error::Format("tensor rank exceeds u8".to_string()))?;
        buf.push(rank);
        for &d in e.tensor.shape() {
            let d =
                u32::try_from(d).map_err(|_| Error::Format("dimension exceeds u32".to_string()))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in e.tensor.values() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf.extend_from_slice(&data.step.to_le_bytes());
    buf.extend_from_slice(&data.rng_state);

    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: wanted {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load(path: &Path) -> Result<CheckpointData> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };

    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {}",
            version
        )));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("entry name is not utf8".to_string()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let mut values = Vec::with_capacity(numel);
        for chunk in raw.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            if !v.is_finite() {
                return Err(Error::Format(format!("non-finite value in entry {}", name)));
            }
            values.push(v);
        }
        entries.push(Entry {
            name,
            tensor: Tensor::new(shape, values)?,
        });
    }
    let step = r.u64()?;
    let rng_state: [u8; 32] = r.take(32)?.try_into().unwrap();
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint payload",
            buf.len() - r.pos
        )));
    }
    Ok(CheckpointData {
        entries,
        step,
        rng_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CheckpointData {
        CheckpointData {
            entries: vec![
                Entry {
                    name: "w".to_string(),
                    tensor: Tensor::matrix(2, 3, vec![1.0, -0.5, 0.25, 2.0, 0.0, -1.75]).unwrap(),
                },
                Entry {
                    name: "adam.m.w".to_string(),
                    tensor: Tensor::vector(vec![0.125, -0.25]).unwrap(),
                },
            ],
            step: 42,
            rng_state: [7u8; 32],
        }
    }

    #[test]
    fn roundtrip_is_exact_at_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.sstx");
        let data = sample();
        save(&data, &path).unwrap();
        let back = load(&path).unwrap();
        // the sample values are all f32-exact
        assert_eq!(back, data);

        // saving the loaded data reproduces the file byte for byte
        let path2 = dir.path().join("y.sstx");
        save(&back, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn corrupted_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.sstx");
        save(&sample(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.sstx");
        save(&sample(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn bad_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.sstx");
        save(&sample(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 0xfe;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
    }
}
