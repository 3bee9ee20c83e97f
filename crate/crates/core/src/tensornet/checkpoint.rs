//! Parameter checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "YWTS" | version | tensor count
//! per tensor: name length | UTF-8 name | rank | dims... | f32 payload (LE)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"YWTS";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<T: Real>(
    w: &mut impl Write,
    tensors: &[(&str, &Tensor<T>)],
) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a checkpoint; `Err(message)` for malformed content.
pub fn read_checkpoint<T: Real>(
    r: &mut impl Read,
) -> std::result::Result<Vec<(String, Tensor<T>)>, String> {
    let io = |e: std::io::Error| e.to_string();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err("missing YWTS magic".into());
    }
    let version = read_u32(r).map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let count = read_u32(r).map_err(io)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(r).map_err(io)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|e| e.to_string())?;
        let rank = read_u32(r).map_err(io)? as usize;
        if rank > 4 {
            return Err(format!("tensor {name} has rank {rank}"));
        }
        let shape = (0..rank)
            .map(|_| read_u32(r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload).map_err(io)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| e.to_string())?;
        out.push((name, t));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io)? != 0 {
        return Err("trailing bytes after last tensor".into());
    }
    Ok(out)
}

pub fn save_checkpoint<T: Real>(
    path: impl AsRef<Path>,
    tensors: &[(&str, &Tensor<T>)],
) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, tensors).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<T>)>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut bytes.as_slice()).map_err(|m| Error::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let t = Tensor::<f64>::from_vec(&[2], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("b", &t)]).unwrap();
        let mut expect = b"YWTS".to_vec();
        for v in [1u32, 1, 1] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        expect.push(b'b');
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(buf, expect);
        let back: Vec<(String, Tensor<f64>)> = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, vec![("b".to_string(), t)]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_checkpoint::<f64>(&mut &b"XXXX"[..]).is_err());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("w", &Tensor::<f64>::zeros(&[3]))]).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_checkpoint::<f64>(&mut buf.as_slice()).is_err());
    }
}
