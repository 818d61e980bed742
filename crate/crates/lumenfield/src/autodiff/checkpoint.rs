//! Flat binary container for named tensors.
//!
//! Layout: magic `LFCK`, version u32, tensor count u32, then per tensor:
//! name length (u32) + UTF-8 name bytes, rank (u32), extents (u64 each),
//! little-endian f64 payload. All integers little-endian.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"LFCK";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic (not an LFCK checkpoint)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn write<W: Write>(mut w: W, tensors: &[(String, &Tensor)]) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for extent in tensor.shape() {
            w.write_all(&(*extent as u64).to_le_bytes())?;
        }
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_file(path: &Path, tensors: &[(String, &Tensor)]) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    write(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = Tensor::from_vec(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("tensor {name}: {e}")))?;
        tensors.push((name, tensor));
    }
    Ok(tensors)
}

pub fn read_file(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    read(BufReader::new(File::open(path)?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_named_tensors() {
        let a = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::scalar(-0.25).unwrap();
        let mut buf = Vec::new();
        write(&mut buf, &[("trunk.0.w".to_string(), &a), ("step".to_string(), &b)]).unwrap();

        let back = read(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "trunk.0.w");
        assert_eq!(back[0].1.shape(), &[2, 3]);
        assert_eq!(back[0].1.data(), a.data());
        assert_eq!(back[1].0, "step");
        assert_eq!(back[1].1.data(), &[-0.25]);
    }

    #[test]
    fn header_layout_is_stable() {
        let t = Tensor::from_vec(vec![2], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write(&mut buf, &[("x".to_string(), &t)]).unwrap();

        assert_eq!(&buf[0..4], b"LFCK");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1); // version
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1); // count
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 1); // name len
        assert_eq!(buf[16], b'x');
        assert_eq!(u32::from_le_bytes(buf[17..21].try_into().unwrap()), 1); // rank
        assert_eq!(u64::from_le_bytes(buf[21..29].try_into().unwrap()), 2); // extent
        assert_eq!(f64::from_le_bytes(buf[29..37].try_into().unwrap()), 1.5);
        assert_eq!(f64::from_le_bytes(buf[37..45].try_into().unwrap()), -2.0);
        assert_eq!(buf.len(), 45);
    }

    #[test]
    fn rejects_wrong_magic() {
        let err = read(&b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00"[..]).unwrap_err();
        assert!(matches!(err, CheckpointError::BadMagic));
    }
}
