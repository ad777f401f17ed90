//! Flat binary container of named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"NTSR"
//! version u32 (= 1)
//! count   u32
//! count x {
//!     name_len u32, name (UTF-8, name_len bytes)
//!     dtype    u8   (1 = f32, 2 = f64)
//!     rank     u8   (always 4 when written by this crate)
//!     dims     rank x u64
//!     data     prod(dims) elements, little-endian
//! }
//! ```

use std::io::{self, Read, Write};

use super::Tensor;

const MAGIC: &[u8; 4] = b"NTSR";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

/// Ordered `(name, tensor)` pairs.
pub type NamedTensors = Vec<(String, Tensor<f32>)>;

pub fn write_tensors<W: Write>(mut out: W, tensors: &[(String, Tensor<f32>)]) -> io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[DTYPE_F32, 4])?;
        for d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> io::Result<NamedTensors> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a named-tensor container"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported container version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let mut hdr = [0u8; 2];
        r.read_exact(&mut hdr)?;
        let (dtype, rank) = (hdr[0], hdr[1] as usize);
        if rank > 4 {
            return Err(bad(format!("{name}: rank {rank} exceeds 4")));
        }
        let mut shape = [1usize; 4];
        for i in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape[4 - rank + i] = u64::from_le_bytes(b) as usize;
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match dtype {
            DTYPE_F32 => {
                let mut buf = vec![0u8; n * 4];
                r.read_exact(&mut buf)?;
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect()
            }
            DTYPE_F64 => {
                let mut buf = vec![0u8; n * 8];
                r.read_exact(&mut buf)?;
                buf.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
                    .collect()
            }
            other => return Err(bad(format!("{name}: unknown dtype tag {other}"))),
        };
        let t = Tensor::from_vec(shape, data).map_err(|e| bad(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_and_bits() {
        let a = Tensor::from_vec([1, 2, 1, 3], vec![0.5, -1.0, 3.25, f32::MIN_POSITIVE, 7.0, -0.0]).unwrap();
        let b = Tensor::scalar(42.0f32);
        let items = vec![("a.weight".to_string(), a), ("b".to_string(), b)];
        let mut buf = Vec::new();
        write_tensors(&mut buf, &items).unwrap();
        let back = read_tensors(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, t0), (n1, t1)) in items.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let bits0: Vec<u32> = t0.data().iter().map(|v| v.to_bits()).collect();
            let bits1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits0, bits1);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_tensors(&b"XXXX\x01\0\0\0\0\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("x".into(), Tensor::zeros([1, 1, 2, 2]))]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensors(&buf[..]).is_err());
    }
}
