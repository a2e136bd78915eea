//! Named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  "DGR1"
//! u32    version
//! u32    tensor count
//! per tensor:
//!   u32        name length in bytes
//!   [u8]       UTF-8 name
//!   u32        rank
//!   u32 x rank dims
//!   f64 x prod(dims) values
//! ```

use std::io::{self, Read, Write};

use super::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DGR1";
/// Version 1 stores values as 64-bit floats.
pub const CHECKPOINT_VERSION: u32 = 1;

pub type NamedTensors = Vec<(String, Tensor)>;

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&len_u32(tensors.len())?.to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&len_u32(name.len())?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&len_u32(t.shape().len())?.to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&len_u32(d)?.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

pub fn read_checkpoint<R: Read>(mut r: R) -> io::Result<NamedTensors> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(invalid(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(invalid(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| invalid(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| Real::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| invalid(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

fn len_u32(n: usize) -> io::Result<u32> {
    u32::try_from(n).map_err(|_| invalid(format!("length {n} exceeds u32")))
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn invalid(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("a".to_string(), Tensor::row(vec![1.5]))]).unwrap();
        assert_eq!(&buf[..4], b"DGR1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        // name len, name, rank, 2 dims, one f64
        assert_eq!(buf.len(), 12 + 4 + 1 + 4 + 8 + 8);
        assert_eq!(&buf[buf.len() - 8..], &1.5f64.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic() {
        let err = read_checkpoint(&b"XXXX\x01\0\0\0\0\0\0\0"[..]).unwrap_err();
        assert_eq!(err.kind(), io::ErrorKind::InvalidData);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            entries in proptest::collection::vec(
                ("[a-z/0-9]{0,12}", proptest::collection::vec(1usize..4, 0..4)),
                0..5,
            ),
            seed in any::<u64>(),
        ) {
            let mut state = seed;
            let tensors: NamedTensors = entries
                .into_iter()
                .map(|(name, shape)| {
                    let n: usize = shape.iter().product();
                    let data = (0..n)
                        .map(|_| {
                            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                            f64::from_bits(state >> 2)
                        })
                        .collect();
                    (name, Tensor::new(shape, data).unwrap())
                })
                .collect();
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &tensors).unwrap();
            let back = read_checkpoint(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for ((n1, t1), (n2, t2)) in tensors.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }
}
