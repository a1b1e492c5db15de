//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LBCK" | u32 version | u32 config_len | config (UTF-8 JSON)
//! u32 record_count
//! per record: u16 name_len | name | u8 dtype (0 = f32, 1 = f64)
//!             | u32 rank | rank x u32 dims | values
//! ```

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LBCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    config: &str,
    tensors: &[(&str, &Tensor)],
    dtype: DType,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&len_u32(config.len())?.to_le_bytes())?;
    w.write_all(config.as_bytes())?;
    w.write_all(&len_u32(tensors.len())?.to_le_bytes())?;
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| TensorError::Format(format!("name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[dtype.code()])?;
        w.write_all(&len_u32(t.shape().len())?.to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&len_u32(*d)?.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            match dtype {
                DType::F32 => buf.extend_from_slice(&(*v as f32).to_le_bytes()),
                DType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
            }
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let config_len = read_u32(&mut r)? as usize;
    let mut config = vec![0u8; config_len];
    r.read_exact(&mut config)?;
    let config = String::from_utf8(config)
        .map_err(|e| TensorError::Format(format!("config is not UTF-8: {e}")))?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| TensorError::Format(format!("name is not UTF-8: {e}")))?;
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = match code[0] {
            0 => {
                let mut buf = vec![0u8; numel * 4];
                r.read_exact(&mut buf)?;
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            }
            1 => {
                let mut buf = vec![0u8; numel * 8];
                r.read_exact(&mut buf)?;
                buf.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
            other => return Err(TensorError::Format(format!("unknown dtype code {other}"))),
        };
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint { config, tensors })
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| TensorError::Format(format!("length {n} exceeds u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_round_trip_is_exact() {
        let a = Tensor::new(vec![2, 2], vec![0.1, -1e-300, 3.5, f64::MIN_POSITIVE]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "{\"k\":1}", &[("a", &a)], DType::F64).unwrap();
        let ck = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(ck.config, "{\"k\":1}");
        assert_eq!(ck.get("a"), Some(&a));
    }

    #[test]
    fn f32_records_are_readable() {
        let a = Tensor::row(&[0.5, -2.25]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "", &[("a", &a)], DType::F32).unwrap();
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap().get("a"), Some(&a));
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(matches!(
            read_checkpoint(&b"NOPE\x01\0\0\0"[..]),
            Err(TensorError::Format(_))
        ));
    }
}
