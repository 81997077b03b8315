//! Binary container shared by VAE and predictor checkpoints.
//!
//! Layout (all integers little-endian `u32`, floats little-endian `f32`):
//! magic `LIMO1`, kind, header integer count and values, text count and
//! length-prefixed UTF-8 strings, block count, then per block a
//! length-prefixed name, rank, dims, value count and row-major values.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use limo_tensor::Tensor;

use crate::error::{LimoError, Result};

pub const MAGIC: &[u8; 5] = b"LIMO1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Vae,
    Predictor,
}

impl Kind {
    fn code(self) -> u32 {
        match self {
            Kind::Vae => 0,
            Kind::Predictor => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Kind::Vae),
            1 => Ok(Kind::Predictor),
            other => Err(LimoError::Checkpoint(format!("unknown kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: Kind,
    pub header: Vec<u32>,
    pub texts: Vec<String>,
    blocks: BTreeMap<String, Tensor>,
    order: Vec<String>,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_u32(w, len_u32(s.len())?)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| LimoError::Checkpoint(format!("length {n} does not fit in u32")))
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let len = get_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(LimoError::Checkpoint(format!(
            "implausible string length {len}"
        )));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| LimoError::Checkpoint(e.to_string()))
}

impl Checkpoint {
    pub fn new(kind: Kind, header: Vec<u32>, texts: Vec<String>) -> Self {
        Checkpoint {
            kind,
            header,
            texts,
            blocks: BTreeMap::new(),
            order: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        if self.blocks.insert(name.clone(), tensor).is_none() {
            self.order.push(name);
        }
    }

    pub fn block_names(&self) -> &[String] {
        &self.order
    }

    /// Removes a block, checking its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self
            .blocks
            .remove(name)
            .ok_or_else(|| LimoError::Checkpoint(format!("missing block {name}")))?;
        if t.shape() != shape {
            return Err(LimoError::Checkpoint(format!(
                "block {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, self.kind.code())?;
        put_u32(w, len_u32(self.header.len())?)?;
        for &v in &self.header {
            put_u32(w, v)?;
        }
        put_u32(w, len_u32(self.texts.len())?)?;
        for t in &self.texts {
            put_str(w, t)?;
        }
        put_u32(w, len_u32(self.order.len())?)?;
        for name in &self.order {
            let t = &self.blocks[name];
            put_str(w, name)?;
            put_u32(w, len_u32(t.shape().len())?)?;
            for &d in t.shape() {
                put_u32(w, len_u32(d)?)?;
            }
            put_u32(w, len_u32(t.len())?)?;
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(LimoError::Checkpoint("bad magic".into()));
        }
        let kind = Kind::from_code(get_u32(r)?)?;
        let nh = get_u32(r)? as usize;
        let header = (0..nh).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let nt = get_u32(r)? as usize;
        let texts = (0..nt).map(|_| get_str(r)).collect::<Result<Vec<_>>>()?;
        let mut ck = Checkpoint::new(kind, header, texts);
        let nb = get_u32(r)?;
        for _ in 0..nb {
            let name = get_str(r)?;
            let rank = get_u32(r)? as usize;
            if rank > 8 {
                return Err(LimoError::Checkpoint(format!("block {name}: rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| get_u32(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = get_u32(r)? as usize;
            if count != shape.iter().product::<usize>() {
                return Err(LimoError::Checkpoint(format!(
                    "block {name}: {count} values for {shape:?}"
                )));
            }
            let mut bytes = vec![0u8; count * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ck.push(name, Tensor::new(shape, data)?);
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                LimoError::CheckpointNotFound(path.to_path_buf())
            } else {
                e.into()
            }
        })?;
        Checkpoint::read_from(&mut BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_shape_validation() {
        let mut ck = Checkpoint::new(Kind::Predictor, vec![1, 2, 3], vec!["plogp".into()]);
        ck.push(
            "w",
            Tensor::matrix(2, 2, vec![1.0, -2.0, 3.5, 0.0]).unwrap(),
        );
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..5], b"LIMO1");
        let mut back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert!(back.clone().take("w", &[4]).is_err());
        assert!(back.take("w", &[2, 2]).is_ok());
        assert!(back.take("w", &[2, 2]).is_err());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Checkpoint::read_from(&mut &b"LIMO2xxxx"[..]).is_err());
        let mut ck = Checkpoint::new(Kind::Vae, vec![], vec![]);
        ck.push("b", Tensor::zeros(&[3]));
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 2);
        assert!(Checkpoint::read_from(&mut bytes.as_slice()).is_err());
    }
}
