//! Binary checkpoints: magic "GRIE", a format version, then one
//! length-prefixed record per parameter (name, shape, little-endian f64 data).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GRIE";
const VERSION: u32 = 1;

pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Input(format!(
            "{} is not a checkpoint (bad magic {magic:?})",
            path.display()
        )));
    }
    let version = read_u32(&mut f)?;
    if version != VERSION {
        return Err(Error::Input(format!(
            "checkpoint version {version} unsupported (want {VERSION})"
        )));
    }
    let count = read_u32(&mut f)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut f)? as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Input(format!("checkpoint name not utf-8: {e}")))?;
        let rank = read_u32(&mut f)? as usize;
        if rank > 4 {
            return Err(Error::Input(format!("checkpoint rank {rank} exceeds 4")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut f)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            f.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        params.add(name, Tensor::new(shape, data)?)?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn roundtrip_is_bitwise() {
        let mut rng = SeededRng::new(11);
        let mut params = ParamSet::new();
        params
            .add("a.weight", Tensor::rand_uniform(&[2, 3, 1, 1], -1.0, 1.0, &mut rng))
            .unwrap();
        params
            .add("b.bias", Tensor::rand_uniform(&[7], -1.0, 1.0, &mut rng))
            .unwrap();
        let dir = std::env::temp_dir().join("groie_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        save(&params, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.len(), params.len());
        for (a, b) in params.iter().zip(loaded.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join("groie_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.ckpt");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(load(&path).is_err());
    }
}
