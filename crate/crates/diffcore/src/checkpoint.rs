//! Binary checkpoint format (little-endian):
//!
//! ```text
//! "CGCK" | version u32 | parameter count u32
//! per parameter: name length u32 | UTF-8 name | rank u32 | dims u64 × rank | f64 × numel
//! optimizer flag u8
//! if 1: step u64 | lr f64 | beta1 f64 | beta2 f64 | eps f64
//!       then 2 × count more parameter records (first moments, then second)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CGCK";
pub const VERSION: u32 = 1;

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    w.write_u32::<LE>(name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_u32::<LE>(t.rank() as u32)?;
    for &d in t.shape() {
        w.write_u64::<LE>(d as u64)?;
    }
    for &v in t.data() {
        w.write_f64::<LE>(v)?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Tensor)> {
    let len = r.read_u32::<LE>()? as usize;
    if len > 1 << 16 {
        return Err(Error::Checkpoint(format!("implausible name length {len}")));
    }
    let mut name = vec![0u8; len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let rank = r.read_u32::<LE>()? as usize;
    if rank > 8 {
        return Err(Error::Checkpoint(format!("implausible rank {rank} for `{name}`")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u64::<LE>()? as usize);
    }
    let n: usize = shape.iter().product();
    if n > 1 << 28 {
        return Err(Error::Checkpoint(format!("implausible size {n} for `{name}`")));
    }
    let mut data = vec![0.0; n];
    r.read_f64_into::<LE>(&mut data)?;
    Ok((name, Tensor::new(shape, data)?))
}

pub fn write_checkpoint<W: Write>(w: &mut W, params: &ParamStore, adam: Option<&AdamState>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u32::<LE>(params.len() as u32)?;
    for (_, name, t) in params.iter() {
        write_tensor(w, name, t)?;
    }
    match adam {
        None => w.write_u8(0)?,
        Some(state) => {
            w.write_u8(1)?;
            w.write_u64::<LE>(state.step)?;
            for v in [state.config.lr, state.config.beta1, state.config.beta2, state.config.eps] {
                w.write_f64::<LE>(v)?;
            }
            for (t, (_, name, _)) in state.first.iter().zip(params.iter()) {
                write_tensor(w, &format!("adam.m.{name}"), t)?;
            }
            for (t, (_, name, _)) in state.second.iter().zip(params.iter()) {
                write_tensor(w, &format!("adam.v.{name}"), t)?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(ParamStore, Option<AdamState>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.read_u32::<LE>()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let (name, t) = read_tensor(r)?;
        if params.find(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
        }
        params.add(name, t);
    }
    let adam = match r.read_u8()? {
        0 => None,
        1 => {
            let step = r.read_u64::<LE>()?;
            let mut cfg = [0.0; 4];
            r.read_f64_into::<LE>(&mut cfg)?;
            let config = AdamConfig {
                lr: cfg[0],
                beta1: cfg[1],
                beta2: cfg[2],
                eps: cfg[3],
            };
            let mut first = Vec::with_capacity(count);
            let mut second = Vec::with_capacity(count);
            for _ in 0..count {
                first.push(read_tensor(r)?.1);
            }
            for _ in 0..count {
                second.push(read_tensor(r)?.1);
            }
            Some(AdamState {
                config,
                step,
                first,
                second,
            })
        }
        f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
    };
    Ok((params, adam))
}

pub fn save_checkpoint(path: &Path, params: &ParamStore, adam: Option<&AdamState>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params, adam)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, Option<AdamState>)> {
    let bytes = std::fs::read(path)?;
    let mut cursor = bytes.as_slice();
    read_checkpoint(&mut cursor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Gradients;

    fn store() -> ParamStore {
        let mut p = ParamStore::new();
        p.add("w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, 7.0]).unwrap());
        p.add("alpha", Tensor::scalar(0.25));
        p
    }

    #[test]
    fn round_trip_with_optimizer() {
        let mut p = store();
        let mut state = AdamState::new(AdamConfig::with_lr(0.1), &p);
        let mut g = Gradients::default();
        g.set(p.find("w").unwrap(), Tensor::full(&[2, 3], 0.5));
        crate::adam::adam_step(&mut p, &g, &mut state).unwrap();

        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, Some(&state)).unwrap();
        let (p2, s2) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(p, p2);
        assert_eq!(Some(state), s2);
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store(), None).unwrap();
        assert_eq!(&buf[..4], b"CGCK");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(*buf.last().unwrap(), 0);
    }

    #[test]
    fn corrupt_and_truncated_inputs_fail() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store(), None).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
        let cut = &buf[..buf.len() - 5];
        assert!(read_checkpoint(&mut &cut[..]).is_err());
    }
}
