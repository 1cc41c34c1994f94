//! Binary checkpoints: named f32 blocks with a header guarding layout drift.
//!
//! Layout, all little-endian:
//! ```text
//! magic  b"DSDF"
//! u32    format version (1)
//! [u8;16] architecture hash
//! u32    block count
//! per block:
//!   u16      name length, then utf-8 name bytes
//!   u8       rank, then u32 dims
//!   f32 * n  data, n = product of dims
//! ```
//! Values are stored as f32 at rest. Integer state (step counters, RNG word
//! positions) is split into 16-bit limbs first; every limb is exactly
//! representable as f32, so round-tripping through any wider float is
//! lossless and no NaN bit patterns ever hit the file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::linalg::Real;
use crate::autodiff::params::{Adam, ParamSet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DSDF";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct CheckpointBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub arch: [u8; 16],
    pub blocks: Vec<CheckpointBlock>,
}

impl Checkpoint {
    pub fn new(arch: [u8; 16]) -> Checkpoint {
        Checkpoint { arch, blocks: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "block {name} shape/data mismatch"
        );
        self.blocks.push(CheckpointBlock { name, shape, data });
    }

    pub fn block(&self, name: &str) -> Option<&CheckpointBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&CheckpointBlock> {
        self.block(name)
            .ok_or_else(|| Error::data(format!("checkpoint is missing block {name:?}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&self.arch).map_err(io)?;
        w.write_all(&(self.blocks.len() as u32).to_le_bytes()).map_err(io)?;
        for b in &self.blocks {
            let name = b.name.as_bytes();
            assert!(name.len() <= u16::MAX as usize);
            w.write_all(&(name.len() as u16).to_le_bytes()).map_err(io)?;
            w.write_all(name).map_err(io)?;
            assert!(b.shape.len() <= u8::MAX as usize && !b.shape.is_empty());
            w.write_all(&[b.shape.len() as u8]).map_err(io)?;
            for &d in &b.shape {
                w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
            }
            let mut bytes = Vec::with_capacity(b.data.len() * 4);
            for &v in &b.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes).map_err(io)?;
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |what: &str| Error::data(format!("{}: {what}", path.display()));

        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, path)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(&mut r, path)?;
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let mut arch = [0u8; 16];
        read_exact(&mut r, &mut arch, path)?;
        let n_blocks = read_u32(&mut r, path)? as usize;
        if n_blocks > 1 << 20 {
            return Err(bad("implausible block count"));
        }
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let mut lb = [0u8; 2];
            read_exact(&mut r, &mut lb, path)?;
            let name_len = u16::from_le_bytes(lb) as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name, path)?;
            let name = String::from_utf8(name)
                .map_err(|_| bad("block name is not valid utf-8"))?;
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank, path)?;
            let rank = rank[0] as usize;
            if rank == 0 || rank > 8 {
                return Err(bad(&format!("block {name}: bad rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut total: usize = 1;
            for _ in 0..rank {
                let d = read_u32(&mut r, path)? as usize;
                total = total
                    .checked_mul(d)
                    .ok_or_else(|| bad(&format!("block {name}: shape overflow")))?;
                shape.push(d);
            }
            if total > 1 << 28 {
                return Err(bad(&format!("block {name}: implausible size {total}")));
            }
            let mut bytes = vec![0u8; total * 4];
            read_exact(&mut r, &mut bytes, path)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            blocks.push(CheckpointBlock { name, shape, data });
        }
        Ok(Checkpoint { arch, blocks })
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::data(format!("{}: truncated checkpoint", path.display()))
        } else {
            Error::io(path, e)
        }
    })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

/// Digest over block names and shapes (not values): same layout, same hash.
pub fn arch_hash<R: Real>(params: &ParamSet<R>) -> [u8; 16] {
    let mut h = Sha256::new();
    for id in params.ids() {
        let b = params.block(id);
        h.update(b.name.as_bytes());
        h.update([0u8]);
        for &d in &b.shape {
            h.update((d as u64).to_le_bytes());
        }
        h.update([match b.group {
            crate::autodiff::params::LrGroup::HashTable => 1u8,
            crate::autodiff::params::LrGroup::Mlp => 2u8,
        }]);
    }
    let full = h.finalize();
    let mut out = [0u8; 16];
    out.copy_from_slice(&full[..16]);
    out
}

// -- integer limb encoding --------------------------------------------------

pub fn encode_u64(v: u64) -> [f32; 4] {
    std::array::from_fn(|i| ((v >> (16 * i)) & 0xffff) as f32)
}

pub fn decode_u64(f: &[f32]) -> Result<u64> {
    if f.len() != 4 {
        return Err(Error::data("u64 block must hold 4 limbs"));
    }
    let mut v: u64 = 0;
    for (i, &limb) in f.iter().enumerate() {
        if !(0.0..65536.0).contains(&limb) || limb.fract() != 0.0 {
            return Err(Error::data(format!("corrupt integer limb {limb}")));
        }
        v |= (limb as u64) << (16 * i);
    }
    Ok(v)
}

pub fn encode_u128(v: u128) -> [f32; 8] {
    std::array::from_fn(|i| ((v >> (16 * i)) & 0xffff) as f32)
}

pub fn decode_u128(f: &[f32]) -> Result<u128> {
    if f.len() != 8 {
        return Err(Error::data("u128 block must hold 8 limbs"));
    }
    let mut v: u128 = 0;
    for (i, &limb) in f.iter().enumerate() {
        if !(0.0..65536.0).contains(&limb) || limb.fract() != 0.0 {
            return Err(Error::data(format!("corrupt integer limb {limb}")));
        }
        v |= (limb as u128) << (16 * i);
    }
    Ok(v)
}

// -- parameter/optimizer bridging --------------------------------------------

/// Appends every parameter block (f32 at rest).
pub fn push_params<R: Real>(ckpt: &mut Checkpoint, params: &ParamSet<R>) {
    for id in params.ids() {
        let b = params.block(id);
        let data: Vec<f32> = b.values.iter().map(|v| v.promote() as f32).collect();
        ckpt.push(b.name.clone(), b.shape.clone(), data);
    }
}

/// Restores parameter values by block name; shapes must match exactly.
pub fn load_params<R: Real>(params: &mut ParamSet<R>, ckpt: &Checkpoint) -> Result<()> {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let (name, shape) = {
            let b = params.block(id);
            (b.name.clone(), b.shape.clone())
        };
        let cb = ckpt.require(&name)?;
        if cb.shape != shape {
            return Err(Error::data(format!(
                "checkpoint block {name}: shape {:?} does not match model {:?}",
                cb.shape, shape
            )));
        }
        let dst = &mut params.block_mut(id).values;
        for (d, &s) in dst.iter_mut().zip(&cb.data) {
            *d = R::of(s as f64);
        }
    }
    Ok(())
}

/// Appends optimizer moments and step count under the `adam.` prefix.
pub fn push_adam<R: Real>(ckpt: &mut Checkpoint, params: &ParamSet<R>, adam: &Adam<R>) {
    for (i, id) in params.ids().enumerate() {
        let b = params.block(id);
        let m: Vec<f32> = adam.m[i].iter().map(|v| v.promote() as f32).collect();
        let v: Vec<f32> = adam.v[i].iter().map(|v| v.promote() as f32).collect();
        ckpt.push(format!("adam.m.{}", b.name), b.shape.clone(), m);
        ckpt.push(format!("adam.v.{}", b.name), b.shape.clone(), v);
    }
    ckpt.push("adam.t", vec![4], encode_u64(adam.t).to_vec());
}

pub fn load_adam<R: Real>(
    adam: &mut Adam<R>,
    params: &ParamSet<R>,
    ckpt: &Checkpoint,
) -> Result<()> {
    for (i, id) in params.ids().enumerate() {
        let b = params.block(id);
        for (dst, key) in [
            (&mut adam.m[i], format!("adam.m.{}", b.name)),
            (&mut adam.v[i], format!("adam.v.{}", b.name)),
        ] {
            let cb = ckpt.require(&key)?;
            if cb.data.len() != dst.len() {
                return Err(Error::data(format!("checkpoint block {key}: size mismatch")));
            }
            for (d, &s) in dst.iter_mut().zip(&cb.data) {
                *d = R::of(s as f64);
            }
        }
    }
    adam.t = decode_u64(&ckpt.require("adam.t")?.data)?;
    Ok(())
}
