//! Little-endian binary weight files.
//!
//! ```text
//! "DPNW"  version:u32  count:u32
//! count x { name_len:u16 name rank:u8 dims:u32*rank payload:f32*prod(dims) }
//! optional: "ADAM" step:u64 count:u32 followed by tensors named m.<param>, v.<param>
//! ```
//!
//! Trailing unit dims are dropped when writing (a bias is stored as rank 1)
//! and restored when reading. The architecture is recovered from the tensor
//! names and shapes, so no separate config is stored.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Branches, DpnConfig, DpnModel};
use crate::autograd::Parameterized;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::Tensor4;

pub const MAGIC: &[u8; 4] = b"DPNW";
const ADAM_TAG: &[u8; 4] = b"ADAM";
pub const FORMAT_VERSION: u32 = 1;

/// A loaded model and, if present, the optimizer step counter. Moment buffers
/// are restored into each parameter's `m` and `v`.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DpnModel<f32>,
    pub adam_step: Option<u64>,
}

fn stored_dims(dims: [usize; 4]) -> Vec<u32> {
    let mut d: Vec<u32> = dims.iter().map(|&v| v as u32).collect();
    while d.len() > 1 && *d.last().unwrap() == 1 {
        d.pop();
    }
    d
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor4<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let dims = stored_dims(t.dims());
    out.push(dims.len() as u8);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the model (and optimizer state when given) to bytes.
pub fn write_checkpoint(model: &DpnModel<f32>, adam: Option<&Adam>) -> Vec<u8> {
    let params = model.params();
    let mut out = Vec::with_capacity(16 + params.iter().map(|p| p.numel() * 12 + 64).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in &params {
        write_tensor(&mut out, &p.name, &p.value);
    }
    if let Some(adam) = adam {
        out.extend_from_slice(ADAM_TAG);
        out.extend_from_slice(&adam.t.to_le_bytes());
        out.extend_from_slice(&(2 * params.len() as u32).to_le_bytes());
        for p in &params {
            write_tensor(&mut out, &format!("m.{}", p.name), &p.m);
            write_tensor(&mut out, &format!("v.{}", p.name), &p.v);
        }
    }
    out
}

/// Writes via a temporary sibling and a rename so an interrupted save never
/// clobbers the previous file.
pub fn save_checkpoint(path: &Path, model: &DpnModel<f32>, adam: Option<&Adam>) -> Result<()> {
    let bytes = write_checkpoint(model, adam);
    let tmp = path.with_extension("tmp");
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    read_checkpoint(&bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Truncated(what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor4<f32>)> {
        let len = self.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.take(1, "tensor rank")?[0] as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Checkpoint(format!("tensor {name:?} has unsupported rank {rank}")));
        }
        let raw: Vec<u32> = (0..rank).map(|_| self.u32("tensor dims")).collect::<Result<_>>()?;
        let count = raw
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .filter(|n| n.checked_mul(4).is_some() && *n <= isize::MAX as usize / 4);
        let Some(count) = count else {
            return Err(Error::DimensionOverflow { name, dims: raw });
        };
        let payload = self.take(count * 4, "tensor payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let mut dims = [1usize; 4];
        for (d, &r) in dims.iter_mut().zip(&raw) {
            *d = r as usize;
        }
        Ok((name, Tensor4::from_vec(dims, data)?))
    }
}

fn infer_config(tensors: &HashMap<String, Tensor4<f32>>) -> Result<DpnConfig> {
    let dims = |name: &str| {
        tensors
            .get(name)
            .map(Tensor4::dims)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    };
    let mut cfg = DpnConfig {
        stem_channels: dims("stem.weight")?[0],
        ..DpnConfig::default()
    };
    let mut num_blocks = 0;
    while tensors.contains_key(&format!("block{}.k1.weight", num_blocks + 1)) {
        num_blocks += 1;
    }
    if num_blocks == 0 {
        return Err(Error::Checkpoint("no blocks found".into()));
    }
    cfg.num_blocks = num_blocks;
    cfg.c0 = dims("block1.k1.weight")?[0];
    cfg.branches = Branches {
        os2: tensors.contains_key("block1.k2.weight"),
        os4: tensors.contains_key("block1.k3.weight"),
    };
    if cfg.branches.os2 {
        cfg.c1 = dims("block1.k2.weight")?[0];
    }
    if cfg.branches.os4 {
        cfg.c2 = dims("block1.k3.weight")?[0];
    }
    let mut heads: Vec<usize> = tensors
        .keys()
        .filter_map(|k| k.strip_prefix("head")?.strip_suffix(".weight")?.parse().ok())
        .collect();
    heads.sort_unstable();
    if heads.last() != Some(&num_blocks) {
        return Err(Error::Checkpoint("no head after the final block".into()));
    }
    heads.pop();
    cfg.aux_losses = !heads.is_empty();
    if cfg.aux_losses {
        cfg.aux_positions = heads;
    } else {
        cfg.aux_positions.retain(|&p| p < num_blocks);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses a checkpoint produced by [`write_checkpoint`].
pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let count = r.u32("tensor count")?;
    let mut tensors = HashMap::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name:?}")));
        }
    }
    let mut adam = None;
    if !r.buf.is_empty() {
        let tag = r.take(4, "section tag")?;
        if tag != ADAM_TAG {
            return Err(Error::Checkpoint(format!("unknown trailing section {tag:?}")));
        }
        let step = r.u64("optimizer step")?;
        let n = r.u32("optimizer tensor count")?;
        let mut moments = HashMap::new();
        for _ in 0..n {
            let (name, t) = r.tensor()?;
            moments.insert(name, t);
        }
        adam = Some((step, moments));
        if !r.buf.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.buf.len())));
        }
    }

    let config = infer_config(&tensors)?;
    let mut model = DpnModel::<f32>::zeros(config)?;
    for p in model.params_mut() {
        let t = tensors
            .remove(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {:?}", p.name)))?;
        if t.dims() != p.value.dims() {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} has dims {:?}, expected {:?}",
                p.name,
                t.dims(),
                p.value.dims()
            )));
        }
        p.value = t;
        if let Some((_, moments)) = adam.as_mut() {
            for (prefix, slot) in [("m", &mut p.m), ("v", &mut p.v)] {
                let key = format!("{prefix}.{}", p.name);
                let t = moments
                    .remove(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key:?}")))?;
                if t.dims() != slot.dims() {
                    return Err(Error::Checkpoint(format!("optimizer tensor {key:?} has wrong dims")));
                }
                *slot = t;
            }
        }
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name:?}")));
    }
    Ok(Checkpoint {
        model,
        adam_step: adam.map(|(s, _)| s),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DpnModel<f32> {
        DpnModel::new(
            DpnConfig {
                num_blocks: 3,
                aux_positions: vec![1],
                ..DpnConfig::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_with_optimizer() {
        let mut m = small();
        for p in m.params_mut() {
            p.m = p.value.map(|v| v * 0.5);
            p.v = p.value.map(|v| v * v);
        }
        let adam = Adam {
            t: 42,
            ..Adam::default()
        };
        let bytes = write_checkpoint(&m, Some(&adam));
        let ck = read_checkpoint(&bytes).unwrap();
        assert_eq!(ck.adam_step, Some(42));
        assert_eq!(ck.model.config, m.config);
        for (a, b) in ck.model.params().iter().zip(m.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
            assert_eq!(a.m, b.m);
            assert_eq!(a.v, b.v);
        }
    }

    #[test]
    fn distinct_errors() {
        let m = small();
        let good = write_checkpoint(&m, None);

        let mut bad = good.clone();
        bad[0] = b'X';
        let e = read_checkpoint(&bad).unwrap_err();
        assert!(matches!(e, Error::BadMagic(_)));
        assert!(e.to_string().contains("bad magic"));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(read_checkpoint(&bad), Err(Error::VersionMismatch { found: 9, .. })));

        assert!(matches!(read_checkpoint(&good[..good.len() - 3]), Err(Error::Truncated(_))));
        assert!(matches!(read_checkpoint(&good[..2]), Err(Error::Truncated("magic"))));

        // first tensor is stem.weight: name length 11, then rank at offset 12+2+11
        let mut bad = good.clone();
        let rank_at = 12 + 2 + 11;
        assert_eq!(bad[rank_at], 4);
        for i in 0..4 {
            let o = rank_at + 1 + 4 * i;
            bad[o..o + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(read_checkpoint(&bad), Err(Error::DimensionOverflow { .. })));
    }

    #[test]
    fn infers_ablated_architecture() {
        let cfg = DpnConfig {
            c0: 8,
            c1: 4,
            num_blocks: 2,
            branches: Branches { os2: true, os4: false },
            aux_losses: false,
            aux_positions: vec![],
            ..DpnConfig::default()
        };
        let m = DpnModel::<f32>::new(cfg.clone(), 1).unwrap();
        let ck = read_checkpoint(&write_checkpoint(&m, None)).unwrap();
        assert_eq!(ck.model.config, cfg);
        assert_eq!(ck.model, m);
        assert_eq!(ck.adam_step, None);
    }

    #[test]
    fn size_matches_parameter_count() {
        let m = DpnModel::<f32>::zeros(DpnConfig::default()).unwrap();
        let n = m.params().len();
        let plain = write_checkpoint(&m, None).len();
        let headers: usize = m
            .params()
            .iter()
            .map(|p| 2 + p.name.len() + 1 + 4 * stored_dims(p.value.dims()).len())
            .sum();
        assert_eq!(plain, 12 + headers + 119_044 * 4);
        let with_adam = write_checkpoint(&m, Some(&Adam::default())).len();
        assert_eq!(with_adam, plain + 16 + 2 * (headers + 2 * n) + 2 * 119_044 * 4);
    }
}
