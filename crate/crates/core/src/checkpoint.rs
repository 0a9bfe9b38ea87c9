//! Binary model checkpoints.
//!
//! Layout: the ASCII line `CFSL1\n`, then one record per named tensor:
//! `u32` name length, UTF-8 name, `u32` rank, `rank × u64` dimensions and
//! the row-major `f64` values, all little-endian. Records are written in a
//! fixed order so equal models give equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ConvBlock, ModelState};
use crate::permutations::PermutationSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"CFSL1\n";

fn named_tensors(model: &ModelState) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (i, c) in model.convs.iter().enumerate() {
        out.push((format!("conv{i}.weight"), c.weight.clone()));
        out.push((format!("conv{i}.bias"), c.bias.clone()));
    }
    out.push(("classifier.weight_raw".into(), model.classifier_raw.clone()));
    out.push(("tau".into(), Tensor::scalar(model.tau)));
    out.push(("split.head".into(), model.perm_head.clone()));
    out.push(("rotation.head".into(), model.rot_head.clone()));
    let perms = model.perms.perms();
    let n = model.perms.n_tiles();
    let flat: Vec<f64> = perms.iter().flatten().map(|&v| v as f64).collect();
    out.push((
        "split.perms".into(),
        Tensor::new(vec![perms.len(), n], flat).expect("permutation table shape"),
    ));
    out.push((
        "split.grid".into(),
        Tensor::from_vec(vec![model.grid.0 as f64, model.grid.1 as f64]),
    ));
    out
}

pub fn to_bytes(model: &ModelState) -> Vec<u8> {
    let mut buf = MAGIC.to_vec();
    for (name, t) in named_tensors(model) {
        buf.extend((name.len() as u32).to_le_bytes());
        buf.extend(name.as_bytes());
        buf.extend((t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend((d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend(v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(self.path, format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn parse_records(bytes: &[u8], path: &Path) -> Result<BTreeMap<String, Tensor>> {
    if !bytes.starts_with(MAGIC) {
        return Err(Error::format(path, "missing CFSL1 header"));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
        path,
    };
    let mut out = BTreeMap::new();
    while r.pos < bytes.len() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::format(path, format!("{name}: rank {rank} too large")));
        }
        let shape = (0..rank)
            .map(|_| r.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= bytes.len() / 8)
            .ok_or_else(|| Error::format(path, format!("{name}: implausible shape {shape:?}")))?;
        let raw = r.take(numel * 8, &name)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, format!("{name}: non-finite value")));
        }
        if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::format(path, format!("duplicate tensor {name}")));
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<ModelState> {
    let mut rec = parse_records(bytes, path)?;
    let mut take = |name: &str| rec.remove(name).ok_or_else(|| Error::format(path, format!("missing tensor {name}")));

    let mut convs = Vec::new();
    loop {
        let key = format!("conv{}.weight", convs.len());
        let Ok(weight) = take(&key) else { break };
        let bias = take(&format!("conv{}.bias", convs.len()))?;
        convs.push(ConvBlock { weight, bias });
    }
    if convs.is_empty() {
        return Err(Error::format(path, "no convolution layers"));
    }
    let classifier_raw = take("classifier.weight_raw")?;
    let tau = take("tau")?.item()?;
    let perm_head = take("split.head")?;
    let rot_head = take("rotation.head")?;
    let perm_t = take("split.perms")?;
    let grid_t = take("split.grid")?;
    if let Some(extra) = rec.keys().next() {
        return Err(Error::format(path, format!("unexpected tensor {extra}")));
    }

    let as_index = |v: f64| -> Result<usize> {
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::format(path, format!("non-integer index {v}")))
        }
    };
    let (m_s, n) = match perm_t.shape() {
        &[m, n] => (m, n),
        s => return Err(Error::format(path, format!("split.perms has shape {s:?}"))),
    };
    let perms = (0..m_s)
        .map(|i| perm_t.data()[i * n..(i + 1) * n].iter().map(|&v| as_index(v)).collect())
        .collect::<Result<Vec<Vec<usize>>>>()?;
    let perms = PermutationSet::from_perms(perms).map_err(|e| Error::format(path, e.to_string()))?;
    let grid = match grid_t.data() {
        [r, c] => (as_index(*r)?, as_index(*c)?),
        _ => return Err(Error::format(path, "split.grid must hold two values")),
    };

    let model = ModelState {
        convs,
        classifier_raw,
        tau,
        perm_head,
        rot_head,
        perms,
        grid,
    };
    validate(&model).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(model)
}

fn validate(m: &ModelState) -> Result<()> {
    let mut cin = None;
    for (i, c) in m.convs.iter().enumerate() {
        let s = c.weight.shape();
        if s.len() != 4 || s[0] != s[1] || s[0] % 2 == 0 || c.bias.shape() != [s[3]] {
            return Err(Error::Shape(format!("conv{i}: weight {:?}, bias {:?}", s, c.bias.shape())));
        }
        if cin.is_some_and(|c| c != s[2]) {
            return Err(Error::Shape(format!("conv{i}: expects {} input channels, previous layer gives {:?}", s[2], cin)));
        }
        cin = Some(s[3]);
    }
    let d = cin.unwrap_or(0);
    let n_tiles = m.grid.0 * m.grid.1;
    if m.classifier_raw.rank() != 2 || m.classifier_raw.shape()[0] != d {
        return Err(Error::Shape(format!("classifier {:?} for feature dim {d}", m.classifier_raw.shape())));
    }
    if m.perm_head.shape() != [n_tiles * d, m.perms.len()] || m.perms.n_tiles() != n_tiles {
        return Err(Error::Shape(format!(
            "split head {:?} for {n_tiles} tiles, dim {d}, {} orderings",
            m.perm_head.shape(),
            m.perms.len()
        )));
    }
    if m.rot_head.shape() != [d, crate::model::N_ROTATIONS] {
        return Err(Error::Shape(format!("rotation head {:?}", m.rot_head.shape())));
    }
    Ok(())
}

pub fn save(model: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// 64-bit FNV-1a digest, as 16 hex digits.
pub fn fingerprint(bytes: &[u8]) -> String {
    let h = bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    format!("{h:016x}")
}

pub fn model_fingerprint(model: &ModelState) -> String {
    fingerprint(&to_bytes(model))
}
