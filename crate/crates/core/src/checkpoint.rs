//! Binary checkpoint container.
//!
//! Layout (little endian): magic `BCNNCKPT`, `u32` version, `u32` entry
//! count, then per entry a `u16` name length, the UTF-8 name, a `u8` rank,
//! `u64` dims and the `f64` payload, closed by the marker `END!`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::bayes::{BayesianHead, HeadLayout, VariationalPosterior};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::model::{Architecture, FineToCoarseCnn};
use crate::ops::BatchNormState;
use crate::preprocess::NormStats;

pub const MAGIC: &[u8; 8] = b"BCNNCKPT";
pub const VERSION: u32 = 1;
const END: &[u8; 4] = b"END!";
const MAX_RANK: usize = 8;

/// Named `f64` arrays, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        if name.is_empty() || name.len() > u16::MAX as usize {
            return bad("entry name must be 1..=65535 bytes");
        }
        if shape.len() > MAX_RANK || shape.iter().product::<usize>() != data.len() {
            return bad(format!("entry {name}: shape {shape:?} does not hold {} values", data.len()));
        }
        self.entries.insert(name.to_string(), (shape.to_vec(), data));
        Ok(())
    }

    pub fn insert_vec(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let n = data.len();
        self.insert(name, &[n], data)
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.entries
            .get(name)
            .map(|(s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))
    }

    pub fn vec(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.1.to_vec())
    }

    pub fn tensor(&self, name: &str) -> Result<crate::Tensor> {
        let (s, d) = self.get(name)?;
        crate::Tensor::new(s, d.to_vec()).map_err(|e| Error::Checkpoint(format!("entry {name}: {e}")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, (shape, data)) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(END);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return bad("not a checkpoint (bad magic)");
        }
        let version = r.u32()?;
        if version != VERSION {
            return bad(format!("unsupported format version {version}"));
        }
        let count = r.u32()? as usize;
        let mut c = Container::new();
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            if rank > MAX_RANK {
                return bad(format!("entry {name}: rank {rank} too large"));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut n: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?;
                n = n.checked_mul(d).ok_or_else(|| Error::Checkpoint("element count overflow".into()))?;
                shape.push(d);
            }
            let nbytes = n.checked_mul(8).ok_or_else(|| Error::Checkpoint("element count overflow".into()))?;
            let raw = r.take(nbytes)?;
            let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            if c.entries.insert(name.to_string(), (shape, data)).is_some() {
                return bad(format!("duplicate entry {name}"));
            }
        }
        if r.take(4)? != END {
            return bad("missing end marker");
        }
        if r.pos != bytes.len() {
            return bad("trailing bytes after end marker");
        }
        Ok(c)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => bad(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn to_count(v: f64, what: &str) -> Result<usize> {
    if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as usize)
    } else {
        bad(format!("{what} must be a non-negative integer, got {v}"))
    }
}

fn scalar(c: &Container, name: &str) -> Result<f64> {
    match c.get(name)?.1 {
        [v] => Ok(*v),
        _ => bad(format!("entry {name} must hold one value")),
    }
}

fn array3(c: &Container, name: &str) -> Result<[f64; 3]> {
    c.get(name)?.1.try_into().map_err(|_| Error::Checkpoint(format!("entry {name} must hold three values")))
}

/// Packs every piece of detector state into a container.
pub fn to_container(det: &Detector) -> Result<Container> {
    let a = det.arch();
    let mut c = Container::new();
    c.insert_vec(
        "arch",
        vec![
            a.input_size as f64,
            a.filters[0] as f64,
            a.filters[1] as f64,
            a.filters[2] as f64,
            a.conv_kernel as f64,
            a.conv_stride as f64,
            a.pool_kernel as f64,
            a.pool_stride as f64,
            a.hidden as f64,
            a.dropout,
        ],
    )?;
    c.insert_vec("norm.mean", det.norm.mean.to_vec())?;
    c.insert_vec("norm.std", det.norm.std.to_vec())?;
    let params = det.cnn.param_tensors();
    for i in 0..3 {
        let k = &params[i];
        c.insert(&format!("conv{}.kernel", i + 1), k.shape(), k.data().to_vec())?;
        c.insert_vec(&format!("conv{}.bias", i + 1), params[3 + i].data().to_vec())?;
    }
    let bn = &det.cnn.bn;
    c.insert_vec("bn.gamma", bn.gamma.clone())?;
    c.insert_vec("bn.beta", bn.beta.clone())?;
    c.insert_vec("bn.running_mean", bn.running_mean.clone())?;
    c.insert_vec("bn.running_var", bn.running_var.clone())?;
    c.insert_vec("bn.hyper", vec![bn.momentum, bn.eps])?;
    let layout = det.head.layout;
    c.insert_vec("head.layout", vec![layout.d_in as f64, layout.hidden.map_or(0.0, |h| h as f64)])?;
    c.insert_vec("head.precisions", vec![det.head.alpha, det.head.beta])?;
    c.insert_vec("head.weights", det.head.weights.clone())?;
    if let Some(q) = &det.posterior {
        c.insert_vec("q.means", q.means.clone())?;
        c.insert_vec("q.log_stds", q.log_stds.clone())?;
    }
    if let Some(g) = det.gamma {
        c.insert_vec("gamma", vec![g])?;
    }
    c.insert_vec("meta", vec![det.percentile, f64::from(u8::from(det.trained))])?;
    Ok(c)
}

/// Rebuilds a detector, validating every shape against the stored architecture.
pub fn from_container(c: &Container) -> Result<Detector> {
    let a = c.get("arch")?.1;
    if a.len() != 10 {
        return bad("arch entry must hold ten values");
    }
    let arch = Architecture {
        input_size: to_count(a[0], "input_size")?,
        filters: [to_count(a[1], "filters")?, to_count(a[2], "filters")?, to_count(a[3], "filters")?],
        conv_kernel: to_count(a[4], "conv_kernel")?,
        conv_stride: to_count(a[5], "conv_stride")?,
        pool_kernel: to_count(a[6], "pool_kernel")?,
        pool_stride: to_count(a[7], "pool_stride")?,
        hidden: to_count(a[8], "hidden")?,
        dropout: a[9],
    };
    let wrap = |e: Error| Error::Checkpoint(e.to_string());
    arch.validate().map_err(wrap)?;
    let norm = NormStats { mean: array3(c, "norm.mean")?, std: array3(c, "norm.std")? };
    if norm.std.iter().any(|s| !(*s > 0.0)) {
        return bad("normalisation std must be positive");
    }
    let kernels = [c.tensor("conv1.kernel")?, c.tensor("conv2.kernel")?, c.tensor("conv3.kernel")?];
    let biases = [c.tensor("conv1.bias")?, c.tensor("conv2.bias")?, c.tensor("conv3.bias")?];
    let hyper = c.get("bn.hyper")?.1;
    if hyper.len() != 2 {
        return bad("bn.hyper must hold two values");
    }
    let bn = BatchNormState {
        gamma: c.vec("bn.gamma")?,
        beta: c.vec("bn.beta")?,
        running_mean: c.vec("bn.running_mean")?,
        running_var: c.vec("bn.running_var")?,
        momentum: hyper[0],
        eps: hyper[1],
    };
    let ch = bn.gamma.len();
    if bn.beta.len() != ch || bn.running_mean.len() != ch || bn.running_var.len() != ch {
        return bad("batch norm vectors differ in length");
    }
    let cnn = FineToCoarseCnn::from_parts(arch, kernels, biases, bn).map_err(wrap)?;
    let lay = c.get("head.layout")?.1;
    if lay.len() != 2 {
        return bad("head.layout must hold two values");
    }
    let hidden = to_count(lay[1], "hidden")?;
    let layout = HeadLayout { d_in: to_count(lay[0], "d_in")?, hidden: (hidden > 0).then_some(hidden) };
    if layout.d_in != cnn.feature_len() {
        return bad("head input width does not match the feature extractor");
    }
    let prec = c.get("head.precisions")?.1;
    if prec.len() != 2 {
        return bad("head.precisions must hold two values");
    }
    let head = BayesianHead::with_weights(layout, prec[0], prec[1], c.vec("head.weights")?).map_err(wrap)?;
    let posterior = match (c.get("q.means"), c.get("q.log_stds")) {
        (Ok((_, m)), Ok((_, s))) => {
            if m.len() != layout.param_count() {
                return bad("variational means do not match the head");
            }
            Some(VariationalPosterior::new(m.to_vec(), s.to_vec()).map_err(wrap)?)
        }
        (Err(_), Err(_)) => None,
        _ => return bad("variational posterior is incomplete"),
    };
    let gamma = match c.get("gamma") {
        Ok(_) => Some(scalar(c, "gamma")?),
        Err(_) => None,
    };
    let meta = c.get("meta")?.1;
    if meta.len() != 2 {
        return bad("meta must hold two values");
    }
    Ok(Detector { norm, cnn, head, posterior, gamma, percentile: meta[0], trained: meta[1] != 0.0 })
}

pub fn encode(det: &Detector) -> Result<Vec<u8>> {
    Ok(to_container(det)?.encode())
}

pub fn decode(bytes: &[u8]) -> Result<Detector> {
    from_container(&Container::decode(bytes)?)
}

/// Writes through a sibling temp file and a rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(det: &Detector, path: &Path) -> Result<()> {
    write_atomic(path, &encode(det)?)
}

pub fn load(path: &Path) -> Result<Detector> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Detector {
        let arch = Architecture { hidden: 8, ..Architecture::reduced() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut d = Detector::new(arch, 0.5, 20.0, &mut rng).unwrap();
        d.gamma = Some(0.25);
        d.trained = true;
        d
    }

    #[test]
    fn round_trip_is_exact() {
        let d = small();
        let back = decode(&encode(&d).unwrap()).unwrap();
        assert_eq!(back, d);
        let mut v = d.clone();
        v.posterior = Some(VariationalPosterior::around(v.head.weights.clone(), 0.1));
        assert_eq!(decode(&encode(&v).unwrap()).unwrap(), v);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = encode(&small()).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        assert!(matches!(decode(&bytes[..20]), Err(Error::Checkpoint(_))));
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(Error::Checkpoint(_))));
        let mut b = bytes.clone();
        b[8] = 9;
        assert!(matches!(decode(&b), Err(Error::Checkpoint(_))));
        let mut b = bytes;
        b.push(0);
        assert!(matches!(decode(&b), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn save_replaces_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let d = small();
        save(&d, &p).unwrap();
        save(&d, &p).unwrap();
        assert_eq!(load(&p).unwrap(), d);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
