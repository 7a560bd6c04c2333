//! Versioned binary snapshot of a trained model.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DCNF"                      magic
//! u32                         format version
//! u32 len, [u8; len]          backbone config text (UTF-8)
//! u32 count                   number of tensor sections, then per section:
//!   u32 len, [u8; len]        name (UTF-8)
//!   u32 ndim, [u32; ndim]     shape
//!   [f32; prod(shape)]        values
//! u8 flag                     1 when a mean image follows
//!   u32 len, [f32; len]       train-split mean image
//! u64                         training seed
//! u32                         epochs completed
//! ```
//!
//! Loading consumes the file exactly; short or over-long input is rejected.

use std::path::Path;

use thiserror::Error;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::fuzzy::FuzzyHeadParams;
use crate::model::{Dcnfis, HEAD_PARAM_NAMES};
use crate::tensor::Tensor;
use crate::util;

pub const MAGIC: &[u8; 4] = b"DCNF";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Dcnfis<f32>,
    /// Mean image subtracted from inputs during training, if any.
    pub mean: Option<Vec<f32>>,
    pub seed: u64,
    pub epoch: u32,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend((v as u32).to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }

    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend(x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated(self.buf.len())),
        }
    }

    fn u8(&mut self) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Corrupt("invalid UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, CheckpointError> {
        let bytes = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated(self.buf.len()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.extend(VERSION.to_le_bytes());
        w.bytes(self.model.backbone.config().to_string().as_bytes());
        let head = &self.model.head;
        let (c, v) = (head.n_rules(), head.n_features());
        let mut sections: Vec<(String, Vec<usize>, &[f32])> = self
            .model
            .backbone
            .all_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec(), t.data()))
            .collect();
        for (name, data) in HEAD_PARAM_NAMES.iter().zip([&head.mu, &head.beta, &head.w, &head.b]) {
            let shape = if *name == "head.b" { vec![c] } else { vec![c, v] };
            sections.push((name.to_string(), shape, data));
        }
        w.u32(sections.len());
        for (name, shape, data) in sections {
            w.bytes(name.as_bytes());
            w.u32(shape.len());
            for d in shape {
                w.u32(d);
            }
            w.f32s(data);
        }
        match &self.mean {
            Some(m) => {
                w.0.push(1);
                w.u32(m.len());
                w.f32s(m);
            }
            None => w.0.push(0),
        }
        w.0.extend(self.seed.to_le_bytes());
        w.0.extend(self.epoch.to_le_bytes());
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic).into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: VERSION }.into());
        }
        let config: BackboneConfig = r
            .string()?
            .parse()
            .map_err(|e: Error| CheckpointError::Corrupt(format!("backbone config: {e}")))?;
        let count = r.u32()? as usize;
        let mut sections = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<_, _>>()?;
            let n = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or(CheckpointError::Truncated(buf.len()))?;
            let data = r.f32s(n)?;
            sections.push((name, shape, data));
        }
        let mean = match r.u8()? {
            0 => None,
            1 => {
                let n = r.u32()? as usize;
                Some(r.f32s(n)?)
            }
            f => return Err(CheckpointError::Corrupt(format!("normalization flag {f}")).into()),
        };
        let seed = r.u64()?;
        let epoch = r.u32()?;
        if r.pos != buf.len() {
            return Err(CheckpointError::TrailingBytes(buf.len() - r.pos).into());
        }
        let model = assemble(config, sections).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        Ok(Self { model, mean, seed, epoch })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&util::read_file(path)?)
    }
}

fn assemble(config: BackboneConfig, sections: Vec<(String, Vec<usize>, Vec<f32>)>) -> Result<Dcnfis<f32>> {
    let mut backbone = Backbone::build(config, 0)?;
    let mut sections: Vec<Option<(String, Vec<usize>, Vec<f32>)>> = sections.into_iter().map(Some).collect();
    let mut take = |name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
        let slot = sections
            .iter_mut()
            .find(|s| s.as_ref().is_some_and(|(n, _, _)| n == name))
            .ok_or_else(|| Error::Invalid(format!("missing section {name}")))?;
        let (_, shape, data) = slot.take().unwrap();
        Ok((shape, data))
    };
    let names: Vec<(String, Vec<usize>)> =
        backbone.all_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    let mut loaded = Vec::with_capacity(names.len());
    for (name, want) in &names {
        let (shape, data) = take(name)?;
        if &shape != want {
            return Err(Error::Invalid(format!("section {name} has shape {shape:?}, expected {want:?}")));
        }
        loaded.push(Tensor::new(shape, data)?);
    }
    let mut head = Vec::with_capacity(4);
    for name in HEAD_PARAM_NAMES {
        head.push(take(name)?);
    }
    let (mu_shape, _) = &head[0];
    let [c, v] = match mu_shape[..] {
        [c, v] => [c, v],
        _ => return Err(Error::Invalid(format!("head.mu has shape {mu_shape:?}"))),
    };
    for ((name, (shape, _)), want) in HEAD_PARAM_NAMES.iter().zip(&head).zip([vec![c, v], vec![c, v], vec![c, v], vec![c]]) {
        if *shape != want {
            return Err(Error::Invalid(format!("section {name} has shape {shape:?}, expected {want:?}")));
        }
    }
    if let Some(extra) = sections.iter().flatten().next() {
        return Err(Error::Invalid(format!("unexpected section {}", extra.0)));
    }
    // all_tensors() lists params first, then buffers
    let mut loaded = loaded.into_iter();
    for (_, t) in backbone.params_mut() {
        *t = loaded.next().unwrap();
    }
    for (_, t) in backbone.buffers_mut() {
        *t = loaded.next().unwrap();
    }
    let mut head = head.into_iter().map(|(_, d)| d);
    let params = FuzzyHeadParams::new(c, v, head.next().unwrap(), head.next().unwrap(), head.next().unwrap(), head.next().unwrap())?;
    Dcnfis::from_parts(backbone, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg: BackboneConfig = "1x6x6: conv(2,3,1,0) > bn > relu > residual[conv(2,3,1,1)] > flatten".parse().unwrap();
        let mut model = Dcnfis::new(cfg, 3, 9).unwrap();
        model.head.beta[1] = -0.25;
        if let Some((_, t)) = model.backbone.buffers_mut().into_iter().next() {
            t.data_mut()[0] = 0.125;
        }
        Checkpoint { model, mean: Some(vec![0.5; 36]), seed: 42, epoch: 7 }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().to_bytes();
        for cut in 0..bytes.len() {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "accepted prefix of {cut} bytes");
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = sample().to_bytes();
        bytes.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint(CheckpointError::TrailingBytes(1)))
        ));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = sample().to_bytes();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(CheckpointError::VersionMismatch { found: 2, expected: 1 })));
        assert!(err.to_string().contains("version 2"));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(CheckpointError::BadMagic(_)))));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let ck = sample();
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
    }
}
