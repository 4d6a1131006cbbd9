//! Self-describing little-endian checkpoint files. The layout is documented
//! in `docs/checkpoint-format.md`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::optim::{Hyper, OptimState, OptimizerKind};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"TVLB";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Counters needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunState {
    pub seed: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Run configuration as `key=value` lines.
    pub config: String,
    pub params: ParamStore<f32>,
    pub optim: Option<OptimState<f32>>,
    pub state: RunState,
}

fn put_tensors<'a>(out: &mut Vec<u8>, items: impl ExactSizeIterator<Item = (&'a String, &'a Tensor<f32>)>) {
    out.extend((items.len() as u32).to_le_bytes());
    for (name, t) in items {
        out.extend((name.len() as u16).to_le_bytes());
        out.extend(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
}

fn encode_optim(o: &OptimState<f32>) -> Vec<u8> {
    let mut out = vec![
        match o.kind {
            OptimizerKind::AdamW => 0,
            OptimizerKind::Lion => 1,
        },
        o.decay_all as u8,
    ];
    out.extend(o.step.to_le_bytes());
    for h in [o.hyper.beta1, o.hyper.beta2, o.hyper.eps, o.hyper.weight_decay] {
        out.extend(h.to_le_bytes());
    }
    put_tensors(&mut out, o.m.iter());
    put_tensors(&mut out, o.v.iter());
    out
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut sections: Vec<([u8; 4], Vec<u8>)> = vec![(*b"CONF", ck.config.as_bytes().to_vec())];
    let mut tens = Vec::new();
    put_tensors(&mut tens, ck.params.iter().collect::<Vec<_>>().into_iter());
    sections.push((*b"TENS", tens));
    if let Some(o) = &ck.optim {
        sections.push((*b"OPTM", encode_optim(o)));
    }
    let mut stat = Vec::new();
    for v in [ck.state.seed, ck.state.epoch, ck.state.step] {
        stat.extend(v.to_le_bytes());
    }
    sections.push((*b"STAT", stat));

    let header = 4 + 2 + 2 + sections.len() * 20;
    let mut out = Vec::with_capacity(header + sections.iter().map(|s| s.1.len()).sum::<usize>());
    out.extend(MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend((sections.len() as u16).to_le_bytes());
    let mut offset = header as u64;
    for (tag, body) in &sections {
        out.extend(tag);
        out.extend(offset.to_le_bytes());
        out.extend((body.len() as u64).to_le_bytes());
        offset += body.len() as u64;
    }
    for (_, body) in &sections {
        out.extend(body);
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Inconsistent(format!(
                "{} section ends at byte {} but {n} more bytes are needed",
                self.what, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensors(&mut self) -> Result<BTreeMap<String, Tensor<f32>>> {
        let n = self.u32()?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let len = self.u16()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::Inconsistent(format!("non-UTF-8 tensor name in {}", self.what)))?
                .to_string();
            let rank = self.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let bytes = self.take(numel * 4)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Inconsistent(format!("tensor {name}: {e}")))?;
            out.insert(name, t);
        }
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Inconsistent(format!(
                "{} section has {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path)?;
    if buf.len() < 8 {
        if buf.len() >= 4 && buf[..4] != MAGIC {
            return Err(Error::BadMagic(buf[..4].try_into().unwrap()));
        }
        return Err(Error::Inconsistent(format!("file is only {} bytes", buf.len())));
    }
    let magic: [u8; 4] = buf[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let mut head = Reader { buf: &buf, pos: 4, what: "header" };
    let version = head.u16()?;
    if version > CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let count = head.u16()?;
    let mut sections = BTreeMap::new();
    for _ in 0..count {
        let tag: [u8; 4] = head.take(4)?.try_into().unwrap();
        let (off, len) = (head.u64()? as usize, head.u64()? as usize);
        if off.checked_add(len).is_none_or(|end| end > buf.len()) {
            return Err(Error::Inconsistent(format!(
                "section {} claims bytes {off}..{} of a {}-byte file",
                String::from_utf8_lossy(&tag),
                off.saturating_add(len),
                buf.len()
            )));
        }
        sections.insert(tag, &buf[off..off + len]);
    }
    let section = |tag: &[u8; 4], what: &'static str| -> Result<Reader> {
        sections
            .get(tag)
            .map(|b| Reader { buf: b, pos: 0, what })
            .ok_or_else(|| Error::Inconsistent(format!("missing {what} section")))
    };

    let config = String::from_utf8(section(b"CONF", "CONF")?.buf.to_vec())
        .map_err(|_| Error::Inconsistent("config section is not UTF-8".into()))?;
    let mut r = section(b"TENS", "TENS")?;
    let params: ParamStore<f32> = r.tensors()?.into_iter().collect();
    r.finish()?;

    let optim = match sections.contains_key(b"OPTM") {
        false => None,
        true => {
            let mut r = section(b"OPTM", "OPTM")?;
            let kind = match r.u8()? {
                0 => OptimizerKind::AdamW,
                1 => OptimizerKind::Lion,
                k => return Err(Error::Inconsistent(format!("unknown optimizer tag {k}"))),
            };
            let decay_all = r.u8()? != 0;
            let step = r.u64()?;
            let hyper = Hyper {
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
                weight_decay: r.f64()?,
            };
            let m = r.tensors()?;
            let v = r.tensors()?;
            r.finish()?;
            for (k, t) in m.iter().chain(v.iter()) {
                match params.get(k) {
                    Some(p) if p.shape() == t.shape() => {}
                    _ => return Err(Error::Inconsistent(format!("moment buffer {k} does not match a parameter"))),
                }
            }
            Some(OptimState {
                kind,
                hyper,
                decay_all,
                step,
                m,
                v,
            })
        }
    };

    let mut r = section(b"STAT", "STAT")?;
    let state = RunState {
        seed: r.u64()?,
        epoch: r.u64()?,
        step: r.u64()?,
    };
    r.finish()?;
    Ok(Checkpoint {
        config,
        params,
        optim,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Vit};
    use crate::optim::Hyper;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let m = Vit::<f32>::new(ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut o = OptimState::new(OptimizerKind::AdamW, Hyper::adamw(0.05));
        let grads: ParamStore<f32> = m.params().iter().map(|(k, t)| (k.clone(), Tensor::full(t.shape(), 0.1))).collect();
        let mut p = m.params().clone();
        o.step(&mut p, &grads, 1e-3).unwrap();
        Checkpoint {
            config: "dim=32\nheads=4\n".into(),
            params: p,
            optim: Some(o),
            state: RunState { seed: 9, epoch: 3, step: 120 },
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let ck = sample();
        save_checkpoint(&p, &ck).unwrap();
        let back = load_checkpoint(&p).unwrap();
        for (k, t) in ck.params.iter() {
            let b = back.params.get(k).unwrap();
            assert!(t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back, ck);
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&p, &sample()).unwrap();
        let bytes = fs::read(&p).unwrap();

        fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Inconsistent(_))));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::BadMagic(_))));

        let mut newer = bytes.clone();
        newer[4..6].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
        fs::write(&p, &newer).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::UnsupportedVersion { .. })));

        for cut in [0, 3, 7, 30] {
            fs::write(&p, &bytes[..cut]).unwrap();
            assert!(load_checkpoint(&p).is_err());
        }
    }
}
