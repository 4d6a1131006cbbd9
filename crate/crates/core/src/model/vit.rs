//! The vision transformer: tokenization, pre-norm blocks with optional
//! low-rank Q/K/V projections, and the (multi-)CLS classification head.
//!
//! Linear weights are stored `[out, in]` and applied as `x · Wᵀ`. A factored
//! projection stores `w_{q,k,v}_down: [d_c, C]` and `w_{q,k,v}_up: [C, d_c]`,
//! so its effective matrix is `up · down`.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, PosEmbed, Projection};
use crate::model::init::{positional_table, trunc_normal, Whitening, INIT_STD};
use crate::model::params::ParamStore;
use crate::tensor::{Activation, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters of one model recorded as leaves on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::Graph(format!("parameter {path} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    fn has(&self, path: &str) -> bool {
        self.vars.contains_key(path)
    }
}

/// Per-sample branch factors for one block: `0` drops the branch, `1/(1-p)`
/// keeps it. `None` leaves the branch untouched.
#[derive(Debug, Clone, Default)]
pub struct BranchMasks<T> {
    pub attn: Option<Vec<T>>,
    pub ffn: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vit<T> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    fixed_pos: Option<Tensor<T>>,
}

fn block_path(i: usize, rest: &str) -> String {
    format!("blocks.{i}.{rest}")
}

impl<T: Scalar> Vit<T> {
    pub fn new(cfg: ModelConfig, rng: &mut dyn RngCore) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let mut p = ParamStore::new();
        let tn = |shape: &[usize], rng: &mut dyn RngCore| trunc_normal::<T>(shape, INIT_STD, rng);

        p.insert("patch_embed.weight", tn(&[c, cfg.patch_dim()], rng));
        p.insert("patch_embed.bias", Tensor::zeros(&[c]));
        p.insert("cls_token", tn(&[cfg.num_cls_tokens, c], rng));
        let table = positional_table::<T>(cfg.pos_embed, cfg.num_patches(), c, rng)?;
        let fixed_pos = match cfg.pos_embed {
            PosEmbed::Learnable => {
                p.insert("pos_embed", table.expect("learnable table"));
                None
            }
            _ => table,
        };
        for i in 0..cfg.depth {
            for norm in ["norm1", "norm2"] {
                p.insert(block_path(i, &format!("{norm}.gamma")), Tensor::ones(&[c]));
                p.insert(block_path(i, &format!("{norm}.beta")), Tensor::zeros(&[c]));
            }
            for proj in Projection::ALL {
                let name = proj.short();
                if cfg.mla.variant.compresses(proj) {
                    let dc = cfg.mla.d_c;
                    p.insert(block_path(i, &format!("attn.w_{name}_down")), tn(&[dc, c], rng));
                    p.insert(block_path(i, &format!("attn.w_{name}_up")), tn(&[c, dc], rng));
                } else {
                    p.insert(block_path(i, &format!("attn.w_{name}")), tn(&[c, c], rng));
                }
            }
            p.insert(block_path(i, "attn.w_o"), tn(&[c, c], rng));
            let hid = cfg.hidden_dim();
            p.insert(block_path(i, "ffn.w1"), tn(&[hid, c], rng));
            p.insert(block_path(i, "ffn.b1"), Tensor::zeros(&[hid]));
            p.insert(block_path(i, "ffn.w2"), tn(&[c, hid], rng));
            p.insert(block_path(i, "ffn.b2"), Tensor::zeros(&[c]));
        }
        p.insert("norm.gamma", Tensor::ones(&[c]));
        p.insert("norm.beta", Tensor::zeros(&[c]));
        p.insert("head.w1", tn(&[c, cfg.num_cls_tokens * c], rng));
        p.insert("head.b1", Tensor::zeros(&[c]));
        p.insert("head.w2", tn(&[cfg.num_classes, c], rng));
        p.insert("head.b2", Tensor::zeros(&[cfg.num_classes]));
        Ok(Vit {
            cfg,
            params: p,
            fixed_pos,
        })
    }

    /// Rebuilds a model around existing parameters (checkpoint load). Every
    /// expected path must be present with the expected shape.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reference = Vit::<T>::new(cfg.clone(), &mut rng)?;
        for (path, t) in reference.params.iter() {
            match params.get(path) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => return Err(Error::shape("from_params", p.shape(), t.shape())),
                None => return Err(Error::Config(format!("missing parameter {path}"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Config("unexpected extra parameters".into()));
        }
        Ok(Vit {
            cfg,
            params,
            fixed_pos: reference.fixed_pos,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Vit<U> {
        Vit {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            fixed_pos: self.fixed_pos.as_ref().map(|t| t.cast()),
        }
    }

    /// Installs whitened patch-embedding filters.
    pub fn apply_whitening(&mut self, wh: Whitening<T>) -> Result<()> {
        let w = self.params.get("patch_embed.weight").expect("patch embed");
        if w.shape() != wh.weight.shape() {
            return Err(Error::shape("apply_whitening", w.shape(), wh.weight.shape()));
        }
        self.params.insert("patch_embed.weight", wh.weight);
        self.params.insert("patch_embed.bias", wh.bias);
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), requires_grad)))
            .collect();
        Bound { vars }
    }

    /// Pairs already-recorded vars with parameter paths in sorted order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.params.len() {
            return Err(Error::Graph(format!(
                "expected {} parameter vars, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        let vars = self.params.paths().cloned().zip(vars.iter().copied()).collect();
        Ok(Bound { vars })
    }

    fn linear(&self, tape: &mut Tape<T>, b: &Bound, x: Var, w: &str, bias: Option<&str>) -> Result<Var> {
        let y = tape.matmul_t(x, b.get(w)?, false, true)?;
        match bias {
            Some(bp) => tape.add_trailing(y, b.get(bp)?),
            None => Ok(y),
        }
    }

    fn project(&self, tape: &mut Tape<T>, b: &Bound, prefix: &str, proj: Projection, x: Var) -> Result<Var> {
        let full = format!("{prefix}.w_{}", proj.short());
        if b.has(&full) {
            return tape.matmul_t(x, b.get(&full)?, false, true);
        }
        let latent = tape.matmul_t(x, b.get(&format!("{full}_down"))?, false, true)?;
        tape.matmul_t(latent, b.get(&format!("{full}_up"))?, false, true)
    }

    /// Patch embedding, positional addition and CLS prepend. Returns the token
    /// matrix `[B·N, C]` and the batch size.
    pub fn embed(&self, tape: &mut Tape<T>, b: &Bound, images: &Tensor<T>) -> Result<(Var, usize)> {
        let cfg = &self.cfg;
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != cfg.image_size || s[3] != cfg.image_size {
            return Err(Error::Config(format!(
                "expected images [B, 3, {0}, {0}], got {s:?}",
                cfg.image_size
            )));
        }
        let batch = s[0];
        let (l, c) = (cfg.num_patches(), cfg.embed_dim);
        let patches = tape.constant(patchify_batch(images, cfg.patch_size)?);
        let e = self.linear(tape, b, patches, "patch_embed.weight", Some("patch_embed.bias"))?;
        let mut e = tape.reshape(e, &[batch, l, c])?;
        if cfg.pos_embed == PosEmbed::Learnable {
            e = tape.add_trailing(e, b.get("pos_embed")?)?;
        } else if let Some(table) = &self.fixed_pos {
            let pos = tape.constant(table.clone());
            e = tape.add_trailing(e, pos)?;
        }
        let x = tape.prepend_tokens(b.get("cls_token")?, e)?;
        let x = tape.reshape(x, &[batch * cfg.seq_len(), c])?;
        Ok((x, batch))
    }

    /// Multi-head self-attention of block `i` over `x: [B·N, C]`.
    pub fn attention(&self, tape: &mut Tape<T>, b: &Bound, i: usize, x: Var, batch: usize) -> Result<Var> {
        let cfg = &self.cfg;
        let rows = tape.value(x).shape()[0];
        let seq = rows / batch;
        let prefix = format!("blocks.{i}.attn");
        let h = cfg.num_heads;
        let q = self.project(tape, b, &prefix, Projection::Query, x)?;
        let k = self.project(tape, b, &prefix, Projection::Key, x)?;
        let v = self.project(tape, b, &prefix, Projection::Value, x)?;
        let q = tape.split_heads(q, batch, seq, h)?;
        let k = tape.split_heads(k, batch, seq, h)?;
        let v = tape.split_heads(v, batch, seq, h)?;
        let scores = tape.matmul_t(q, k, false, true)?;
        let scores = tape.scale(scores, T::of(1.0 / (cfg.head_dim() as f64).sqrt()))?;
        let weights = tape.softmax(scores)?;
        let heads = tape.matmul(weights, v)?;
        let merged = tape.merge_heads(heads, batch, seq, h)?;
        tape.matmul_t(merged, b.get(&format!("{prefix}.w_o"))?, false, true)
    }

    pub fn ffn(&self, tape: &mut Tape<T>, b: &Bound, i: usize, x: Var) -> Result<Var> {
        let h = self.linear(tape, b, x, &block_path(i, "ffn.w1"), Some(&block_path(i, "ffn.b1")))?;
        let h = tape.activation(h, Activation::Gelu)?;
        self.linear(tape, b, h, &block_path(i, "ffn.w2"), Some(&block_path(i, "ffn.b2")))
    }

    /// Pre-norm residual block with explicit drop-path factors.
    pub fn block_with_masks(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        i: usize,
        x: Var,
        batch: usize,
        masks: BranchMasks<T>,
    ) -> Result<Var> {
        let eps = self.cfg.ln_eps;
        let n1 = tape.layer_norm(x, b.get(&block_path(i, "norm1.gamma"))?, b.get(&block_path(i, "norm1.beta"))?, eps)?;
        let mut a = self.attention(tape, b, i, n1, batch)?;
        if let Some(m) = masks.attn {
            a = tape.scale_groups(a, m)?;
        }
        let x = tape.add(x, a)?;
        let n2 = tape.layer_norm(x, b.get(&block_path(i, "norm2.gamma"))?, b.get(&block_path(i, "norm2.beta"))?, eps)?;
        let mut f = self.ffn(tape, b, i, n2)?;
        if let Some(m) = masks.ffn {
            f = tape.scale_groups(f, m)?;
        }
        tape.add(x, f)
    }

    /// Block `i` with drop-path sampled from `rng` in train mode.
    #[allow(clippy::too_many_arguments)]
    pub fn block(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        i: usize,
        x: Var,
        batch: usize,
        drop_prob: f64,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&drop_prob) {
            return Err(Error::Config(format!("drop probability {drop_prob} outside [0, 1)")));
        }
        let masks = if mode == Mode::Train && drop_prob > 0.0 {
            BranchMasks {
                attn: Some(drop_path_mask(batch, drop_prob, rng)),
                ffn: Some(drop_path_mask(batch, drop_prob, rng)),
            }
        } else {
            BranchMasks::default()
        };
        self.block_with_masks(tape, b, i, x, batch, masks)
    }

    /// Concatenates the CLS-token outputs of `x: [B·N, C]` and applies the
    /// two-layer head. Returns logits `[B, num_classes]`.
    pub fn cls_head(&self, tape: &mut Tape<T>, b: &Bound, x: Var, batch: usize) -> Result<Var> {
        let c = self.cfg.embed_dim;
        let rows = tape.value(x).shape()[0];
        let x3 = tape.reshape(x, &[batch, rows / batch, c])?;
        let cls = tape.take_leading(x3, self.cfg.num_cls_tokens)?;
        let h = self.linear(tape, b, cls, "head.w1", Some("head.b1"))?;
        let h = tape.activation(h, Activation::Gelu)?;
        self.linear(tape, b, h, "head.w2", Some("head.b2"))
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        images: &Tensor<T>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let (mut x, batch) = self.embed(tape, b, images)?;
        for i in 0..self.cfg.depth {
            x = self.block(tape, b, i, x, batch, self.cfg.drop_prob(i), mode, rng)?;
        }
        let x = tape.layer_norm(x, b.get("norm.gamma")?, b.get("norm.beta")?, self.cfg.ln_eps)?;
        self.cls_head(tape, b, x, batch)
    }

    /// Eval-mode logits without recording gradients.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, &b, images, Mode::Eval, &mut unused)?;
        Ok(tape.value(out).clone())
    }
}

/// Per-sample drop-path factors: 0 with probability `p`, else `1/(1-p)`.
pub fn drop_path_mask<T: Scalar>(batch: usize, p: f64, rng: &mut dyn RngCore) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..batch)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

/// `[3, H, W]` → `[L, 3P²]`; row `i·(W/P)+j` is the patch at grid `(i, j)`,
/// flattened channel-major, then row, then column.
pub fn patchify<T: Scalar>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("patchify", s, &[3, p, p]));
    }
    let batched = image.clone().reshape(&[1, s[0], s[1], s[2]])?;
    patchify_batch(&batched, p)
}

/// `[B, 3, H, W]` → `[B·L, 3P²]`.
pub fn patchify_batch<T: Scalar>(images: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || p == 0 || s[2] % p != 0 || s[3] % p != 0 {
        return Err(Error::Config(format!("image shape {s:?} is not divisible into {p}×{p} patches")));
    }
    let (bsz, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / p, w / p);
    let d = ch * p * p;
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for b in 0..bsz {
        for gi in 0..gh {
            for gj in 0..gw {
                for c in 0..ch {
                    for r in 0..p {
                        let base = ((b * ch + c) * h + gi * p + r) * w + gj * p;
                        out.extend_from_slice(&src[base..base + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![bsz * gh * gw, d], out)
}
