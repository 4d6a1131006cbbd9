//! AdamW and Lion with decoupled weight decay, and the warmup-cosine
//! learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    AdamW,
    Lion,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Lion => "lion",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(OptimizerKind::AdamW),
            "lion" => Ok(OptimizerKind::Lion),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Hyper {
    pub fn adamw(weight_decay: f64) -> Self {
        Hyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn lion(weight_decay: f64) -> Self {
        Hyper {
            beta1: 0.9,
            beta2: 0.99,
            eps: 0.0,
            weight_decay,
        }
    }

    pub fn for_kind(kind: OptimizerKind, weight_decay: f64) -> Self {
        match kind {
            OptimizerKind::AdamW => Hyper::adamw(weight_decay),
            OptimizerKind::Lion => Hyper::lion(weight_decay),
        }
    }
}

/// Peak learning rate and weight decay used when a run does not override
/// them.
pub fn default_lr_wd(kind: OptimizerKind) -> (f64, f64) {
    match kind {
        OptimizerKind::AdamW => (2e-3, 0.05),
        OptimizerKind::Lion => (2e-4, 0.5),
    }
}

/// Biases, layer-norm affines, CLS tokens and learnable positional tables are
/// not decayed.
pub fn decays(path: &str) -> bool {
    if path == "cls_token" || path == "pos_embed" {
        return false;
    }
    let last = path.rsplit('.').next().unwrap_or(path);
    !matches!(last, "bias" | "b1" | "b2" | "gamma" | "beta")
}

/// One AdamW coordinate update at step `t ≥ 1`. Returns the new parameter.
#[inline]
pub fn adamw_update(theta: f64, g: f64, m: &mut f64, v: &mut f64, t: u64, lr: f64, wd: f64, h: &Hyper) -> f64 {
    *m = h.beta1 * *m + (1.0 - h.beta1) * g;
    *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
    let mhat = *m / (1.0 - h.beta1.powi(t as i32));
    let vhat = *v / (1.0 - h.beta2.powi(t as i32));
    theta - lr * (mhat / (vhat.sqrt() + h.eps)) - lr * wd * theta
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One Lion coordinate update. Returns the new parameter.
#[inline]
pub fn lion_update(theta: f64, g: f64, m: &mut f64, lr: f64, wd: f64, h: &Hyper) -> f64 {
    let u = sign(h.beta1 * *m + (1.0 - h.beta1) * g);
    let out = theta - lr * u - lr * wd * theta;
    *m = h.beta2 * *m + (1.0 - h.beta2) * g;
    out
}

/// Moment buffers and step counter. Buffers are keyed by parameter path and
/// created lazily on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub kind: OptimizerKind,
    pub hyper: Hyper,
    /// Apply weight decay to every parameter, ignoring [`decays`].
    pub decay_all: bool,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    /// Second moments (AdamW only).
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(kind: OptimizerKind, hyper: Hyper) -> Self {
        OptimState {
            kind,
            hyper,
            decay_all: false,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> OptimState<U> {
        let cast = |b: &BTreeMap<String, Tensor<T>>| b.iter().map(|(k, t)| (k.clone(), t.cast())).collect();
        OptimState {
            kind: self.kind,
            hyper: self.hyper,
            decay_all: self.decay_all,
            step: self.step,
            m: cast(&self.m),
            v: cast(&self.v),
        }
    }

    /// Applies one update to every parameter with a gradient, in sorted path
    /// order.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64) -> Result<()> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(Error::Validation(format!("learning rate {lr} must be finite and >= 0")));
        }
        for (path, g) in grads.iter() {
            let p = params
                .get(path)
                .ok_or_else(|| Error::Validation(format!("gradient for unknown parameter {path}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step;
        let h = self.hyper;
        for (path, p) in params.iter_mut() {
            let Some(g) = grads.get(path) else { continue };
            let wd = if self.decay_all || decays(path) { h.weight_decay } else { 0.0 };
            let m = self.m.entry(path.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            match self.kind {
                OptimizerKind::AdamW => {
                    let v = self.v.entry(path.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
                    let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
                    for i in 0..pd.len() {
                        let (mut mi, mut vi) = (md[i].as_f64(), vd[i].as_f64());
                        let th = adamw_update(pd[i].as_f64(), g.data()[i].as_f64(), &mut mi, &mut vi, t, lr, wd, &h);
                        pd[i] = T::of(th);
                        md[i] = T::of(mi);
                        vd[i] = T::of(vi);
                    }
                }
                OptimizerKind::Lion => {
                    let (pd, md) = (p.data_mut(), m.data_mut());
                    for i in 0..pd.len() {
                        let mut mi = md[i].as_f64();
                        pd[i] = T::of(lion_update(pd[i].as_f64(), g.data()[i].as_f64(), &mut mi, lr, wd, &h));
                        md[i] = T::of(mi);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Linear warmup to `lr_peak` over `warmup` steps, then half-cosine decay to
/// `lr_min` at `total`.
pub fn lr_schedule(step: usize, total: usize, warmup: usize, lr_peak: f64, lr_min: f64) -> f64 {
    let step = step.min(total);
    if step < warmup {
        return lr_peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr_peak;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    lr_min + 0.5 * (lr_peak - lr_min) * (1.0 + (PI * progress).cos())
}

pub const LR_MIN: f64 = 1e-5;
