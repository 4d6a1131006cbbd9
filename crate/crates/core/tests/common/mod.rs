#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvlab_core::autograd::{Tape, Var};
use tvlab_core::model::{MlaConfig, MlaVariant, Mode, ModelConfig, Projection, Vit};
use tvlab_core::{Result, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Replaces every parameter with O(1) values so gradients are far from the
/// finite-difference noise floor. Layer-norm gains stay near 1.
pub fn perturb(m: &mut Vit<f64>, seed: u64) {
    let mut r = rng(seed);
    for (path, t) in m.params_mut().iter_mut() {
        let centre = if path.ends_with("gamma") { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            *v = centre + r.random_range(-0.3..0.3);
        }
    }
}

pub fn tiny(variant: MlaVariant, n_cls: usize) -> ModelConfig {
    ModelConfig {
        num_cls_tokens: n_cls,
        mla: MlaConfig { variant, d_c: 8 },
        ..ModelConfig::tiny()
    }
}

/// Effective `[C, C]` projection of block `i` (`up · down` when factored).
pub fn effective(m: &Vit<f64>, i: usize, proj: Projection) -> Tensor<f64> {
    let p = m.params();
    let base = format!("blocks.{i}.attn.w_{}", proj.short());
    match p.get(&base) {
        Some(w) => w.clone(),
        None => {
            let up = p.get(&format!("{base}_up")).unwrap();
            let down = p.get(&format!("{base}_down")).unwrap();
            up.matmul(down).unwrap()
        }
    }
}

/// Attention of block `i` by explicit loops: materialize Q, K, V, then a
/// scalar softmax per query row and head.
pub fn naive_attention(m: &Vit<f64>, i: usize, x: &Tensor<f64>, batch: usize) -> Vec<f64> {
    let cfg = m.config();
    let (rows, c) = (x.shape()[0], x.shape()[1]);
    let seq = rows / batch;
    let (h, dk) = (cfg.num_heads, cfg.head_dim());
    let project = |w: &Tensor<f64>| -> Vec<f64> {
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            for o in 0..c {
                let mut s = 0.0;
                for k in 0..c {
                    s += x.at(&[r, k]) * w.at(&[o, k]);
                }
                out[r * c + o] = s;
            }
        }
        out
    };
    let q = project(&effective(m, i, Projection::Query));
    let k = project(&effective(m, i, Projection::Key));
    let v = project(&effective(m, i, Projection::Value));
    let mut concat = vec![0.0; rows * c];
    for b in 0..batch {
        for head in 0..h {
            for a in 0..seq {
                let ra = b * seq + a;
                let mut scores = vec![0.0; seq];
                for j in 0..seq {
                    let rj = b * seq + j;
                    let mut s = 0.0;
                    for d in 0..dk {
                        s += q[ra * c + head * dk + d] * k[rj * c + head * dk + d];
                    }
                    scores[j] = s / (dk as f64).sqrt();
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for j in 0..seq {
                    let p = (scores[j] - mx).exp() / z;
                    let rj = b * seq + j;
                    for d in 0..dk {
                        concat[ra * c + head * dk + d] += p * v[rj * c + head * dk + d];
                    }
                }
            }
        }
    }
    let wo = m.params().get(&format!("blocks.{i}.attn.w_o")).unwrap();
    let mut out = vec![0.0; rows * c];
    for r in 0..rows {
        for o in 0..c {
            let mut s = 0.0;
            for k in 0..c {
                s += concat[r * c + k] * wo.at(&[o, k]);
            }
            out[r * c + o] = s;
        }
    }
    out
}

pub fn tape_attention(m: &Vit<f64>, i: usize, x: &Tensor<f64>, batch: usize) -> Tensor<f64> {
    let mut tape = Tape::new();
    let b = m.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = m.attention(&mut tape, &b, i, xv, batch).unwrap();
    tape.value(y).clone()
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// One-hot targets `[B, classes]`.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor<f64> {
    Tensor::from_fn(&[labels.len(), classes], |i| {
        if labels[i / classes] == i % classes {
            1.0
        } else {
            0.0
        }
    })
}

/// Cross-entropy of an eval-mode forward pass, expressed over the model's
/// parameters in sorted path order (the layout `grad_check` perturbs).
pub fn model_loss<'a>(
    m: &'a Vit<f64>,
    images: &'a Tensor<f64>,
    targets: &'a Tensor<f64>,
) -> impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a {
    move |tape, vars| {
        let b = m.bind_vars(vars)?;
        let logits = m.forward(tape, &b, images, Mode::Eval, &mut rng(0))?;
        tape.cross_entropy(logits, targets)
    }
}

pub fn param_list(m: &Vit<f64>) -> Vec<Tensor<f64>> {
    m.params().iter().map(|(_, t)| t.clone()).collect()
}
