//! Central-difference verification of the tape's backward rules.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig, Vit};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, flat coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

/// Which coordinates to probe.
#[derive(Debug, Clone, Copy)]
pub enum Coords {
    All,
    /// A seeded uniform sample of this many coordinates across all params.
    Sample { count: usize, seed: u64 },
    /// Up to `count` seeded coordinates from every parameter tensor, so
    /// small tensors such as biases are never skipped.
    PerTensor { count: usize, seed: u64 },
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of the scalar `f(params)` against
/// `(f(θ+h) − f(θ−h)) / 2h` per probed coordinate.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64, coords: Coords) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Validation("finite-difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::Validation(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.value(loss).shape()
        )));
    }
    let grads = tape.backward(loss)?;
    drop(tape);

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.len();
            Some(o)
        })
        .collect();
    let total: usize = params.iter().map(|p| p.len()).sum();
    let picks: Vec<usize> = match coords {
        Coords::All => (0..total).collect(),
        Coords::Sample { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = sample(&mut rng, total, count.min(total)).into_vec();
            v.sort_unstable();
            v
        }
        Coords::PerTensor { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = Vec::new();
            for (p, &off) in params.iter().zip(&offsets) {
                let mut idx = sample(&mut rng, p.len(), count.min(p.len())).into_vec();
                idx.sort_unstable();
                v.extend(idx.into_iter().map(|i| off + i));
            }
            v
        }
    };

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let l = f(&mut tape, &vars)?;
        Ok(tape.value(l).data()[0])
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for flat in picks {
        let pi = offsets.partition_point(|&o| o <= flat) - 1;
        let ci = flat - offsets[pi];
        let analytic = grads.get(vars[pi]).map_or(0.0, |g| g.data()[ci]);
        let orig = work[pi].data()[ci];
        work[pi].data_mut()[ci] = orig + h;
        let up = eval(&work)?;
        work[pi].data_mut()[ci] = orig - h;
        let down = eval(&work)?;
        work[pi].data_mut()[ci] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((pi, ci, analytic, numeric));
        }
    }
    Ok(report)
}

/// Checks the whole model: parameters drawn uniformly in ±0.3 (layer-norm
/// gains around 1), random images in ±2 and random labels, eval mode, mean
/// cross-entropy as the scalar.
pub fn model_grad_check(cfg: &ModelConfig, batch: usize, seed: u64, h: f64, coords: Coords) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Vit::<f64>::new(cfg.clone(), &mut rng)?;
    for (path, t) in m.params_mut().iter_mut() {
        let centre = if path.ends_with("gamma") { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            *v = centre + rng.random_range(-0.3..0.3);
        }
    }
    let s = cfg.image_size;
    let images = Tensor::from_fn(&[batch, 3, s, s], |_| rng.random_range(-2.0..2.0));
    let k = cfg.num_classes;
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..k)).collect();
    let targets = Tensor::from_fn(&[batch, k], |i| if labels[i / k] == i % k { 1.0 } else { 0.0 });
    let params: Vec<Tensor<f64>> = m.params().iter().map(|(_, t)| t.clone()).collect();
    let m = &m;
    grad_check(
        |tape, vars| {
            let b = m.bind_vars(vars)?;
            let logits = m.forward(tape, &b, &images, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
            tape.cross_entropy(logits, &targets)
        },
        &params,
        h,
        coords,
    )
}
