//! Per-phase step timing and forward-only throughput.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::SoftBatch;
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{Mode, ParamStore, Vit};
use crate::optim::OptimState;
use crate::tensor::{Scalar, Tensor};

pub const PROFILE_WARMUP: usize = 3;

/// Mean wall-clock milliseconds per phase. `other_ms` is whatever the three
/// named phases do not cover, so the parts add up to `total_ms`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepProfile {
    pub forward_ms: f64,
    pub backward_ms: f64,
    pub optim_ms: f64,
    pub other_ms: f64,
    pub total_ms: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl StepProfile {
    pub fn to_row(&self) -> String {
        format!(
            "batch_size={} steps={} forward_ms={:.3} backward_ms={:.3} optim_ms={:.3} other_ms={:.3} total_ms={:.3}",
            self.batch_size, self.steps, self.forward_ms, self.backward_ms, self.optim_ms, self.other_ms, self.total_ms
        )
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Times `steps` full training steps on a private copy of the model after
/// discarding `PROFILE_WARMUP` untimed ones.
pub fn profile_step<T: Scalar>(
    model: &Vit<T>,
    opt: &OptimState<T>,
    batch: &SoftBatch<T>,
    lr: f64,
    steps: usize,
) -> Result<StepProfile> {
    if steps == 0 {
        return Err(Error::Config("profile needs at least one timed step".into()));
    }
    let mut model = model.clone();
    let mut opt = opt.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut acc = [0.0f64; 4];
    for i in 0..PROFILE_WARMUP + steps {
        let t_total = Instant::now();

        let t = Instant::now();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let logits = model.forward(&mut tape, &bound, &batch.images, Mode::Train, &mut rng)?;
        let loss = tape.cross_entropy(logits, &batch.targets)?;
        let forward = ms(t);

        let t = Instant::now();
        let mut g = tape.backward(loss)?;
        let backward = ms(t);

        let mut grads = ParamStore::new();
        for (path, var) in bound.iter() {
            if let Some(t) = g.take(*var) {
                grads.insert(path.clone(), t);
            }
        }

        let t = Instant::now();
        opt.step(model.params_mut(), &grads, lr)?;
        let optim = ms(t);

        drop(tape);
        let total = ms(t_total);
        if i >= PROFILE_WARMUP {
            acc[0] += forward;
            acc[1] += backward;
            acc[2] += optim;
            acc[3] += total;
        }
    }
    let n = steps as f64;
    let [f, b, o, t] = acc.map(|v| v / n);
    Ok(StepProfile {
        forward_ms: f,
        backward_ms: b,
        optim_ms: o,
        other_ms: t - f - b - o,
        total_ms: t,
        steps,
        batch_size: batch.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub batch_size: usize,
    /// `None` when the row was skipped.
    pub images_per_sec: Option<f64>,
    pub activation_bytes: u64,
    pub skipped: bool,
}

impl BenchRow {
    pub fn to_row(&self) -> String {
        format!(
            "batch_size={} images_per_sec={} activation_bytes={} skipped={}",
            self.batch_size,
            self.images_per_sec.map_or_else(|| "none".into(), |v| format!("{v:.2}")),
            self.activation_bytes,
            self.skipped
        )
    }

    /// Columns: batch size, images/s, estimated activation memory.
    pub fn table(rows: &[BenchRow]) -> String {
        let mut s = format!("{:>10} {:>14} {:>16}\n", "batch", "images/s", "activations");
        for r in rows {
            let ips = match r.images_per_sec {
                Some(v) => format!("{v:.2}"),
                None => "skipped".into(),
            };
            s += &format!("{:>10} {:>14} {:>16}\n", r.batch_size, ips, human_bytes(r.activation_bytes));
        }
        s
    }
}

pub fn human_bytes(b: u64) -> String {
    const UNITS: [&str; 4] = ["B", "KB", "MB", "GB"];
    let mut v = b as f64;
    let mut u = 0;
    while v >= 1000.0 && u < UNITS.len() - 1 {
        v /= 1000.0;
        u += 1;
    }
    format!("{v:.2} {}", UNITS[u])
}

/// Bytes one sample keeps alive through a forward pass that records no
/// gradients. The estimate for a batch is this times the batch size.
pub fn activation_bytes_per_sample<T: Scalar>(model: &Vit<T>) -> Result<u64> {
    let s = model.config().image_size;
    let images = Tensor::<T>::zeros(&[1, 3, s, s]);
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let params: usize = tape.activation_bytes();
    model.forward(&mut tape, &b, &images, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok((tape.activation_bytes() - params) as u64)
}

/// Forward-only images/s for each batch size, in the order given. Rows whose
/// estimate exceeds `budget` bytes are skipped.
pub fn benchmark_throughput<T: Scalar>(
    model: &Vit<T>,
    batch_sizes: &[usize],
    iters: usize,
    budget: Option<u64>,
) -> Result<Vec<BenchRow>> {
    let per = activation_bytes_per_sample(model)?;
    let s = model.config().image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows = Vec::with_capacity(batch_sizes.len());
    for &bs in batch_sizes {
        if bs == 0 {
            return Err(Error::Config("batch size 0 in benchmark".into()));
        }
        let est = per * bs as u64;
        if budget.is_some_and(|b| est > b) {
            log::warn!("bench batch {bs} skipped: estimate {est} bytes exceeds budget");
            rows.push(BenchRow {
                batch_size: bs,
                images_per_sec: None,
                activation_bytes: est,
                skipped: true,
            });
            continue;
        }
        let images = Tensor::from_fn(&[bs, 3, s, s], |i| T::of(((i * 7919) % 255) as f64 / 128.0 - 1.0));
        let run = |rng: &mut ChaCha8Rng| -> Result<()> {
            let mut tape = Tape::new();
            let b = model.bind(&mut tape, false);
            model.forward(&mut tape, &b, &images, Mode::Eval, rng)?;
            Ok(())
        };
        for _ in 0..PROFILE_WARMUP {
            run(&mut rng)?;
        }
        let t = Instant::now();
        for _ in 0..iters.max(1) {
            run(&mut rng)?;
        }
        let secs = t.elapsed().as_secs_f64();
        rows.push(BenchRow {
            batch_size: bs,
            images_per_sec: Some((bs * iters.max(1)) as f64 / secs.max(1e-12)),
            activation_bytes: est,
            skipped: false,
        });
    }
    Ok(rows)
}
