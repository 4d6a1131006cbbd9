//! Data-parallel gradient computation: `K` contiguous shards, one forward and
//! backward pass each, reduced in ascending shard order.

use std::thread;

use rand_chacha::ChaCha8Rng;

use crate::augment::{stream_rng, SoftBatch};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{Mode, ParamStore, Vit};
use crate::optim::OptimState;
use crate::tensor::{Scalar, Tensor};

/// Output of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct StepGrads<T> {
    /// Mean loss over the batch.
    pub loss: f64,
    pub grads: ParamStore<T>,
    /// Bytes held by the tape at its peak, summed over shards.
    pub activation_bytes: usize,
}

/// Where a step's drop-path randomness comes from. Shard `w` draws from its
/// own stream so the result does not depend on thread scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSeed {
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
}

impl StepSeed {
    pub fn shard_rng(&self, shard: usize) -> ChaCha8Rng {
        let salt = 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(shard as u64 + 1);
        stream_rng(self.seed ^ salt, self.epoch, self.step)
    }
}

/// Worker thread cap from `$THREADS`, if set.
pub fn thread_cap() -> Option<usize> {
    std::env::var("THREADS").ok()?.parse().ok().filter(|&n: &usize| n > 0)
}

/// Loss and gradients of one shard.
pub fn shard_grads<T: Scalar>(
    model: &Vit<T>,
    batch: &SoftBatch<T>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<StepGrads<T>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let logits = model.forward(&mut tape, &bound, &batch.images, mode, rng)?;
    let loss = tape.cross_entropy(logits, &batch.targets)?;
    let activation_bytes = tape.activation_bytes();
    let value = tape.value(loss).data()[0].as_f64();
    let mut g = tape.backward(loss)?;
    let mut grads = ParamStore::new();
    for (path, var) in bound.iter() {
        let t = g.take(*var).unwrap_or_else(|| Tensor::zeros(model.params().get(path).unwrap().shape()));
        grads.insert(path.clone(), t);
    }
    Ok(StepGrads {
        loss: value,
        grads,
        activation_bytes,
    })
}

/// Splits the batch into `k` contiguous shards, runs them on up to `threads`
/// threads and averages the shard gradients weighted by shard size, adding
/// shards in ascending order.
pub fn sharded_grads<T: Scalar>(
    model: &Vit<T>,
    batch: &SoftBatch<T>,
    k: usize,
    threads: usize,
    mode: Mode,
    seed: StepSeed,
) -> Result<StepGrads<T>> {
    let n = batch.len();
    if k == 0 || n % k != 0 {
        return Err(Error::Config(format!("batch of {n} is not divisible into {k} shards")));
    }
    let per = n / k;
    let threads = threads.clamp(1, k);
    let run = |w: usize| -> Result<StepGrads<T>> {
        let shard = batch.slice(w * per, per)?;
        shard_grads(model, &shard, mode, &mut seed.shard_rng(w))
    };
    let parts: Vec<Result<StepGrads<T>>> = if threads == 1 {
        (0..k).map(run).collect()
    } else {
        let mut slots: Vec<Option<Result<StepGrads<T>>>> = (0..k).map(|_| None).collect();
        thread::scope(|s| {
            let run = &run;
            let handles: Vec<_> = (0..threads)
                .map(|t| s.spawn(move || (t..k).step_by(threads).map(|w| (w, run(w))).collect::<Vec<_>>()))
                .collect();
            for h in handles {
                for (w, r) in h.join().expect("worker panicked") {
                    slots[w] = Some(r);
                }
            }
        });
        slots.into_iter().map(Option::unwrap).collect()
    };
    if k == 1 {
        return parts.into_iter().next().unwrap();
    }
    let frac = T::of(per as f64 / n as f64);
    let mut out: Option<StepGrads<T>> = None;
    for part in parts {
        let part = part?;
        match &mut out {
            None => {
                let mut first = part;
                first.loss *= frac.as_f64();
                for (_, g) in first.grads.iter_mut() {
                    g.data_mut().iter_mut().for_each(|v| *v *= frac);
                }
                out = Some(first);
            }
            Some(acc) => {
                acc.loss += frac.as_f64() * part.loss;
                acc.activation_bytes += part.activation_bytes;
                for (path, g) in acc.grads.iter_mut() {
                    let src = part.grads.get(path).expect("same parameter set");
                    for (a, &b) in g.data_mut().iter_mut().zip(src.data()) {
                        *a += frac * b;
                    }
                }
            }
        }
    }
    Ok(out.unwrap())
}

/// One data-parallel optimizer step. Every shard sees the same parameters,
/// so a single shared copy stands in for the replicas.
#[allow(clippy::too_many_arguments)]
pub fn parallel_train_step<T: Scalar>(
    model: &mut Vit<T>,
    opt: &mut OptimState<T>,
    batch: &SoftBatch<T>,
    k: usize,
    threads: usize,
    lr: f64,
    mode: Mode,
    seed: StepSeed,
) -> Result<StepGrads<T>> {
    let out = sharded_grads(model, batch, k, threads, mode, seed)?;
    opt.step(model.params_mut(), &out.grads, lr)?;
    Ok(out)
}

/// L2 norm over every gradient entry.
pub fn grad_norm<T: Scalar>(grads: &ParamStore<T>) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}
