//! Training and evaluation loop, data-parallel steps, profiling and
//! throughput benchmarks.

mod config;
mod metrics;
mod parallel;
mod profile;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{DataSource, TrainConfig};
pub use metrics::{MetricsLog, MetricsRecord, StepLoss};
pub use parallel::{grad_norm, parallel_train_step, shard_grads, sharded_grads, thread_cap, StepGrads, StepSeed};
pub use profile::{activation_bytes_per_sample, benchmark_throughput, human_bytes, profile_step, BenchRow, StepProfile, PROFILE_WARMUP};
pub use metrics::METRICS_FILE;

use crate::augment::{epoch_batches, make_batch, plain_batch, stream_rng, Policy, SoftBatch};
use crate::data::{
    load_checkpoint, load_cifar10, prefetch, save_checkpoint, synthetic_dataset, Checkpoint, Dataset, RunState, Split,
};
use crate::error::{Error, Result};
use crate::model::{sample_patches, whitening_init, Mode, PatchInit, Vit};
use crate::optim::{lr_schedule, Hyper, OptimState, LR_MIN};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.tvlb";
pub const EVAL_BATCH: usize = 256;
const SHUFFLE_STREAM: u64 = u32::MAX as u64;
const SYNTHETIC_TEST_SALT: u64 = 0x5eed_7e57;

/// Train and test splits for one run.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_datasets(cfg: &TrainConfig) -> Result<Datasets> {
    let side = cfg.model.image_size;
    let (mut train, mut test) = match &cfg.data {
        DataSource::Cifar { dir } => {
            let dir = DataSource::cifar_dir(dir);
            (load_cifar10(&dir, Split::Train)?, load_cifar10(&dir, Split::Test)?)
        }
        DataSource::Synthetic { kind, train, test } => {
            let tr = synthetic_dataset(*kind, *train, side, cfg.seed)?;
            let mut te = synthetic_dataset(*kind, *test, side, cfg.seed ^ SYNTHETIC_TEST_SALT)?;
            te.split = Split::Test;
            (tr, te)
        }
    };
    if let Some(k) = cfg.subset_per_class {
        train = train.first_per_class(k);
        test = test.first_per_class(k);
    }
    if train.side != side {
        return Err(Error::Config(format!("dataset side {} does not match image size {side}", train.side)));
    }
    Ok(Datasets { train, test })
}

/// Index of the largest logit in each row; ties go to the lower index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of samples whose top logit is the label. Batches are split over
/// up to `threads` threads.
pub fn evaluate<T: Scalar>(model: &Vit<T>, ds: &Dataset, threads: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty dataset".into()));
    }
    let starts: Vec<usize> = (0..ds.len()).step_by(EVAL_BATCH).collect();
    let count = |s: usize| -> Result<usize> {
        let idx: Vec<usize> = (s..(s + EVAL_BATCH).min(ds.len())).collect();
        let batch: SoftBatch<T> = plain_batch(ds, &idx)?;
        let pred = argmax_rows(&model.logits(&batch.images)?);
        Ok(idx.iter().zip(pred).filter(|(&i, p)| ds.label(i) == *p).count())
    };
    let threads = threads.clamp(1, starts.len());
    let correct: usize = if threads == 1 {
        starts.iter().map(|&s| count(s)).sum::<Result<usize>>()?
    } else {
        thread::scope(|sc| {
            let count = &count;
            let starts = &starts;
            let hs: Vec<_> = (0..threads)
                .map(|t| sc.spawn(move || starts.iter().skip(t).step_by(threads).map(|&s| count(s)).sum::<Result<usize>>()))
                .collect();
            hs.into_iter().map(|h| h.join().expect("eval thread panicked")).sum::<Result<usize>>()
        })?
    };
    Ok(correct as f64 / ds.len() as f64)
}

/// Fresh model, with whitened patch filters when configured.
pub fn init_model(cfg: &TrainConfig, train: &Dataset) -> Result<Vit<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Vit::<f32>::new(cfg.model.clone(), &mut rng)?;
    if cfg.model.patch_init == PatchInit::Whitening {
        let n = train.len().min(1024);
        let idx: Vec<usize> = (0..n).collect();
        let images = plain_batch::<f32>(train, &idx)?.images;
        let patches = sample_patches(&images, cfg.model.patch_size, 20_000, &mut rng)?;
        let wh = whitening_init(&patches, cfg.model.embed_dim, 1e-2, &mut rng)?;
        model.apply_whitening(wh)?;
    }
    Ok(model)
}

/// Something that happened during a run, in order.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Step(StepLoss),
    Record(MetricsRecord),
    Checkpoint(PathBuf),
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop (after checkpointing) once this many optimizer steps are done.
    pub stop_after_steps: Option<u64>,
    pub cancel: Option<&'a AtomicBool>,
    pub on_event: Option<&'a mut dyn FnMut(&Event)>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Vit<f32>,
    pub losses: Vec<StepLoss>,
    pub records: Vec<MetricsRecord>,
    pub state: RunState,
    pub checkpoint: Option<PathBuf>,
}

pub fn steps_per_epoch(cfg: &TrainConfig, n: usize) -> usize {
    n / cfg.batch_size
}

fn worker_threads(cfg: &TrainConfig) -> usize {
    let k = cfg.workers;
    thread_cap().map_or(k, |c| k.min(c))
}

/// Runs (or continues) training. Metrics rows go to `<out>/metrics.log` as
/// they are produced and the checkpoint is rewritten after every epoch.
pub fn train(cfg: &TrainConfig, data: &Datasets, mut opts: RunOptions<'_>) -> Result<RunOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let spe = steps_per_epoch(cfg, data.train.len());
    if spe == 0 {
        return Err(Error::Config(format!(
            "training set of {} samples is smaller than batch size {}",
            data.train.len(),
            cfg.batch_size
        )));
    }
    if data.train.num_classes != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            data.train.num_classes, cfg.model.num_classes
        )));
    }
    let total = cfg.epochs * spe;
    let warmup = (cfg.warmup_epochs * spe).min(total);
    let threads = worker_threads(cfg);
    let policy = Policy::cifar10();

    let (mut model, mut opt, mut state) = match &opts.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let saved = TrainConfig::from_text(&ck.config)?;
            if saved.model != cfg.model {
                return Err(Error::Config(format!("checkpoint {} has a different model config", p.display())));
            }
            let model = Vit::from_params(cfg.model.clone(), ck.params)?;
            let opt = ck
                .optim
                .ok_or_else(|| Error::Inconsistent("checkpoint has no optimizer state to resume".into()))?;
            (model, opt, ck.state)
        }
        None => {
            let model = init_model(cfg, &data.train)?;
            let opt = OptimState::new(cfg.optimizer, Hyper::for_kind(cfg.optimizer, cfg.wd()));
            (model, opt, RunState { seed: cfg.seed, epoch: 0, step: 0 })
        }
    };
    if state.seed != cfg.seed {
        return Err(Error::Config(format!("checkpoint seed {} differs from run seed {}", state.seed, cfg.seed)));
    }

    let log = cfg.out.as_ref().map(|d| MetricsLog::open(d)).transpose()?;
    let ck_path = cfg.out.as_ref().map(|d| d.join(CHECKPOINT_FILE));
    let mut losses = Vec::new();
    let mut records = Vec::new();
    let emit = |ev: Event, opts: &mut RunOptions<'_>| {
        if let Some(f) = opts.on_event.as_mut() {
            f(&ev);
        }
    };

    let mut stopped = false;
    let mut ck_error = None;
    while (state.epoch as usize) < cfg.epochs && !stopped {
        let epoch = state.epoch;
        let batches = epoch_batches(
            data.train.len(),
            cfg.batch_size,
            cfg.augment.repeats(),
            &mut stream_rng(cfg.seed, epoch, SHUFFLE_STREAM),
        )?;
        let first = (state.step as usize - epoch as usize * spe).min(spe);
        let todo = spe - first;
        let epoch_start = Instant::now();
        let (mut loss_sum, mut seen, mut peak, mut lr) = (0.0, 0usize, 0usize, 0.0);
        let produce = |j: usize| -> Result<SoftBatch<f32>> {
            let b = first + j;
            make_batch(&data.train, &batches[b], &cfg.augment, &policy, &mut stream_rng(cfg.seed, epoch, b as u64))
        };
        prefetch(todo, 2, produce, |_, batch| {
            if opts.cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
                return Err(Error::Cancelled);
            }
            let step = state.step;
            lr = lr_schedule(step as usize + 1, total, warmup, cfg.lr(), LR_MIN);
            let seed = StepSeed { seed: cfg.seed, epoch, step };
            let g = sharded_grads(&model, &batch, cfg.workers, threads, Mode::Train, seed)?;
            let norm = grad_norm(&g.grads);
            if !g.loss.is_finite() || !norm.is_finite() {
                return Err(Error::Diverged {
                    step: step as usize,
                    loss: g.loss,
                    lr,
                    grad_norm: norm,
                });
            }
            opt.step(model.params_mut(), &g.grads, lr)?;
            state.step += 1;
            loss_sum += g.loss;
            seen += 1;
            peak = peak.max(g.activation_bytes);
            let sl = StepLoss { epoch, step, loss: g.loss, lr };
            losses.push(sl);
            emit(Event::Step(sl), &mut opts);
            if opts.stop_after_steps.is_some_and(|s| state.step >= s) {
                stopped = true;
                return Ok(false);
            }
            Ok(true)
        })?;
        let train_secs = epoch_start.elapsed().as_secs_f64();
        if state.step as usize == (epoch as usize + 1) * spe {
            state.epoch += 1;
        }
        let done = state.epoch as usize == cfg.epochs;
        if !stopped && (state.epoch as usize % cfg.eval_every == 0 || done) {
            let rec = MetricsRecord {
                epoch: state.epoch,
                step: state.step,
                train_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
                val_acc: evaluate(&model, &data.test, threads)?,
                lr,
                images_per_sec: (seen * cfg.batch_size) as f64 / train_secs.max(1e-9),
                peak_activation_bytes: peak as u64,
                wall_seconds: start.elapsed().as_secs_f64(),
                workers: cfg.workers,
                batch_size: cfg.batch_size,
            };
            if let Some(l) = &log {
                l.append(&rec.to_row())?;
            }
            records.push(rec.clone());
            emit(Event::Record(rec), &mut opts);
        }
        if let Some(p) = &ck_path {
            match write_checkpoint(p, cfg, &model, &opt, state) {
                Ok(()) => emit(Event::Checkpoint(p.clone()), &mut opts),
                Err(e) => {
                    log::warn!("checkpoint write to {} failed: {e}", p.display());
                    ck_error.get_or_insert(e);
                }
            }
        }
    }
    if let Some(e) = ck_error {
        return Err(e);
    }
    Ok(RunOutcome {
        model,
        losses,
        records,
        state,
        checkpoint: ck_path,
    })
}

pub fn write_checkpoint(path: &Path, cfg: &TrainConfig, model: &Vit<f32>, opt: &OptimState<f32>, state: RunState) -> Result<()> {
    save_checkpoint(
        path,
        &Checkpoint {
            config: cfg.to_text(),
            params: model.params().clone(),
            optim: Some(opt.clone()),
            state,
        },
    )
}

/// Model stored in a checkpoint, with the config it was trained under.
pub fn model_from_checkpoint(path: &Path) -> Result<(TrainConfig, Vit<f32>)> {
    let ck = load_checkpoint(path)?;
    let cfg = TrainConfig::from_text(&ck.config)?;
    let model = Vit::from_params(cfg.model.clone(), ck.params)?;
    Ok((cfg, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Synthetic;

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::new(vec![3, 3], vec![1.0f64, 1.0, 0.0, 0.0, 2.0, 2.0, -1.0, -1.0, -1.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1, 0]);
    }

    fn blobs_cfg() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.apply_text(
            "data=blobs\nsynthetic_train=32\nsynthetic_test=16\nnum_classes=2\nimage_size=16\ndim=16\nheads=2\ndepth=1\n\
             epochs=2\nbatch_size=8\nwarmup_epochs=1\naa=false\nmixup=false\ncutmix=false\nerase=false\nrepeated_augment=false\n",
        )
        .unwrap();
        c
    }

    #[test]
    fn constant_class_zero_model_scores_the_class_share() {
        let cfg = blobs_cfg();
        let data = load_datasets(&cfg).unwrap();
        let mut model = init_model(&cfg, &data.train).unwrap();
        for (k, t) in model.params_mut().iter_mut() {
            let bias = k == "head.b2";
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = if bias && i == 0 { 1.0 } else { 0.0 };
            }
        }
        assert_eq!(evaluate(&model, &data.test, 1).unwrap(), 0.5);
        assert!(evaluate(&model, &data.test.select(&[]), 1).is_err());
    }

    #[test]
    fn eval_threads_do_not_change_accuracy() {
        let mut cfg = blobs_cfg();
        cfg.data = DataSource::Synthetic { kind: Synthetic::TwoClassBlobs, train: 8, test: 600 };
        let data = load_datasets(&cfg).unwrap();
        let model = init_model(&cfg, &data.train).unwrap();
        let a = evaluate(&model, &data.test, 1).unwrap();
        assert_eq!(a, evaluate(&model, &data.test, 3).unwrap());
        let rev: Vec<usize> = (0..data.test.len()).rev().collect();
        assert_eq!(a, evaluate(&model, &data.test.select(&rev), 2).unwrap());
    }

    #[test]
    fn stop_flag_and_small_sets() {
        let cfg = blobs_cfg();
        let data = load_datasets(&cfg).unwrap();
        let stop = AtomicBool::new(true);
        let r = train(&cfg, &data, RunOptions { cancel: Some(&stop), ..Default::default() });
        assert!(matches!(r, Err(Error::Cancelled)));
        let mut small = data.clone();
        small.train = small.train.select(&[0, 1, 2]);
        assert!(matches!(train(&cfg, &small, RunOptions::default()), Err(Error::Config(_))));
    }

    #[test]
    fn runs_are_deterministic_and_logged() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = blobs_cfg();
        cfg.out = Some(dir.path().to_path_buf());
        let data = load_datasets(&cfg).unwrap();
        let a = train(&cfg, &data, RunOptions::default()).unwrap();
        let b = train(&TrainConfig { out: None, ..cfg.clone() }, &data, RunOptions::default()).unwrap();
        assert_eq!(a.losses.len(), 8);
        assert!(a.losses.iter().zip(&b.losses).all(|(x, y)| x.loss.to_bits() == y.loss.to_bits()));
        let text = std::fs::read_to_string(dir.path().join(metrics::METRICS_FILE)).unwrap();
        let rows: Vec<MetricsRecord> = text.lines().map(|l| MetricsRecord::parse_row(l).unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert!(rows[1].wall_seconds >= rows[0].wall_seconds);
        assert!(dir.path().join(CHECKPOINT_FILE).exists());
    }
}
