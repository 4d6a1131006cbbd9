//! Runs one job synchronously. Progress goes out as text rows through a sink.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};

use serde_json::{json, Value};
use tvlab_api::{JobKind, JobRequest};
use tvlab_core::augment::{make_batch, stream_rng, Policy, SoftBatch};
use tvlab_core::gradcheck::{model_grad_check, Coords};
use tvlab_core::model::MlaVariant;
use tvlab_core::optim::{Hyper, OptimState};
use tvlab_core::train::{
    self, benchmark_throughput, evaluate, init_model, load_datasets, model_from_checkpoint, profile_step, thread_cap,
    BenchRow, Event, MetricsLog, RunOptions, TrainConfig,
};
use tvlab_core::{Error, Result};

pub const BENCH_FILE: &str = "bench.log";
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

/// Builds the run config from request keys, applied in sorted order.
pub fn build_config(config: &BTreeMap<String, String>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (k, v) in config {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn opt_parse<T: std::str::FromStr>(opts: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match opts.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("bad value {v:?} for option {key}"))),
    }
}

fn check_options(req: &JobRequest) -> Result<()> {
    let allowed: &[&str] = match req.kind {
        JobKind::Train => &["resume", "stop_after_steps"],
        JobKind::Eval => &["checkpoint"],
        JobKind::Bench => &["checkpoint", "batch_sizes", "iters"],
        JobKind::Profile => &["checkpoint", "steps"],
        JobKind::GradCheck => &["h", "batch", "per_tensor", "variants", "check_seed"],
    };
    match req.options.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(Error::Config(format!("option {k:?} does not apply to {} jobs", req.kind))),
        None => Ok(()),
    }
}

/// Rejects requests that could never run, before a job is created.
pub fn validate(req: &JobRequest) -> Result<TrainConfig> {
    check_options(req)?;
    let cfg = build_config(&req.config)?;
    if req.kind == JobKind::Train {
        cfg.validate()?;
    } else {
        cfg.model.validate()?;
    }
    Ok(cfg)
}

fn threads(cfg: &TrainConfig) -> usize {
    thread_cap().map_or(cfg.workers, |c| cfg.workers.min(c))
}

/// Fresh model, or the one stored at option `checkpoint`, whose config then
/// replaces the model part of `cfg`.
fn model_for(cfg: &mut TrainConfig, opts: &BTreeMap<String, String>) -> Result<tvlab_core::model::Vit<f32>> {
    match opts.get("checkpoint") {
        Some(p) => {
            let (saved, model) = model_from_checkpoint(&PathBuf::from(p))?;
            cfg.model = saved.model;
            Ok(model)
        }
        None => {
            let data = load_datasets(cfg)?;
            init_model(cfg, &data.train)
        }
    }
}

fn cancelled(cancel: &AtomicBool) -> Result<()> {
    if cancel.load(Ordering::Relaxed) {
        Err(Error::Cancelled)
    } else {
        Ok(())
    }
}

pub fn run(req: &JobRequest, cancel: &AtomicBool, sink: &mut dyn FnMut(String)) -> Result<Value> {
    let mut cfg = validate(req)?;
    let opts = &req.options;
    match req.kind {
        JobKind::Train => {
            let data = load_datasets(&cfg)?;
            let mut on_event = |e: &Event| match e {
                Event::Step(s) => sink(format!(
                    "kind=step epoch={} step={} loss={} lr={}",
                    s.epoch, s.step, s.loss, s.lr
                )),
                Event::Record(r) => sink(format!("kind=metrics {}", r.to_row())),
                Event::Checkpoint(p) => sink(format!("kind=checkpoint path={}", p.display())),
            };
            let out = train::train(
                &cfg,
                &data,
                RunOptions {
                    resume: opts.get("resume").map(PathBuf::from),
                    stop_after_steps: opts.get("stop_after_steps").map(|s| s.parse()).transpose().map_err(|_| {
                        Error::Config("stop_after_steps must be a whole number".into())
                    })?,
                    cancel: Some(cancel),
                    on_event: Some(&mut on_event),
                },
            )?;
            let last = out.records.last();
            Ok(json!({
                "epochs_completed": out.state.epoch,
                "steps": out.state.step,
                "val_acc": last.map(|r| r.val_acc),
                "final": last.map(|r| r.to_row()),
                "checkpoint": out.checkpoint.map(|p| p.display().to_string()),
            }))
        }
        JobKind::Eval => {
            let model = model_for(&mut cfg, opts)?;
            cancelled(cancel)?;
            let data = load_datasets(&cfg)?;
            let acc = evaluate(&model, &data.test, threads(&cfg))?;
            sink(format!("kind=eval val_acc={acc} samples={}", data.test.len()));
            Ok(json!({ "val_acc": acc, "samples": data.test.len() }))
        }
        JobKind::Bench => {
            let model = model_for(&mut cfg, opts)?;
            let sizes: Vec<usize> = opts
                .get("batch_sizes")
                .map_or("32,64,128,256", String::as_str)
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad batch size {s:?}"))))
                .collect::<Result<_>>()?;
            let iters = opt_parse(opts, "iters", 20usize)?;
            let mut rows = Vec::new();
            for &bs in &sizes {
                cancelled(cancel)?;
                rows.extend(benchmark_throughput(&model, &[bs], iters, cfg.memory_budget)?);
            }
            let log = cfg.out.as_ref().map(|d| MetricsLog::open_named(d, BENCH_FILE)).transpose()?;
            for r in &rows {
                sink(format!("kind=bench {}", r.to_row()));
                if let Some(l) = &log {
                    l.append(&r.to_row())?;
                }
            }
            Ok(json!({
                "table": BenchRow::table(&rows),
                "rows": rows.iter().map(|r| json!({
                    "batch_size": r.batch_size,
                    "images_per_sec": r.images_per_sec,
                    "activation_bytes": r.activation_bytes,
                    "skipped": r.skipped,
                })).collect::<Vec<_>>(),
            }))
        }
        JobKind::Profile => {
            let model = model_for(&mut cfg, opts)?;
            let data = load_datasets(&cfg)?;
            if data.train.len() < cfg.batch_size {
                return Err(Error::Config(format!(
                    "profile batch {} is larger than the {} training samples",
                    cfg.batch_size,
                    data.train.len()
                )));
            }
            let idx: Vec<usize> = (0..cfg.batch_size).collect();
            let batch: SoftBatch<f32> =
                make_batch(&data.train, &idx, &cfg.augment, &Policy::cifar10(), &mut stream_rng(cfg.seed, 0, 0))?;
            let opt = OptimState::new(cfg.optimizer, Hyper::for_kind(cfg.optimizer, cfg.wd()));
            let steps = opt_parse(opts, "steps", 10usize)?.max(10);
            cancelled(cancel)?;
            let p = profile_step(&model, &opt, &batch, cfg.lr(), steps)?;
            sink(format!("kind=profile {}", p.to_row()));
            Ok(json!({
                "forward_ms": p.forward_ms,
                "backward_ms": p.backward_ms,
                "optim_ms": p.optim_ms,
                "other_ms": p.other_ms,
                "total_ms": p.total_ms,
                "steps": p.steps,
                "batch_size": p.batch_size,
            }))
        }
        JobKind::GradCheck => {
            let h = opt_parse(opts, "h", 1e-5f64)?;
            let batch = opt_parse(opts, "batch", 2usize)?;
            let per = opt_parse(opts, "per_tensor", 3usize)?;
            let seed = opt_parse(opts, "check_seed", 0u64)?;
            let variants: Vec<MlaVariant> = match opts.get("variants").map(String::as_str) {
                None => vec![cfg.model.mla.variant],
                Some("all") => MlaVariant::ALL.to_vec(),
                Some(list) => list.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?,
            };
            let mut worst = 0.0f64;
            let mut cases = Vec::new();
            for v in variants {
                cancelled(cancel)?;
                let mut m = cfg.model.clone();
                m.mla.variant = v;
                let r = model_grad_check(&m, batch, seed, h, Coords::PerTensor { count: per, seed })?;
                worst = worst.max(r.max_rel_error);
                sink(format!(
                    "kind=grad_check mla={v} num_cls={} checked={} max_rel_error={:e}",
                    m.num_cls_tokens, r.checked, r.max_rel_error
                ));
                cases.push(json!({ "mla": v.to_string(), "checked": r.checked, "max_rel_error": r.max_rel_error }));
            }
            Ok(json!({ "max_rel_error": worst, "pass": worst < GRAD_CHECK_TOLERANCE, "cases": cases }))
        }
    }
}
