//! `tvlab`: command-line front end. Talks to a running service given with
//! `--server`, or starts one in-process on a free local port.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use tvlab_client::api::{JobKind, JobRequest, JobState};
use tvlab_client::Client;

#[derive(Parser)]
#[command(name = "tvlab", version, about = "Tiny vision transformer lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write metrics and a checkpoint under --out.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps (the checkpoint is kept).
        #[arg(long)]
        stop_after_steps: Option<u64>,
        /// Also print per-step losses and checkpoint writes.
        #[arg(long, short)]
        verbose: bool,
    },
    /// Test-set accuracy of a checkpoint, or of a fresh model.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Forward-only throughput and activation estimates per batch size.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "32,64,128,256")]
        batch_sizes: String,
        #[arg(long, default_value_t = 20)]
        iters: usize,
    },
    /// Per-phase timing of one training step.
    Profile {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        steps: usize,
    },
    /// Finite-difference check of the model gradients at 64-bit.
    GradCheck {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated low-rank variants, or `all`.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        /// Coordinates probed per parameter tensor.
        #[arg(long, default_value_t = 3)]
        per_tensor: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Flat key=value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CIFAR-10 directory (defaults to $DATA_DIR).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// cifar, blobs or stripes.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_parser = ["adamw", "lion"])]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long, value_parser = ["none", "q", "k", "qk", "kv", "qkv"])]
    mla: Option<String>,
    #[arg(long)]
    dc: Option<usize>,
    #[arg(long)]
    num_cls: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long, value_parser = ["learnable", "sin", "none"])]
    pos_embed: Option<String>,
    #[arg(long, value_parser = ["random", "whiten"])]
    patch_init: Option<String>,
    #[arg(long)]
    no_aa: bool,
    #[arg(long)]
    no_mixup: bool,
    #[arg(long)]
    no_cutmix: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    subset_per_class: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other config key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Service URL; without it a local service is started in-process.
    #[arg(long)]
    server: Option<String>,
}

fn read_config_file(path: &PathBuf, into: &mut BTreeMap<String, String>) -> Result<(), String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), n + 1))?;
        into.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(())
}

fn absolute(p: &PathBuf) -> String {
    std::path::absolute(p).unwrap_or_else(|_| p.clone()).display().to_string()
}

impl RunArgs {
    fn config(&self) -> Result<BTreeMap<String, String>, String> {
        let mut m = BTreeMap::new();
        if let Some(p) = &self.config {
            read_config_file(p, &mut m)?;
        }
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("data", self.data.clone());
        put("data_dir", self.data_dir.as_ref().map(absolute));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("batch_size", self.batch_size.map(|v| v.to_string()));
        put("workers", self.workers.map(|v| v.to_string()));
        put("optimizer", self.optimizer.clone());
        put("lr", self.lr.map(|v| v.to_string()));
        put("weight_decay", self.weight_decay.map(|v| v.to_string()));
        put("mla", self.mla.clone());
        put("dc", self.dc.map(|v| v.to_string()));
        put("num_cls", self.num_cls.map(|v| v.to_string()));
        put("dim", self.dim.map(|v| v.to_string()));
        put("heads", self.heads.map(|v| v.to_string()));
        put("depth", self.depth.map(|v| v.to_string()));
        put("pos_embed", self.pos_embed.clone());
        put("patch_init", self.patch_init.clone());
        put("aa", self.no_aa.then(|| "false".into()));
        put("mixup", self.no_mixup.then(|| "false".into()));
        put("cutmix", self.no_cutmix.then(|| "false".into()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("subset_per_class", self.subset_per_class.map(|v| v.to_string()));
        put("out", self.out.as_ref().map(absolute));
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| format!("--set {kv:?}: expected key=value"))?;
            m.insert(k.trim().replace('-', "_"), v.trim().to_string());
        }
        Ok(m)
    }
}

fn print_result(kind: JobKind, result: &Value) {
    match kind {
        JobKind::Bench => print!("{}", result["table"].as_str().unwrap_or_default()),
        JobKind::Train => {
            if let Some(c) = result["checkpoint"].as_str() {
                eprintln!("checkpoint written to {c}");
            }
        }
        JobKind::GradCheck => println!(
            "max_rel_error={:e} pass={}",
            result["max_rel_error"].as_f64().unwrap_or(f64::NAN),
            result["pass"]
        ),
        JobKind::Eval | JobKind::Profile => {}
    }
}

async fn run(cli: Cli) -> Result<ExitCode, String> {
    let mut options = BTreeMap::new();
    let mut opt = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            options.insert(k.to_string(), v);
        }
    };
    let (kind, run, verbose) = match &cli.cmd {
        Cmd::Train { run, resume, stop_after_steps, verbose } => {
            opt("resume", resume.as_ref().map(absolute));
            opt("stop_after_steps", stop_after_steps.map(|s| s.to_string()));
            (JobKind::Train, run, *verbose)
        }
        Cmd::Eval { run, checkpoint } => {
            opt("checkpoint", checkpoint.as_ref().map(absolute));
            (JobKind::Eval, run, false)
        }
        Cmd::Bench { run, checkpoint, batch_sizes, iters } => {
            opt("checkpoint", checkpoint.as_ref().map(absolute));
            opt("batch_sizes", Some(batch_sizes.clone()));
            opt("iters", Some(iters.to_string()));
            (JobKind::Bench, run, false)
        }
        Cmd::Profile { run, checkpoint, steps } => {
            opt("checkpoint", checkpoint.as_ref().map(absolute));
            opt("steps", Some(steps.to_string()));
            (JobKind::Profile, run, false)
        }
        Cmd::GradCheck { run, variants, h, per_tensor, batch } => {
            opt("variants", variants.clone());
            opt("h", Some(h.to_string()));
            opt("per_tensor", Some(per_tensor.to_string()));
            opt("batch", Some(batch.to_string()));
            (JobKind::GradCheck, run, false)
        }
    };
    let req = JobRequest {
        kind,
        config: run.config()?,
        options,
    };

    let (client, _server) = match &run.server {
        Some(url) => (Client::new(url.clone()), None),
        None => {
            let (addr, task) = tvlab_server::spawn("127.0.0.1:0".parse().unwrap())
                .await
                .map_err(|e| format!("cannot start local service: {e}"))?;
            (Client::new(format!("http://{addr}")), Some(task))
        }
    };

    let job = client.submit(&req).await.map_err(|e| e.to_string())?;
    let follow = client.follow(job.id, Duration::from_millis(100), |row| {
        if let Some(rest) = row.strip_prefix("kind=metrics ") {
            println!("{rest}");
        } else if row.starts_with("kind=step") || row.starts_with("kind=checkpoint") {
            if verbose {
                println!("{row}");
            }
        } else if !(kind == JobKind::Bench && row.starts_with("kind=bench")) {
            println!("{row}");
        }
    });
    let status = tokio::select! {
        s = follow => s.map_err(|e| e.to_string())?,
        _ = tokio::signal::ctrl_c() => {
            let _ = client.cancel(job.id).await;
            return Err("interrupted; job cancelled".into());
        }
    };
    match status.state {
        JobState::Succeeded => {
            let result = status.result.unwrap_or(Value::Null);
            print_result(kind, &result);
            let failed = kind == JobKind::GradCheck && result["pass"] != Value::Bool(true);
            Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        JobState::Cancelled => Err("job was cancelled".into()),
        _ => Err(status.error.unwrap_or_else(|| "job failed".into())),
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("tvlab: {e}");
            ExitCode::FAILURE
        }
    }
}
