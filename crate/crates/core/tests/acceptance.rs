//! End-to-end acceptance checks. Each test prints one `C<n> PASS|FAIL` line.
//! Run with `--nocapture` to see them.

mod common;

use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvlab_core::augment::{
    cutmix, epoch_batches, label_smooth, make_batch, mixup, one_hot, stream_rng, AugmentConfig, Policy, SoftBatch,
};
use tvlab_core::data::{synthetic_dataset, Synthetic};
use tvlab_core::gradcheck::{model_grad_check, Coords};
use tvlab_core::model::{param_count, MlaConfig, MlaVariant, Mode, ModelConfig, ParamStore, Vit};
use tvlab_core::optim::{lr_schedule, Hyper, OptimState, OptimizerKind, LR_MIN};
use tvlab_core::train::{
    benchmark_throughput, load_datasets, profile_step, sharded_grads, train, RunOptions, StepSeed, TrainConfig,
    CHECKPOINT_FILE,
};
use tvlab_core::{Error, Tensor};

fn report(n: u32, ok: bool, detail: &str) {
    println!("C{n} {}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "C{n}: {detail}");
}

#[test]
fn c01_model_gradients() {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for variant in MlaVariant::ALL {
        for n_cls in [1, 2] {
            let cfg = ModelConfig { num_cls_tokens: n_cls, mla: MlaConfig { variant, d_c: 8 }, ..ModelConfig::tiny() };
            assert_eq!(cfg.num_patches(), 16);
            let r = model_grad_check(&cfg, 2, 100 + cases, 1e-5, Coords::PerTensor { count: 4, seed: cases }).unwrap();
            worst = worst.max(r.max_rel_error);
            cases += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    report(1, worst < 1e-4 && secs < 300.0, &format!("{cases} cases, max rel error {worst:.2e}, {secs:.1}s"));
}

#[test]
fn c02_attention_oracle() {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for case in 0..50u64 {
        let variant = MlaVariant::ALL[case as usize % 6];
        let seq = [1, 5, 65][case as usize % 3];
        let batch = 1 + case as usize % 2;
        let cfg = ModelConfig { embed_dim: 16, num_heads: 4, ..tiny(variant, 1) };
        let mut m = Vit::new(cfg, &mut rng(case)).unwrap();
        perturb(&mut m, 1000 + case);
        let x = uniform(&[batch * seq, 16], -1.0, 1.0, 2000 + case);
        let got = tape_attention(&m, (case % 2) as usize, &x, batch);
        worst = worst.max(max_rel(got.data(), &naive_attention(&m, (case % 2) as usize, &x, batch)));
    }
    let secs = t.elapsed().as_secs_f64();
    report(2, worst <= 1e-10 && secs < 60.0, &format!("50 cases, max rel error {worst:.2e}, {secs:.1}s"));
}

#[test]
fn c03_low_rank_parameter_accounting() {
    let q = ModelConfig { mla: MlaConfig { variant: MlaVariant::Q, d_c: 48 }, ..Default::default() };
    let m = Vit::<f32>::new(q, &mut rng(0)).unwrap();
    let p = m.params();
    let compressed = p.get("blocks.0.attn.w_q_down").unwrap().len() + p.get("blocks.0.attn.w_q_up").unwrap().len();
    let full = p.get("blocks.0.attn.w_k").unwrap().len();
    let per_layer = param_count(p).attention_per_layer;
    let ok = compressed == 18_432 && full == 36_864 && per_layer.iter().all(|&n| n == 129_024);
    report(3, ok, &format!("compressed {compressed}, full {full}, q-variant attention per layer {}", per_layer[0]));
}

fn random_batch(n: usize, classes: usize, r: &mut ChaCha8Rng) -> SoftBatch<f64> {
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
    SoftBatch {
        images: Tensor::from_fn(&[n, 3, 16, 16], |_| r.random_range(-2.0..2.0)),
        targets: one_hot(&labels, classes),
    }
}

fn max_abs(a: &ParamStore<f64>, b: &ParamStore<f64>) -> f64 {
    a.iter()
        .map(|(p, x)| x.data().iter().zip(b.get(p).unwrap().data()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max)
}

#[test]
fn c04_sharded_gradients() {
    let t = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let mut cfg = ModelConfig::tiny();
        cfg.num_classes = 4;
        cfg.mla.variant = MlaVariant::ALL[case as usize % 6];
        cfg.drop_path_rate = 0.0;
        let model = Vit::<f64>::new(cfg, &mut r).unwrap();
        let batch = random_batch(8, 4, &mut r);
        let seed = StepSeed { seed: case, epoch: 0, step: 0 };
        let full = sharded_grads(&model, &batch, 1, 1, Mode::Train, seed).unwrap();
        let four = sharded_grads(&model, &batch, 4, 4, Mode::Train, seed).unwrap();
        worst = worst.max(max_abs(&full.grads, &four.grads));
    }
    let secs = t.elapsed().as_secs_f64();
    report(4, worst <= 1e-10 && secs < 120.0, &format!("K=4 over 20 batches, max abs diff {worst:.2e}, {secs:.1}s"));
}

#[test]
fn c05_optimizer_trajectories_and_schedule() {
    // f(θ) = (θ − 3)² / 2 + sin θ, so the gradient changes along the path.
    let grad = |th: f64| th - 3.0 + th.cos();
    let run = |kind: OptimizerKind, wd: f64| -> Vec<f64> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![1], vec![0.5]).unwrap());
        let mut st = OptimState::new(kind, Hyper::for_kind(kind, wd));
        let mut out = Vec::new();
        for _ in 0..10 {
            let mut g = ParamStore::new();
            g.insert("w", Tensor::new(vec![1], vec![grad(p.get("w").unwrap().data()[0])]).unwrap());
            st.step(&mut p, &g, 0.01).unwrap();
            out.push(p.get("w").unwrap().data()[0]);
        }
        out
    };

    let (b1, b2, eps, wd, lr) = (0.9f64, 0.999f64, 1e-8, 0.05, 0.01);
    let (mut th, mut m, mut v) = (0.5f64, 0.0, 0.0);
    let mut adam_err = 0.0f64;
    for (t, got) in run(OptimizerKind::AdamW, wd).into_iter().enumerate() {
        let g = grad(th);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powf(t as f64 + 1.0));
        let vhat = v / (1.0 - b2.powf(t as f64 + 1.0));
        th = th * (1.0 - lr * wd) - lr * mhat / (vhat.sqrt() + eps);
        adam_err = adam_err.max((got - th).abs());
    }

    let (b1, b2, wd) = (0.9f64, 0.99f64, 0.5);
    let (mut th, mut m) = (0.5f64, 0.0f64);
    let mut lion_exact = true;
    for got in run(OptimizerKind::Lion, wd) {
        let g = grad(th);
        let c = b1 * m + (1.0 - b1) * g;
        let u = if c > 0.0 { 1.0 } else if c < 0.0 { -1.0 } else { 0.0 };
        th = th - lr * u - lr * wd * th;
        m = b2 * m + (1.0 - b2) * g;
        lion_exact &= got.to_bits() == th.to_bits();
    }

    let (w, total) = (100, 1000);
    let warm = lr_schedule(w, total, w, 0.002, LR_MIN);
    let end = lr_schedule(total, total, w, 0.002, LR_MIN);
    let ok = adam_err <= 1e-12 && lion_exact && warm == 0.002 && end == LR_MIN;
    report(
        5,
        ok,
        &format!("AdamW max err {adam_err:.1e}, Lion exact {lion_exact}, lr(warmup)={warm}, lr(T)={end}"),
    );
}

const B: usize = 6;
const PLANE: usize = 32 * 32;

fn constants() -> SoftBatch<f64> {
    SoftBatch {
        images: Tensor::from_fn(&[B, 3, 32, 32], |i| (i / (3 * PLANE)) as f64),
        targets: one_hot(&(0..B).collect::<Vec<_>>(), B),
    }
}

fn worst_row_sum(t: &Tensor<f64>) -> f64 {
    let k = t.shape()[1];
    t.data().chunks_exact(k).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

#[test]
fn c06_augmentation_scans() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let mut sum_err = 0.0f64;
    let mut frac_exact = true;
    for _ in 0..1000 {
        let mut b = constants();
        mixup(&mut b, 0.8, &mut r).unwrap();
        sum_err = sum_err.max(worst_row_sum(&b.targets));

        let mut b = constants();
        let mix = cutmix(&mut b, 1.0, &mut r).unwrap();
        sum_err = sum_err.max(worst_row_sum(&b.targets));
        for (i, img) in b.images.data().chunks_exact(3 * PLANE).enumerate() {
            if mix.partner[i] == i {
                continue;
            }
            let from_partner = img.iter().filter(|&&v| v == mix.partner[i] as f64).count();
            frac_exact &= from_partner as f64 / (3 * PLANE) as f64 == 1.0 - mix.lambda;
            frac_exact &= b.targets.at(&[i, mix.partner[i]]) == 1.0 - mix.lambda;
        }
    }

    let s = label_smooth(&one_hot::<f64>(&[4], 10), 0.1).unwrap();
    let smooth_ok = (s.data()[4] - 0.91).abs() < 1e-15
        && s.data().iter().enumerate().all(|(j, &v)| j == 4 || (v - 0.01).abs() < 1e-15);

    let ds = synthetic_dataset(Synthetic::TwoClassBlobs, 24, 32, 6).unwrap();
    let cfg = AugmentConfig::default();
    let idx = &epoch_batches(ds.len(), 12, cfg.repeats(), &mut stream_rng(6, 0, u32::MAX as u64)).unwrap()[0];
    let a: SoftBatch<f64> = make_batch(&ds, idx, &cfg, &Policy::cifar10(), &mut stream_rng(6, 0, 0)).unwrap();
    let b: SoftBatch<f64> = make_batch(&ds, idx, &cfg, &Policy::cifar10(), &mut stream_rng(6, 0, 0)).unwrap();
    let same = a.images.data().iter().zip(b.images.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        && a.targets.data().iter().zip(b.targets.data()).all(|(x, y)| x.to_bits() == y.to_bits());

    report(
        6,
        sum_err <= 1e-6 && frac_exact && smooth_ok && same,
        &format!(
            "1000 draws, worst row-sum error {sum_err:.1e}, cutmix fraction exact {frac_exact}, \
             smoothing {smooth_ok}, seed determinism {same}"
        ),
    );
}

#[test]
fn c07_cifar_learnability() {
    let mut cfg = TrainConfig::default();
    cfg.apply_text(
        "dim=64\nheads=4\ndepth=3\nsubset_per_class=500\nepochs=10\nbatch_size=128\nwarmup_epochs=1\n\
         workers=8\ndrop_path=0\naa=false\nmixup=false\ncutmix=false\nerase=false\nrepeated_augment=false\n",
    )
    .unwrap();
    let data = match load_datasets(&cfg) {
        Ok(d) => d,
        Err(e @ Error::MissingFile { .. }) => {
            // Not faked: the line says FAIL, and the run proceeds for the rest of the suite.
            println!("C7 FAIL: CIFAR-10 not available ({e}); set DATA_DIR to run this check");
            return;
        }
        Err(e) => panic!("C7: {e}"),
    };
    let t = Instant::now();
    let out = train(&cfg, &data, RunOptions::default()).unwrap();
    let acc = out.records.last().unwrap().val_acc;
    let mins = t.elapsed().as_secs_f64() / 60.0;
    report(7, acc >= 0.40, &format!("test-subset accuracy {acc:.4} after 10 epochs, {mins:.1} min"));
}

#[test]
fn c08_multi_cls_head() {
    let cfg = |n| ModelConfig { embed_dim: 96, num_heads: 12, num_cls_tokens: n, ..Default::default() };
    let one = Vit::<f32>::new(cfg(1), &mut rng(0)).unwrap();
    let two = Vit::<f32>::new(cfg(2), &mut rng(0)).unwrap();
    let head = |m: &Vit<f32>| param_count(m.params()).by_group["head"];
    let input = two.params().get("head.w1").unwrap().shape()[1];
    // Linear(C, C) + Linear(C, classes)
    let baseline = 96 * 96 + 96 + 10 * 96 + 10;
    let ok = input == 192 && head(&two) > head(&one) && head(&one) == baseline;
    report(
        8,
        ok,
        &format!("head input {input}, head params n_cls=2 {} vs n_cls=1 {} (baseline {baseline})", head(&two), head(&one)),
    );
}

#[test]
fn c09_positions_matter_on_stripes() {
    let acc = |pos: &str, seed: u64| {
        let cfg = TrainConfig::from_text(&format!(
            "data=stripes\nsynthetic_train=512\nsynthetic_test=256\nnum_classes=2\nimage_size=16\ndim=32\nheads=4\n\
             depth=2\ndrop_path=0\nepochs=30\nbatch_size=32\nwarmup_epochs=1\nlr=0.001\neval_every=30\n\
             crop_flip=false\naa=false\nmixup=false\ncutmix=false\nerase=false\nrepeated_augment=false\n\
             label_smoothing=0\npos_embed={pos}\nseed={seed}\n"
        ))
        .unwrap();
        let data = load_datasets(&cfg).unwrap();
        train(&cfg, &data, RunOptions::default()).unwrap().records.last().unwrap().val_acc
    };
    let t = Instant::now();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..3 {
        let (with, without) = (acc("learnable", seed), acc("none", seed));
        if with - without >= 0.10 {
            wins += 1;
        }
        rows.push(format!("{with:.3}/{without:.3}"));
    }
    let secs = t.elapsed().as_secs_f64();
    report(9, wins >= 2, &format!("learnable/none per seed {}, {wins} of 3 seeds by >=10 points, {secs:.0}s", rows.join(" ")));
}

#[test]
fn c10_profile_and_bench() {
    let model = Vit::<f32>::new(ModelConfig::default(), &mut rng(10)).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(10);
    let labels: Vec<usize> = (0..8).map(|_| r.random_range(0..10)).collect();
    let batch = SoftBatch {
        images: Tensor::from_fn(&[8, 3, 32, 32], |_| r.random_range(-2.0f32..2.0)),
        targets: one_hot(&labels, 10),
    };
    let opt = OptimState::new(OptimizerKind::AdamW, Hyper::adamw(0.05));
    let p = profile_step(&model, &opt, &batch, 1e-3, 10).unwrap();
    let sum = p.forward_ms + p.backward_ms + p.optim_ms + p.other_ms;
    let sums = (sum - p.total_ms).abs() <= 0.01 * p.total_ms;

    let sizes = [4, 1, 2, 8];
    let rows = benchmark_throughput(&model, &sizes, 20, None).unwrap();
    let ordered = rows.iter().map(|r| r.batch_size).eq(sizes);
    let per = rows[1].activation_bytes;
    let linear = rows.iter().all(|r| r.activation_bytes == per * r.batch_size as u64);
    report(
        10,
        sums && p.backward_ms > p.forward_ms && ordered && linear,
        &format!(
            "forward {:.1} ms, backward {:.1} ms, parts sum {sum:.2} vs total {:.2}; bench rows in order {ordered}, \
             linear estimate {linear} ({per} bytes/sample)",
            p.forward_ms, p.backward_ms, p.total_ms
        ),
    );
}

#[test]
fn c11_resume_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig::from_text(
        "data=blobs\nsynthetic_train=64\nsynthetic_test=16\nnum_classes=2\nimage_size=16\ndim=32\nheads=4\n\
         depth=2\ndrop_path=0.1\nepochs=3\nbatch_size=16\nwarmup_epochs=1\nrepeated_factor=2\n",
    )
    .unwrap();
    let data = load_datasets(&cfg).unwrap();
    let full = train(&cfg, &data, RunOptions::default()).unwrap();
    cfg.out = Some(dir.path().to_path_buf());
    let first = train(&cfg, &data, RunOptions { stop_after_steps: Some(5), ..Default::default() }).unwrap();
    let rest = train(
        &cfg,
        &data,
        RunOptions { resume: Some(dir.path().join(CHECKPOINT_FILE)), ..Default::default() },
    )
    .unwrap();
    let joined: Vec<u64> = first.losses.iter().chain(&rest.losses).map(|s| s.loss.to_bits()).collect();
    let want: Vec<u64> = full.losses.iter().map(|s| s.loss.to_bits()).collect();
    let ok = joined == want && rest.model.params() == full.model.params();
    report(11, ok, &format!("{} steps, interrupted after 5, loss sequence identical {}", want.len(), joined == want));
}
