//! Batch construction with the regularization stack: crop/flip and
//! AutoAugment in byte space, random erasing after normalization, label
//! smoothing, then MixUp or CutMix on the whole batch.

pub mod ops;
pub mod policy;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::data::{normalize_into, Dataset};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use policy::{AugOp, Policy, Stage};

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Pad-4-reflect, random crop and horizontal flip.
    pub use_crop_flip: bool,
    pub use_autoaugment: bool,
    pub use_mixup: bool,
    pub use_cutmix: bool,
    pub use_random_erasing: bool,
    pub use_repeated_augment: bool,
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
    pub erase_prob: f64,
    pub erase_area_range: (f64, f64),
    pub label_smoothing: f64,
    pub repeated_factor: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            use_crop_flip: true,
            use_autoaugment: true,
            use_mixup: true,
            use_cutmix: true,
            use_random_erasing: true,
            use_repeated_augment: true,
            mixup_alpha: 0.8,
            cutmix_alpha: 1.0,
            erase_prob: 0.25,
            erase_area_range: (0.02, 0.33),
            label_smoothing: 0.1,
            repeated_factor: 3,
        }
    }
}

impl AugmentConfig {
    /// Normalization only.
    pub fn none() -> Self {
        AugmentConfig {
            use_crop_flip: false,
            use_autoaugment: false,
            use_mixup: false,
            use_cutmix: false,
            use_random_erasing: false,
            use_repeated_augment: false,
            label_smoothing: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.erase_area_range;
        let ok = (0.0..=1.0).contains(&self.erase_prob)
            && lo > 0.0
            && lo <= hi
            && hi < 1.0
            && (0.0..1.0).contains(&self.label_smoothing)
            && self.repeated_factor >= 1
            && self.mixup_alpha > 0.0
            && self.cutmix_alpha > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation settings {self:?}")))
        }
    }

    pub fn repeats(&self) -> usize {
        if self.use_repeated_augment {
            self.repeated_factor
        } else {
            1
        }
    }
}

/// Normalized images `[B, 3, S, S]` with probability-row targets `[B, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftBatch<T> {
    pub images: Tensor<T>,
    pub targets: Tensor<T>,
}

impl<T: Scalar> SoftBatch<T> {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Samples `start..start+count` as a new batch.
    pub fn slice(&self, start: usize, count: usize) -> Result<SoftBatch<T>> {
        let take = |t: &Tensor<T>| {
            let per = t.len() / t.shape()[0];
            let mut shape = t.shape().to_vec();
            shape[0] = count;
            Tensor::new(shape, t.data()[start * per..(start + count) * per].to_vec())
        };
        Ok(SoftBatch {
            images: take(&self.images)?,
            targets: take(&self.targets)?,
        })
    }

    pub fn cast<U: Scalar>(&self) -> SoftBatch<U> {
        SoftBatch {
            images: self.images.cast(),
            targets: self.targets.cast(),
        }
    }
}

/// Independent generator for one batch of one epoch.
pub fn stream_rng(seed: u64, epoch: u64, batch: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((epoch << 32) | (batch & 0xffff_ffff));
    r
}

/// Axis-aligned box `[y0, y1) × [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

/// What a mixing step did: the partner of every sample and the weight kept
/// on the original.
#[derive(Debug, Clone, PartialEq)]
pub struct Mix {
    pub lambda: f64,
    pub partner: Vec<usize>,
    pub rect: Option<Rect>,
}

fn mix_targets<T: Scalar>(targets: &Tensor<T>, lambda: f64, partner: &[usize]) -> Tensor<T> {
    let k = targets.shape()[1];
    let src = targets.data();
    let (l, r) = (T::of(lambda), T::of(1.0 - lambda));
    Tensor::from_fn(targets.shape(), |i| {
        let (b, j) = (i / k, i % k);
        l * src[i] + r * src[partner[b] * k + j]
    })
}

/// `x ← λ·x + (1−λ)·x[partner]`, for images and targets alike.
pub fn apply_mixup<T: Scalar>(batch: &mut SoftBatch<T>, lambda: f64, partner: &[usize]) {
    let per = batch.images.len() / batch.len();
    let src = batch.images.data().to_vec();
    let (l, r) = (T::of(lambda), T::of(1.0 - lambda));
    for (i, v) in batch.images.data_mut().iter_mut().enumerate() {
        let (b, j) = (i / per, i % per);
        *v = l * src[i] + r * src[partner[b] * per + j];
    }
    batch.targets = mix_targets(&batch.targets, lambda, partner);
}

fn draw_partner(n: usize, rng: &mut dyn RngCore) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn mixup<T: Scalar>(batch: &mut SoftBatch<T>, alpha: f64, rng: &mut dyn RngCore) -> Option<Mix> {
    if batch.len() < 2 {
        log::warn!("mixup skipped: batch of {} cannot be mixed", batch.len());
        return None;
    }
    let lambda = Beta::new(alpha, alpha).expect("alpha > 0").sample(rng);
    let partner = draw_partner(batch.len(), rng);
    apply_mixup(batch, lambda, &partner);
    Some(Mix {
        lambda,
        partner,
        rect: None,
    })
}

/// Box of area ≈ `(1−λ)·S²` centred uniformly and clipped at the borders.
pub fn cutmix_box(side: usize, lambda: f64, rng: &mut dyn RngCore) -> Rect {
    let cut = (1.0 - lambda).max(0.0).sqrt();
    let len = (side as f64 * cut) as usize;
    let (cy, cx) = (rng.random_range(0..side), rng.random_range(0..side));
    let lo = |c: usize| c.saturating_sub(len / 2);
    let hi = |c: usize| (c + len / 2).min(side);
    Rect {
        y0: lo(cy),
        y1: hi(cy),
        x0: lo(cx),
        x1: hi(cx),
    }
}

/// Pastes `rect` from each partner and returns `λ_adj = 1 − area/S²`.
pub fn apply_cutmix<T: Scalar>(batch: &mut SoftBatch<T>, rect: Rect, partner: &[usize]) -> f64 {
    let s = batch.images.shape()[2];
    let plane = s * s;
    let per = 3 * plane;
    let src = batch.images.data().to_vec();
    let dst = batch.images.data_mut();
    for (b, &p) in partner.iter().enumerate() {
        for ch in 0..3 {
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    let off = ch * plane + y * s + x;
                    dst[b * per + off] = src[p * per + off];
                }
            }
        }
    }
    let lambda = 1.0 - rect.area() as f64 / plane as f64;
    batch.targets = mix_targets(&batch.targets, lambda, partner);
    lambda
}

pub fn cutmix<T: Scalar>(batch: &mut SoftBatch<T>, alpha: f64, rng: &mut dyn RngCore) -> Option<Mix> {
    if batch.len() < 2 {
        log::warn!("cutmix skipped: batch of {} cannot be mixed", batch.len());
        return None;
    }
    let lambda = Beta::new(alpha, alpha).expect("alpha > 0").sample(rng);
    let rect = cutmix_box(batch.images.shape()[2], lambda, rng);
    let partner = draw_partner(batch.len(), rng);
    let lambda = apply_cutmix(batch, rect, &partner);
    Some(Mix {
        lambda,
        partner,
        rect: Some(rect),
    })
}

/// With probability `prob`, fills a box of area fraction drawn from
/// `area_range` and aspect ratio log-uniform in [0.3, 3.3] with standard
/// normal noise. Up to 10 placements are tried before giving up.
pub fn random_erase<T: Scalar>(
    img: &mut [T],
    side: usize,
    prob: f64,
    area_range: (f64, f64),
    rng: &mut dyn RngCore,
) -> Option<Rect> {
    if prob <= 0.0 || rng.random::<f64>() >= prob {
        return None;
    }
    let total = (side * side) as f64;
    for _ in 0..10 {
        let area = total * rng.random_range(area_range.0..=area_range.1);
        let aspect = rng.random_range(0.3f64.ln()..3.3f64.ln()).exp();
        let h = (area * aspect).sqrt().round() as usize;
        let w = (area / aspect).sqrt().round() as usize;
        if h == 0 || w == 0 || h >= side || w >= side {
            continue;
        }
        let (y0, x0) = (rng.random_range(0..=side - h), rng.random_range(0..=side - w));
        let plane = side * side;
        for ch in 0..3 {
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    let z: f64 = StandardNormal.sample(rng);
                    img[ch * plane + y * side + x] = T::of(z);
                }
            }
        }
        return Some(Rect {
            y0,
            y1: y0 + h,
            x0,
            x1: x0 + w,
        });
    }
    None
}

pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Tensor<T> {
    Tensor::from_fn(&[labels.len(), classes], |i| {
        if labels[i / classes] == i % classes {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// True class `1 − ε + ε/K`, others `ε/K`.
pub fn label_smooth<T: Scalar>(targets: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let k = targets.shape()[1];
    for (i, row) in targets.data().chunks_exact(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::Validation(format!("target row {i} is not one-hot")));
        }
    }
    let (on, off) = (T::of(1.0 - eps + eps / k as f64), T::of(eps / k as f64));
    Ok(Tensor::from_fn(targets.shape(), |i| {
        if targets.data()[i] == T::one() {
            on
        } else {
            off
        }
    }))
}

/// Source indices for every batch of one epoch. With `repeats = m`, each
/// batch holds `B/m` distinct samples, each `m` times in a row; the epoch
/// keeps `⌊N/B⌋` steps either way.
pub fn epoch_batches(n: usize, batch: usize, repeats: usize, rng: &mut dyn RngCore) -> Result<Vec<Vec<usize>>> {
    if repeats == 0 || repeats > batch || batch % repeats != 0 {
        return Err(Error::Config(format!(
            "repeat factor {repeats} must divide batch size {batch}"
        )));
    }
    if n < batch {
        return Err(Error::Config(format!("dataset of {n} samples is smaller than batch size {batch}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let fresh = batch / repeats;
    Ok((0..n / batch)
        .map(|j| {
            (0..fresh)
                .flat_map(|k| std::iter::repeat_n(order[(j * fresh + k) % n], repeats))
                .collect()
        })
        .collect())
}

/// Builds one augmented batch from raw dataset samples.
pub fn make_batch<T: Scalar>(
    ds: &Dataset,
    indices: &[usize],
    cfg: &AugmentConfig,
    policy: &Policy,
    rng: &mut dyn RngCore,
) -> Result<SoftBatch<T>> {
    let (side, per) = (ds.side, ds.image_bytes());
    let mut images = vec![T::zero(); indices.len() * per];
    let mut scratch = vec![0u8; per];
    for (b, &i) in indices.iter().enumerate() {
        scratch.copy_from_slice(ds.image(i));
        if cfg.use_crop_flip {
            ops::crop_flip(&mut scratch, side, rng);
        }
        if cfg.use_autoaugment {
            policy.apply(&mut scratch, side, rng);
        }
        let out = &mut images[b * per..(b + 1) * per];
        normalize_into(&scratch, out);
        if cfg.use_random_erasing {
            random_erase(out, side, cfg.erase_prob, cfg.erase_area_range, rng);
        }
    }
    let labels: Vec<usize> = indices.iter().map(|&i| ds.label(i)).collect();
    let mut targets = one_hot::<T>(&labels, ds.num_classes);
    if cfg.label_smoothing > 0.0 {
        targets = label_smooth(&targets, cfg.label_smoothing)?;
    }
    let mut batch = SoftBatch {
        images: Tensor::new(vec![indices.len(), 3, side, side], images)?,
        targets,
    };
    let use_cutmix = match (cfg.use_mixup, cfg.use_cutmix) {
        (true, true) => Some(rng.random_bool(0.5)),
        (false, true) => Some(true),
        (true, false) => Some(false),
        (false, false) => None,
    };
    match use_cutmix {
        Some(true) => {
            cutmix(&mut batch, cfg.cutmix_alpha, rng);
        }
        Some(false) => {
            mixup(&mut batch, cfg.mixup_alpha, rng);
        }
        None => {}
    }
    Ok(batch)
}

/// Normalize-only batch, as used for evaluation.
pub fn plain_batch<T: Scalar>(ds: &Dataset, indices: &[usize]) -> Result<SoftBatch<T>> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    make_batch(ds, indices, &AugmentConfig::none(), &Policy { subs: vec![] }, &mut unused)
}
