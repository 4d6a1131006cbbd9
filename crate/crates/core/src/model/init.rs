//! Parameter initializers: truncated normal, positional tables, and the
//! data-dependent whitening of the patch embedding.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::config::PosEmbed;
use crate::tensor::{Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Normal(0, std²) resampled until it falls inside ±2·std.
pub fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut dyn RngCore) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::of(z * std);
        }
    })
}

/// Positional table for `len` positions of width `dim`. Returns `None` for
/// [`PosEmbed::Disabled`].
pub fn positional_table<T: Scalar>(
    kind: PosEmbed,
    len: usize,
    dim: usize,
    rng: &mut dyn RngCore,
) -> Result<Option<Tensor<T>>> {
    match kind {
        PosEmbed::Learnable => Ok(Some(trunc_normal(&[len, dim], INIT_STD, rng))),
        PosEmbed::Sinusoidal => {
            if dim % 2 != 0 {
                return Err(Error::Config(format!(
                    "sinusoidal positional table needs an even width, got {dim}"
                )));
            }
            Ok(Some(Tensor::from_fn(&[len, dim], |idx| {
                let (pos, col) = (idx / dim, idx % dim);
                let i = col / 2;
                let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
                T::of(if col % 2 == 0 { angle.sin() } else { angle.cos() })
            })))
        }
        PosEmbed::Disabled => Ok(None),
    }
}

/// Result of [`whitening_init`].
#[derive(Debug, Clone)]
pub struct Whitening<T> {
    /// `[out_dim, patch_dim]`; the first `min(out_dim, patch_dim)` rows are
    /// `(λᵢ + ε)^{-1/2} eᵢ` in descending eigenvalue order.
    pub weight: Tensor<T>,
    /// `-weight · mean`, so whitened coordinates are centered.
    pub bias: Tensor<T>,
    pub eigenvalues: Vec<f64>,
    /// Number of eigenvalues that fell below `eps` and were floored.
    pub floored: usize,
}

/// Builds patch-embedding filters that decorrelate a sample of flattened
/// patches (`[n, patch_dim]`, `n ≥ 10·patch_dim`). Rows beyond `patch_dim`
/// are truncated-normal.
pub fn whitening_init<T: Scalar>(
    patches: &Tensor<T>,
    out_dim: usize,
    eps: f64,
    rng: &mut dyn RngCore,
) -> Result<Whitening<T>> {
    if patches.rank() != 2 {
        return Err(Error::shape("whitening_init", patches.shape(), &[0, 0]));
    }
    let (n, d) = (patches.shape()[0], patches.shape()[1]);
    if n < 10 * d {
        return Err(Error::Validation(format!(
            "whitening needs at least {} patches of width {d}, got {n}",
            10 * d
        )));
    }
    let x = patches.data();
    let mut mean = vec![0.0f64; d];
    for row in x.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0f64; d];
    for row in x.chunks_exact(d) {
        for j in 0..d {
            centered[j] = row[j].as_f64() - mean[j];
        }
        for a in 0..d {
            let ca = centered[a];
            for b in a..d {
                cov[(a, b)] += ca * centered[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / n as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut weight = trunc_normal::<T>(&[out_dim, d], INIT_STD, rng);
    let mut eigenvalues = Vec::with_capacity(d);
    let mut floored = 0;
    for (row, &k) in order.iter().enumerate() {
        let lambda = eig.eigenvalues[k];
        eigenvalues.push(lambda);
        if lambda < eps {
            floored += 1;
        }
        if row >= out_dim {
            continue;
        }
        let scale = 1.0 / (lambda.max(0.0) + eps).sqrt();
        let w = &mut weight.data_mut()[row * d..(row + 1) * d];
        for j in 0..d {
            w[j] = T::of(eig.eigenvectors[(j, k)] * scale);
        }
    }
    if floored > 0 {
        log::warn!("whitening sample is rank-deficient: {floored} eigenvalues below {eps} were floored");
    }
    let bias = Tensor::from_fn(&[out_dim], |r| {
        if r >= d {
            return T::zero();
        }
        let w = &weight.data()[r * d..(r + 1) * d];
        let dot: f64 = w.iter().zip(&mean).map(|(a, b)| a.as_f64() * b).sum();
        T::of(-dot)
    });
    Ok(Whitening {
        weight,
        bias,
        eigenvalues,
        floored,
    })
}

/// Uniformly draws `count` patches (with replacement) from `images`
/// (`[N, 3, H, W]`) for whitening.
pub fn sample_patches<T: Scalar>(
    images: &Tensor<T>,
    patch: usize,
    count: usize,
    rng: &mut dyn RngCore,
) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || s[2] % patch != 0 || s[3] % patch != 0 {
        return Err(Error::shape("sample_patches", s, &[0, 3, patch, patch]));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    let d = 3 * patch * patch;
    let mut out = Vec::with_capacity(count * d);
    for _ in 0..count {
        let i = rng.random_range(0..n);
        let (gi, gj) = (rng.random_range(0..gh), rng.random_range(0..gw));
        for ch in 0..3 {
            for r in 0..patch {
                let base = ((i * 3 + ch) * h + gi * patch + r) * w + gj * patch;
                out.extend_from_slice(&images.data()[base..base + patch]);
            }
        }
    }
    Tensor::new(vec![count, d], out)
}
