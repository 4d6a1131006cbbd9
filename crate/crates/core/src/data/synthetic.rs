use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::cifar::{Dataset, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Synthetic {
    /// Two classes whose pixels are `128 ± μ` plus noise of std `σ = μ/2`.
    TwoClassBlobs,
    /// Two classes of 8-pixel bands, bright first: horizontal vs vertical.
    /// Band edges sit on 4-pixel patch boundaries and both classes light the
    /// same number of patches, so only the arrangement of patches differs.
    StripedPatches,
}

impl fmt::Display for Synthetic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Synthetic::TwoClassBlobs => "blobs",
            Synthetic::StripedPatches => "stripes",
        })
    }
}

impl FromStr for Synthetic {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" | "two-class-blobs" => Ok(Synthetic::TwoClassBlobs),
            "stripes" | "striped-patches" => Ok(Synthetic::StripedPatches),
            _ => Err(Error::Config(format!("unknown synthetic dataset {s:?}"))),
        }
    }
}

pub const BLOB_MU: f64 = 40.0;
pub const BLOB_SIGMA: f64 = 20.0;

/// `n` images of side `side` with alternating labels, fully determined by
/// `seed`.
pub fn synthetic_dataset(kind: Synthetic, n: usize, side: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Config("a synthetic dataset needs at least 2 samples".into()));
    }
    if kind == Synthetic::StripedPatches && side % 16 != 0 {
        return Err(Error::Config(format!("striped images need a side divisible by 16, got {side}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = side * side;
    let mut images = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u8;
        labels.push(label);
        match kind {
            Synthetic::TwoClassBlobs => {
                let sign = if label == 0 { -1.0 } else { 1.0 };
                for _ in 0..3 * plane {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let v = 128.0 + sign * BLOB_MU + BLOB_SIGMA * z;
                    images.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
            Synthetic::StripedPatches => {
                let hi: f64 = rng.random_range(170.0..230.0);
                let lo: f64 = rng.random_range(20.0..80.0);
                for _ in 0..3 {
                    for r in 0..side {
                        for c in 0..side {
                            let coord = if label == 0 { r } else { c };
                            let bright = (coord / 8) % 2 == 0;
                            let z: f64 = StandardNormal.sample(&mut rng);
                            let v = if bright { hi } else { lo } + 8.0 * z;
                            images.push(v.round().clamp(0.0, 255.0) as u8);
                        }
                    }
                }
            }
        }
    }
    Dataset::new(kind.to_string(), Split::Train, side, 2, images, labels)
}
