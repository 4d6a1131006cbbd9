//! The fixed AutoAugment CIFAR-10 policy: 25 two-stage sub-policies, one of
//! which is drawn uniformly per image.

use std::str::FromStr;

use rand::{Rng, RngCore};

use crate::augment::ops;
use crate::error::{Error, Result};

pub const CIFAR10_POLICY: &str = include_str!("../../data/autoaugment_cifar10.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugOp {
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    Color,
    Posterize,
    Solarize,
    Contrast,
    Sharpness,
    Brightness,
    AutoContrast,
    Equalize,
    Invert,
}

impl FromStr for AugOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        use AugOp::*;
        Ok(match s {
            "shear_x" => ShearX,
            "shear_y" => ShearY,
            "translate_x" => TranslateX,
            "translate_y" => TranslateY,
            "rotate" => Rotate,
            "color" => Color,
            "posterize" => Posterize,
            "solarize" => Solarize,
            "contrast" => Contrast,
            "sharpness" => Sharpness,
            "brightness" => Brightness,
            "autocontrast" => AutoContrast,
            "equalize" => Equalize,
            "invert" => Invert,
            _ => return Err(Error::Config(format!("unknown augmentation op {s:?}"))),
        })
    }
}

impl AugOp {
    fn takes_magnitude(self) -> bool {
        !matches!(self, AugOp::AutoContrast | AugOp::Equalize | AugOp::Invert)
    }

    fn signed(self) -> bool {
        !matches!(self, AugOp::Posterize | AugOp::Solarize) && self.takes_magnitude()
    }

    /// Magnitude of bin `m` (0–9) before the random sign.
    pub fn magnitude(self, bin: u8, side: usize) -> f64 {
        let t = bin as f64 / 9.0;
        match self {
            AugOp::ShearX | AugOp::ShearY => 0.3 * t,
            AugOp::TranslateX | AugOp::TranslateY => 150.0 / 331.0 * side as f64 * t,
            AugOp::Rotate => 30.0 * t,
            AugOp::Color | AugOp::Contrast | AugOp::Sharpness | AugOp::Brightness => 0.9 * t,
            AugOp::Posterize => 8.0 - (bin as f64 / 2.25).round(),
            AugOp::Solarize => 255.0 * (1.0 - t),
            _ => 0.0,
        }
    }

    /// Applies the op with signed magnitude `v`.
    pub fn apply(self, img: &mut [u8], side: usize, v: f64) {
        match self {
            AugOp::ShearX => ops::shear_x(img, side, v),
            AugOp::ShearY => ops::shear_y(img, side, v),
            AugOp::TranslateX => ops::translate_x(img, side, v),
            AugOp::TranslateY => ops::translate_y(img, side, v),
            AugOp::Rotate => ops::rotate(img, side, v),
            AugOp::Color => ops::color(img, side, 1.0 + v),
            AugOp::Contrast => ops::contrast(img, side, 1.0 + v),
            AugOp::Sharpness => ops::sharpness(img, side, 1.0 + v),
            AugOp::Brightness => ops::brightness(img, 1.0 + v),
            AugOp::Posterize => ops::posterize(img, v as u8),
            AugOp::Solarize => ops::solarize(img, v),
            AugOp::AutoContrast => ops::autocontrast(img, side),
            AugOp::Equalize => ops::equalize(img, side),
            AugOp::Invert => ops::invert(img),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub op: AugOp,
    pub prob: f64,
    pub bin: Option<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub subs: Vec<[Stage; 2]>,
}

fn parse_stage(s: &str, line: usize) -> Result<Stage> {
    let bad = |m: &str| Error::Config(format!("policy line {line}: {m}"));
    let f: Vec<&str> = s.split(',').map(str::trim).collect();
    if f.len() != 3 {
        return Err(bad("expected op,probability,magnitude"));
    }
    let op: AugOp = f[0].parse()?;
    let prob: f64 = f[1].parse().map_err(|_| bad("bad probability"))?;
    if !(0.0..=1.0).contains(&prob) {
        return Err(bad("probability outside [0, 1]"));
    }
    let bin = match f[2] {
        "-" => None,
        m => {
            let b: u8 = m.parse().map_err(|_| bad("bad magnitude"))?;
            if b > 9 {
                return Err(bad("magnitude bin above 9"));
            }
            Some(b)
        }
    };
    if bin.is_some() != op.takes_magnitude() {
        return Err(bad("magnitude given for an op without one, or missing"));
    }
    Ok(Stage { op, prob, bin })
}

impl Policy {
    pub fn parse(text: &str) -> Result<Self> {
        let mut subs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (a, b) = line
                .split_once(';')
                .ok_or_else(|| Error::Config(format!("policy line {}: expected two stages", i + 1)))?;
            subs.push([parse_stage(a, i + 1)?, parse_stage(b, i + 1)?]);
        }
        if subs.is_empty() {
            return Err(Error::Config("empty augmentation policy".into()));
        }
        Ok(Policy { subs })
    }

    pub fn cifar10() -> Self {
        Policy::parse(CIFAR10_POLICY).expect("embedded policy parses")
    }

    /// Draws one sub-policy and runs each stage with its probability.
    pub fn apply(&self, img: &mut [u8], side: usize, rng: &mut dyn RngCore) {
        let sub = &self.subs[rng.random_range(0..self.subs.len())];
        for st in sub {
            if rng.random::<f64>() >= st.prob {
                continue;
            }
            let mut v = st.op.magnitude(st.bin.unwrap_or(0), side);
            if st.op.signed() && rng.random_bool(0.5) {
                v = -v;
            }
            st.op.apply(img, side, v);
        }
    }
}
