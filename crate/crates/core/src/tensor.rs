//! Dense row-major tensors and the numeric kernels shared by the forward
//! ops and their backward rules.
//!
//! Every reduction in this module accumulates in ascending index order so a
//! given input produces bitwise-identical output on every run.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type. Training runs at `f32`; gradient checks and
/// equivalence tests run the same code at `f64`.
pub trait Scalar:
    Float + AddAssign + MulAssign + Default + Debug + Display + Send + Sync + 'static
{
    const BYTES: usize;
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[inline]
pub(crate) fn c<T: Scalar>(v: f64) -> T {
    T::of(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| {
            if i / n == i % n {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn at(&self, idx: &[usize]) -> T {
        assert_eq!(idx.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (&i, &d) in idx.iter().zip(&self.shape) {
            assert!(i < d, "index {idx:?} out of bounds for {:?}", self.shape);
            off = off * d + i;
        }
        self.data[off]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        let mut s = T::zero();
        for &v in &self.data {
            s += v;
        }
        s
    }

    pub fn transpose2d(&self) -> Result<Self> {
        let [r, c] = self.dims2("transpose")?;
        Ok(Tensor {
            shape: vec![c, r],
            data: transpose(&self.data, r, c),
        })
    }

    fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [r, c] => Ok([r, c]),
            _ => Err(Error::shape(op, &self.shape, &[0, 0])),
        }
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let [m, k] = self.dims2("matmul")?;
        let [k2, n] = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(&self.data, &rhs.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.shape.len() {
            return Err(Error::Validation(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(out[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (out[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] = out[base + j * inner] / sum;
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let cols = *self.shape.last().unwrap_or(&0);
        if gamma.shape != [cols] || beta.shape != [cols] {
            return Err(Error::shape("layer_norm", &self.shape, &gamma.shape));
        }
        if eps <= 0.0 {
            return Err(Error::Validation("layer_norm eps must be positive".into()));
        }
        let mut out = vec![T::zero(); self.data.len()];
        layer_norm_rows(&self.data, &gamma.data, &beta.data, cols, c(eps), &mut out, None);
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn activation(&self, kind: Activation) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| activate(x, kind)).collect(),
        }
    }
}

/// `c = a · b` for row-major `a: m×k`, `b: k×n`. Each output element is
/// accumulated over the inner index in ascending order starting from zero.
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        row.fill(T::zero());
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

pub(crate) fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for j in 0..cols {
        for i in 0..rows {
            out.push(src[i * cols + j]);
        }
    }
    out
}

/// Normalizes each row of `x` (width `cols`) with the biased variance
/// estimator. When `stats` is given, per-row `(mean, rstd)` are written to it.
pub(crate) fn layer_norm_rows<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    cols: usize,
    eps: T,
    out: &mut [T],
    mut stats: Option<&mut Vec<(T, T)>>,
) {
    let inv_n = T::one() / c::<T>(cols as f64);
    for (row, orow) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean = mean * inv_n;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var = var * inv_n;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..cols {
            orow[j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
        }
        if let Some(s) = stats.as_deref_mut() {
            s.push((mean, rstd));
        }
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn activate<T: Scalar>(x: T, kind: Activation) -> T {
    match kind {
        Activation::Relu => {
            if x > T::zero() {
                x
            } else {
                T::zero()
            }
        }
        Activation::Gelu => {
            let xf = x.as_f64();
            T::of(0.5 * xf * (1.0 + libm::erf(xf * std::f64::consts::FRAC_1_SQRT_2)))
        }
    }
}

pub(crate) fn activate_grad<T: Scalar>(x: T, kind: Activation) -> T {
    match kind {
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Gelu => {
            let xf = x.as_f64();
            let cdf = 0.5 * (1.0 + libm::erf(xf * std::f64::consts::FRAC_1_SQRT_2));
            let pdf = FRAC_1_SQRT_2PI * (-0.5 * xf * xf).exp();
            T::of(cdf + xf * pdf)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(&[i, p]) * b.at(&[p, j]);
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[6, 9], &mut rng);
        assert_eq!(a.matmul(&Tensor::eye(9)).unwrap(), a);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&[7, 5], &mut rng);
        let b = random(&[5, 3], &mut rng);
        let got = a.matmul(&b).unwrap();
        for (g, e) in got.data().iter().zip(triple_loop(&a, &b)) {
            assert!((g - e).abs() <= 1e-12 * e.abs().max(1e-300));
        }
    }

    #[test]
    fn matmul_is_associative_at_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = random(&[8, 8], &mut rng);
            let b = random(&[8, 8], &mut rng);
            let cc = random(&[8, 8], &mut rng);
            let l = a.matmul(&b).unwrap().matmul(&cc).unwrap();
            let r = a.matmul(&b.matmul(&cc).unwrap()).unwrap();
            let scale = l.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (x, y) in l.data().iter().zip(r.data()) {
                assert!((x - y).abs() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let u = Tensor::new(vec![4], vec![0.0f64; 4]).unwrap().softmax(0).unwrap();
        assert_eq!(u.data(), &[0.25; 4]);
        let one = Tensor::new(vec![3, 1], vec![5.0f64, -2.0, 9.0]).unwrap();
        assert_eq!(one.softmax(1).unwrap().data(), &[1.0; 3]);
        let big = Tensor::new(vec![2], vec![1000.0f64, 0.0]).unwrap().softmax(0).unwrap();
        assert!(big.all_finite());
        assert!((big.data()[0] - 1.0).abs() < 1e-12 && big.data()[1] < 1e-300);
        assert!(Tensor::<f64>::zeros(&[2, 2]).softmax(2).is_err());
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = Tensor::new(vec![2, 2], vec![0.0f64, 1.0, 0.0, 1.0]).unwrap();
        let s = x.softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::<f64>::ones(&[2]);
        let b = Tensor::<f64>::zeros(&[2]);
        let y = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap().layer_norm(&g, &b, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);

        let g = Tensor::<f64>::ones(&[5]);
        let b = Tensor::<f64>::zeros(&[5]);
        let y = Tensor::full(&[1, 5], 7.0).layer_norm(&g, &b, 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[1, 64], &mut rng);
        let g = Tensor::<f64>::ones(&[64]);
        let b = Tensor::<f64>::zeros(&[64]);
        let y = x.layer_norm(&g, &b, 1e-6).unwrap();
        let mean = y.sum() / 64.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() <= 1e-6);
        assert!((var - 1.0).abs() <= 1e-3);
    }

    #[test]
    fn activation_examples() {
        assert_eq!(activate(0.0f64, Activation::Gelu), 0.0);
        assert_eq!(activate(0.0f64, Activation::Relu), 0.0);
        assert_eq!(activate(-2.0f64, Activation::Relu), 0.0);
        assert_eq!(activate(3.0f64, Activation::Relu), 3.0);
        assert!((activate(1.0f64, Activation::Gelu) - 0.841345).abs() < 1e-6);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (activate(x + h, Activation::Gelu) - activate(x - h, Activation::Gelu)) / (2.0 * h);
            assert!((fd - activate_grad(x, Activation::Gelu)).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_inconsistent_construction() {
        assert!(Tensor::new(vec![2, 2], vec![0.0f32; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], Vec::<f32>::new()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_are_distributions(xs in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
            let n = xs.len();
            let spread = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let s = Tensor::new(vec![n], xs).unwrap().softmax(0).unwrap();
            let sum: f64 = s.data().iter().sum();
            proptest::prop_assert!((sum - 1.0).abs() <= 1e-6);
            // exp underflows once the spread exceeds ~745 at f64
            let lo = s.data().iter().cloned().fold(f64::INFINITY, f64::min);
            proptest::prop_assert!(lo >= 0.0);
                        if spread < 700.0 {
                proptest::prop_assert!(lo > 0.0);
            }
        }
    }
}
