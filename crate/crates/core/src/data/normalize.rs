use crate::tensor::Scalar;

pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

/// `(x/255 − mean_c) / std_c` for an image laid out `[3, H, W]`.
pub fn normalize_into<T: Scalar>(bytes: &[u8], out: &mut [T]) {
    let plane = bytes.len() / 3;
    for (i, (&b, o)) in bytes.iter().zip(out.iter_mut()).enumerate() {
        let ch = i / plane;
        *o = T::of((b as f64 / 255.0 - CIFAR_MEAN[ch]) / CIFAR_STD[ch]);
    }
}

pub fn normalize<T: Scalar>(bytes: &[u8]) -> Vec<T> {
    let mut out = vec![T::zero(); bytes.len()];
    normalize_into(bytes, &mut out);
    out
}

/// Inverse of [`normalize`], rounded and clamped to bytes.
pub fn denormalize<T: Scalar>(x: &[T]) -> Vec<u8> {
    let plane = x.len() / 3;
    x.iter()
        .enumerate()
        .map(|(i, v)| {
            let ch = i / plane;
            let px = (v.as_f64() * CIFAR_STD[ch] + CIFAR_MEAN[ch]) * 255.0;
            px.round().clamp(0.0, 255.0) as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_constants() {
        let mut img = vec![0u8; 12];
        img[0] = 255;
        let x: Vec<f64> = normalize(&img);
        assert!((x[0] - 2.0591).abs() < 1e-4);
        assert!((x[8] - (-1.7068)).abs() < 1e-4);
    }

    #[test]
    fn roundtrip_every_byte_value() {
        let img: Vec<u8> = (0..768).map(|i| (i % 256) as u8).collect();
        assert_eq!(denormalize(&normalize::<f32>(&img)), img);
        assert_eq!(denormalize(&normalize::<f64>(&img)), img);
    }
}
