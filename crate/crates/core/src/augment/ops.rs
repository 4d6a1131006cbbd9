//! Pixel-space operations on 8-bit `[3, S, S]` images. Geometric ops use
//! nearest-neighbour sampling and clamp source coordinates to the border.

use rand::{Rng, RngCore};

/// Mirror about the vertical axis.
pub fn hflip(img: &mut [u8], side: usize) {
    for row in img.chunks_exact_mut(side) {
        row.reverse();
    }
}

fn reflect(p: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if p < 0 {
        -p
    } else if p >= n {
        2 * (n - 1) - p
    } else {
        p
    };
    r as usize
}

/// Crop at offset `(dy, dx)` from the image padded by `pad` reflected pixels
/// on each side. `(pad, pad)` is the identity.
pub fn pad_crop(img: &[u8], side: usize, pad: usize, dy: usize, dx: usize) -> Vec<u8> {
    let plane = side * side;
    let mut out = vec![0u8; img.len()];
    for ch in 0..3 {
        for y in 0..side {
            let sy = reflect(y as isize + dy as isize - pad as isize, side);
            for x in 0..side {
                let sx = reflect(x as isize + dx as isize - pad as isize, side);
                out[ch * plane + y * side + x] = img[ch * plane + sy * side + sx];
            }
        }
    }
    out
}

/// Pad-4-reflect, random crop back to `side`, then a horizontal flip with
/// probability ½.
pub fn crop_flip(img: &mut [u8], side: usize, rng: &mut dyn RngCore) {
    let (dy, dx) = (rng.random_range(0..=8), rng.random_range(0..=8));
    let out = pad_crop(img, side, 4, dy, dx);
    img.copy_from_slice(&out);
    if rng.random_bool(0.5) {
        hflip(img, side);
    }
}

/// Resamples through the inverse map `f(x, y) → (sx, sy)`.
fn warp(img: &mut [u8], side: usize, f: impl Fn(f64, f64) -> (f64, f64)) {
    let plane = side * side;
    let src = img.to_vec();
    let last = (side - 1) as f64;
    for y in 0..side {
        for x in 0..side {
            let (sx, sy) = f(x as f64, y as f64);
            let sx = sx.round().clamp(0.0, last) as usize;
            let sy = sy.round().clamp(0.0, last) as usize;
            for ch in 0..3 {
                img[ch * plane + y * side + x] = src[ch * plane + sy * side + sx];
            }
        }
    }
}

pub fn shear_x(img: &mut [u8], side: usize, s: f64) {
    warp(img, side, |x, y| (x + s * y, y));
}

pub fn shear_y(img: &mut [u8], side: usize, s: f64) {
    warp(img, side, |x, y| (x, y + s * x));
}

pub fn translate_x(img: &mut [u8], side: usize, t: f64) {
    warp(img, side, |x, y| (x - t, y));
}

pub fn translate_y(img: &mut [u8], side: usize, t: f64) {
    warp(img, side, |x, y| (x, y - t));
}

/// Counter-clockwise rotation by `deg` degrees about the image centre.
pub fn rotate(img: &mut [u8], side: usize, deg: f64) {
    let c = (side as f64 - 1.0) / 2.0;
    let (s, co) = deg.to_radians().sin_cos();
    warp(img, side, |x, y| {
        let (dx, dy) = (x - c, y - c);
        (c + co * dx - s * dy, c + s * dx + co * dy)
    });
}

/// `degenerate + f·(img − degenerate)`, rounded and clamped.
fn blend(img: &mut [u8], degenerate: &[u8], f: f64) {
    for (p, &d) in img.iter_mut().zip(degenerate) {
        let v = d as f64 + f * (*p as f64 - d as f64);
        *p = v.round().clamp(0.0, 255.0) as u8;
    }
}

fn luma(img: &[u8], side: usize) -> Vec<u8> {
    let plane = side * side;
    (0..plane)
        .map(|i| {
            let (r, g, b) = (img[i] as u32, img[plane + i] as u32, img[2 * plane + i] as u32);
            ((r * 19595 + g * 38470 + b * 7471 + 0x8000) >> 16) as u8
        })
        .collect()
}

/// Saturation: blend with the grey image.
pub fn color(img: &mut [u8], side: usize, f: f64) {
    let l = luma(img, side);
    let grey: Vec<u8> = l.iter().cycle().take(img.len()).copied().collect();
    blend(img, &grey, f);
}

pub fn brightness(img: &mut [u8], f: f64) {
    let black = vec![0u8; img.len()];
    blend(img, &black, f);
}

/// Blend with the mean grey level.
pub fn contrast(img: &mut [u8], side: usize, f: f64) {
    let l = luma(img, side);
    let mean = (l.iter().map(|&v| v as f64).sum::<f64>() / l.len() as f64 + 0.5).floor() as u8;
    blend(img, &vec![mean; img.len()], f);
}

/// Blend with a 3×3 smoothed copy (centre weight 5, others 1); the border
/// keeps its original pixels.
pub fn sharpness(img: &mut [u8], side: usize, f: f64) {
    let plane = side * side;
    let mut smooth = img.to_vec();
    for ch in 0..3 {
        for y in 1..side.saturating_sub(1) {
            for x in 1..side - 1 {
                let mut acc = 0u32;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let w = if ky == 1 && kx == 1 { 5 } else { 1 };
                        acc += w * img[ch * plane + (y + ky - 1) * side + x + kx - 1] as u32;
                    }
                }
                smooth[ch * plane + y * side + x] = ((acc as f64 / 13.0).round()) as u8;
            }
        }
    }
    blend(img, &smooth, f);
}

/// Keeps the top `bits` bits of every byte.
pub fn posterize(img: &mut [u8], bits: u8) {
    let mask = if bits == 0 { 0 } else { 0xffu8 << (8 - bits.min(8)) };
    for p in img {
        *p &= mask;
    }
}

/// Inverts every pixel at or above `threshold`.
pub fn solarize(img: &mut [u8], threshold: f64) {
    for p in img {
        if *p as f64 >= threshold {
            *p = 255 - *p;
        }
    }
}

pub fn invert(img: &mut [u8]) {
    for p in img {
        *p = 255 - *p;
    }
}

/// Stretches each channel to the full byte range.
pub fn autocontrast(img: &mut [u8], side: usize) {
    for plane in img.chunks_exact_mut(side * side) {
        let lo = *plane.iter().min().unwrap();
        let hi = *plane.iter().max().unwrap();
        if hi == lo {
            continue;
        }
        let scale = 255.0 / (hi - lo) as f64;
        for p in plane {
            *p = ((*p - lo) as f64 * scale).round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// Per-channel histogram equalization.
pub fn equalize(img: &mut [u8], side: usize) {
    for plane in img.chunks_exact_mut(side * side) {
        let mut hist = [0usize; 256];
        for &p in plane.iter() {
            hist[p as usize] += 1;
        }
        let last = hist.iter().rposition(|&h| h > 0).unwrap();
        let step = (plane.len() - hist[last]) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0u8; 256];
        let mut n = step / 2;
        for (i, &h) in hist.iter().enumerate() {
            lut[i] = (n / step).min(255) as u8;
            n += h;
        }
        for p in plane {
            *p = lut[*p as usize];
        }
    }
}
