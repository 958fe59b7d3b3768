//! Per-plane image operations shared by the synthetic distortions.

use std::f32::consts::PI;
use std::sync::OnceLock;

use crate::video::VideoTensor;

pub const BLOCK: usize = 8;

/// Orthonormal 8-point DCT-II basis, `basis[k][n]`.
fn dct_basis() -> &'static [[f32; BLOCK]; BLOCK] {
    static BASIS: OnceLock<[[f32; BLOCK]; BLOCK]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; BLOCK]; BLOCK];
        for (k, row) in b.iter_mut().enumerate() {
            let scale = if k == 0 { (1.0 / BLOCK as f32).sqrt() } else { (2.0 / BLOCK as f32).sqrt() };
            for (n, v) in row.iter_mut().enumerate() {
                *v = scale * (PI * (2 * n + 1) as f32 * k as f32 / (2 * BLOCK) as f32).cos();
            }
        }
        b
    })
}

/// Quantizes 8x8 DCT coefficients of every channel plane with a step that
/// grows with frequency. Partial edge blocks are left untouched.
pub fn block_quantize(video: &mut VideoTensor, step: f32) {
    if step <= 0.0 {
        return;
    }
    let (t, h, w) = video.dims();
    let c = video.channels();
    let basis = dct_basis();
    let mut block = [[0.0f32; BLOCK]; BLOCK];
    let mut tmp = [[0.0f32; BLOCK]; BLOCK];
    for f in 0..t {
        let frame = video.frame_mut(f);
        for ch in 0..c {
            for by in (0..h - h % BLOCK).step_by(BLOCK) {
                for bx in (0..w - w % BLOCK).step_by(BLOCK) {
                    for y in 0..BLOCK {
                        for x in 0..BLOCK {
                            block[y][x] = frame[((by + y) * w + bx + x) * c + ch] - 0.5;
                        }
                    }
                    // forward: tmp = B * block * B^T
                    for k in 0..BLOCK {
                        for x in 0..BLOCK {
                            tmp[k][x] = (0..BLOCK).map(|y| basis[k][y] * block[y][x]).sum();
                        }
                    }
                    for k in 0..BLOCK {
                        for l in 0..BLOCK {
                            let coef: f32 = (0..BLOCK).map(|x| tmp[k][x] * basis[l][x]).sum();
                            let q = step * (1.0 + (k + l) as f32 / 2.0);
                            block[k][l] = (coef / q).round() * q;
                        }
                    }
                    // inverse: B^T * coef * B
                    for y in 0..BLOCK {
                        for l in 0..BLOCK {
                            tmp[y][l] = (0..BLOCK).map(|k| basis[k][y] * block[k][l]).sum();
                        }
                    }
                    for y in 0..BLOCK {
                        for x in 0..BLOCK {
                            let v: f32 = (0..BLOCK).map(|l| tmp[y][l] * basis[l][x]).sum();
                            frame[((by + y) * w + bx + x) * c + ch] = v + 0.5;
                        }
                    }
                }
            }
        }
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(video: &mut VideoTensor, sigma: f32) {
    if sigma <= 0.0 {
        return;
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let (t, h, w) = video.dims();
    let c = video.channels();
    let mut tmp = vec![0.0f32; h * w * c];
    for f in 0..t {
        let frame = video.frame_mut(f);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (i, kv) in kernel.iter().enumerate() {
                        let xx = (x as i64 + i as i64 - r).clamp(0, w as i64 - 1) as usize;
                        acc += kv * frame[(y * w + xx) * c + ch];
                    }
                    tmp[(y * w + x) * c + ch] = acc;
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (i, kv) in kernel.iter().enumerate() {
                        let yy = (y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize;
                        acc += kv * tmp[(yy * w + x) * c + ch];
                    }
                    frame[(y * w + x) * c + ch] = acc;
                }
            }
        }
    }
}

/// Bilinear sample of one channel with clamped borders.
pub fn sample_bilinear(frame: &[f32], h: usize, w: usize, c: usize, ch: usize, y: f32, x: f32) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let p = |yy: usize, xx: usize| frame[(yy * w + xx) * c + ch];
    (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1))
}

/// Variance of the 4-neighbour Laplacian of the channel mean, over all
/// interior pixels of all frames.
pub fn laplacian_variance(video: &VideoTensor) -> f64 {
    let (t, h, w) = video.dims();
    let c = video.channels();
    let mut vals = Vec::with_capacity(t * h * w);
    for f in 0..t {
        let frame = video.frame(f);
        let g = |y: usize, x: usize| -> f64 {
            (0..c).map(|ch| frame[(y * w + x) * c + ch] as f64).sum::<f64>() / c as f64
        };
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                vals.push(g(y - 1, x) + g(y + 1, x) + g(y, x - 1) + g(y, x + 1) - 4.0 * g(y, x));
            }
        }
    }
    if vals.is_empty() {
        return 0.0;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dct_basis_is_orthonormal() {
        let b = dct_basis();
        for i in 0..BLOCK {
            for j in 0..BLOCK {
                let dot: f32 = (0..BLOCK).map(|n| b[i][n] * b[j][n]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn tiny_step_quantization_is_near_identity() {
        let v = VideoTensor::from_fn(1, 16, 16, |_, y, x, c| ((y * 3 + x * 5 + c) % 11) as f32 / 11.0).unwrap();
        let mut q = v.clone();
        block_quantize(&mut q, 1e-6);
        for (a, b) in v.data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn blur_keeps_constants_and_lowers_sharpness() {
        let mut flat = VideoTensor::filled(1, 12, 12, 0.3).unwrap();
        gaussian_blur(&mut flat, 2.0);
        assert!(flat.data().iter().all(|v| (v - 0.3).abs() < 1e-6));

        let sharp = VideoTensor::from_fn(1, 24, 24, |_, y, x, _| ((x / 2 + y / 2) % 2) as f32).unwrap();
        let mut soft = sharp.clone();
        gaussian_blur(&mut soft, 1.5);
        assert!(laplacian_variance(&soft) < laplacian_variance(&sharp));
    }
}
