//! Helpers shared by the integration tests: independent reference
//! implementations and synthetic data.

#![allow(dead_code)]

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tiergan::image::ImageU8;
use tiergan::kernels::ConvGeometry;
use tiergan::Tensor;

/// Direct nested-loop cross-correlation in f64.
pub fn naive_conv2d(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    b: &Tensor<f64>,
    g: &ConvGeometry,
) -> Tensor<f64> {
    let [n, c, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    let o = g.out_channels;
    let xd = x.data();
    let kd = k.data();
    let mut y = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.data()[oc];
                    for ci in 0..c {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let yi = (i * sh + a) as isize - ph as isize;
                                let xj = (j * sw + bb) as isize - pw as isize;
                                if yi < 0 || xj < 0 || yi >= h as isize || xj >= w as isize {
                                    continue;
                                }
                                acc += xd[((ni * c + ci) * h + yi as usize) * w + xj as usize]
                                    * kd[((oc * c + ci) * kh + a) * kw + bb];
                            }
                        }
                    }
                    y[((ni * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new([n, o, oh, ow], y).unwrap()
}

/// Transposed convolution as an explicit scatter of every input pixel.
pub fn naive_conv2d_transpose(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    b: &Tensor<f64>,
    g: &ConvGeometry,
) -> Tensor<f64> {
    let [n, c, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let oh = (h - 1) * sh + kh - 2 * ph;
    let ow = (w - 1) * sw + kw - 2 * pw;
    let o = g.out_channels;
    let mut y = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oc in 0..o {
            for p in 0..oh * ow {
                y[(ni * o + oc) * oh * ow + p] = b.data()[oc];
            }
        }
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x.data()[((ni * c + ci) * h + i) * w + j];
                    for oc in 0..o {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let yi = (i * sh + a) as isize - ph as isize;
                                let yj = (j * sw + bb) as isize - pw as isize;
                                if yi < 0 || yj < 0 || yi >= oh as isize || yj >= ow as isize {
                                    continue;
                                }
                                y[((ni * o + oc) * oh + yi as usize) * ow + yj as usize] +=
                                    v * k.data()[((ci * o + oc) * kh + a) * kw + bb];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, o, oh, ow], y).unwrap()
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Largest elementwise `|a - b| / max(|a|, |b|, 1)`.
pub fn max_rel_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Textured grayscale test image in `[0, 1]`, quantized to multiples of
/// 1/255: a few soft gradients, rectangular "strokes" and per-pixel grain.
pub fn painting(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fx: f64 = rng.random_range(0.5..3.0);
    let fy: f64 = rng.random_range(0.5..3.0);
    let phase: f64 = rng.random_range(0.0..TAU);
    let mut img: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
            0.5 + 0.25 * (fx * TAU * x + phase).sin() * (fy * TAU * y).cos()
        })
        .collect();
    for _ in 0..(h * w / 64).max(4) {
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (sh, sw) = (
            rng.random_range(1..=h / 4 + 1),
            rng.random_range(1..=w / 4 + 1),
        );
        let delta: f64 = rng.random_range(-0.2..0.2);
        for y in y0..(y0 + sh).min(h) {
            for x in x0..(x0 + sw).min(w) {
                img[y * w + x] += delta;
            }
        }
    }
    let data = img
        .into_iter()
        .map(|v| {
            let v = v + rng.random_range(-0.08..0.08);
            ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
        })
        .collect();
    Tensor::new([1, h, w], data).unwrap()
}

pub fn painting_u8(seed: u64, h: usize, w: usize) -> ImageU8 {
    let t = painting(seed, h, w);
    tiergan::image::denormalize(&t).unwrap()
}

/// Random RGB image.
pub fn random_rgb(seed: u64, w: usize, h: usize) -> ImageU8 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageU8::new(w, h, 3, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap()
}
