//! Pixel kernels behind each registered perturbation. Callers guarantee
//! parameters are in range and not all neutral.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::imgcore::{Image, Mask, CHANNELS};

const RAIN_COLOR: f32 = 0.75;
/// Scene dimming per unit of rain density (0.05 dims to 70%).
const RAIN_DIMMING: f64 = 6.0;
const FOG_COLOR: f32 = 0.8;
const FOG_CELL: f64 = 12.0;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Normalised 1-D Gaussian taps for `sigma > 0`.
fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let half = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k.into_iter().map(|v| v as f32).collect()
}

/// Separable convolution of a `channels`-interleaved plane with edge clamping.
fn convolve_separable(
    data: &[f32],
    w: usize,
    h: usize,
    channels: usize,
    kernel: &[f32],
) -> Vec<f32> {
    let half = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0f32; data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                let mut acc = 0.0f32;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = (x as i64 + k as i64 - half).clamp(0, w as i64 - 1) as usize;
                    acc += kv * data[(y * w + sx) * channels + c];
                }
                tmp[(y * w + x) * channels + c] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                let mut acc = 0.0f32;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = (y as i64 + k as i64 - half).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp[(sy * w + x) * channels + c];
                }
                out[(y * w + x) * channels + c] = acc;
            }
        }
    }
    out
}

pub(super) fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let (w, h) = img.dims();
    let out = convolve_separable(img.data(), w, h, CHANNELS, &gaussian_kernel(sigma));
    Image::from_clipped(w, h, out)
}

/// Bilinear sample with edge clamping (used by the blurs).
#[inline]
fn sample_clamped(img: &Image, x: f64, y: f64) -> [f32; 3] {
    let (w, h) = img.dims();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let (a, b, c, d) = (
        img.pixel(x0, y0),
        img.pixel(x1, y0),
        img.pixel(x0, y1),
        img.pixel(x1, y1),
    );
    let mut out = [0.0; 3];
    for ch in 0..3 {
        let top = a[ch] + (b[ch] - a[ch]) * fx;
        let bot = c[ch] + (d[ch] - c[ch]) * fx;
        out[ch] = top + (bot - top) * fy;
    }
    out
}

pub(super) fn motion_blur(img: &Image, length: f64, angle_deg: f64) -> Image {
    if length <= 0.0 {
        return img.clone();
    }
    let (w, h) = img.dims();
    let (s, c) = angle_deg.to_radians().sin_cos();
    let n = (length.ceil() as usize + 1).max(2);
    let offsets: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let t = -length / 2.0 + length * k as f64 / (n - 1) as f64;
            (t * c, t * s)
        })
        .collect();
    let mut out = Vec::with_capacity(w * h * CHANNELS);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for &(ox, oy) in &offsets {
                let p = sample_clamped(img, x as f64 + ox, y as f64 + oy);
                for ch in 0..3 {
                    acc[ch] += p[ch];
                }
            }
            out.extend(acc.map(|v| v / n as f32));
        }
    }
    Image::from_clipped(w, h, out)
}

/// Additive `sigma · z` with `z ~ N(0, 1)` per channel value; the draw
/// pattern depends only on the seed, so the output is continuous in sigma.
pub(super) fn gaussian_noise(img: &Image, sigma: f64, seed: u64) -> Image {
    let mut r = rng(seed);
    let (w, h) = img.dims();
    let out = img
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = r.sample(StandardNormal);
            v + (sigma * z) as f32
        })
        .collect();
    Image::from_clipped(w, h, out)
}

/// Salt-and-pepper: each pixel is replaced with black or white with
/// probability `amount`. Corrupted sets are nested as `amount` grows.
pub(super) fn impulse_noise(img: &Image, amount: f64, seed: u64) -> Image {
    let mut r = rng(seed);
    let (w, h) = img.dims();
    let mut out = img.data().to_vec();
    for px in out.chunks_exact_mut(CHANNELS) {
        let hit: f64 = r.random();
        let salt: bool = r.random();
        if hit < amount {
            px.fill(if salt { 1.0 } else { 0.0 });
        }
    }
    Image::from_clipped(w, h, out)
}

pub(super) fn brightness(img: &Image, delta: f64) -> Image {
    let (w, h) = img.dims();
    let d = delta as f32;
    Image::from_clipped(w, h, img.data().iter().map(|v| v + d).collect())
}

/// Scales deviations from the mean luminance.
pub(super) fn contrast(img: &Image, factor: f64) -> Image {
    let (w, h) = img.dims();
    let lum = img.luminance();
    let mean = (lum.iter().map(|&v| v as f64).sum::<f64>() / lum.len().max(1) as f64) as f32;
    let f = factor as f32;
    Image::from_clipped(
        w,
        h,
        img.data().iter().map(|&v| (v - mean) * f + mean).collect(),
    )
}

/// Smooth value noise in `[0, 1]` on a lattice of `cell`-pixel spacing.
fn value_noise(w: usize, h: usize, cell: f64, seed: u64) -> Vec<f32> {
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let mut r = rng(seed);
    let lattice: Vec<f32> = (0..gw * gh).map(|_| r.random()).collect();
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let gy = y as f64 / cell;
        let (y0, fy) = (gy.floor() as usize, smooth((gy - gy.floor()) as f32));
        for x in 0..w {
            let gx = x as f64 / cell;
            let (x0, fx) = (gx.floor() as usize, smooth((gx - gx.floor()) as f32));
            let at = |i: usize, j: usize| lattice[j * gw + i];
            let top = at(x0, y0) + (at(x0 + 1, y0) - at(x0, y0)) * fx;
            let bot = at(x0, y0 + 1) + (at(x0 + 1, y0 + 1) - at(x0, y0 + 1)) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    out
}

/// Blends toward a light grey with a patchy, seed-dependent density.
pub(super) fn fog(img: &Image, thickness: f64, seed: u64) -> Image {
    let (w, h) = img.dims();
    let field = value_noise(w, h, FOG_CELL, seed);
    let t = thickness as f32;
    let mut out = img.data().to_vec();
    for (px, &f) in out.chunks_exact_mut(CHANNELS).zip(&field) {
        let alpha = t * (0.55 + 0.45 * f);
        for v in px {
            *v = *v * (1.0 - alpha) + alpha * FOG_COLOR;
        }
    }
    Image::from_clipped(w, h, out)
}

pub(super) struct RainParams {
    pub opaqueness: f64,
    pub size: f64,
    pub density: f64,
    pub blur: f64,
    pub angle_deg: f64,
    pub speed: f64,
}

/// Streaks of `speed` pixels, `size` pixels thick, tilted by `angle`, seeded
/// at a `density` fraction of pixels and alpha-blended with opacity
/// `opaqueness`. The frame is then softened by a Gaussian of sigma `blur`
/// and darkened in proportion to `density`, as overcast rainy scenes are.
pub(super) fn rain(img: &Image, p: &RainParams, seed: u64) -> Image {
    let (w, h) = img.dims();
    let mut r = rng(seed);
    let mut layer = vec![0.0f32; w * h];
    let (s, c) = p.angle_deg.to_radians().sin_cos();
    let size = p.size.max(1.0) as i64;
    let steps = p.speed.ceil().max(1.0) as i64;
    for y in 0..h {
        for x in 0..w {
            let u: f64 = r.random();
            if u >= p.density {
                continue;
            }
            for t in 0..=steps {
                let t = (t as f64).min(p.speed);
                let px = (x as f64 + t * s).round() as i64;
                let py = (y as f64 + t * c).round() as i64;
                for oy in 0..size {
                    for ox in 0..size {
                        let (qx, qy) = (px + ox, py + oy);
                        if qx >= 0 && qy >= 0 && (qx as usize) < w && (qy as usize) < h {
                            layer[qy as usize * w + qx as usize] = 1.0;
                        }
                    }
                }
            }
        }
    }
    let op = p.opaqueness as f32;
    let mut out = img.data().to_vec();
    for (px, &a) in out.chunks_exact_mut(CHANNELS).zip(&layer) {
        let alpha = op * a;
        for v in px {
            *v = *v * (1.0 - alpha) + alpha * RAIN_COLOR;
        }
    }
    if p.blur > 0.0 {
        out = convolve_separable(&out, w, h, CHANNELS, &gaussian_kernel(p.blur));
    }
    let dim = (1.0 - RAIN_DIMMING * p.density).max(0.0) as f32;
    if dim < 1.0 {
        for v in &mut out {
            *v *= dim;
        }
    }
    Image::from_clipped(w, h, out)
}

/// White anti-aliased discs of `radius` at a `density` fraction of pixels.
pub(super) fn snow(img: &Image, density: f64, radius: f64, seed: u64) -> Image {
    let (w, h) = img.dims();
    let mut r = rng(seed);
    let mut layer = vec![0.0f32; w * h];
    let reach = (radius + 1.0).ceil() as i64;
    for y in 0..h {
        for x in 0..w {
            let u: f64 = r.random();
            if u >= density {
                continue;
            }
            for oy in -reach..=reach {
                for ox in -reach..=reach {
                    let (qx, qy) = (x as i64 + ox, y as i64 + oy);
                    if qx < 0 || qy < 0 || qx as usize >= w || qy as usize >= h {
                        continue;
                    }
                    let d = ((ox * ox + oy * oy) as f64).sqrt();
                    let a = (radius + 0.5 - d).clamp(0.0, 1.0) as f32;
                    let cell = &mut layer[qy as usize * w + qx as usize];
                    *cell = cell.max(a);
                }
            }
        }
    }
    let mut out = img.data().to_vec();
    for (px, &a) in out.chunks_exact_mut(CHANNELS).zip(&layer) {
        for v in px {
            *v = *v * (1.0 - a) + a;
        }
    }
    Image::from_clipped(w, h, out)
}

/// Resamples image (bilinear) and mask (nearest) through an inverse map
/// from output pixel to source coordinates. Out-of-frame samples are black
/// and false.
fn warp(img: &Image, mask: &Mask, inverse: impl Fn(f64, f64) -> (f64, f64)) -> (Image, Mask) {
    let (w, h) = img.dims();
    let mut out = Vec::with_capacity(w * h * CHANNELS);
    let mut bits = Vec::with_capacity(w * h);
    let fetch = |x: i64, y: i64| -> [f32; 3] {
        if x < 0 || y < 0 || x as usize >= w || y as usize >= h {
            [0.0; 3]
        } else {
            img.pixel(x as usize, y as usize)
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inverse(x as f64, y as f64);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let (a, b, c, d) = (
                fetch(x0, y0),
                fetch(x0 + 1, y0),
                fetch(x0, y0 + 1),
                fetch(x0 + 1, y0 + 1),
            );
            for ch in 0..3 {
                let top = a[ch] * (1.0 - fx) + b[ch] * fx;
                let bot = c[ch] * (1.0 - fx) + d[ch] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
            let (nx, ny) = ((sx + 0.5).floor() as i64, (sy + 0.5).floor() as i64);
            bits.push(
                nx >= 0
                    && ny >= 0
                    && (nx as usize) < w
                    && (ny as usize) < h
                    && mask.get(nx as usize, ny as usize),
            );
        }
    }
    (
        Image::from_clipped(w, h, out),
        Mask::new(w, h, bits).expect("warp preserves dimensions"),
    )
}

/// Rotation, isotropic scale and shear about the image centre, then a
/// translation by `(dx, dy)` pixels.
pub(super) fn affine(
    img: &Image,
    mask: &Mask,
    rotation_deg: f64,
    scale: f64,
    shear: f64,
    dx: f64,
    dy: f64,
) -> (Image, Mask) {
    let (w, h) = img.dims();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = rotation_deg.to_radians().sin_cos();
    // forward A = R · [[1, shear], [0, 1]] · scale
    let a = [
        [c * scale, (c * shear - s) * scale],
        [s * scale, (s * shear + c) * scale],
    ];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [
        [a[1][1] / det, -a[0][1] / det],
        [-a[1][0] / det, a[0][0] / det],
    ];
    warp(img, mask, |x, y| {
        let (u, v) = (x - cx - dx, y - cy - dy);
        (
            inv[0][0] * u + inv[0][1] * v + cx,
            inv[1][0] * u + inv[1][1] * v + cy,
        )
    })
}

/// Magnifies the window of relative size `1/scale` centred at
/// `(cx·w, cy·h)` back to full frame.
pub(super) fn zoom(img: &Image, mask: &Mask, cx: f64, cy: f64, scale: f64) -> (Image, Mask) {
    let (w, h) = img.dims();
    let (wf, hf) = (w as f64, h as f64);
    warp(img, mask, |x, y| {
        (
            cx * wf + (x + 0.5 - wf / 2.0) / scale - 0.5,
            cy * hf + (y + 0.5 - hf / 2.0) / scale - 0.5,
        )
    })
}

/// Pads each side by `pad_x·w` / `pad_y·h` black pixels and resizes back to
/// the original frame.
pub(super) fn padding(img: &Image, mask: &Mask, pad_x: f64, pad_y: f64) -> (Image, Mask) {
    let (w, h) = img.dims();
    let (wf, hf) = (w as f64, h as f64);
    let (fx, fy) = (1.0 + 2.0 * pad_x, 1.0 + 2.0 * pad_y);
    warp(img, mask, |x, y| {
        (
            (x + 0.5 - wf / 2.0) * fx + wf / 2.0 - 0.5,
            (y + 0.5 - hf / 2.0) * fy + hf / 2.0 - 0.5,
        )
    })
}
