//! Native SSIM and the visible-region comparison it is applied to.

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::imaging::{luma, Color};
use crate::mask::{bbox, BinaryMask, CanvasPlacement, Rect};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_L: f64 = 255.0;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode filtering: output is (w-10) x (h-10).
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&line[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11x11 Gaussian windows of two luma planes.
pub fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<f64> {
    if a.len() != w * h || b.len() != w * h {
        return Err(Error::InvalidInput("ssim planes do not match their dimensions".into()));
    }
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let k = gaussian_kernel();
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, w, h, &k);
    let mu_b = filter_valid(b, w, h, &k);
    let aa = filter_valid(&prod(|x, _| x * x), w, h, &k);
    let bb = filter_valid(&prod(|_, y| y * y), w, h, &k);
    let ab = filter_valid(&prod(|x, y| x * y), w, h, &k);
    let c1 = (SSIM_K1 * SSIM_L).powi(2);
    let c2 = (SSIM_K2 * SSIM_L).powi(2);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

fn luma_plane(img: &RgbImage) -> Vec<f64> {
    img.pixels().map(luma).collect()
}

/// SSIM on BT.601 luma.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::dims("ssim", a.dimensions(), b.dimensions()));
    }
    ssim_plane(&luma_plane(a), &luma_plane(b), a.width() as usize, a.height() as usize)
}

pub fn ssim_gray(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::dims("ssim", a.dimensions(), b.dimensions()));
    }
    let plane = |g: &GrayImage| g.as_raw().iter().map(|&v| v as f64).collect::<Vec<_>>();
    ssim_plane(&plane(a), &plane(b), a.width() as usize, a.height() as usize)
}

/// Crops of the visible object's bbox from the original and from the
/// completed canvas (sampled at the placement offset), with non-visible
/// pixels set to `bg` on both sides.
pub fn visible_region_pair(
    original: &RgbImage,
    visible: &BinaryMask,
    completed: &RgbImage,
    p: &CanvasPlacement,
    bg: Color,
) -> Result<(RgbImage, RgbImage)> {
    if original.dimensions() != visible.dims() {
        return Err(Error::dims("visible_region_pair", original.dimensions(), visible.dims()));
    }
    if original.dimensions() != p.orig_dims() {
        return Err(Error::dims("visible_region_pair", p.orig_dims(), original.dimensions()));
    }
    if completed.dimensions() != p.new_dims() {
        return Err(Error::dims("visible_region_pair", p.new_dims(), completed.dimensions()));
    }
    let Rect { x, y, width, height } =
        bbox(visible).ok_or_else(|| Error::InvalidInput("visible mask is empty".into()))?;
    let crop = |src: &RgbImage, ox: u32, oy: u32| {
        RgbImage::from_fn(width, height, |i, j| {
            if visible.get(x + i, y + j) {
                *src.get_pixel(ox + x + i, oy + y + j)
            } else {
                bg
            }
        })
    };
    Ok((crop(original, 0, 0), crop(completed, p.offset_x, p.offset_y)))
}
