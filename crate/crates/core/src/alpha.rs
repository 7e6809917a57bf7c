//! Training-free alpha extraction from generator attention.
//!
//! The aggregated cross-attention map is upsampled to the canvas, thresholded
//! into a coarse object mask, fused with the known visible mask, and refined
//! with GrabCut. The binary result becomes the alpha channel of the output.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grabcut::{grabcut_run, GrabCutParams, Trimap, TrimapLabel};
use crate::mask::{dilate, mask_union, BinaryMask, StructuringElement};

/// Latent cells per side for an image dimension (8x VAE downsampling).
pub fn latent_dim(pixels: u32) -> u32 {
    pixels.div_ceil(8)
}

/// Aggregated attention on the generator's latent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBundle {
    latent_width: u32,
    latent_height: u32,
    cross: Vec<f32>,
    self_refined: Option<Vec<f32>>,
}

impl AttentionBundle {
    pub fn new(
        latent_width: u32,
        latent_height: u32,
        cross: Vec<f32>,
        self_refined: Option<Vec<f32>>,
    ) -> Result<Self> {
        if latent_width == 0 || latent_height == 0 {
            return Err(Error::InvalidInput("attention grid must be non-empty".into()));
        }
        let n = latent_width as usize * latent_height as usize;
        for (name, grid) in [("cross", Some(&cross)), ("self_refined", self_refined.as_ref())] {
            let Some(grid) = grid else { continue };
            if grid.len() != n {
                return Err(Error::InvalidInput(format!(
                    "{name} attention has {} values, grid {latent_width}x{latent_height} needs {n}",
                    grid.len()
                )));
            }
            if let Some(v) = grid.iter().find(|v| !v.is_finite() || !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidInput(format!("{name} attention value {v} outside [0, 1]")));
            }
        }
        Ok(AttentionBundle {
            latent_width,
            latent_height,
            cross,
            self_refined,
        })
    }

    /// Flat-zero bundle sized for an image of `width` x `height` pixels.
    pub fn zeros_for(width: u32, height: u32) -> Self {
        let (lw, lh) = (latent_dim(width), latent_dim(height));
        AttentionBundle {
            latent_width: lw,
            latent_height: lh,
            cross: vec![0.0; lw as usize * lh as usize],
            self_refined: None,
        }
    }

    pub fn latent_dims(&self) -> (u32, u32) {
        (self.latent_width, self.latent_height)
    }

    pub fn cross(&self) -> &[f32] {
        &self.cross
    }

    pub fn self_refined(&self) -> Option<&[f32]> {
        self.self_refined.as_deref()
    }

    pub fn max_value(&self) -> f32 {
        self.cross.iter().copied().fold(0.0, f32::max)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = AttnHeader {
            format: ATTN_FORMAT.into(),
            version: 1,
            latent_w: self.latent_width,
            latent_h: self.latent_height,
            self_refined: self.self_refined.is_some(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        w.write_all(&f32_to_le_bytes(&self.cross))?;
        if let Some(s) = &self.self_refined {
            w.write_all(&f32_to_le_bytes(s))?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: AttnHeader = serde_json::from_str(line.trim_end())?;
        if header.format != ATTN_FORMAT {
            return Err(Error::InvalidInput(format!("not an attention file: {:?}", header.format)));
        }
        let n = header.latent_w as usize * header.latent_h as usize;
        let mut read_grid = || -> Result<Vec<f32>> {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            Ok(f32_from_le_bytes(&buf).expect("length is a multiple of 4"))
        };
        let cross = read_grid()?;
        let self_refined = if header.self_refined { Some(read_grid()?) } else { None };
        AttentionBundle::new(header.latent_w, header.latent_h, cross, self_refined)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

const ATTN_FORMAT: &str = "amodal-attn";

#[derive(Serialize, Deserialize)]
struct AttnHeader {
    format: String,
    version: u32,
    latent_w: u32,
    latent_h: u32,
    self_refined: bool,
}

pub(crate) fn f32_to_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn f32_from_le_bytes(bytes: &[u8]) -> Option<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    )
}

/// Row-major float image.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl FloatMap {
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[(y * self.width + x) as usize]
    }

    /// Linear 0–255 grayscale rendering.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([(self.get(x, y).clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    /// Keep values at or above this fraction of the normalized range.
    Fixed(f64),
    Otsu,
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Fixed(0.4)
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Fixed(v) => write!(f, "{v}"),
            Threshold::Otsu => f.write_str("otsu"),
        }
    }
}

impl FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("otsu") {
            return Ok(Threshold::Otsu);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::Config(format!("threshold {s:?} is neither a number nor \"otsu\"")))?;
        Threshold::fixed(v)
    }
}

impl Threshold {
    pub fn fixed(v: f64) -> Result<Self> {
        if v > 0.0 && v < 1.0 {
            Ok(Threshold::Fixed(v))
        } else {
            Err(Error::Config(format!("threshold {v} must lie in (0, 1)")))
        }
    }
}

impl Serialize for Threshold {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Threshold::Fixed(v) => s.serialize_f64(*v),
            Threshold::Otsu => s.serialize_str("otsu"),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Threshold::fixed(v),
            Raw::Str(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlphaConfig {
    pub threshold: Threshold,
    /// Union the coarse attention mask with the visible mask.
    pub fuse_visible: bool,
    /// Prefer the self-attention-propagated map when the bundle carries one.
    pub use_self_refined: bool,
    pub grabcut_iters: u32,
    pub erode_fg: u32,
    pub dilate_bg_band: u32,
    /// Final denoising steps the attention producer averages over.
    pub attn_last_n: u32,
    pub gmm_components: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for AlphaConfig {
    fn default() -> Self {
        AlphaConfig {
            threshold: Threshold::default(),
            fuse_visible: true,
            use_self_refined: true,
            grabcut_iters: 5,
            erode_fg: 3,
            dilate_bg_band: 20,
            attn_last_n: 15,
            gmm_components: 5,
            gamma: 50.0,
            seed: 0,
        }
    }
}

impl AlphaConfig {
    pub fn validate(&self) -> Result<()> {
        if let Threshold::Fixed(v) = self.threshold {
            Threshold::fixed(v)?;
        }
        if self.gmm_components == 0 {
            return Err(Error::Config("gmm_components must be positive".into()));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Config("gamma must be finite and non-negative".into()));
        }
        if self.attn_last_n == 0 {
            return Err(Error::Config("attn_last_n must be positive".into()));
        }
        Ok(())
    }

    fn grabcut_params(&self) -> GrabCutParams {
        GrabCutParams {
            iterations: self.grabcut_iters,
            components: self.gmm_components,
            gamma: self.gamma,
            seed: self.seed,
        }
    }
}

/// Bilinear resize (pixel-centre aligned) of the selected attention grid.
pub fn upsample_attention(b: &AttentionBundle, w: u32, h: u32, use_self_refined: bool) -> Result<FloatMap> {
    if w == 0 || h == 0 {
        return Err(Error::InvalidInput("upsample target must be non-empty".into()));
    }
    let grid = match (use_self_refined, b.self_refined()) {
        (true, Some(s)) => s,
        _ => b.cross(),
    };
    let (lw, lh) = b.latent_dims();
    let sx = lw as f64 / w as f64;
    let sy = lh as f64 / h as f64;
    let sample_axis = |dst: u32, scale: f64, n: u32| -> (usize, usize, f64) {
        let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n as usize - 1);
        (i0, i1, pos - i0 as f64)
    };
    let cols: Vec<_> = (0..w).map(|x| sample_axis(x, sx, lw)).collect();
    let mut data = Vec::with_capacity(w as usize * h as usize);
    for y in 0..h {
        let (y0, y1, fy) = sample_axis(y, sy, lh);
        let row0 = &grid[y0 * lw as usize..(y0 + 1) * lw as usize];
        let row1 = &grid[y1 * lw as usize..(y1 + 1) * lw as usize];
        for &(x0, x1, fx) in &cols {
            let top = row0[x0] as f64 * (1.0 - fx) + row0[x1] as f64 * fx;
            let bottom = row1[x0] as f64 * (1.0 - fx) + row1[x1] as f64 * fx;
            data.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0) as f32);
        }
    }
    Ok(FloatMap {
        width: w,
        height: h,
        data,
    })
}

/// Min-max normalize to [0, 1]; a constant map is left as is.
fn normalized(m: &FloatMap) -> Vec<f64> {
    let (lo, hi) = m
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    let range = hi - lo;
    if range <= 1e-12 {
        return m.data.iter().map(|&v| v as f64).collect();
    }
    m.data.iter().map(|&v| (v as f64 - lo) / range).collect()
}

#[inline]
fn histogram_bin(v: f64) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

/// Otsu's threshold on a 256-bin histogram: the bin `t` maximizing the
/// between-class variance of `[0, t]` versus `(t, 255]`. Ties keep the
/// smallest `t`.
pub fn otsu_threshold(hist: &[u64; 256]) -> usize {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0;
    }
    let total_f = total as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best_t, mut best_var) = (0, -1.0);
    for (t, &c) in hist.iter().enumerate().take(255) {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total_f - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let var = (w0 / total_f) * (w1 / total_f) * (mu0 - mu1).powi(2);
        if var > best_var {
            best_var = var;
            best_t = t;
        }
    }
    best_t
}

/// Coarse object mask from an attention map.
pub fn threshold_map(m: &FloatMap, threshold: Threshold) -> BinaryMask {
    let values = normalized(m);
    let bits = match threshold {
        Threshold::Fixed(t) => values.iter().map(|&v| v >= t).collect(),
        Threshold::Otsu => {
            let mut hist = [0u64; 256];
            for &v in &values {
                hist[histogram_bin(v)] += 1;
            }
            let t = otsu_threshold(&hist);
            values.iter().map(|&v| histogram_bin(v) > t).collect()
        }
    };
    BinaryMask::from_bits(m.width, m.height, bits).expect("float map dims are positive")
}

pub fn fuse_with_visible(coarse: &BinaryMask, visible_canvas: &BinaryMask) -> Result<BinaryMask> {
    mask_union(coarse, visible_canvas)
}

fn erode(m: &BinaryMask, radius: u32) -> BinaryMask {
    dilate(&m.complement(), StructuringElement::disk(radius)).complement()
}

/// Trimap seeded from a fused mask: eroded core (plus any `pinned` pixels) is
/// sure foreground, the rest of the mask probable foreground, a band around it
/// probable background, everything further out sure background.
pub fn alpha_trimap(fused: &BinaryMask, pinned: Option<&BinaryMask>, cfg: &AlphaConfig) -> Trimap {
    let mut sure_fg = erode(fused, cfg.erode_fg);
    if let Some(p) = pinned {
        sure_fg = mask_union(&sure_fg, p).expect("pinned mask matches fused dims");
    }
    let near = dilate(fused, StructuringElement::disk(cfg.dilate_bg_band));
    Trimap::from_fn(fused.width(), fused.height(), |x, y| {
        if sure_fg.get(x, y) {
            TrimapLabel::SureFg
        } else if fused.get(x, y) {
            TrimapLabel::ProbFg
        } else if near.get(x, y) {
            TrimapLabel::ProbBg
        } else {
            TrimapLabel::SureBg
        }
    })
}

/// GrabCut refinement of a fused mask. Sure-foreground pixels always survive.
pub fn refine_alpha(
    img: &RgbImage,
    fused: &BinaryMask,
    pinned: Option<&BinaryMask>,
    cfg: &AlphaConfig,
) -> Result<BinaryMask> {
    if img.dimensions() != fused.dims() {
        return Err(Error::dims("refine_alpha", img.dimensions(), fused.dims()));
    }
    if fused.is_empty() {
        log::warn!("fused mask is empty; skipping refinement");
        return Ok(fused.clone());
    }
    if cfg.grabcut_iters == 0 {
        return Ok(fused.clone());
    }
    let trimap = alpha_trimap(fused, pinned, cfg);
    if trimap.validate().is_err() {
        log::warn!("fused mask covers the whole canvas; skipping refinement");
        return Ok(fused.clone());
    }
    Ok(grabcut_run(img, &trimap, &cfg.grabcut_params())?.mask)
}

/// Intermediate masks of one alpha extraction.
#[derive(Debug, Clone)]
pub struct AlphaStages {
    pub heatmap: FloatMap,
    pub coarse: BinaryMask,
    pub fused: BinaryMask,
    pub alpha: BinaryMask,
}

/// Upsample, threshold, optionally fuse with the visible mask, and refine.
/// With fusion on, visible pixels are pinned as sure foreground.
pub fn extract_alpha_stages(
    completed: &RgbImage,
    bundle: &AttentionBundle,
    visible_canvas: &BinaryMask,
    cfg: &AlphaConfig,
) -> Result<AlphaStages> {
    let (w, h) = completed.dimensions();
    if visible_canvas.dims() != (w, h) {
        return Err(Error::dims("extract_alpha", (w, h), visible_canvas.dims()));
    }
    let heatmap = upsample_attention(bundle, w, h, cfg.use_self_refined)?;
    let coarse = threshold_map(&heatmap, cfg.threshold);
    let (fused, pinned) = if cfg.fuse_visible {
        (fuse_with_visible(&coarse, visible_canvas)?, Some(visible_canvas))
    } else {
        (coarse.clone(), None)
    };
    let alpha = refine_alpha(completed, &fused, pinned, cfg)?;
    Ok(AlphaStages {
        heatmap,
        coarse,
        fused,
        alpha,
    })
}

pub fn extract_alpha(
    completed: &RgbImage,
    bundle: &AttentionBundle,
    visible_canvas: &BinaryMask,
    cfg: &AlphaConfig,
) -> Result<BinaryMask> {
    Ok(extract_alpha_stages(completed, bundle, visible_canvas, cfg)?.alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn map(w: u32, h: u32, f: impl Fn(u32, u32) -> f32) -> FloatMap {
        FloatMap {
            width: w,
            height: h,
            data: (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect(),
        }
    }

    /// Between-class variance of splitting raw samples at bin `t`.
    fn split_variance(samples: &[usize], t: usize) -> f64 {
        let (lo, hi): (Vec<f64>, Vec<f64>) = {
            let lo: Vec<f64> = samples.iter().filter(|&&s| s <= t).map(|&s| s as f64).collect();
            let hi: Vec<f64> = samples.iter().filter(|&&s| s > t).map(|&s| s as f64).collect();
            (lo, hi)
        };
        if lo.is_empty() || hi.is_empty() {
            return -1.0;
        }
        let n = samples.len() as f64;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        (lo.len() as f64 / n) * (hi.len() as f64 / n) * (mean(&lo) - mean(&hi)).powi(2)
    }

    #[test]
    fn upsample_constant_and_identity() {
        let b = AttentionBundle::new(1, 1, vec![0.7], None).unwrap();
        let m = upsample_attention(&b, 5, 3, false).unwrap();
        assert!(m.data.iter().all(|&v| (v - 0.7).abs() < 1e-6));

        let vals: Vec<f32> = (0..12).map(|i| i as f32 / 11.0).collect();
        let b = AttentionBundle::new(4, 3, vals.clone(), None).unwrap();
        assert_eq!(upsample_attention(&b, 4, 3, false).unwrap().data, vals);
        assert!(upsample_attention(&b, 0, 3, false).is_err());
    }

    #[test]
    fn upsample_two_by_two_to_four_by_four() {
        // grid [[a, b], [c, d]]; destination centres map to source
        // coordinates -0.25, 0.25, 0.75, 1.25 -> clamped weights 0, .25, .75, 1
        let (a, b, c, d) = (0.0f64, 0.4, 0.8, 1.0);
        let bundle = AttentionBundle::new(2, 2, vec![a as f32, b as f32, c as f32, d as f32], None).unwrap();
        let m = upsample_attention(&bundle, 4, 4, false).unwrap();
        let w = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                let (fx, fy) = (w[x], w[y]);
                let expected = a * (1.0 - fx) * (1.0 - fy) + b * fx * (1.0 - fy) + c * (1.0 - fx) * fy + d * fx * fy;
                assert!((m.get(x as u32, y as u32) as f64 - expected).abs() < 1e-6, "({x},{y})");
            }
        }
    }

    #[test]
    fn upsample_prefers_self_refined() {
        let b = AttentionBundle::new(1, 1, vec![0.2], Some(vec![0.9])).unwrap();
        assert!((upsample_attention(&b, 2, 2, true).unwrap().data[0] - 0.9).abs() < 1e-6);
        assert!((upsample_attention(&b, 2, 2, false).unwrap().data[0] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn threshold_examples() {
        let zeros = map(6, 6, |_, _| 0.0);
        assert!(threshold_map(&zeros, Threshold::Fixed(0.4)).is_empty());
        let ones = map(6, 6, |_, _| 1.0);
        assert_eq!(threshold_map(&ones, Threshold::Fixed(0.4)).count(), 36);

        let bimodal = map(8, 8, |x, y| if (x + y) % 3 == 0 { 0.9 } else { 0.1 });
        let m = threshold_map(&bimodal, Threshold::Otsu);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(m.get(x, y), (x + y) % 3 == 0);
            }
        }
    }

    #[test]
    fn threshold_parsing() {
        assert_eq!("otsu".parse::<Threshold>().unwrap(), Threshold::Otsu);
        assert_eq!("0.25".parse::<Threshold>().unwrap(), Threshold::Fixed(0.25));
        assert!("1.5".parse::<Threshold>().is_err());
        assert!("abc".parse::<Threshold>().is_err());
        let cfg: AlphaConfig = toml::from_str("threshold = \"otsu\"").unwrap();
        assert_eq!(cfg.threshold, Threshold::Otsu);
        let cfg: AlphaConfig = toml::from_str("threshold = 0.3").unwrap();
        assert_eq!(cfg.threshold, Threshold::Fixed(0.3));
    }

    #[test]
    fn fuse_examples() {
        let vis = BinaryMask::from_fn(6, 6, |x, _| x < 3);
        let inside = BinaryMask::from_fn(6, 6, |x, y| x < 2 && y < 2);
        assert_eq!(fuse_with_visible(&inside, &vis).unwrap(), vis);
        let disjoint = BinaryMask::from_fn(6, 6, |x, _| x == 5);
        assert_eq!(fuse_with_visible(&disjoint, &vis).unwrap().count(), vis.count() + disjoint.count());
        assert_eq!(fuse_with_visible(&BinaryMask::new(6, 6), &vis).unwrap(), vis);
        assert!(fuse_with_visible(&BinaryMask::new(5, 6), &vis).is_err());
    }

    fn two_color_scene() -> (RgbImage, BinaryMask) {
        let gt = BinaryMask::from_fn(40, 40, |x, y| (10..30).contains(&x) && (12..28).contains(&y));
        let img = RgbImage::from_fn(40, 40, |x, y| if gt.get(x, y) { Rgb([220, 180, 20]) } else { Rgb([20, 40, 90]) });
        (img, gt)
    }

    #[test]
    fn refine_examples() {
        let (img, gt) = two_color_scene();
        let cfg = AlphaConfig::default();
        let alpha = refine_alpha(&img, &gt, None, &cfg).unwrap();
        assert!(alpha.iou(&gt) >= 0.95);

        let no_op = AlphaConfig { grabcut_iters: 0, ..cfg.clone() };
        let sloppy = dilate(&gt, StructuringElement::disk(2));
        assert_eq!(refine_alpha(&img, &sloppy, None, &no_op).unwrap(), sloppy);

        // a fused mask spilling onto the background still keeps its eroded core
        let alpha = refine_alpha(&img, &sloppy, None, &cfg).unwrap();
        assert!(erode(&sloppy, cfg.erode_fg).is_subset_of(&alpha));

        let empty = refine_alpha(&img, &BinaryMask::new(40, 40), None, &cfg).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn attn_file_round_trip() {
        let b = AttentionBundle::new(3, 2, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1], Some(vec![0.3; 6])).unwrap();
        let mut buf = Vec::new();
        b.write_to(&mut buf).unwrap();
        let first_line = buf.split(|&c| c == b'\n').next().unwrap();
        let header: serde_json::Value = serde_json::from_slice(first_line).unwrap();
        assert_eq!(header["latent_w"], 3);
        assert_eq!(buf.len(), first_line.len() + 1 + 2 * 6 * 4);
        assert_eq!(AttentionBundle::read_from(&buf[..]).unwrap(), b);
    }

    #[test]
    fn bundle_validation() {
        assert!(AttentionBundle::new(2, 2, vec![0.0; 3], None).is_err());
        assert!(AttentionBundle::new(2, 1, vec![0.0, 1.5], None).is_err());
        assert!(AttentionBundle::new(2, 1, vec![0.0, f32::NAN], None).is_err());
        assert_eq!(AttentionBundle::zeros_for(17, 8).latent_dims(), (3, 1));
    }

    proptest! {
        #[test]
        fn otsu_matches_exhaustive_search(samples in proptest::collection::vec(0usize..256, 2..200)) {
            let mut hist = [0u64; 256];
            for &s in &samples {
                hist[s] += 1;
            }
            let t = otsu_threshold(&hist);
            let best = (0..255).map(|t| split_variance(&samples, t)).fold(-1.0, f64::max);
            if best >= 0.0 {
                prop_assert!((split_variance(&samples, t) - best).abs() <= 1e-9 * best.max(1.0));
            }
        }

        #[test]
        fn lower_threshold_never_shrinks(
            vals in proptest::collection::vec(0.0f32..=1.0, 16),
            hi in 0.05f64..0.95, delta in 0.0f64..0.5,
        ) {
            let m = FloatMap { width: 4, height: 4, data: vals };
            let lo = (hi - delta).max(0.01);
            let strict = threshold_map(&m, Threshold::Fixed(hi));
            let loose = threshold_map(&m, Threshold::Fixed(lo));
            prop_assert!(strict.is_subset_of(&loose));
        }
    }
}
