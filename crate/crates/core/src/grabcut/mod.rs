//! GrabCut segmentation: per-class Gaussian mixture colour models alternated
//! with a minimum cut on the 8-connected pixel grid.

mod gmm;
mod graph;

pub use gmm::{fit_gmm, Component, Gmm, COVARIANCE_EPSILON};
pub use graph::{Cut, GridGraph, FORWARD_OFFSETS};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, Rect};

/// β used when the image has no neighbour contrast at all.
pub const CONSTANT_IMAGE_BETA: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrimapLabel {
    SureBg,
    ProbBg,
    ProbFg,
    SureFg,
}

impl TrimapLabel {
    pub fn is_fg(self) -> bool {
        matches!(self, TrimapLabel::ProbFg | TrimapLabel::SureFg)
    }

    pub fn is_sure(self) -> bool {
        matches!(self, TrimapLabel::SureFg | TrimapLabel::SureBg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trimap {
    width: u32,
    height: u32,
    labels: Vec<TrimapLabel>,
}

impl Trimap {
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> TrimapLabel) -> Self {
        let labels = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Trimap {
            width,
            height,
            labels,
        }
    }

    /// Outside the box is sure background, inside probable foreground.
    pub fn from_box(width: u32, height: u32, r: Rect) -> Self {
        Trimap::from_fn(width, height, |x, y| {
            if x >= r.x && x < r.right() && y >= r.y && y < r.bottom() {
                TrimapLabel::ProbFg
            } else {
                TrimapLabel::SureBg
            }
        })
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn get(&self, x: u32, y: u32) -> TrimapLabel {
        self.labels[(y * self.width + x) as usize]
    }

    pub fn labels(&self) -> &[TrimapLabel] {
        &self.labels
    }

    pub fn foreground(&self) -> BinaryMask {
        BinaryMask::from_bits(self.width, self.height, self.labels.iter().map(|l| l.is_fg()).collect())
            .expect("trimap dims are positive")
    }

    /// At least one foreground and one background pixel.
    pub fn validate(&self) -> Result<()> {
        let fg = self.labels.iter().any(|l| l.is_fg());
        let bg = self.labels.iter().any(|l| !l.is_fg());
        if !(fg && bg) {
            return Err(Error::InvalidInput(
                "trimap needs at least one foreground and one background pixel".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrabCutParams {
    pub iterations: u32,
    pub components: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for GrabCutParams {
    fn default() -> Self {
        GrabCutParams {
            iterations: 5,
            components: 5,
            gamma: 50.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GrabCutOutcome {
    pub mask: BinaryMask,
    /// Total energy after each completed iteration.
    pub energies: Vec<f64>,
}

/// `1 / (2 <|c_p - c_q|^2>)` over all 8-connected neighbour pairs.
pub fn beta_estimate(img: &RgbImage) -> f64 {
    let (w, h) = img.dimensions();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            for (dx, dy) in FORWARD_OFFSETS {
                let (nx, ny) = (x + dx as i64, y + dy as i64);
                if nx < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                sum += color_sq_dist(img.get_pixel(x as u32, y as u32), img.get_pixel(nx as u32, ny as u32));
                pairs += 1;
            }
        }
    }
    if pairs == 0 || sum == 0.0 {
        return CONSTANT_IMAGE_BETA;
    }
    1.0 / (2.0 * sum / pairs as f64)
}

#[inline]
fn color_sq_dist(a: &image::Rgb<u8>, b: &image::Rgb<u8>) -> f64 {
    (0..3)
        .map(|c| (a[c] as f64 - b[c] as f64).powi(2))
        .sum()
}

/// Smoothness weights `gamma / dist * exp(-beta |dc|^2)` for every forward
/// neighbour pair, with 0 where the neighbour is outside the image.
pub fn neighbor_weights(img: &RgbImage, gamma: f64, beta: f64) -> Vec<[f64; 4]> {
    let (w, h) = img.dimensions();
    let mut out = vec![[0.0; 4]; w as usize * h as usize];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let p = img.get_pixel(x as u32, y as u32);
            let idx = (y * w as i64 + x) as usize;
            for (dir, (dx, dy)) in FORWARD_OFFSETS.iter().enumerate() {
                let (nx, ny) = (x + *dx as i64, y + *dy as i64);
                if nx < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let dist = if dx.abs() + dy.abs() == 2 { std::f64::consts::SQRT_2 } else { 1.0 };
                let q = img.get_pixel(nx as u32, ny as u32);
                out[idx][dir] = gamma / dist * (-beta * color_sq_dist(p, q)).exp();
            }
        }
    }
    out
}

/// Run GrabCut for up to `params.iterations` rounds, stopping early when the
/// labeling stops changing. Sure pixels never change label.
pub fn grabcut_run(img: &RgbImage, trimap: &Trimap, params: &GrabCutParams) -> Result<GrabCutOutcome> {
    if img.dimensions() != trimap.dims() {
        return Err(Error::dims("grabcut_run", img.dimensions(), trimap.dims()));
    }
    trimap.validate()?;
    let mut fg: Vec<bool> = trimap.labels.iter().map(|l| l.is_fg()).collect();
    let (w, h) = trimap.dims();
    if params.iterations == 0 {
        return Ok(GrabCutOutcome {
            mask: BinaryMask::from_bits(w, h, fg)?,
            energies: Vec::new(),
        });
    }

    let colors: Vec<[f64; 3]> = img
        .pixels()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    let beta = beta_estimate(img);
    let mut smoothness = GridGraph::new(w, h);
    smoothness.neighbors = neighbor_weights(img, params.gamma, beta);
    let pin = 1.0 + max_incident_weight(&smoothness);
    let energy = |fg: &[bool], fg_model: &Gmm, bg_model: &Gmm| -> f64 {
        let data: f64 = colors
            .iter()
            .zip(fg)
            .map(|(z, &is_fg)| if is_fg { fg_model.cost(z) } else { bg_model.cost(z) })
            .sum();
        data + smoothness.cut_value(fg)
    };

    let split = |fg: &[bool]| -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
        let mut f = Vec::new();
        let mut b = Vec::new();
        for (z, &is_fg) in colors.iter().zip(fg) {
            if is_fg { f.push(*z) } else { b.push(*z) }
        }
        (f, b)
    };

    let (f_samples, b_samples) = split(&fg);
    let mut fg_model = fit_gmm(&f_samples, params.components, params.seed)?;
    let mut bg_model = fit_gmm(&b_samples, params.components, params.seed.wrapping_add(1))?;

    let mut energies = Vec::new();
    for round in 0..params.iterations {
        if round > 0 {
            let (f_samples, b_samples) = split(&fg);
            fg_model.refine(&f_samples);
            bg_model.refine(&b_samples);
        }

        let mut graph = smoothness.clone();
        for (i, label) in trimap.labels.iter().enumerate() {
            let (src, snk) = match label {
                TrimapLabel::SureFg => (pin, 0.0),
                TrimapLabel::SureBg => (0.0, pin),
                _ => {
                    let d_fg = fg_model.cost(&colors[i]);
                    let d_bg = bg_model.cost(&colors[i]);
                    let m = d_fg.min(d_bg);
                    (d_bg - m, d_fg - m)
                }
            };
            graph.source[i] = src;
            graph.sink[i] = snk;
        }
        let cut = graph.min_cut();
        let next: Vec<bool> = trimap
            .labels
            .iter()
            .zip(cut.foreground.bits())
            .map(|(l, &c)| match l {
                TrimapLabel::SureFg => true,
                TrimapLabel::SureBg => false,
                _ => c,
            })
            .collect();
        energies.push(energy(&next, &fg_model, &bg_model));
        let converged = next == fg;
        fg = next;
        if converged {
            break;
        }
    }

    Ok(GrabCutOutcome {
        mask: BinaryMask::from_bits(w, h, fg)?,
        energies,
    })
}

/// Largest total smoothness weight incident to any single pixel.
fn max_incident_weight(g: &GridGraph) -> f64 {
    let mut incident = vec![0.0f64; g.len()];
    for p in 0..g.len() {
        for dir in 0..4 {
            if let Some(q) = g.neighbor(p, dir) {
                incident[p] += g.neighbors[p][dir];
                incident[q] += g.neighbors[p][dir];
            }
        }
    }
    incident.into_iter().fold(0.0, f64::max)
}

/// Convenience wrapper returning only the foreground mask.
pub fn grabcut(
    img: &RgbImage,
    trimap: &Trimap,
    iterations: u32,
    components: usize,
    gamma: f64,
    seed: u64,
) -> Result<BinaryMask> {
    let params = GrabCutParams {
        iterations,
        components,
        gamma,
        seed,
    };
    Ok(grabcut_run(img, trimap, &params)?.mask)
}
