//! Binary masks, canvas expansion geometry and inpainting-region composition.
//!
//! Every mask in the pipeline (visible, occluders, boundary strip, inpainting
//! region, attention mask, alpha) is a [`BinaryMask`]. Masks in the original
//! image frame are lifted onto an expanded canvas with [`place_mask`], using a
//! [`CanvasPlacement`] computed from per-edge expansion fractions.

use std::fmt;
use std::path::Path;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest expansion fraction accepted on any side.
pub const MAX_EXPANSION: f64 = 2.0;

/// Default tolerance, in pixels, for [`edges_touched`].
pub const DEFAULT_EDGE_TOLERANCE: u32 = 2;

/// Row-major boolean grid.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BinaryMask({}x{}, {} set)",
            self.width,
            self.height,
            self.count()
        )
    }
}

impl BinaryMask {
    /// All-false mask. Panics on a zero dimension.
    pub fn new(width: u32, height: u32) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be positive");
        BinaryMask {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        let mut m = Self::new(width, height);
        m.bits.fill(value);
        m
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.bits[(y * width + x) as usize] = f(x, y);
            }
        }
        m
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("mask dimensions must be positive".into()));
        }
        if bits.len() != width as usize * height as usize {
            return Err(Error::InvalidInput(format!(
                "mask of {width}x{height} needs {} bits, got {}",
                width as usize * height as usize,
                bits.len()
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[(y * self.width + x) as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Coordinates of all set pixels in row-major order.
    pub fn iter_set(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i as u32 % w, i as u32 / w))
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let inter = self.intersection_count(other);
        let union = self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a || b)
            .count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Sub-mask covering `r`.
    pub fn crop(&self, r: Rect) -> Result<BinaryMask> {
        if r.x + r.width > self.width || r.y + r.height > self.height {
            return Err(Error::InvalidInput(format!(
                "crop {r:?} exceeds {}x{} mask",
                self.width, self.height
            )));
        }
        Ok(BinaryMask::from_fn(r.width, r.height, |x, y| {
            self.get(r.x + x, r.y + y)
        }))
    }

    /// 0 for false, 255 for true.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    /// Any nonzero sample loads as true.
    pub fn from_gray(img: &GrayImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        BinaryMask::from_bits(w, h, img.as_raw().iter().map(|&v| v != 0).collect())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        Self::from_gray(&img)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_gray().save(path)?;
        Ok(())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        crate::imaging::encode_png(&image::DynamicImage::ImageLuma8(self.to_gray()))
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
        Self::from_gray(&img.to_luma8())
    }
}

/// Per-edge expansion fractions, relative to the original width (left/right)
/// or height (top/bottom).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpansionSpec {
    #[serde(default)]
    pub left: f64,
    #[serde(default)]
    pub right: f64,
    #[serde(default)]
    pub top: f64,
    #[serde(default)]
    pub bottom: f64,
}

impl ExpansionSpec {
    pub const ZERO: ExpansionSpec = ExpansionSpec {
        left: 0.0,
        right: 0.0,
        top: 0.0,
        bottom: 0.0,
    };

    pub fn new(left: f64, right: f64, top: f64, bottom: f64) -> Result<Self> {
        let e = ExpansionSpec {
            left,
            right,
            top,
            bottom,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.sides() {
            if !v.is_finite() || !(0.0..=MAX_EXPANSION).contains(&v) {
                return Err(Error::InvalidExpansion(format!(
                    "{name} = {v} outside [0, {MAX_EXPANSION}]"
                )));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.sides().iter().all(|(_, v)| *v == 0.0)
    }

    pub fn sides(&self) -> [(&'static str, f64); 4] {
        [
            ("left", self.left),
            ("right", self.right),
            ("top", self.top),
            ("bottom", self.bottom),
        ]
    }

    pub fn get(&self, edge: Edge) -> f64 {
        match edge {
            Edge::Left => self.left,
            Edge::Right => self.right,
            Edge::Top => self.top,
            Edge::Bottom => self.bottom,
        }
    }

    pub fn set(&mut self, edge: Edge, v: f64) {
        match edge {
            Edge::Left => self.left = v,
            Edge::Right => self.right = v,
            Edge::Top => self.top = v,
            Edge::Bottom => self.bottom = v,
        }
    }

    /// Edges with a positive expansion.
    pub fn directions(&self) -> EdgeSet {
        Edge::ALL
            .into_iter()
            .filter(|&e| self.get(e) > 0.0)
            .collect()
    }
}

/// Geometry of the original image footprint inside the expanded canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanvasPlacement {
    pub orig_width: u32,
    pub orig_height: u32,
    pub new_width: u32,
    pub new_height: u32,
    pub offset_x: u32,
    pub offset_y: u32,
}

impl CanvasPlacement {
    pub fn identity(width: u32, height: u32) -> Self {
        CanvasPlacement {
            orig_width: width,
            orig_height: height,
            new_width: width,
            new_height: height,
            offset_x: 0,
            offset_y: 0,
        }
    }

    pub fn orig_dims(&self) -> (u32, u32) {
        (self.orig_width, self.orig_height)
    }

    pub fn new_dims(&self) -> (u32, u32) {
        (self.new_width, self.new_height)
    }

    /// The original image's rectangle on the canvas.
    pub fn footprint(&self) -> Rect {
        Rect {
            x: self.offset_x,
            y: self.offset_y,
            width: self.orig_width,
            height: self.orig_height,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.new_dims() == self.orig_dims()
    }

    #[inline]
    pub fn in_footprint(&self, x: u32, y: u32) -> bool {
        x >= self.offset_x
            && x < self.offset_x + self.orig_width
            && y >= self.offset_y
            && y < self.offset_y + self.orig_height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuringElement {
    /// Euclidean disk radius in pixels.
    pub radius: u32,
}

impl StructuringElement {
    pub fn disk(radius: u32) -> Self {
        StructuringElement { radius }
    }

    /// `max(5, round(0.015 * max(width, height)))`.
    pub fn default_for(width: u32, height: u32) -> Self {
        let r = round_half_up(0.015 * width.max(height) as f64) as u32;
        StructuringElement { radius: r.max(5) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub fn new(x: u32, y: u32, width: u32, height: u32) -> Self {
        Rect {
            x,
            y,
            width,
            height,
        }
    }

    pub fn right(&self) -> u32 {
        self.x + self.width
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Edge {
    Left,
    Right,
    Top,
    Bottom,
}

impl Edge {
    pub const ALL: [Edge; 4] = [Edge::Left, Edge::Right, Edge::Top, Edge::Bottom];

    pub fn name(self) -> &'static str {
        match self {
            Edge::Left => "left",
            Edge::Right => "right",
            Edge::Top => "top",
            Edge::Bottom => "bottom",
        }
    }

    fn bit(self) -> u8 {
        1 << self as u8
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Small set of image edges, iterated in left, right, top, bottom order.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct EdgeSet(u8);

impl EdgeSet {
    pub const EMPTY: EdgeSet = EdgeSet(0);

    pub fn insert(&mut self, e: Edge) {
        self.0 |= e.bit();
    }

    pub fn contains(&self, e: Edge) -> bool {
        self.0 & e.bit() != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(&self) -> impl Iterator<Item = Edge> + '_ {
        Edge::ALL.into_iter().filter(|e| self.contains(*e))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.iter().map(Edge::name).collect()
    }
}

impl FromIterator<Edge> for EdgeSet {
    fn from_iter<I: IntoIterator<Item = Edge>>(iter: I) -> Self {
        let mut s = EdgeSet::EMPTY;
        for e in iter {
            s.insert(e);
        }
        s
    }
}

impl fmt::Debug for EdgeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl fmt::Display for EdgeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        f.write_str(&self.names().join(", "))
    }
}

impl Serialize for EdgeSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for EdgeSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(Vec::<Edge>::deserialize(d)?.into_iter().collect())
    }
}

pub(crate) fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Canvas size and footprint offset for an expansion. Rounding is half-up,
/// and any rounding shortfall is absorbed by the right/bottom margins.
pub fn compute_canvas(orig_width: u32, orig_height: u32, e: &ExpansionSpec) -> Result<CanvasPlacement> {
    if orig_width == 0 || orig_height == 0 {
        return Err(Error::InvalidInput("original dimensions must be positive".into()));
    }
    e.validate()?;
    let (w, h) = (orig_width as f64, orig_height as f64);
    let offset_x = round_half_up(w * e.left) as u32;
    let offset_y = round_half_up(h * e.top) as u32;
    let new_width = (round_half_up(w * (1.0 + e.left + e.right)) as u32).max(offset_x + orig_width);
    let new_height = (round_half_up(h * (1.0 + e.top + e.bottom)) as u32).max(offset_y + orig_height);
    Ok(CanvasPlacement {
        orig_width,
        orig_height,
        new_width,
        new_height,
        offset_x,
        offset_y,
    })
}

/// Pixels of the canvas outside the original footprint.
pub fn boundary_mask(p: &CanvasPlacement) -> BinaryMask {
    BinaryMask::from_fn(p.new_width, p.new_height, |x, y| !p.in_footprint(x, y))
}

/// Lift an original-frame mask onto the canvas.
pub fn place_mask(m: &BinaryMask, p: &CanvasPlacement) -> Result<BinaryMask> {
    if m.dims() != p.orig_dims() {
        return Err(Error::dims("place_mask", p.orig_dims(), m.dims()));
    }
    if p.is_identity() {
        return Ok(m.clone());
    }
    let mut out = BinaryMask::new(p.new_width, p.new_height);
    for (x, y) in m.iter_set() {
        out.set(x + p.offset_x, y + p.offset_y, true);
    }
    Ok(out)
}

/// Morphological dilation by a Euclidean disk: a pixel is set iff some input
/// pixel lies within `radius` of it.
pub fn dilate(m: &BinaryMask, se: StructuringElement) -> BinaryMask {
    let r = se.radius as i64;
    if r == 0 || m.is_empty() {
        return m.clone();
    }
    let (w, h) = (m.width as usize, m.height as usize);

    // prefix[y][x] = number of set pixels in row y strictly left of x
    let mut prefix = vec![0u32; h * (w + 1)];
    for y in 0..h {
        let row = &mut prefix[y * (w + 1)..(y + 1) * (w + 1)];
        for x in 0..w {
            row[x + 1] = row[x] + m.bits[y * w + x] as u32;
        }
    }
    let half_widths: Vec<i64> = (-r..=r).map(|dy| isqrt(r * r - dy * dy)).collect();

    let mut out = BinaryMask::new(m.width, m.height);
    for y in 0..h as i64 {
        for (k, dy) in (-r..=r).enumerate() {
            let sy = y + dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            let hw = half_widths[k];
            let row = &prefix[sy as usize * (w + 1)..(sy as usize + 1) * (w + 1)];
            if row[w] == 0 {
                continue;
            }
            let out_row = &mut out.bits[y as usize * w..(y as usize + 1) * w];
            for (x, o) in out_row.iter_mut().enumerate() {
                if *o {
                    continue;
                }
                let lo = (x as i64 - hw).max(0) as usize;
                let hi = (x as i64 + hw + 1).min(w as i64) as usize;
                if row[hi] > row[lo] {
                    *o = true;
                }
            }
        }
    }
    out
}

fn isqrt(v: i64) -> i64 {
    let mut s = (v as f64).sqrt() as i64;
    while s * s > v {
        s -= 1;
    }
    while (s + 1) * (s + 1) <= v {
        s += 1;
    }
    s
}

fn zip_bits(
    op: &'static str,
    a: &BinaryMask,
    b: &BinaryMask,
    f: impl Fn(bool, bool) -> bool,
) -> Result<BinaryMask> {
    if a.dims() != b.dims() {
        return Err(Error::dims(op, a.dims(), b.dims()));
    }
    Ok(BinaryMask {
        width: a.width,
        height: a.height,
        bits: a.bits.iter().zip(&b.bits).map(|(&x, &y)| f(x, y)).collect(),
    })
}

pub fn mask_union(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask> {
    zip_bits("mask_union", a, b, |x, y| x || y)
}

/// `a AND NOT b`.
pub fn mask_subtract(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask> {
    zip_bits("mask_subtract", a, b, |x, y| x && !y)
}

/// Union of the dilated, canvas-placed occluder masks and the boundary strip,
/// optionally minus the placed visible mask.
pub fn compose_inpaint_mask(
    occluders: &[BinaryMask],
    visible: &BinaryMask,
    p: &CanvasPlacement,
    se: StructuringElement,
    protect_visible: bool,
) -> Result<BinaryMask> {
    let mut acc = boundary_mask(p);
    for occ in occluders {
        let dilated = dilate(&place_mask(occ, p)?, se);
        acc = mask_union(&acc, &dilated)?;
    }
    let placed_visible = place_mask(visible, p)?;
    if protect_visible {
        acc = mask_subtract(&acc, &placed_visible)?;
    }
    Ok(acc)
}

/// Tight bounding rectangle of the set pixels.
pub fn bbox(m: &BinaryMask) -> Option<Rect> {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    let mut any = false;
    for (x, y) in m.iter_set() {
        any = true;
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    any.then(|| Rect::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
}

/// Image edges that `r` lies within `tol` pixels of.
pub fn edges_touched(r: Rect, width: u32, height: u32, tol: u32) -> EdgeSet {
    let mut s = EdgeSet::EMPTY;
    if r.x <= tol {
        s.insert(Edge::Left);
    }
    if r.right() + tol >= width {
        s.insert(Edge::Right);
    }
    if r.y <= tol {
        s.insert(Edge::Top);
    }
    if r.bottom() + tol >= height {
        s.insert(Edge::Bottom);
    }
    s
}
