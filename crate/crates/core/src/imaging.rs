//! Masked-input preparation and small image helpers.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, Rgb, RgbImage, Rgba, RgbaImage};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, CanvasPlacement, Rect};

pub type Color = Rgb<u8>;

pub const WHITE: Color = Rgb([255, 255, 255]);

/// Keep pixels under `visible`; paint everything else `bg`.
pub fn extract_visible(img: &RgbImage, visible: &BinaryMask, bg: Color) -> Result<RgbImage> {
    if img.dimensions() != visible.dims() {
        return Err(Error::dims("extract_visible", img.dimensions(), visible.dims()));
    }
    Ok(RgbImage::from_fn(img.width(), img.height(), |x, y| {
        if visible.get(x, y) {
            *img.get_pixel(x, y)
        } else {
            bg
        }
    }))
}

/// Copy `vis_only` into its footprint on the expanded canvas, `bg` elsewhere.
pub fn place_on_canvas(vis_only: &RgbImage, p: &CanvasPlacement, bg: Color) -> Result<RgbImage> {
    if vis_only.dimensions() != p.orig_dims() {
        return Err(Error::dims("place_on_canvas", p.orig_dims(), vis_only.dimensions()));
    }
    if p.is_identity() {
        return Ok(vis_only.clone());
    }
    let mut out = RgbImage::from_pixel(p.new_width, p.new_height, bg);
    image::imageops::replace(&mut out, vis_only, p.offset_x as i64, p.offset_y as i64);
    Ok(out)
}

pub fn crop_rgb(img: &RgbImage, r: Rect) -> Result<RgbImage> {
    if r.right() > img.width() || r.bottom() > img.height() {
        return Err(Error::InvalidInput(format!(
            "crop {r:?} exceeds {}x{} image",
            img.width(),
            img.height()
        )));
    }
    Ok(image::imageops::crop_imm(img, r.x, r.y, r.width, r.height).to_image())
}

/// RGB plus a binary alpha channel (255 where `alpha` is set).
pub fn compose_rgba(completed: &RgbImage, alpha: &BinaryMask) -> Result<RgbaImage> {
    if completed.dimensions() != alpha.dims() {
        return Err(Error::dims("compose_rgba", completed.dimensions(), alpha.dims()));
    }
    Ok(RgbaImage::from_fn(completed.width(), completed.height(), |x, y| {
        let Rgb([r, g, b]) = *completed.get_pixel(x, y);
        Rgba([r, g, b, if alpha.get(x, y) { 255 } else { 0 }])
    }))
}

/// Load any supported file as 8-bit RGB; deeper formats are downconverted.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn encode_png(img: &DynamicImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn rgb_to_png(img: &RgbImage) -> Result<Vec<u8>> {
    encode_png(&DynamicImage::ImageRgb8(img.clone()))
}

pub fn rgb_from_png(bytes: &[u8]) -> Result<RgbImage> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8())
}

/// BT.601 luma in 0–255 units.
#[inline]
pub fn luma(px: &Rgb<u8>) -> f64 {
    0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64
}

pub(crate) fn parse_hex_color(s: &str) -> Result<Color> {
    let hex = s.trim().trim_start_matches('#');
    let bytes = hex::decode(hex)
        .ok()
        .filter(|b| b.len() == 3)
        .ok_or_else(|| Error::Config(format!("bad color {s:?}, expected #rrggbb")))?;
    Ok(Rgb([bytes[0], bytes[1], bytes[2]]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{compute_canvas, ExpansionSpec};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 13) as u8, (y * 29) as u8, ((x + y) * 7) as u8]))
    }

    #[test]
    fn extract_visible_examples() {
        let img = gradient(6, 4);
        assert_eq!(extract_visible(&img, &BinaryMask::filled(6, 4, true), WHITE).unwrap(), img);
        let none = extract_visible(&img, &BinaryMask::new(6, 4), WHITE).unwrap();
        assert!(none.pixels().all(|p| *p == WHITE));
        let mut one = BinaryMask::new(6, 4);
        one.set(2, 3, true);
        let out = extract_visible(&img, &one, WHITE).unwrap();
        for (x, y, p) in out.enumerate_pixels() {
            if (x, y) == (2, 3) {
                assert_eq!(p, img.get_pixel(2, 3));
            } else {
                assert_eq!(*p, WHITE);
            }
        }
        assert!(extract_visible(&img, &BinaryMask::new(5, 4), WHITE).is_err());
    }

    #[test]
    fn place_on_canvas_examples() {
        let img = gradient(100, 100);
        assert_eq!(
            place_on_canvas(&img, &CanvasPlacement::identity(100, 100), WHITE).unwrap(),
            img
        );
        let p = compute_canvas(100, 100, &ExpansionSpec::new(0.5, 0.0, 0.0, 0.5).unwrap()).unwrap();
        let out = place_on_canvas(&img, &p, WHITE).unwrap();
        assert_eq!(out.dimensions(), (150, 150));
        assert_eq!(crop_rgb(&out, Rect::new(50, 0, 100, 100)).unwrap(), img);
        for (x, y, px) in out.enumerate_pixels() {
            if !p.in_footprint(x, y) {
                assert_eq!(*px, WHITE);
            }
        }
        assert!(place_on_canvas(&gradient(4, 4), &p, WHITE).is_err());
    }

    #[test]
    fn compose_rgba_examples() {
        let img = gradient(4, 4);
        let opaque = compose_rgba(&img, &BinaryMask::filled(4, 4, true)).unwrap();
        assert!(opaque.enumerate_pixels().all(|(x, y, p)| {
            p[3] == 255 && p.0[..3] == img.get_pixel(x, y).0
        }));
        let clear = compose_rgba(&img, &BinaryMask::new(4, 4)).unwrap();
        assert!(clear.pixels().all(|p| p[3] == 0));
        let checker = BinaryMask::from_fn(4, 4, |x, y| (x + y) % 2 == 0);
        let out = compose_rgba(&img, &checker).unwrap();
        for (x, y, p) in out.enumerate_pixels() {
            assert_eq!(p[3], if (x + y) % 2 == 0 { 255 } else { 0 });
        }
        assert!(compose_rgba(&img, &BinaryMask::new(3, 4)).is_err());
    }

    #[test]
    fn hex_colors() {
        assert_eq!(parse_hex_color("#ff8000").unwrap(), Rgb([255, 128, 0]));
        assert!(parse_hex_color("#ff80").is_err());
    }

    proptest! {
        #[test]
        fn canvas_round_trip(
            w in 1u32..40, h in 1u32..40, seed in any::<u32>(),
            l in 0.0f64..2.0, r in 0.0f64..2.0, t in 0.0f64..2.0, b in 0.0f64..2.0,
        ) {
            let img = RgbImage::from_fn(w, h, |x, y| {
                let v = seed.wrapping_mul(x + 31 * y + 1);
                Rgb([v as u8, (v >> 8) as u8, (v >> 16) as u8])
            });
            let p = compute_canvas(w, h, &ExpansionSpec::new(l, r, t, b).unwrap()).unwrap();
            let placed = place_on_canvas(&img, &p, WHITE).unwrap();
            prop_assert_eq!(crop_rgb(&placed, p.footprint()).unwrap(), img);
        }

        #[test]
        fn extract_visible_palette(seed in any::<u32>()) {
            let img = RgbImage::from_fn(8, 8, |x, y| Rgb([x.wrapping_mul(seed) as u8, y as u8, 3]));
            let m = BinaryMask::from_fn(8, 8, |x, y| (x * 3 + y).wrapping_add(seed) % 4 == 0);
            let out = extract_visible(&img, &m, WHITE).unwrap();
            let allowed: HashSet<_> = img.pixels().copied().chain([WHITE]).collect();
            prop_assert!(out.pixels().all(|p| allowed.contains(p)));
        }
    }
}
