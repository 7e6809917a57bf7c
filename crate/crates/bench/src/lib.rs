//! Seeded inputs shared by the benchmarks.

use amodal_core::grabcut::GridGraph;
use amodal_core::mask::BinaryMask;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sparse random pixels at the given density.
pub fn speckle(w: u32, h: u32, density: f64, seed: u64) -> BinaryMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BinaryMask::from_fn(w, h, |_, _| rng.random_bool(density))
}

/// A centred disk of radius `min(w, h) / 4`.
pub fn disk(w: u32, h: u32) -> BinaryMask {
    let (cx, cy, r) = (w as f64 / 2.0, h as f64 / 2.0, w.min(h) as f64 / 4.0);
    BinaryMask::from_fn(w, h, |x, y| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r)
}

/// Two-colour scene over `truth` with uniform noise of the given amplitude.
pub fn noisy_scene(truth: &BinaryMask, amplitude: i16, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(truth.width(), truth.height(), |x, y| {
        let base: [u8; 3] = if truth.get(x, y) { [200, 60, 50] } else { [40, 110, 190] };
        Rgb(base.map(|c| (c as i16 + rng.random_range(-amplitude..=amplitude)).clamp(0, 255) as u8))
    })
}

pub fn random_graph(w: u32, h: u32, seed: u64) -> GridGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = GridGraph::new(w, h);
    for p in 0..g.len() {
        g.source[p] = rng.random_range(0.0..10.0);
        g.sink[p] = rng.random_range(0.0..10.0);
        for d in 0..4 {
            g.neighbors[p][d] = rng.random_range(0.0..4.0);
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_are_seeded() {
        assert_eq!(speckle(20, 20, 0.1, 1), speckle(20, 20, 0.1, 1));
        assert_eq!(noisy_scene(&disk(16, 16), 8, 2), noisy_scene(&disk(16, 16), 8, 2));
        assert_eq!(disk(20, 20).count(), disk(20, 20).count());
        assert_eq!(random_graph(4, 3, 5).sink, random_graph(4, 3, 5).sink);
    }
}
