use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    AgentKind, ChatRequest, InpaintOutput, InpaintParams, InpaintingBackend, MetricBackend,
    ReasoningBackend, Segmentation, SegmentationBackend,
};
use crate::alpha::{latent_dim, AttentionBundle};
use crate::error::{Error, Result};
use crate::imaging::Color;
use crate::mask::BinaryMask;

/// Canned chat responses keyed by message digest, with optional per-agent
/// fallbacks for digests that are not registered.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReasoningFixtures {
    /// Unknown digests are an error even when a fallback exists.
    #[serde(default)]
    pub strict: bool,
    #[serde(default)]
    pub responses: BTreeMap<String, String>,
    #[serde(default)]
    pub fallback: BTreeMap<AgentKind, String>,
}

impl ReasoningFixtures {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub struct MockReasoning {
    fixtures: ReasoningFixtures,
    calls: AtomicUsize,
    seen: Mutex<Vec<(AgentKind, String)>>,
}

impl MockReasoning {
    pub fn new(fixtures: ReasoningFixtures) -> Self {
        MockReasoning {
            fixtures,
            calls: AtomicUsize::new(0),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Agent and digest of every request received, in arrival order.
    pub fn seen(&self) -> Vec<(AgentKind, String)> {
        self.seen.lock().expect("mock log poisoned").clone()
    }
}

impl ReasoningBackend for MockReasoning {
    fn chat(&self, request: &ChatRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let digest = request.digest();
        self.seen
            .lock()
            .expect("mock log poisoned")
            .push((request.agent, digest.clone()));
        if let Some(r) = self.fixtures.responses.get(&digest) {
            return Ok(r.clone());
        }
        if !self.fixtures.strict {
            if let Some(r) = self.fixtures.fallback.get(&request.agent) {
                return Ok(r.clone());
            }
        }
        Err(Error::MissingFixture { digest })
    }
}

fn label_key(label: &str) -> String {
    label.trim().to_lowercase()
}

pub enum MockSegmentation {
    /// Pre-drawn masks by label.
    Masks(BTreeMap<String, BinaryMask>),
    /// Pixels within `tolerance` (Euclidean RGB distance) of the label colour.
    Chroma {
        colors: BTreeMap<String, Color>,
        tolerance: f64,
    },
}

impl MockSegmentation {
    pub fn masks(masks: impl IntoIterator<Item = (String, BinaryMask)>) -> Self {
        MockSegmentation::Masks(masks.into_iter().map(|(k, v)| (label_key(&k), v)).collect())
    }

    pub fn chroma(colors: impl IntoIterator<Item = (String, Color)>, tolerance: f64) -> Self {
        MockSegmentation::Chroma {
            colors: colors.into_iter().map(|(k, v)| (label_key(&k), v)).collect(),
            tolerance,
        }
    }
}

impl SegmentationBackend for MockSegmentation {
    fn segment(&self, image: &RgbImage, label: &str) -> Result<Segmentation> {
        let key = label_key(label);
        let mask = match self {
            MockSegmentation::Masks(masks) => {
                let m = masks.get(&key).ok_or_else(|| Error::UnknownLabel(label.into()))?;
                if m.dims() != image.dimensions() {
                    return Err(Error::dims("mock segmentation", image.dimensions(), m.dims()));
                }
                m.clone()
            }
            MockSegmentation::Chroma { colors, tolerance } => {
                let c = colors.get(&key).ok_or_else(|| Error::UnknownLabel(label.into()))?;
                let tol2 = tolerance * tolerance;
                BinaryMask::from_fn(image.width(), image.height(), |x, y| {
                    let p = image.get_pixel(x, y);
                    let d2: f64 = (0..3).map(|i| (p[i] as f64 - c[i] as f64).powi(2)).sum();
                    d2 <= tol2
                })
            }
        };
        Ok(Segmentation {
            mask,
            confidence: 1.0,
        })
    }
}

/// Fills the mask with a colour hashed from the prompt and reports attention
/// peaking in the middle of the filled region.
#[derive(Debug, Default, Clone, Copy)]
pub struct MockInpainting;

impl MockInpainting {
    pub fn fill_color(prompt: &str) -> Color {
        let h = Sha256::digest(prompt.as_bytes());
        Rgb([h[0], h[1], h[2]])
    }

    /// Normalized distance-to-outside heatmap over the latent cells whose
    /// pixels are mostly masked, plus per-cell mask coverage as the
    /// self-attention-refined map.
    pub fn attention_for(mask: &BinaryMask) -> AttentionBundle {
        let (w, h) = mask.dims();
        let (lw, lh) = (latent_dim(w), latent_dim(h));
        let mut coverage = vec![0.0f32; (lw * lh) as usize];
        for cy in 0..lh {
            for cx in 0..lw {
                let (x0, y0) = (cx * 8, cy * 8);
                let (x1, y1) = ((x0 + 8).min(w), (y0 + 8).min(h));
                let mut set = 0u32;
                for y in y0..y1 {
                    for x in x0..x1 {
                        set += mask.get(x, y) as u32;
                    }
                }
                coverage[(cy * lw + cx) as usize] = set as f32 / ((x1 - x0) * (y1 - y0)) as f32;
            }
        }
        let inside: Vec<bool> = coverage.iter().map(|&c| c >= 0.5).collect();
        let outside: Vec<(i64, i64)> = (0..lh as i64)
            .flat_map(|y| (0..lw as i64).map(move |x| (x, y)))
            .filter(|&(x, y)| !inside[(y * lw as i64 + x) as usize])
            .collect();
        let mut dist = vec![0.0f32; inside.len()];
        for (i, &is_in) in inside.iter().enumerate() {
            if !is_in {
                continue;
            }
            let (x, y) = ((i % lw as usize) as i64, (i / lw as usize) as i64);
            dist[i] = outside
                .iter()
                .map(|&(ox, oy)| (((ox - x).pow(2) + (oy - y).pow(2)) as f32).sqrt())
                .fold(f32::INFINITY, f32::min)
                .min(f32::MAX);
            if outside.is_empty() {
                dist[i] = 1.0;
            }
        }
        let max = dist.iter().copied().fold(0.0, f32::max);
        if max > 0.0 {
            for d in &mut dist {
                *d /= max;
            }
        }
        AttentionBundle::new(lw, lh, dist, Some(coverage)).expect("mock attention is well formed")
    }
}

impl InpaintingBackend for MockInpainting {
    fn inpaint(
        &self,
        image: &RgbImage,
        mask: &BinaryMask,
        prompt: &str,
        params: &InpaintParams,
    ) -> Result<InpaintOutput> {
        if image.dimensions() != mask.dims() {
            return Err(Error::dims("mock inpaint", image.dimensions(), mask.dims()));
        }
        let fill = Self::fill_color(prompt);
        let mut out = image.clone();
        for (x, y) in mask.iter_set() {
            out.put_pixel(x, y, fill);
        }
        let attention = params.want_attention.then(|| Self::attention_for(mask));
        Ok(InpaintOutput {
            image: out,
            attention,
        })
    }
}

/// Pixel-statistics stand-ins for the neural metrics. They satisfy the
/// interface laws (`lpips(x, x) = 0`, `feature_sim(x, x) = 1`) but carry no
/// perceptual meaning.
#[derive(Debug, Default, Clone, Copy)]
pub struct MockMetrics;

fn mean_abs_diff(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::dims("mock metric", a.dimensions(), b.dimensions()));
    }
    let total: u64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| x.abs_diff(y) as u64)
        .sum();
    Ok(total as f64 / (a.as_raw().len() as f64 * 255.0))
}

impl MetricBackend for MockMetrics {
    fn clip_score(&self, image: &RgbImage, label: &str) -> Result<f64> {
        let mut h = Sha256::new();
        h.update(label.as_bytes());
        h.update(image.as_raw());
        let d = h.finalize();
        Ok(0.2 + 0.15 * (u16::from_le_bytes([d[0], d[1]]) as f64 / u16::MAX as f64))
    }

    fn lpips(&self, a: &RgbImage, b: &RgbImage) -> Result<f64> {
        mean_abs_diff(a, b)
    }

    fn feature_sim(&self, a: &RgbImage, b: &RgbImage) -> Result<f64> {
        Ok(1.0 - mean_abs_diff(a, b)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ChatMessage, Role};

    fn request(agent: AgentKind, text: &str) -> ChatRequest {
        ChatRequest {
            agent,
            messages: vec![ChatMessage::text(Role::User, text)],
            temperature: 0.0,
            seed: None,
        }
    }

    #[test]
    fn reasoning_fixture_lookup() {
        let known = request(AgentKind::Occlusion, "who occludes the cat?");
        let mut fx = ReasoningFixtures::default();
        fx.responses.insert(known.digest(), r#"{"target":"cat","occluders":[]}"#.into());
        fx.fallback.insert(AgentKind::Description, "fallback".into());
        fx.strict = true;
        let mock = MockReasoning::new(fx.clone());
        let a = mock.chat(&known).unwrap();
        assert_eq!(a, mock.chat(&known).unwrap());
        assert!(a.contains("cat"));

        let unknown = request(AgentKind::Description, "other");
        match mock.chat(&unknown) {
            Err(Error::MissingFixture { digest }) => assert_eq!(digest, unknown.digest()),
            other => panic!("expected missing fixture, got {other:?}"),
        }
        fx.strict = false;
        let lenient = MockReasoning::new(fx);
        assert_eq!(lenient.chat(&unknown).unwrap(), "fallback");
        assert!(lenient.chat(&request(AgentKind::Boundary, "x")).is_err());
        assert_eq!(lenient.calls(), 2);
    }

    #[test]
    fn chroma_segmentation_matches_color_oracle() {
        let img = RgbImage::from_fn(24, 16, |x, y| {
            if (5..12).contains(&x) && (3..9).contains(&y) {
                Rgb([255, 0, 0])
            } else if x > 18 {
                Rgb([240, 30, 20])
            } else {
                Rgb([10, 200, 10])
            }
        });
        let seg = MockSegmentation::chroma([("red-object".to_string(), Rgb([255, 0, 0]))], 10.0);
        let out = seg.segment(&img, "Red-Object").unwrap();
        let oracle = BinaryMask::from_fn(24, 16, |x, y| (5..12).contains(&x) && (3..9).contains(&y));
        assert_eq!(out.mask, oracle);
        assert_eq!(out.confidence, 1.0);
        assert_eq!(seg.segment(&img, "red-object").unwrap(), out);
        assert!(matches!(seg.segment(&img, "tree"), Err(Error::UnknownLabel(_))));

        let fixed = MockSegmentation::masks([("cat".to_string(), oracle.clone())]);
        assert_eq!(fixed.segment(&img, "cat").unwrap().mask, oracle);
        assert!(fixed.segment(&img, "dog").is_err());
    }

    #[test]
    fn mock_inpainting_examples() {
        let img = RgbImage::from_pixel(20, 12, Rgb([255, 255, 255]));
        let params = InpaintParams::default();
        let out = MockInpainting.inpaint(&img, &BinaryMask::new(20, 12), "a cat", &params).unwrap();
        assert_eq!(out.image, img);
        let attn = out.attention.unwrap();
        assert_eq!(attn.latent_dims(), (3, 2));
        assert_eq!(attn.max_value(), 0.0);

        let mask = BinaryMask::from_fn(20, 12, |x, _| x < 12);
        let a = MockInpainting.inpaint(&img, &mask, "a cat", &params).unwrap();
        let b = MockInpainting.inpaint(&img, &mask, "a cat", &params).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(*a.image.get_pixel(0, 0), MockInpainting::fill_color("a cat"));
        assert_eq!(*a.image.get_pixel(15, 0), Rgb([255, 255, 255]));
        assert_eq!(a.attention.unwrap().max_value(), 1.0);
        assert_ne!(MockInpainting::fill_color("a cat"), MockInpainting::fill_color("a dog"));
        assert!(MockInpainting.inpaint(&img, &BinaryMask::new(3, 3), "x", &params).is_err());
    }

    #[test]
    fn mock_metric_laws() {
        let img = RgbImage::from_fn(8, 8, |x, y| Rgb([x as u8 * 20, y as u8 * 9, 4]));
        assert_eq!(MockMetrics.lpips(&img, &img).unwrap(), 0.0);
        assert_eq!(MockMetrics.feature_sim(&img, &img).unwrap(), 1.0);
        let clip = MockMetrics.clip_score(&img, "cat").unwrap();
        assert!((0.2..=0.35).contains(&clip));
        assert_eq!(clip, MockMetrics.clip_score(&img, "cat").unwrap());
    }
}
