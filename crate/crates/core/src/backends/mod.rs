//! Model backends: reasoning (chat), segmentation, inpainting and neural
//! metrics. Each has a deterministic mock and an HTTP client.

mod http;
mod mock;
pub mod wire;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alpha::AttentionBundle;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub use http::{
    HttpInpainting, HttpMetrics, HttpReasoning, HttpSegmentation, HttpSettings,
};
pub use mock::{
    MockInpainting, MockMetrics, MockReasoning, MockSegmentation, ReasoningFixtures,
};

/// Default number of denoising steps requested from the generator.
pub const DEFAULT_STEPS: u32 = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Occlusion,
    Boundary,
    Description,
    /// Single prompt returning all three findings.
    Combined,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Occlusion => "occlusion",
            AgentKind::Boundary => "boundary",
            AgentKind::Description => "description",
            AgentKind::Combined => "combined",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContentPart {
    Text(String),
    /// PNG-encoded image.
    ImagePng(Arc<Vec<u8>>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: vec![ContentPart::Text(text.into())],
        }
    }

    /// Concatenated text parts.
    pub fn text_content(&self) -> String {
        self.content
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text(t) => Some(t.as_str()),
                ContentPart::ImagePng(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub agent: AgentKind,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl ChatRequest {
    /// Stable SHA-256 over roles, texts and image bytes of the message list.
    pub fn digest(&self) -> String {
        message_digest(&self.messages)
    }
}

pub fn message_digest(messages: &[ChatMessage]) -> String {
    let mut h = Sha256::new();
    for m in messages {
        h.update(m.role.as_str().as_bytes());
        h.update([0u8]);
        for part in &m.content {
            let (tag, bytes): (u8, &[u8]) = match part {
                ContentPart::Text(t) => (b't', t.as_bytes()),
                ContentPart::ImagePng(b) => (b'i', b.as_slice()),
            };
            h.update([tag]);
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        }
    }
    hex::encode(h.finalize())
}

pub trait ReasoningBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub mask: BinaryMask,
    pub confidence: f64,
}

pub trait SegmentationBackend: Send + Sync {
    fn segment(&self, image: &RgbImage, label: &str) -> Result<Segmentation>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InpaintParams {
    pub steps: u32,
    pub seed: u64,
    pub want_attention: bool,
    pub attn_last_n: u32,
}

impl Default for InpaintParams {
    fn default() -> Self {
        InpaintParams {
            steps: DEFAULT_STEPS,
            seed: 0,
            want_attention: true,
            attn_last_n: 15,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InpaintOutput {
    pub image: RgbImage,
    pub attention: Option<AttentionBundle>,
}

pub trait InpaintingBackend: Send + Sync {
    fn inpaint(
        &self,
        image: &RgbImage,
        mask: &BinaryMask,
        prompt: &str,
        params: &InpaintParams,
    ) -> Result<InpaintOutput>;
}

pub trait MetricBackend: Send + Sync {
    fn clip_score(&self, image: &RgbImage, label: &str) -> Result<f64>;
    fn lpips(&self, a: &RgbImage, b: &RgbImage) -> Result<f64>;
    /// Deep-feature cosine similarity in [0, 1].
    fn feature_sim(&self, a: &RgbImage, b: &RgbImage) -> Result<f64>;
}

/// The set of backends one pipeline run talks to.
#[derive(Clone)]
pub struct Backends {
    pub reasoning: Arc<dyn ReasoningBackend>,
    pub segmentation: Arc<dyn SegmentationBackend>,
    pub inpainting: Arc<dyn InpaintingBackend>,
    pub metrics: Option<Arc<dyn MetricBackend>>,
}

/// Wraps an inpainting backend and counts invocations.
pub struct CountingInpainter<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B> CountingInpainter<B> {
    pub fn new(inner: B) -> Self {
        CountingInpainter {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: InpaintingBackend> InpaintingBackend for CountingInpainter<B> {
    fn inpaint(
        &self,
        image: &RgbImage,
        mask: &BinaryMask,
        prompt: &str,
        params: &InpaintParams,
    ) -> Result<InpaintOutput> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.inpaint(image, mask, prompt, params)
    }
}

impl<B: InpaintingBackend + ?Sized> InpaintingBackend for Arc<B> {
    fn inpaint(
        &self,
        image: &RgbImage,
        mask: &BinaryMask,
        prompt: &str,
        params: &InpaintParams,
    ) -> Result<InpaintOutput> {
        (**self).inpaint(image, mask, prompt, params)
    }
}

/// Checks output dimensions and restores every pixel outside `mask` from the
/// input, so visible evidence is never altered by decoder drift.
pub fn enforce_passthrough(input: &RgbImage, mask: &BinaryMask, mut output: RgbImage) -> Result<RgbImage> {
    if output.dimensions() != input.dimensions() {
        return Err(Error::dims("inpaint output", input.dimensions(), output.dimensions()));
    }
    if mask.dims() != input.dimensions() {
        return Err(Error::dims("inpaint mask", input.dimensions(), mask.dims()));
    }
    for (x, y, px) in output.enumerate_pixels_mut() {
        if !mask.get(x, y) {
            *px = *input.get_pixel(x, y);
        }
    }
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = vec![
            ChatMessage::text(Role::System, "sys"),
            ChatMessage {
                role: Role::User,
                content: vec![
                    ContentPart::ImagePng(Arc::new(vec![1, 2, 3])),
                    ContentPart::Text("q".into()),
                ],
            },
        ];
        let mut b = a.clone();
        assert_eq!(message_digest(&a), message_digest(&b));
        b[1].content[0] = ContentPart::ImagePng(Arc::new(vec![1, 2, 4]));
        assert_ne!(message_digest(&a), message_digest(&b));
        // boundaries between parts matter
        let c = vec![ChatMessage::text(Role::User, "ab")];
        let d = vec![ChatMessage {
            role: Role::User,
            content: vec![ContentPart::Text("a".into()), ContentPart::Text("b".into())],
        }];
        assert_ne!(message_digest(&c), message_digest(&d));
    }

    #[test]
    fn passthrough_restores_unmasked_pixels() {
        let input = RgbImage::from_pixel(4, 4, Rgb([1, 2, 3]));
        let output = RgbImage::from_pixel(4, 4, Rgb([9, 9, 9]));
        let mask = BinaryMask::from_fn(4, 4, |x, _| x == 0);
        let fixed = enforce_passthrough(&input, &mask, output).unwrap();
        for (x, _, p) in fixed.enumerate_pixels() {
            assert_eq!(*p, if x == 0 { Rgb([9, 9, 9]) } else { Rgb([1, 2, 3]) });
        }
        assert!(enforce_passthrough(&input, &mask, RgbImage::new(3, 4)).is_err());
    }
}
