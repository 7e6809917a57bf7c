//! JSON bodies of the model-service protocol. Binary payloads are base64:
//! PNG for images and masks, little-endian `f32` for attention grids.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::alpha::{f32_from_le_bytes, f32_to_le_bytes, latent_dim, AttentionBundle};
use crate::error::{Error, Result};
use crate::imaging::{encode_png, rgb_to_png};
use crate::mask::BinaryMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image_png_b64: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub mask_png_b64: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintRequest {
    pub image_png_b64: String,
    pub mask_png_b64: String,
    pub prompt: String,
    pub steps: u32,
    pub seed: u64,
    pub want_attention: bool,
    pub attn_last_n: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPayload {
    pub latent_w: u32,
    pub latent_h: u32,
    pub cross_f32_b64: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_refined_f32_b64: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintResponse {
    pub image_png_b64: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttentionPayload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRequest {
    pub a_png_b64: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_png_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_sim: Option<f64>,
}

pub fn b64_encode(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn b64_decode(field: &str, s: &str) -> Result<Vec<u8>> {
    STANDARD
        .decode(s.trim())
        .map_err(|e| Error::protocol(format!("{field}: invalid base64 ({e})"), s))
}

pub fn encode_rgb(img: &RgbImage) -> Result<String> {
    Ok(b64_encode(&rgb_to_png(img)?))
}

pub fn decode_rgb(field: &str, s: &str) -> Result<RgbImage> {
    let bytes = b64_decode(field, s)?;
    image::load_from_memory(&bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::protocol(format!("{field}: undecodable image ({e})"), s))
}

pub fn encode_mask(mask: &BinaryMask) -> Result<String> {
    Ok(b64_encode(&encode_png(&DynamicImage::ImageLuma8(mask.to_gray()))?))
}

pub fn decode_mask(field: &str, s: &str) -> Result<BinaryMask> {
    let bytes = b64_decode(field, s)?;
    let gray: GrayImage = image::load_from_memory(&bytes)
        .map_err(|e| Error::protocol(format!("{field}: undecodable mask ({e})"), s))?
        .to_luma8();
    BinaryMask::from_gray(&gray)
}

pub fn encode_attention(b: &AttentionBundle) -> AttentionPayload {
    let (latent_w, latent_h) = b.latent_dims();
    AttentionPayload {
        latent_w,
        latent_h,
        cross_f32_b64: b64_encode(&f32_to_le_bytes(b.cross())),
        self_refined_f32_b64: b.self_refined().map(|s| b64_encode(&f32_to_le_bytes(s))),
    }
}

/// Decodes an attention payload for a `width`×`height` image, checking the
/// advertised grid against the latent rule and the blob lengths against the
/// grid.
pub fn decode_attention(p: &AttentionPayload, width: u32, height: u32) -> Result<AttentionBundle> {
    let expected = (latent_dim(width), latent_dim(height));
    if (p.latent_w, p.latent_h) != expected {
        return Err(Error::Protocol {
            message: format!(
                "attention grid {}x{} does not match latent grid {}x{} of a {width}x{height} image",
                p.latent_w, p.latent_h, expected.0, expected.1
            ),
            excerpt: String::new(),
        });
    }
    let cells = p.latent_w as usize * p.latent_h as usize;
    let blob = |field: &str, s: &str| -> Result<Vec<f32>> {
        let bytes = b64_decode(field, s)?;
        if bytes.len() != cells * 4 {
            return Err(Error::protocol(
                format!("{field}: {} bytes, expected {}", bytes.len(), cells * 4),
                s,
            ));
        }
        f32_from_le_bytes(&bytes).ok_or_else(|| Error::protocol(format!("{field}: bad blob"), s))
    };
    let cross = blob("cross_f32_b64", &p.cross_f32_b64)?;
    let refined = p
        .self_refined_f32_b64
        .as_deref()
        .map(|s| blob("self_refined_f32_b64", s))
        .transpose()?;
    AttentionBundle::new(p.latent_w, p.latent_h, cross, refined).map_err(|e| Error::Protocol {
        message: format!("attention: {e}"),
        excerpt: String::new(),
    })
}
