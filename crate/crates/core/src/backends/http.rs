use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use image::RgbImage;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::wire::{
    self, InpaintRequest, InpaintResponse, MetricsRequest, MetricsResponse, SegmentRequest,
    SegmentResponse,
};
use super::{
    enforce_passthrough, ChatRequest, ContentPart, InpaintOutput, InpaintParams,
    InpaintingBackend, MetricBackend, ReasoningBackend, Segmentation, SegmentationBackend,
};
use crate::error::{excerpt, Error, Result};
use crate::mask::BinaryMask;

/// Transport settings shared by all HTTP clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpSettings {
    pub timeout_secs: f64,
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    /// Environment variable holding a bearer token; sent only when set.
    pub token_env: Option<String>,
}

impl Default for HttpSettings {
    fn default() -> Self {
        HttpSettings {
            timeout_secs: 120.0,
            max_retries: 3,
            backoff_ms: 500,
            max_in_flight: 4,
            token_env: None,
        }
    }
}

struct Limiter {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Limiter {
            max: max.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.active.lock().expect("limiter poisoned");
        while *n >= self.max {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().expect("limiter poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

struct Transport {
    client: reqwest::blocking::Client,
    settings: HttpSettings,
    limiter: Limiter,
}

impl Transport {
    fn new(settings: HttpSettings) -> Result<Self> {
        if !(settings.timeout_secs > 0.0) {
            return Err(Error::Config("timeout_secs must be positive".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(settings.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Transport {
            client,
            limiter: Limiter::new(settings.max_in_flight),
            settings,
        })
    }

    fn token(&self) -> Option<String> {
        let var = self.settings.token_env.as_deref()?;
        std::env::var(var).ok().filter(|t| !t.is_empty())
    }

    /// POSTs `body`, retrying transport failures, 429 and 5xx with
    /// exponential backoff. Returns the response text of the first 2xx.
    fn post(&self, url: &str, body: &Value) -> Result<String> {
        let _permit = self.limiter.acquire();
        let attempts = self.settings.max_retries + 1;
        let mut last: Option<Error> = None;
        for attempt in 1..=attempts {
            if attempt > 1 {
                let shift = (attempt - 2).min(16);
                thread::sleep(Duration::from_millis(self.settings.backoff_ms << shift));
            }
            let mut req = self.client.post(url).json(body);
            if let Some(t) = self.token() {
                req = req.bearer_auth(t);
            }
            let resp = match req.send() {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("POST {url} attempt {attempt}/{attempts}: {e}");
                    last = Some(Error::Transport {
                        attempts: attempt,
                        message: e.to_string(),
                    });
                    continue;
                }
            };
            let status = resp.status().as_u16();
            let text = match resp.text() {
                Ok(t) => t,
                Err(e) => {
                    last = Some(Error::Transport {
                        attempts: attempt,
                        message: e.to_string(),
                    });
                    continue;
                }
            };
            match status {
                200..=299 => return Ok(text),
                401 | 403 => return Err(Error::Auth { status }),
                429 => {
                    log::warn!("POST {url} rate limited (attempt {attempt}/{attempts})");
                    last = Some(Error::RateLimited { attempts: attempt });
                }
                500..=599 => {
                    log::warn!("POST {url} HTTP {status} (attempt {attempt}/{attempts})");
                    last = Some(Error::Status {
                        status,
                        excerpt: excerpt(&text, 200),
                    });
                }
                _ => {
                    return Err(Error::Status {
                        status,
                        excerpt: excerpt(&text, 200),
                    })
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn post_json<T: DeserializeOwned>(&self, url: &str, body: &Value) -> Result<T> {
        let text = self.post(url, body)?;
        serde_json::from_str(&text).map_err(|e| Error::protocol(format!("malformed body: {e}"), &text))
    }
}

fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}

/// OpenAI-compatible chat-completions client.
pub struct HttpReasoning {
    url: String,
    model: String,
    transport: Transport,
}

impl HttpReasoning {
    /// `endpoint` is either the API base or the full `/chat/completions` URL.
    pub fn new(endpoint: &str, model: &str, settings: HttpSettings) -> Result<Self> {
        let url = if endpoint.trim_end_matches('/').ends_with("/chat/completions") {
            endpoint.to_string()
        } else {
            join_url(endpoint, "chat/completions")
        };
        Ok(HttpReasoning {
            url,
            model: model.to_string(),
            transport: Transport::new(settings)?,
        })
    }

    fn body(&self, request: &ChatRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                let parts: Vec<Value> = m
                    .content
                    .iter()
                    .map(|p| match p {
                        ContentPart::Text(t) => json!({"type": "text", "text": t}),
                        ContentPart::ImagePng(png) => json!({
                            "type": "image_url",
                            "image_url": {"url": format!("data:image/png;base64,{}", wire::b64_encode(png))},
                        }),
                    })
                    .collect();
                json!({"role": m.role.as_str(), "content": parts})
            })
            .collect();
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": request.temperature,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: CompletionMessage,
}

#[derive(Deserialize)]
struct CompletionMessage {
    content: Value,
}

fn completion_text(raw: &str) -> Result<String> {
    let c: Completion =
        serde_json::from_str(raw).map_err(|e| Error::protocol(format!("malformed completion: {e}"), raw))?;
    let first = c
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| Error::protocol("completion has no choices", raw))?;
    match first.message.content {
        Value::String(s) => Ok(s),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        _ => Err(Error::protocol("completion content is not text", raw)),
    }
}

impl ReasoningBackend for HttpReasoning {
    fn chat(&self, request: &ChatRequest) -> Result<String> {
        let raw = self.transport.post(&self.url, &self.body(request))?;
        completion_text(&raw)
    }
}

pub struct HttpSegmentation {
    url: String,
    transport: Transport,
}

impl HttpSegmentation {
    pub fn new(base_url: &str, settings: HttpSettings) -> Result<Self> {
        Ok(HttpSegmentation {
            url: join_url(base_url, "segment"),
            transport: Transport::new(settings)?,
        })
    }
}

impl SegmentationBackend for HttpSegmentation {
    fn segment(&self, image: &RgbImage, label: &str) -> Result<Segmentation> {
        let req = SegmentRequest {
            image_png_b64: wire::encode_rgb(image)?,
            label: label.to_string(),
        };
        let resp: SegmentResponse = self.transport.post_json(&self.url, &serde_json::to_value(req)?)?;
        let mask = wire::decode_mask("mask_png_b64", &resp.mask_png_b64)?;
        if mask.dims() != image.dimensions() {
            return Err(Error::Protocol {
                message: format!(
                    "segment mask is {:?}, image is {:?}",
                    mask.dims(),
                    image.dimensions()
                ),
                excerpt: String::new(),
            });
        }
        if !(0.0..=1.0).contains(&resp.confidence) {
            return Err(Error::Protocol {
                message: format!("confidence {} outside [0, 1]", resp.confidence),
                excerpt: String::new(),
            });
        }
        Ok(Segmentation {
            mask,
            confidence: resp.confidence,
        })
    }
}

pub struct HttpInpainting {
    url: String,
    transport: Transport,
}

impl HttpInpainting {
    pub fn new(base_url: &str, settings: HttpSettings) -> Result<Self> {
        Ok(HttpInpainting {
            url: join_url(base_url, "inpaint"),
            transport: Transport::new(settings)?,
        })
    }
}

impl InpaintingBackend for HttpInpainting {
    fn inpaint(
        &self,
        image: &RgbImage,
        mask: &BinaryMask,
        prompt: &str,
        params: &InpaintParams,
    ) -> Result<InpaintOutput> {
        if mask.dims() != image.dimensions() {
            return Err(Error::dims("inpaint mask", image.dimensions(), mask.dims()));
        }
        let req = InpaintRequest {
            image_png_b64: wire::encode_rgb(image)?,
            mask_png_b64: wire::encode_mask(mask)?,
            prompt: prompt.to_string(),
            steps: params.steps,
            seed: params.seed,
            want_attention: params.want_attention,
            attn_last_n: params.attn_last_n,
        };
        let resp: InpaintResponse = self.transport.post_json(&self.url, &serde_json::to_value(req)?)?;
        let out = wire::decode_rgb("image_png_b64", &resp.image_png_b64)?;
        if out.dimensions() != image.dimensions() {
            return Err(Error::Protocol {
                message: format!(
                    "inpainted image is {:?}, input is {:?}",
                    out.dimensions(),
                    image.dimensions()
                ),
                excerpt: String::new(),
            });
        }
        let attention = resp
            .attention
            .as_ref()
            .map(|a| wire::decode_attention(a, image.width(), image.height()))
            .transpose()?;
        if params.want_attention && attention.is_none() {
            log::warn!("inpainting service returned no attention");
        }
        Ok(InpaintOutput {
            image: enforce_passthrough(image, mask, out)?,
            attention,
        })
    }
}

pub struct HttpMetrics {
    url: String,
    transport: Transport,
}

impl HttpMetrics {
    pub fn new(base_url: &str, settings: HttpSettings) -> Result<Self> {
        Ok(HttpMetrics {
            url: join_url(base_url, "metrics"),
            transport: Transport::new(settings)?,
        })
    }

    fn query(&self, a: &RgbImage, b: Option<&RgbImage>, label: Option<&str>) -> Result<MetricsResponse> {
        let req = MetricsRequest {
            a_png_b64: wire::encode_rgb(a)?,
            b_png_b64: b.map(wire::encode_rgb).transpose()?,
            label: label.map(str::to_string),
        };
        self.transport.post_json(&self.url, &serde_json::to_value(req)?)
    }
}

fn required(v: Option<f64>, name: &str) -> Result<f64> {
    v.ok_or_else(|| Error::Protocol {
        message: format!("metrics response lacks {name}"),
        excerpt: String::new(),
    })
}

impl MetricBackend for HttpMetrics {
    fn clip_score(&self, image: &RgbImage, label: &str) -> Result<f64> {
        required(self.query(image, None, Some(label))?.clip, "clip")
    }

    fn lpips(&self, a: &RgbImage, b: &RgbImage) -> Result<f64> {
        required(self.query(a, Some(b), None)?.lpips, "lpips")
    }

    fn feature_sim(&self, a: &RgbImage, b: &RgbImage) -> Result<f64> {
        required(self.query(a, Some(b), None)?.feature_sim, "feature_sim")
    }
}
