//! TOML pipeline configuration and backend construction.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::agents::{BoundaryStrategy, DEFAULT_DESCRIPTION_BUDGET};
use crate::alpha::AlphaConfig;
use crate::backends::{
    Backends, HttpInpainting, HttpMetrics, HttpReasoning, HttpSegmentation, HttpSettings,
    MetricBackend, MockInpainting, MockMetrics, MockReasoning, MockSegmentation, ReasoningFixtures,
    DEFAULT_STEPS,
};
use crate::error::{Error, Result};
use crate::imaging::{parse_hex_color, Color, WHITE};
use crate::mask::{BinaryMask, MAX_EXPANSION, DEFAULT_EDGE_TOLERANCE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Forwarded to the chat and inpainting backends.
    pub seed: u64,
    /// Re-asks after an agent reply fails validation.
    pub max_retries: u32,
    pub temperature: f64,
    pub single_agent: bool,
    pub boundary_strategy: BoundaryStrategy,
    /// Expansion applied to each touched edge by the bbox-only strategy.
    pub bbox_only_fraction: f64,
    pub edge_tolerance: u32,
    /// Occluder dilation radius; scaled to the image when unset.
    pub dilation_radius: Option<u32>,
    pub protect_visible: bool,
    #[serde(serialize_with = "ser_color", deserialize_with = "de_color")]
    pub background: Color,
    /// Word budget of the inpainting prompt.
    pub description_budget: usize,
    pub steps: u32,
    pub alpha: AlphaConfig,
    pub backend: BackendConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            max_retries: 3,
            temperature: 0.0,
            single_agent: false,
            boundary_strategy: BoundaryStrategy::Hybrid,
            bbox_only_fraction: 0.25,
            edge_tolerance: DEFAULT_EDGE_TOLERANCE,
            dilation_radius: None,
            protect_visible: true,
            background: WHITE,
            description_budget: DEFAULT_DESCRIPTION_BUDGET,
            steps: DEFAULT_STEPS,
            alpha: AlphaConfig::default(),
            backend: BackendConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn ser_color<S: Serializer>(c: &Color, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format!("#{}", hex::encode(c.0)))
}

fn de_color<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Color, D::Error> {
    parse_hex_color(&String::deserialize(d)?).map_err(serde::de::Error::custom)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    #[default]
    Mock,
    Http,
}

impl std::str::FromStr for BackendMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mock" => Ok(BackendMode::Mock),
            "http" => Ok(BackendMode::Http),
            other => Err(Error::Config(format!("unknown backend mode {other:?} (mock, http)"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub mode: BackendMode,
    pub mock: MockConfig,
    pub http: HttpConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    /// JSON file of canned chat responses.
    pub reasoning_fixtures: Option<PathBuf>,
    pub segmentation: MockSegmentationConfig,
    pub metrics: bool,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            reasoning_fixtures: None,
            segmentation: MockSegmentationConfig::default(),
            metrics: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum MockSegmentationConfig {
    Chroma {
        #[serde(default = "default_chroma_tolerance")]
        tolerance: f64,
        /// Label to `#rrggbb`.
        #[serde(default)]
        colors: BTreeMap<String, String>,
    },
    Masks {
        /// Label to mask PNG.
        masks: BTreeMap<String, PathBuf>,
    },
}

fn default_chroma_tolerance() -> f64 {
    30.0
}

impl Default for MockSegmentationConfig {
    fn default() -> Self {
        MockSegmentationConfig::Chroma {
            tolerance: default_chroma_tolerance(),
            colors: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpConfig {
    /// Chat-completions base URL.
    pub reasoning_url: Option<String>,
    pub model: String,
    /// Base URL serving /segment, /inpaint and /metrics.
    pub service_url: Option<String>,
    pub metrics: bool,
    /// Bearer token variables default to `OPENAI_API_KEY` and `AMODAL_SERVICE_TOKEN`.
    pub reasoning: HttpSettings,
    pub service: HttpSettings,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            reasoning_url: None,
            model: "gpt-4o".into(),
            service_url: None,
            metrics: true,
            reasoning: HttpSettings::default(),
            service: HttpSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Cases evaluated concurrently.
    pub parallelism: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { parallelism: 4 }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.backend.mock.reasoning_fixtures.as_mut() {
            fix(p);
        }
        if let MockSegmentationConfig::Masks { masks } = &mut self.backend.mock.segmentation {
            masks.values_mut().for_each(fix);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.alpha.validate()?;
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::Config("temperature must be finite and non-negative".into()));
        }
        if !(0.0..=MAX_EXPANSION).contains(&self.bbox_only_fraction) {
            return Err(Error::Config(format!(
                "bbox_only_fraction must lie in [0, {MAX_EXPANSION}]"
            )));
        }
        if self.description_budget == 0 {
            return Err(Error::Config("description_budget must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.eval.parallelism == 0 {
            return Err(Error::Config("eval.parallelism must be positive".into()));
        }
        if let MockSegmentationConfig::Chroma { tolerance, colors } = &self.backend.mock.segmentation {
            if !(tolerance.is_finite() && *tolerance >= 0.0) {
                return Err(Error::Config("chroma tolerance must be non-negative".into()));
            }
            for c in colors.values() {
                parse_hex_color(c)?;
            }
        }
        for s in [&self.backend.http.reasoning, &self.backend.http.service] {
            if !(s.timeout_secs > 0.0) || s.max_in_flight == 0 {
                return Err(Error::Config("http timeout and max_in_flight must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn build_backends(&self) -> Result<Backends> {
        match self.backend.mode {
            BackendMode::Mock => self.mock_backends(),
            BackendMode::Http => self.http_backends(),
        }
    }

    fn mock_backends(&self) -> Result<Backends> {
        let m = &self.backend.mock;
        let path = m.reasoning_fixtures.as_ref().ok_or_else(|| {
            Error::Config("backend.mock.reasoning_fixtures is required in mock mode".into())
        })?;
        let fixtures = ReasoningFixtures::load(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let segmentation = match &m.segmentation {
            MockSegmentationConfig::Chroma { tolerance, colors } => {
                let colors = colors
                    .iter()
                    .map(|(k, v)| Ok((k.clone(), parse_hex_color(v)?)))
                    .collect::<Result<Vec<_>>>()?;
                MockSegmentation::chroma(colors, *tolerance)
            }
            MockSegmentationConfig::Masks { masks } => {
                let masks = masks
                    .iter()
                    .map(|(k, p)| {
                        let m = BinaryMask::load_png(p)
                            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                        Ok((k.clone(), m))
                    })
                    .collect::<Result<Vec<_>>>()?;
                MockSegmentation::masks(masks)
            }
        };
        Ok(Backends {
            reasoning: Arc::new(MockReasoning::new(fixtures)),
            segmentation: Arc::new(segmentation),
            inpainting: Arc::new(MockInpainting),
            metrics: m.metrics.then(|| Arc::new(MockMetrics) as Arc<dyn MetricBackend>),
        })
    }

    fn http_backends(&self) -> Result<Backends> {
        let h = &self.backend.http;
        let reasoning_url = h
            .reasoning_url
            .as_deref()
            .ok_or_else(|| Error::Config("backend.http.reasoning_url is required in http mode".into()))?;
        let service_url = h
            .service_url
            .as_deref()
            .ok_or_else(|| Error::Config("backend.http.service_url is required in http mode".into()))?;
        let with_token = |s: &HttpSettings, var: &str| {
            let mut s = s.clone();
            s.token_env.get_or_insert_with(|| var.to_string());
            s
        };
        let reasoning = with_token(&h.reasoning, "OPENAI_API_KEY");
        let service = with_token(&h.service, "AMODAL_SERVICE_TOKEN");
        let metrics = if h.metrics {
            Some(Arc::new(HttpMetrics::new(service_url, service.clone())?) as Arc<dyn MetricBackend>)
        } else {
            None
        };
        Ok(Backends {
            reasoning: Arc::new(HttpReasoning::new(reasoning_url, &h.model, reasoning)?),
            segmentation: Arc::new(HttpSegmentation::new(service_url, service.clone())?),
            inpainting: Arc::new(HttpInpainting::new(service_url, service)?),
            metrics,
        })
    }
}
