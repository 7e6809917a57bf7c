//! Occlusion, boundary and description agents: typed findings, prompt
//! templates and response parsers.

mod parse;
mod prompts;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::rgb_to_png;
use crate::mask::{Edge, EdgeSet, ExpansionSpec};

pub use parse::{
    extract_json_objects, parse_boundary_response, parse_combined_response,
    parse_description_response, parse_occlusion_response, truncate_to_budget,
};
pub use prompts::{
    build_boundary_prompt, build_combined_prompt, build_description_prompt,
    build_occlusion_prompt, retry_message, BoundaryPrior, BOUNDARY_SCHEMA, COMBINED_SCHEMA,
    DESCRIPTION_SCHEMA, OCCLUDER_EXCLUSION, OCCLUSION_SCHEMA,
};

/// Default description budget in whitespace-separated words.
pub const DEFAULT_DESCRIPTION_BUDGET: usize = 200;

/// An image plus the free-text name of the object to complete.
#[derive(Debug, Clone)]
pub struct TaskQuery {
    image: RgbImage,
    png: Arc<Vec<u8>>,
    text: String,
}

impl TaskQuery {
    pub fn new(image: RgbImage, text: impl Into<String>) -> Result<Self> {
        let text = text.into().trim().to_string();
        if text.is_empty() {
            return Err(Error::InvalidInput("query text must be non-empty".into()));
        }
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::InvalidInput("query image is empty".into()));
        }
        let png = Arc::new(rgb_to_png(&image)?);
        Ok(TaskQuery { image, png, text })
    }

    pub fn image(&self) -> &RgbImage {
        &self.image
    }

    pub fn png(&self) -> &Arc<Vec<u8>> {
        &self.png
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionFinding {
    pub target: String,
    pub occluders: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryFinding {
    pub truncated: bool,
    pub expansion: ExpansionSpec,
    #[serde(default)]
    pub rationale: String,
    /// Clamping and normalisation notes produced while parsing.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl BoundaryFinding {
    pub fn none() -> Self {
        BoundaryFinding {
            truncated: false,
            expansion: ExpansionSpec::ZERO,
            rationale: String::new(),
            warnings: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionFinding {
    pub prompt_text: String,
    /// Whether the agent's text was cut to fit the budget.
    #[serde(default)]
    pub truncated: bool,
}

/// How the expansion estimate is produced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryStrategy {
    /// Expand every edge the visible bbox touches by a fixed fraction; no agent call.
    BboxOnly,
    /// Agent sees the image and query but no bbox prior.
    AgentOnly,
    /// Agent sees the image, query, bbox and touched edges.
    #[default]
    Hybrid,
}

impl BoundaryStrategy {
    pub fn name(self) -> &'static str {
        match self {
            BoundaryStrategy::BboxOnly => "bbox-only",
            BoundaryStrategy::AgentOnly => "agent-only",
            BoundaryStrategy::Hybrid => "hybrid",
        }
    }

    /// Whether the strategy yields a meaningful proportion, not just directions.
    pub fn estimates_proportion(self) -> bool {
        self != BoundaryStrategy::BboxOnly
    }
}

impl fmt::Display for BoundaryStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BoundaryStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "bbox-only" => Ok(BoundaryStrategy::BboxOnly),
            "agent-only" => Ok(BoundaryStrategy::AgentOnly),
            "hybrid" => Ok(BoundaryStrategy::Hybrid),
            other => Err(Error::Config(format!(
                "unknown boundary strategy {other:?} (bbox-only, agent-only, hybrid)"
            ))),
        }
    }
}

/// The bbox-only baseline: `fraction` on each touched edge.
pub fn bbox_only_finding(touched: EdgeSet, fraction: f64) -> Result<BoundaryFinding> {
    let mut expansion = ExpansionSpec::ZERO;
    for e in touched.iter() {
        expansion.set(e, fraction);
    }
    expansion.validate()?;
    Ok(BoundaryFinding {
        truncated: !touched.is_empty(),
        expansion,
        rationale: format!("visible bbox touches: {touched}"),
        warnings: Vec::new(),
    })
}

pub(crate) fn edge_alias(key: &str) -> Option<Edge> {
    match key.trim().to_ascii_lowercase().as_str() {
        "left" => Some(Edge::Left),
        "right" => Some(Edge::Right),
        "top" | "up" => Some(Edge::Top),
        "bottom" | "down" => Some(Edge::Bottom),
        _ => None,
    }
}
