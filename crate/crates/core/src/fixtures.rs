//! Synthetic scenes with canned agent answers for mock-mode runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde_json::json;

use crate::agents::{
    build_boundary_prompt, build_combined_prompt, build_description_prompt,
    build_occlusion_prompt, BoundaryPrior, TaskQuery,
};
use crate::backends::{
    message_digest, AgentKind, MockSegmentation, ReasoningFixtures, SegmentationBackend,
};
use crate::config::{BackendMode, MockSegmentationConfig, PipelineConfig};
use crate::error::{Error, Result};
use crate::imaging::Color;
use crate::mask::{bbox, edges_touched, BinaryMask, Edge, EdgeSet, ExpansionSpec};

/// Chroma tolerance used by scene configs; scene colours are far apart.
pub const SCENE_TOLERANCE: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct Scene {
    pub name: String,
    pub image: RgbImage,
    pub query: String,
    pub target: (String, Color),
    pub occluders: Vec<(String, Color)>,
    /// What the boundary agent answers.
    pub expansion: ExpansionSpec,
    pub description: String,
}

fn hex(c: Color) -> String {
    format!("#{}", hex::encode(c.0))
}

impl Scene {
    pub fn expected_directions(&self) -> EdgeSet {
        self.expansion.directions()
    }

    pub fn segmentation(&self) -> MockSegmentation {
        MockSegmentation::chroma(
            std::iter::once(self.target.clone()).chain(self.occluders.iter().cloned()),
            SCENE_TOLERANCE,
        )
    }

    pub fn task(&self) -> Result<TaskQuery> {
        TaskQuery::new(self.image.clone(), self.query.clone())
    }

    pub fn visible_mask(&self) -> Result<BinaryMask> {
        Ok(self.segmentation().segment(&self.image, &self.target.0)?.mask)
    }

    fn occlusion_json(&self) -> serde_json::Value {
        json!({
            "target": self.target.0,
            "occluders": self.occluders.iter().map(|(l, _)| l.as_str()).collect::<Vec<_>>(),
        })
    }

    fn boundary_json(&self) -> serde_json::Value {
        let e = &self.expansion;
        json!({
            "truncated": !e.is_zero(),
            "expansion": {"left": e.left, "right": e.right, "top": e.top, "bottom": e.bottom},
            "rationale": if e.is_zero() {
                "The object lies inside the frame.".to_string()
            } else {
                format!("The object continues past the {} border(s).", e.directions().names().join(" and "))
            },
        })
    }

    /// Strict digest-keyed answers for every prompt a run of this scene can
    /// issue under `cfg` (both agent boundary strategies and single-agent mode).
    pub fn reasoning_fixtures(&self, cfg: &PipelineConfig) -> Result<ReasoningFixtures> {
        let q = self.task()?;
        let visible = self.visible_mask()?;
        let bb = bbox(&visible).ok_or_else(|| Error::InvalidInput("scene target has no pixels".into()))?;
        let (w, h) = self.image.dimensions();
        let prior = BoundaryPrior {
            bbox: bb,
            touched: edges_touched(bb, w, h, cfg.edge_tolerance),
            image_width: w,
            image_height: h,
        };
        let occlusion = self.occlusion_json();
        let boundary = self.boundary_json();
        let description = json!({"description": self.description});
        let mut combined = occlusion.clone();
        for (k, v) in boundary.as_object().into_iter().flatten().chain(description.as_object().into_iter().flatten()) {
            combined[k] = v.clone();
        }
        let mut responses = BTreeMap::new();
        responses.insert(
            message_digest(&build_occlusion_prompt(&q)),
            format!("Here is the ordering.\n```json\n{occlusion}\n```"),
        );
        responses.insert(message_digest(&build_boundary_prompt(&q, Some(&prior))), boundary.to_string());
        responses.insert(message_digest(&build_boundary_prompt(&q, None)), boundary.to_string());
        responses.insert(message_digest(&build_description_prompt(&q)), description.to_string());
        responses.insert(message_digest(&build_combined_prompt(&q)), combined.to_string());
        Ok(ReasoningFixtures {
            strict: true,
            responses,
            fallback: BTreeMap::<AgentKind, String>::new(),
        })
    }

    /// Mock-mode config for this scene; fixture paths are relative to `dir`.
    pub fn config(&self) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.backend.mode = BackendMode::Mock;
        cfg.backend.mock.reasoning_fixtures = Some(PathBuf::from("reasoning.json"));
        cfg.backend.mock.segmentation = MockSegmentationConfig::Chroma {
            tolerance: SCENE_TOLERANCE,
            colors: std::iter::once(&self.target)
                .chain(&self.occluders)
                .map(|(l, c)| (l.clone(), hex(*c)))
                .collect(),
        };
        cfg
    }

    /// Writes `image.png`, `reasoning.json` and `config.toml` into `dir`.
    /// Returns the config path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let cfg = self.config();
        self.image.save(dir.join("image.png"))?;
        let fixtures = self.reasoning_fixtures(&cfg)?;
        std::fs::write(dir.join("reasoning.json"), serde_json::to_string_pretty(&fixtures)? + "\n")?;
        let path = dir.join("config.toml");
        std::fs::write(&path, cfg.to_toml()?)?;
        std::fs::write(dir.join("query.txt"), format!("{}\n", self.query))?;
        Ok(path)
    }
}

fn in_disk(x: u32, y: u32, cx: f64, cy: f64, r: f64) -> bool {
    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
    dx * dx + dy * dy <= r * r
}

const SKY: Color = Rgb([135, 190, 235]);
const GROUND: Color = Rgb([128, 128, 128]);
const BRICK: Color = Rgb([165, 60, 40]);
const FOLIAGE: Color = Rgb([40, 130, 50]);
const PAPER: Color = Rgb([235, 235, 235]);
const RED: Color = Rgb([200, 40, 40]);
const BLUE: Color = Rgb([50, 80, 200]);
const ORANGE: Color = Rgb([240, 150, 30]);

/// A brick tower cut off by the left and bottom borders, partly hidden by trees.
pub fn clock_tower() -> Scene {
    let image = RgbImage::from_fn(160, 120, |x, y| {
        let tree = |cx, cy, r| in_disk(x, y, cx, cy, r);
        if tree(34.0, 84.0, 18.0) || tree(56.0, 92.0, 14.0) {
            FOLIAGE
        } else if x < 44 && y >= 20 {
            BRICK
        } else if y >= 100 {
            GROUND
        } else {
            SKY
        }
    });
    Scene {
        name: "clock_tower".into(),
        image,
        query: "the clock tower".into(),
        target: ("clock tower".into(), BRICK),
        occluders: vec![("trees".into(), FOLIAGE)],
        expansion: ExpansionSpec {
            left: 0.5,
            bottom: 0.5,
            ..ExpansionSpec::ZERO
        },
        description: "A red-brick clock tower with ornate golden details and a tall pointed spire. \
                      Its square shaft continues down to a broad stone base with an arched doorway."
            .into(),
    }
}

/// A red ball crossing the given borders (or centred when `edges` is empty).
pub fn edge_scene(edges: &[Edge]) -> Scene {
    let set: EdgeSet = edges.iter().copied().collect();
    let cx = if set.contains(Edge::Left) {
        10.0
    } else if set.contains(Edge::Right) {
        86.0
    } else {
        48.0
    };
    let cy = if set.contains(Edge::Top) {
        10.0
    } else if set.contains(Edge::Bottom) {
        86.0
    } else {
        48.0
    };
    let image = RgbImage::from_fn(96, 96, |x, y| if in_disk(x, y, cx, cy, 22.0) { RED } else { PAPER });
    let mut expansion = ExpansionSpec::ZERO;
    for e in set.iter() {
        expansion.set(e, 0.3);
    }
    let name = if set.is_empty() {
        "edge_none".to_string()
    } else {
        format!("edge_{}", set.names().join("_"))
    };
    Scene {
        name,
        image,
        query: "the red ball".into(),
        target: ("red ball".into(), RED),
        occluders: Vec::new(),
        expansion,
        description: "A glossy red rubber ball, perfectly round, with a soft highlight on top.".into(),
    }
}

/// Left, right, top, bottom, bottom-left corner and a centred control.
pub fn edge_scenes() -> Vec<Scene> {
    [
        vec![Edge::Left],
        vec![Edge::Right],
        vec![Edge::Top],
        vec![Edge::Bottom],
        vec![Edge::Bottom, Edge::Left],
        vec![],
    ]
    .iter()
    .map(|e| edge_scene(e))
    .collect()
}

/// A blue box split by an orange pole; nothing crosses the frame, so the
/// generator only synthesises the hidden middle strip.
pub fn split_box() -> Scene {
    let image = RgbImage::from_fn(96, 96, |x, y| {
        if (40..56).contains(&x) {
            ORANGE
        } else if (20..76).contains(&x) && (20..76).contains(&y) {
            BLUE
        } else {
            PAPER
        }
    });
    Scene {
        name: "split_box".into(),
        image,
        query: "the blue box".into(),
        target: ("blue box".into(), BLUE),
        occluders: vec![("orange pole".into(), ORANGE)],
        expansion: ExpansionSpec::ZERO,
        description: "A matte blue cardboard box seen face-on, with straight crisp edges.".into(),
    }
}

/// Writes each scene's image plus one shared `reasoning.json`, `config.toml`
/// and `manifest.jsonl` covering all of them. Returns the config and manifest
/// paths.
pub fn write_suite(scenes: &[Scene], dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let mut cfg = PipelineConfig::default();
    cfg.backend.mock.reasoning_fixtures = Some(PathBuf::from("reasoning.json"));
    let mut fixtures = ReasoningFixtures {
        strict: true,
        ..Default::default()
    };
    let mut colors = BTreeMap::new();
    let mut manifest = String::new();
    for s in scenes {
        fixtures.responses.extend(s.reasoning_fixtures(&cfg)?.responses);
        for (label, c) in std::iter::once(&s.target).chain(&s.occluders) {
            colors.insert(label.clone(), hex(*c));
        }
        let image = format!("{}.png", s.name);
        s.image.save(dir.join(&image))?;
        manifest.push_str(&serde_json::to_string(&json!({"image": image, "query": s.query, "category": s.name}))?);
        manifest.push('\n');
    }
    cfg.backend.mock.segmentation = MockSegmentationConfig::Chroma {
        tolerance: SCENE_TOLERANCE,
        colors,
    };
    std::fs::write(dir.join("reasoning.json"), serde_json::to_string_pretty(&fixtures)? + "\n")?;
    let config = dir.join("config.toml");
    std::fs::write(&config, cfg.to_toml()?)?;
    let manifest_path = dir.join("manifest.jsonl");
    std::fs::write(&manifest_path, manifest)?;
    Ok((config, manifest_path))
}

pub fn all_scenes() -> Vec<Scene> {
    let mut v = vec![clock_tower(), split_box()];
    v.extend(edge_scenes());
    v
}

pub fn scene_by_name(name: &str) -> Option<Scene> {
    all_scenes().into_iter().find(|s| s.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_masks_are_what_they_claim() {
        let s = clock_tower();
        let vis = s.visible_mask().unwrap();
        let bb = bbox(&vis).unwrap();
        assert_eq!(edges_touched(bb, 160, 120, 2).names(), vec!["left", "bottom"]);
        let trees = s.segmentation().segment(&s.image, "trees").unwrap().mask;
        assert!(!trees.is_empty());
        assert_eq!(vis.intersection_count(&trees), 0);

        for scene in edge_scenes() {
            let vis = scene.visible_mask().unwrap();
            let (w, h) = scene.image.dimensions();
            let touched = edges_touched(bbox(&vis).unwrap(), w, h, 2);
            assert_eq!(touched, scene.expected_directions(), "{}", scene.name);
        }
        let names: Vec<_> = edge_scenes().into_iter().map(|s| s.name).collect();
        assert_eq!(names, ["edge_left", "edge_right", "edge_top", "edge_bottom", "edge_left_bottom", "edge_none"]);
    }

    #[test]
    fn fixtures_cover_every_prompt() {
        let s = clock_tower();
        let fx = s.reasoning_fixtures(&s.config()).unwrap();
        assert!(fx.strict);
        assert_eq!(fx.responses.len(), 5);
    }
}
