//! Single-pass orchestration: agents, segmentation, mask composition, one
//! inpainting call, alpha extraction.

use std::fmt;
use std::path::Path;
use std::thread;
use std::time::Instant;

use image::{DynamicImage, RgbImage, RgbaImage};
use serde::Serialize;

use crate::agents::{
    bbox_only_finding, build_boundary_prompt, build_combined_prompt, build_description_prompt,
    build_occlusion_prompt, parse_boundary_response, parse_combined_response,
    parse_description_response, parse_occlusion_response, retry_message, BoundaryFinding,
    BoundaryPrior, BoundaryStrategy, DescriptionFinding, OcclusionFinding, TaskQuery,
    BOUNDARY_SCHEMA, COMBINED_SCHEMA, DESCRIPTION_SCHEMA, OCCLUSION_SCHEMA,
};
use crate::alpha::{extract_alpha_stages, upsample_attention, AlphaStages, AttentionBundle};
use crate::backends::{
    enforce_passthrough, AgentKind, Backends, ChatMessage, ChatRequest, InpaintParams,
    ReasoningBackend, Role,
};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::imaging::{compose_rgba, encode_png, extract_visible, place_on_canvas};
use crate::mask::{
    bbox, compose_inpaint_mask, compute_canvas, edges_touched, place_mask, BinaryMask,
    CanvasPlacement, EdgeSet, Rect, StructuringElement,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Occlusion,
    Segmentation,
    Boundary,
    Description,
    Combined,
    Composition,
    Inpainting,
    Alpha,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Occlusion => "occlusion",
            Stage::Segmentation => "segmentation",
            Stage::Boundary => "boundary",
            Stage::Description => "description",
            Stage::Combined => "combined",
            Stage::Composition => "composition",
            Stage::Inpainting => "inpainting",
            Stage::Alpha => "alpha",
        })
    }
}

/// One chat round trip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AgentExchange {
    pub agent: AgentKind,
    pub attempt: u32,
    pub digest: String,
    pub response: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Trace {
    /// Wall-clock seconds per stage; the only nondeterministic field.
    pub timings: Vec<(Stage, f64)>,
    pub exchanges: Vec<AgentExchange>,
    pub warnings: Vec<String>,
    pub inpaint_calls: u32,
}

impl Trace {
    fn time<T>(&mut self, stage: Stage, f: impl FnOnce(&mut Self) -> T) -> T {
        let start = Instant::now();
        let out = f(self);
        self.timings.push((stage, start.elapsed().as_secs_f64()));
        out
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: Stage,
    pub source: Error,
    pub trace: Box<Trace>,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

/// Everything one run produced.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub query: String,
    pub occlusion: OcclusionFinding,
    pub boundary: BoundaryFinding,
    pub description: DescriptionFinding,
    pub bbox: Rect,
    pub touched: EdgeSet,
    pub placement: CanvasPlacement,
    pub visible_mask: BinaryMask,
    pub visible_canvas: BinaryMask,
    pub occluder_masks: Vec<(String, BinaryMask)>,
    pub inpaint_mask: BinaryMask,
    pub masked_input: RgbImage,
    pub completed: RgbImage,
    pub attention: AttentionBundle,
    /// Absent when nothing needed inpainting.
    pub alpha_stages: Option<AlphaStages>,
    pub alpha: BinaryMask,
    pub rgba: RgbaImage,
    pub trace: Trace,
}

/// The spatial-reasoning half of a run: findings, masks and placement.
#[derive(Debug, Clone)]
pub struct MaskPlan {
    pub occlusion: OcclusionFinding,
    pub boundary: BoundaryFinding,
    pub description: Option<DescriptionFinding>,
    pub bbox: Rect,
    pub touched: EdgeSet,
    pub placement: CanvasPlacement,
    pub visible_mask: BinaryMask,
    pub visible_canvas: BinaryMask,
    pub occluder_masks: Vec<(String, BinaryMask)>,
    pub inpaint_mask: BinaryMask,
}

struct Agent<'a> {
    backend: &'a dyn ReasoningBackend,
    cfg: &'a PipelineConfig,
}

impl Agent<'_> {
    /// Asks until the reply parses, appending the validation error to the
    /// conversation, at most `max_retries` extra times.
    fn ask<T>(
        &self,
        agent: AgentKind,
        mut messages: Vec<ChatMessage>,
        schema: &str,
        log: &mut Vec<AgentExchange>,
        parse: impl Fn(&str) -> Result<T>,
    ) -> Result<T> {
        let mut attempt = 0;
        loop {
            let req = ChatRequest {
                agent,
                messages: messages.clone(),
                temperature: self.cfg.temperature,
                seed: Some(self.cfg.seed),
            };
            let digest = req.digest();
            let text = self.backend.chat(&req)?;
            match parse(&text) {
                Ok(v) => {
                    log.push(AgentExchange {
                        agent,
                        attempt,
                        digest,
                        response: text,
                        error: None,
                    });
                    return Ok(v);
                }
                Err(e) => {
                    let msg = match &e {
                        Error::Parse { message, .. } => message.clone(),
                        other => other.to_string(),
                    };
                    log::warn!("{agent} agent reply rejected (attempt {attempt}): {msg}");
                    log.push(AgentExchange {
                        agent,
                        attempt,
                        digest,
                        response: text.clone(),
                        error: Some(msg.clone()),
                    });
                    if attempt >= self.cfg.max_retries {
                        return Err(e);
                    }
                    messages.push(ChatMessage::text(Role::Assistant, text));
                    messages.push(retry_message(&msg, schema));
                    attempt += 1;
                }
            }
        }
    }
}

fn stage_err(stage: Stage, trace: &Trace) -> impl FnOnce(Error) -> PipelineError + '_ {
    move |source| PipelineError {
        stage,
        source,
        trace: Box::new(trace.clone()),
    }
}

/// Runs the agents and segmentation, then composes the canvas and inpainting
/// mask. With `describe` false the description agent is not consulted
/// (single-agent mode still yields one, from the combined reply).
pub fn plan_masks(
    q: &TaskQuery,
    cfg: &PipelineConfig,
    backends: &Backends,
    describe: bool,
    trace: &mut Trace,
) -> std::result::Result<MaskPlan, PipelineError> {
    let agent = Agent {
        backend: backends.reasoning.as_ref(),
        cfg,
    };
    let budget = cfg.description_budget;
    let (w, h) = q.image().dimensions();

    let mut combined = None;
    let occlusion = if cfg.single_agent {
        let (o, b, d) = trace
            .time(Stage::Combined, |t| {
                agent.ask(AgentKind::Combined, build_combined_prompt(q), COMBINED_SCHEMA, &mut t.exchanges, |s| {
                    parse_combined_response(s, budget)
                })
            })
            .map_err(stage_err(Stage::Combined, trace))?;
        combined = Some((b, d));
        o
    } else {
        trace
            .time(Stage::Occlusion, |t| {
                agent.ask(
                    AgentKind::Occlusion,
                    build_occlusion_prompt(q),
                    OCCLUSION_SCHEMA,
                    &mut t.exchanges,
                    parse_occlusion_response,
                )
            })
            .map_err(stage_err(Stage::Occlusion, trace))?
    };

    let (visible_mask, occluder_masks) = trace
        .time(Stage::Segmentation, |t| -> Result<_> {
            let visible = backends.segmentation.segment(q.image(), &occlusion.target)?.mask;
            if visible.dims() != (w, h) {
                return Err(Error::dims("segmentation", (w, h), visible.dims()));
            }
            if visible.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "target {:?} not found in the image",
                    occlusion.target
                )));
            }
            let mut occluders = Vec::new();
            for label in &occlusion.occluders {
                let m = backends.segmentation.segment(q.image(), label)?.mask;
                if m.dims() != (w, h) {
                    return Err(Error::dims("segmentation", (w, h), m.dims()));
                }
                if m.is_empty() {
                    t.warnings.push(format!("occluder {label:?} not found in the image"));
                }
                occluders.push((label.clone(), m));
            }
            Ok((visible, occluders))
        })
        .map_err(stage_err(Stage::Segmentation, trace))?;

    let bbox = bbox(&visible_mask).expect("visible mask is non-empty");
    let touched = edges_touched(bbox, w, h, cfg.edge_tolerance);
    let prior = BoundaryPrior {
        bbox,
        touched,
        image_width: w,
        image_height: h,
    };

    let (boundary, description) = match combined {
        Some((b, d)) => (b, Some(d)),
        None => {
            let started = Instant::now();
            let mut b_log = Vec::new();
            let mut d_log = Vec::new();
            let (b, d) = thread::scope(|s| {
                let desc = describe.then(|| {
                    s.spawn(|| {
                        agent.ask(
                            AgentKind::Description,
                            build_description_prompt(q),
                            DESCRIPTION_SCHEMA,
                            &mut d_log,
                            |t| parse_description_response(t, budget),
                        )
                    })
                });
                let b = match cfg.boundary_strategy {
                    BoundaryStrategy::BboxOnly => bbox_only_finding(touched, cfg.bbox_only_fraction),
                    strategy => {
                        let p = (strategy == BoundaryStrategy::Hybrid).then_some(&prior);
                        agent.ask(
                            AgentKind::Boundary,
                            build_boundary_prompt(q, p),
                            BOUNDARY_SCHEMA,
                            &mut b_log,
                            parse_boundary_response,
                        )
                    }
                };
                let d = desc.map(|j| j.join().expect("description agent panicked"));
                (b, d)
            });
            let elapsed = started.elapsed().as_secs_f64();
            trace.exchanges.extend(b_log);
            trace.exchanges.extend(d_log);
            trace.timings.push((Stage::Boundary, elapsed));
            let b = b.map_err(stage_err(Stage::Boundary, trace))?;
            let d = d.transpose().map_err(stage_err(Stage::Description, trace))?;
            (b, d)
        }
    };
    trace.warnings.extend(boundary.warnings.iter().cloned());

    let composed = trace
        .time(Stage::Composition, |_| -> Result<_> {
            let placement = compute_canvas(w, h, &boundary.expansion)?;
            let se = cfg
                .dilation_radius
                .map(StructuringElement::disk)
                .unwrap_or_else(|| StructuringElement::default_for(w, h));
            let occ: Vec<BinaryMask> = occluder_masks.iter().map(|(_, m)| m.clone()).collect();
            let inpaint = compose_inpaint_mask(&occ, &visible_mask, &placement, se, cfg.protect_visible)?;
            let visible_canvas = place_mask(&visible_mask, &placement)?;
            Ok((placement, inpaint, visible_canvas))
        })
        .map_err(stage_err(Stage::Composition, trace))?;
    let (placement, inpaint_mask, visible_canvas) = composed;

    Ok(MaskPlan {
        occlusion,
        boundary,
        description,
        bbox,
        touched,
        placement,
        visible_mask,
        visible_canvas,
        occluder_masks,
        inpaint_mask,
    })
}

pub fn run_pipeline(
    q: &TaskQuery,
    cfg: &PipelineConfig,
    backends: &Backends,
) -> std::result::Result<PipelineResult, PipelineError> {
    let mut trace = Trace::default();
    let plan = plan_masks(q, cfg, backends, true, &mut trace)?;
    let description = plan.description.clone().expect("description requested");
    let (cw, ch) = plan.placement.new_dims();

    let masked_input = trace
        .time(Stage::Composition, |_| -> Result<_> {
            let vis_only = extract_visible(q.image(), &plan.visible_mask, cfg.background)?;
            place_on_canvas(&vis_only, &plan.placement, cfg.background)
        })
        .map_err(stage_err(Stage::Composition, &trace))?;

    let (completed, attention) = if plan.inpaint_mask.is_empty() {
        trace.warnings.push("inpainting mask is empty; passing the visible object through".into());
        (masked_input.clone(), AttentionBundle::zeros_for(cw, ch))
    } else {
        let params = InpaintParams {
            steps: cfg.steps,
            seed: cfg.seed,
            want_attention: true,
            attn_last_n: cfg.alpha.attn_last_n,
        };
        let out = trace
            .time(Stage::Inpainting, |t| -> Result<_> {
                t.inpaint_calls += 1;
                let out = backends
                    .inpainting
                    .inpaint(&masked_input, &plan.inpaint_mask, &description.prompt_text, &params)?;
                let image = enforce_passthrough(&masked_input, &plan.inpaint_mask, out.image)?;
                let attention = match out.attention {
                    Some(a) if a.latent_dims() == AttentionBundle::zeros_for(cw, ch).latent_dims() => a,
                    Some(a) => {
                        return Err(Error::Protocol {
                            message: format!("attention grid {:?} does not match the canvas", a.latent_dims()),
                            excerpt: String::new(),
                        })
                    }
                    None => {
                        t.warnings.push("inpainting backend returned no attention".into());
                        AttentionBundle::zeros_for(cw, ch)
                    }
                };
                Ok((image, attention))
            })
            .map_err(stage_err(Stage::Inpainting, &trace))?;
        out
    };

    let (alpha_stages, alpha) = if plan.inpaint_mask.is_empty() {
        (None, plan.visible_canvas.clone())
    } else {
        let stages = trace
            .time(Stage::Alpha, |_| {
                extract_alpha_stages(&completed, &attention, &plan.visible_canvas, &cfg.alpha)
            })
            .map_err(stage_err(Stage::Alpha, &trace))?;
        let alpha = stages.alpha.clone();
        (Some(stages), alpha)
    };
    let rgba = compose_rgba(&completed, &alpha).map_err(stage_err(Stage::Alpha, &trace))?;

    Ok(PipelineResult {
        query: q.text().to_string(),
        occlusion: plan.occlusion,
        boundary: plan.boundary,
        description,
        bbox: plan.bbox,
        touched: plan.touched,
        placement: plan.placement,
        visible_mask: plan.visible_mask,
        visible_canvas: plan.visible_canvas,
        occluder_masks: plan.occluder_masks,
        inpaint_mask: plan.inpaint_mask,
        masked_input,
        completed,
        attention,
        alpha_stages,
        alpha,
        rgba,
        trace,
    })
}

/// The combined single-prompt baseline: three findings from one reply.
pub fn run_single_agent(
    q: &TaskQuery,
    cfg: &PipelineConfig,
    backend: &dyn ReasoningBackend,
) -> Result<(OcclusionFinding, BoundaryFinding, DescriptionFinding)> {
    let agent = Agent { backend, cfg };
    let mut log = Vec::new();
    agent.ask(AgentKind::Combined, build_combined_prompt(q), COMBINED_SCHEMA, &mut log, |s| {
        parse_combined_response(s, cfg.description_budget)
    })
}

fn slug(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    s.trim_matches('_').to_string()
}

#[derive(Serialize)]
struct Summary<'a> {
    query: &'a str,
    occlusion: &'a OcclusionFinding,
    boundary: &'a BoundaryFinding,
    description: &'a DescriptionFinding,
    bbox: Rect,
    touched_edges: EdgeSet,
    placement: CanvasPlacement,
    inpaint_calls: u32,
    warnings: &'a [String],
    exchanges: &'a [AgentExchange],
}

impl PipelineResult {
    /// Writes every intermediate under fixed names. Timings are left out so
    /// repeated runs produce identical files.
    pub fn write_intermediates(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let png = |name: &str, img: DynamicImage| -> Result<()> {
            std::fs::write(dir.join(name), encode_png(&img)?)?;
            Ok(())
        };
        self.visible_mask.save_png(dir.join("visible_mask.png"))?;
        self.visible_canvas.save_png(dir.join("visible_canvas.png"))?;
        for (i, (label, m)) in self.occluder_masks.iter().enumerate() {
            m.save_png(dir.join(format!("occluder_{i:02}_{}.png", slug(label))))?;
        }
        self.inpaint_mask.save_png(dir.join("inpaint_mask.png"))?;
        png("masked_input.png", DynamicImage::ImageRgb8(self.masked_input.clone()))?;
        std::fs::write(dir.join("prompt.txt"), format!("{}\n", self.description.prompt_text))?;
        png("completed.png", DynamicImage::ImageRgb8(self.completed.clone()))?;
        let (w, h) = self.completed.dimensions();
        let heat = match &self.alpha_stages {
            Some(s) => s.heatmap.clone(),
            None => upsample_attention(&self.attention, w, h, false)?,
        };
        png("attention.png", DynamicImage::ImageLuma8(heat.to_gray()))?;
        self.attention.save(dir.join("attention.attn"))?;
        if let Some(s) = &self.alpha_stages {
            s.coarse.save_png(dir.join("coarse_mask.png"))?;
            s.fused.save_png(dir.join("fused_mask.png"))?;
        }
        self.alpha.save_png(dir.join("alpha.png"))?;
        png("rgba.png", DynamicImage::ImageRgba8(self.rgba.clone()))?;
        let summary = Summary {
            query: &self.query,
            occlusion: &self.occlusion,
            boundary: &self.boundary,
            description: &self.description,
            bbox: self.bbox,
            touched_edges: self.touched,
            placement: self.placement,
            inpaint_calls: self.trace.inpaint_calls,
            warnings: &self.trace.warnings,
            exchanges: &self.trace.exchanges,
        };
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
        Ok(())
    }
}
