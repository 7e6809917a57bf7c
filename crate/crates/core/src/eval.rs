//! Batch evaluation over a JSON Lines manifest.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::TaskQuery;
use crate::backends::{Backends, MetricBackend};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::imaging::load_rgb;
use crate::mask::BinaryMask;
use crate::metrics::{ssim, visible_region_pair};
use crate::pipeline::{run_pipeline, PipelineResult};

pub const CSV_HEADER: &str = "case,clip,lpips,feature_sim,ssim,runtime_s";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCase {
    pub image: PathBuf,
    pub query: String,
    /// Ground-truth visible mask; the pipeline's own segmentation is used otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visible_mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl EvalCase {
    pub fn name(&self) -> String {
        self.image.display().to_string()
    }
}

/// Parses a manifest; relative paths resolve against its directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<EvalCase>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut cases = parse_manifest(BufReader::new(file))?;
    for c in &mut cases {
        if c.image.is_relative() {
            c.image = base.join(&c.image);
        }
        if let Some(m) = c.visible_mask.as_mut().filter(|m| m.is_relative()) {
            *m = base.join(&*m);
        }
    }
    Ok(cases)
}

pub fn parse_manifest(r: impl BufRead) -> Result<Vec<EvalCase>> {
    let mut cases = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let case: EvalCase = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        if case.query.trim().is_empty() {
            return Err(Error::Manifest {
                line: i + 1,
                message: "query is empty".into(),
            });
        }
        cases.push(case);
    }
    if cases.is_empty() {
        return Err(Error::InvalidInput("manifest has no cases".into()));
    }
    Ok(cases)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub case: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub clip: Option<f64>,
    pub lpips: Option<f64>,
    pub feature_sim: Option<f64>,
    pub ssim: Option<f64>,
    pub runtime_s: f64,
    /// Set when the case failed; failed rows are left out of the aggregates.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub metric_errors: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub clip: Option<f64>,
    pub lpips: Option<f64>,
    pub feature_sim: Option<f64>,
    pub ssim: Option<f64>,
    pub runtime_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregates: Aggregates,
    pub cases: usize,
    pub failures: usize,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-metric means over successful rows, summed in row order.
pub fn aggregate(rows: &[EvalRow]) -> Aggregates {
    let ok = || rows.iter().filter(|r| r.error.is_none());
    Aggregates {
        clip: mean(ok().map(|r| r.clip)),
        lpips: mean(ok().map(|r| r.lpips)),
        feature_sim: mean(ok().map(|r| r.feature_sim)),
        ssim: mean(ok().map(|r| r.ssim)),
        runtime_s: mean(ok().map(|r| Some(r.runtime_s))),
    }
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        EvalReport {
            aggregates: aggregate(&rows),
            cases: rows.len(),
            failures: rows.iter().filter(|r| r.error.is_some()).count(),
            rows,
        }
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{:.3}\n",
                csv_field(&r.case),
                cell(r.clip),
                cell(r.lpips),
                cell(r.feature_sim),
                cell(r.ssim),
                r.runtime_s
            ));
        }
        out
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut json = std::fs::File::create(dir.join("report.json"))?;
        serde_json::to_writer_pretty(&mut json, self)?;
        json.write_all(b"\n")?;
        std::fs::write(dir.join("report.csv"), self.to_csv())?;
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Metric row for a finished run. SSIM is always computed natively; the
/// neural metrics only when a backend is given. Metric failures are recorded
/// per metric and do not fail the case.
pub fn evaluate_case(
    case: &EvalCase,
    original: &RgbImage,
    visible: Option<&BinaryMask>,
    result: &PipelineResult,
    metrics: Option<&dyn MetricBackend>,
    cfg: &PipelineConfig,
) -> Result<EvalRow> {
    let visible = visible.unwrap_or(&result.visible_mask);
    let (orig_crop, comp_crop) =
        visible_region_pair(original, visible, &result.completed, &result.placement, cfg.background)?;
    let mut row = EvalRow {
        case: case.name(),
        category: case.category.clone(),
        ..Default::default()
    };
    match ssim(&orig_crop, &comp_crop) {
        Ok(v) => row.ssim = Some(v),
        Err(e) => row.metric_errors.push(format!("ssim: {e}")),
    }
    if let Some(m) = metrics {
        let layer = RgbImage::from_fn(result.completed.width(), result.completed.height(), |x, y| {
            if result.alpha.get(x, y) {
                *result.completed.get_pixel(x, y)
            } else {
                cfg.background
            }
        });
        let mut record = |name: &str, r: Result<f64>| match r {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("{}: {name} failed: {e}", row.case);
                row.metric_errors.push(format!("{name}: {e}"));
                None
            }
        };
        let clip = record("clip", m.clip_score(&layer, &result.occlusion.target));
        let lpips = record("lpips", m.lpips(&orig_crop, &comp_crop));
        let feature_sim = record("feature_sim", m.feature_sim(&orig_crop, &comp_crop));
        row.clip = clip;
        row.lpips = lpips;
        row.feature_sim = feature_sim;
    }
    Ok(row)
}

fn run_case(case: &EvalCase, cfg: &PipelineConfig, backends: &Backends) -> EvalRow {
    let start = Instant::now();
    let outcome = (|| -> Result<EvalRow> {
        let image = load_rgb(&case.image)?;
        let visible = case.visible_mask.as_ref().map(BinaryMask::load_png).transpose()?;
        if let Some(v) = &visible {
            if v.dims() != image.dimensions() {
                return Err(Error::dims("visible_mask", image.dimensions(), v.dims()));
            }
        }
        let q = TaskQuery::new(image.clone(), case.query.clone())?;
        let result = run_pipeline(&q, cfg, backends).map_err(|e| Error::InvalidInput(e.to_string()))?;
        evaluate_case(case, &image, visible.as_ref(), &result, backends.metrics.as_deref(), cfg)
    })();
    let runtime_s = start.elapsed().as_secs_f64();
    match outcome {
        Ok(row) => EvalRow { runtime_s, ..row },
        Err(e) => {
            log::error!("{}: {e}", case.name());
            EvalRow {
                case: case.name(),
                category: case.category.clone(),
                runtime_s,
                error: Some(e.to_string()),
                ..Default::default()
            }
        }
    }
}

/// Evaluates every case with at most `cfg.eval.parallelism` in flight. Rows
/// keep manifest order.
pub fn run_benchmark(cases: &[EvalCase], cfg: &PipelineConfig, backends: &Backends) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::InvalidInput("manifest has no cases".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.eval.parallelism)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows: Vec<EvalRow> = pool.install(|| cases.par_iter().map(|c| run_case(c, cfg, backends)).collect());
    Ok(EvalReport::from_rows(rows))
}
