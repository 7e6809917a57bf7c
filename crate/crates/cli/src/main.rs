use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amodal_core::agents::{BoundaryStrategy, TaskQuery};
use amodal_core::alpha::Threshold;
use amodal_core::config::{BackendMode, PipelineConfig};
use amodal_core::eval::{load_manifest, run_benchmark};
use amodal_core::fixtures;
use amodal_core::imaging::load_rgb;
use amodal_core::pipeline::{plan_masks, run_pipeline, Trace};
use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "amodal", version, about = "Single-pass amodal completion")]
struct Cli {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Complete one occluded object and write it as an RGBA layer.
    Complete {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write every intermediate into `<out stem>_intermediates/`.
        #[arg(long)]
        dump_intermediates: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a JSON Lines manifest and write report.json / report.csv.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Exit 0 even when some cases fail.
        #[arg(long)]
        allow_failures: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run only the spatial reasoning: findings, expansion and masks.
    InspectMask {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        query: String,
        /// Where to write visible_mask.png and inpaint_mask.png.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write a synthetic scene with mock-backend fixtures and config.
    Fixture {
        /// Scene name, or `all` for every scene plus a manifest.
        #[arg(long)]
        scene: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Flags that override the config file.
#[derive(Args, Default)]
struct Overrides {
    /// Fixed attention threshold in (0, 1), or `otsu`.
    #[arg(long)]
    threshold: Option<Threshold>,
    #[arg(long)]
    dilation_radius: Option<u32>,
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    protect_visible: Option<bool>,
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    fuse_visible: Option<bool>,
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    single_agent: Option<bool>,
    /// Final denoising steps to average attention over.
    #[arg(long)]
    attn_last_n: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "MODE")]
    backend: Option<BackendMode>,
    #[arg(long, value_name = "STRATEGY")]
    boundary_strategy: Option<BoundaryStrategy>,
}

impl Overrides {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(t) = self.threshold {
            cfg.alpha.threshold = t;
        }
        if let Some(r) = self.dilation_radius {
            cfg.dilation_radius = Some(r);
        }
        if let Some(v) = self.protect_visible {
            cfg.protect_visible = v;
        }
        if let Some(v) = self.fuse_visible {
            cfg.alpha.fuse_visible = v;
        }
        if let Some(v) = self.single_agent {
            cfg.single_agent = v;
        }
        if let Some(n) = self.attn_last_n {
            cfg.alpha.attn_last_n = n;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.alpha.seed = s;
        }
        if let Some(b) = self.backend {
            cfg.backend.mode = b;
        }
        if let Some(s) = self.boundary_strategy {
            cfg.boundary_strategy = s;
        }
    }
}

enum Failure {
    /// Bad arguments, config or inputs.
    Usage(anyhow::Error),
    Pipeline(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Pipeline(_) => 1,
        }
    }
}

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn pipeline<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Pipeline(e.into())
}

fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<PipelineConfig, Failure> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p).map_err(usage)?,
        None => PipelineConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn load_query(image: &Path, query: &str) -> Result<TaskQuery, Failure> {
    let img = load_rgb(image)
        .with_context(|| format!("cannot read image {}", image.display()))
        .map_err(usage)?;
    TaskQuery::new(img, query).map_err(usage)
}

fn intermediates_dir(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    out.with_file_name(format!("{stem}_intermediates"))
}

fn complete(
    config: Option<&Path>,
    image: &Path,
    query: &str,
    out: &Path,
    dump: bool,
    overrides: &Overrides,
) -> Result<(), Failure> {
    let cfg = load_config(config, overrides)?;
    let q = load_query(image, query)?;
    let backends = cfg.build_backends().map_err(usage)?;
    let result = run_pipeline(&q, &cfg, &backends).map_err(pipeline)?;
    for w in &result.trace.warnings {
        log::warn!("{w}");
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(pipeline)?;
    }
    result
        .rgba
        .save(out)
        .with_context(|| format!("cannot write {}", out.display()))
        .map_err(pipeline)?;
    if dump {
        let dir = intermediates_dir(out);
        result.write_intermediates(&dir).map_err(pipeline)?;
        log::info!("intermediates in {}", dir.display());
    }
    println!(
        "{}: {}x{} canvas, {} occluder(s), expansion {}",
        out.display(),
        result.placement.new_width,
        result.placement.new_height,
        result.occluder_masks.len(),
        result.boundary.expansion.directions()
    );
    Ok(())
}

fn eval(
    config: Option<&Path>,
    manifest: &Path,
    out_dir: &Path,
    allow_failures: bool,
    overrides: &Overrides,
) -> Result<(), Failure> {
    let cfg = load_config(config, overrides)?;
    let cases = load_manifest(manifest)
        .with_context(|| format!("manifest {}", manifest.display()))
        .map_err(usage)?;
    let backends = cfg.build_backends().map_err(usage)?;
    let report = run_benchmark(&cases, &cfg, &backends).map_err(pipeline)?;
    report.write(out_dir).map_err(pipeline)?;
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    let a = &report.aggregates;
    println!(
        "{} case(s), {} failure(s); clip {} lpips {} feature_sim {} ssim {}",
        report.cases,
        report.failures,
        fmt(a.clip),
        fmt(a.lpips),
        fmt(a.feature_sim),
        fmt(a.ssim)
    );
    if report.failures > 0 && !allow_failures {
        return Err(pipeline(anyhow!("{} case(s) failed", report.failures)));
    }
    Ok(())
}

fn inspect_mask(
    config: Option<&Path>,
    image: &Path,
    query: &str,
    out_dir: Option<&Path>,
    overrides: &Overrides,
) -> Result<(), Failure> {
    let cfg = load_config(config, overrides)?;
    let q = load_query(image, query)?;
    let backends = cfg.build_backends().map_err(usage)?;
    let mut trace = Trace::default();
    let plan = plan_masks(&q, &cfg, &backends, false, &mut trace).map_err(pipeline)?;
    let strategy = if cfg.single_agent { "single-agent".to_string() } else { cfg.boundary_strategy.to_string() };
    let proportion = if cfg.single_agent || cfg.boundary_strategy.estimates_proportion() {
        serde_json::to_value(plan.boundary.expansion).map_err(pipeline)?
    } else {
        json!("N/A")
    };
    let report = json!({
        "query": q.text(),
        "target": plan.occlusion.target,
        "occluders": plan.occlusion.occluders,
        "bbox": plan.bbox,
        "touched_edges": plan.touched,
        "strategy": strategy,
        "truncated": plan.boundary.truncated,
        "directions": plan.boundary.expansion.directions(),
        "proportion": proportion,
        "canvas": [plan.placement.new_width, plan.placement.new_height],
        "inpaint_pixels": plan.inpaint_mask.count(),
        "warnings": trace.warnings,
    });
    println!("{}", serde_json::to_string_pretty(&report).map_err(pipeline)?);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(pipeline)?;
        plan.visible_mask.save_png(dir.join("visible_mask.png")).map_err(pipeline)?;
        plan.inpaint_mask.save_png(dir.join("inpaint_mask.png")).map_err(pipeline)?;
    }
    Ok(())
}

fn fixture(scene: &str, out_dir: &Path) -> Result<(), Failure> {
    if scene == "all" {
        let (config, manifest) = fixtures::write_suite(&fixtures::all_scenes(), out_dir).map_err(pipeline)?;
        println!("{}\n{}", config.display(), manifest.display());
        return Ok(());
    }
    let s = fixtures::scene_by_name(scene).ok_or_else(|| {
        let names: Vec<String> = fixtures::all_scenes().into_iter().map(|s| s.name).collect();
        usage(anyhow!("unknown scene {scene:?}; available: all, {}", names.join(", ")))
    })?;
    let config = s.write(out_dir).map_err(pipeline)?;
    println!("{}", config.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let config = cli.config.as_deref();
    let outcome = match &cli.command {
        Command::Complete {
            image,
            query,
            out,
            dump_intermediates,
            overrides,
        } => complete(config, image, query, out, *dump_intermediates, overrides),
        Command::Eval {
            manifest,
            out_dir,
            allow_failures,
            overrides,
        } => eval(config, manifest, out_dir, *allow_failures, overrides),
        Command::InspectMask {
            image,
            query,
            out_dir,
            overrides,
        } => inspect_mask(config, image, query, out_dir.as_deref(), overrides),
        Command::Fixture { scene, out_dir } => fixture(scene, out_dir),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Pipeline(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}
