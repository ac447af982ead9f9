use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use rsd::annotation::{self, parse_vg, parse_vlm_output, parse_vlm_output_with, AnnotationError, Vocabulary};
use rsd::harness::config::RunConfig;
use rsd::harness::pipeline::{init_params, stage_eval, stage_mask, stage_rebatch, stage_riskhead};
use rsd::harness::{gen_scene, run_pipeline, write_scene, HarnessError, Result};
use rsd::io::IoError;
use rsd::metrics::{align_risk, diff_risk_dataset, join_frames, read_frames, DiffRiskMode, RiskBox};
use rsd::riskhead::gradcheck::{run_suite, SuiteOp};

/// Bilinear sampling tolerance on the max relative error.
const BILINEAR_TOL: f64 = 1e-6;
const DEFORM_TOL: f64 = 1e-4;
const GRADCHECK_POINTS: usize = 20;

#[derive(Parser)]
#[command(name = "rsd", version, about = "Risk-aware BEV perception toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with exact ground truth.
    GenScene {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        objects: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Project the BEV pillar lattice into a rig and record visibility.
    Mask {
        #[arg(long)]
        rig: PathBuf,
        #[arg(long, num_args = 2, value_names = ["ROWS", "COLS"])]
        grid: Vec<usize>,
        /// Pillar heights per BEV cell.
        #[arg(long)]
        depth: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_pgm: bool,
        /// Range and depth epsilon come from here; rows, cols and depth from the flags.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Gather each camera's visible BEV queries.
    Rebatch {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_indices: bool,
    },
    /// Run the risk head on a rebatch directory.
    Riskhead {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write initial risk head parameters for a config.
    InitParams {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compute the metric report from prediction and ground-truth JSONL.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Risk consistency between ground-truth and predicted risk annotations.
    DiffRisk {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        elementwise: bool,
    },
    /// Check grounding (`*.vg.json`) or language-model annotation files.
    ValidateAnnotations {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Also check boxes against an image size.
        #[arg(long, num_args = 2, value_names = ["WIDTH", "HEIGHT"])]
        image: Option<Vec<f64>>,
        /// Extra categories come from `[annotation.categories]`.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference checks of the analytic gradients.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = GradOp::All)]
        op: GradOp,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Full pipeline on a scene directory.
    Run {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GradOp {
    All,
    Bilinear,
    Deform,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| {
        HarnessError::Io(IoError::Fs {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn diff_risk_files(gt: &Path, pred: &Path, mode: DiffRiskMode) -> Result<()> {
    let frames = join_frames(read_frames(pred)?, read_frames(gt)?)?;
    let mut pairs = Vec::new();
    for f in &frames {
        if let Some(g) = &f.risk_gt {
            pairs.push(align_risk(g, f.risk_pred.as_deref().unwrap_or(&[]))?);
        }
    }
    let value = diff_risk_dataset(&pairs, mode);
    print_json(&serde_json::json!({ "Diff_Risk": value, "frames": pairs.len() }));
    Ok(())
}

/// Language-model annotations as risk boxes, for comparing two label sets.
fn annotation_boxes(path: &Path) -> Result<Vec<RiskBox>> {
    let parsed = parse_vlm_output(&read_text(path)?)?;
    Ok(parsed
        .entries
        .iter()
        .map(|e| RiskBox {
            view: 0,
            bbox: e.bbox,
            risk_score: e.risk_score,
        })
        .collect())
}

fn diff_risk(gt: &Path, pred: &Path, mode: DiffRiskMode) -> Result<()> {
    let is_jsonl = |p: &Path| p.extension().is_some_and(|e| e == "jsonl");
    if is_jsonl(gt) && is_jsonl(pred) {
        return diff_risk_files(gt, pred, mode);
    }
    let pair = align_risk(&annotation_boxes(gt)?, &annotation_boxes(pred)?)?;
    let value = diff_risk_dataset(std::slice::from_ref(&pair), mode);
    print_json(&serde_json::json!({ "Diff_Risk": value, "frames": 1 }));
    Ok(())
}

fn validate_annotations(files: &[PathBuf], image: Option<&[f64]>, vocab: &Vocabulary) -> Result<()> {
    let mut failed = Vec::new();
    for path in files {
        let text = read_text(path)?;
        let name = path.display();
        let is_vg = path.to_string_lossy().ends_with(".vg.json");
        let outcome = if is_vg {
            parse_vg(&text).map(|d| {
                println!("{name}: ok, {} detections", d.len());
            })
        } else {
            parse_vlm_output_with(&text, vocab).map(|parsed| {
                let mut warnings = parsed.warnings;
                warnings.extend(annotation::check_rank_score_consistency(&parsed.entries));
                if let Some([w, h]) = image.map(|v| [v[0], v[1]]) {
                    warnings.extend(annotation::check_bbox_bounds(&parsed.entries, w, h));
                }
                println!("{name}: ok, {} entries, {} warnings", parsed.entries.len(), warnings.len());
                for warning in warnings {
                    println!("{name}: warning: {warning}");
                }
            })
        };
        if let Err(e) = outcome {
            println!("{name}: error: {e}");
            failed.push(name.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Annotation(AnnotationError::Validation(failed)))
    }
}

fn gradcheck(op: GradOp, seed: u64) -> Result<()> {
    let suites = match op {
        GradOp::All => vec![(SuiteOp::Bilinear, BILINEAR_TOL), (SuiteOp::Deform, DEFORM_TOL)],
        GradOp::Bilinear => vec![(SuiteOp::Bilinear, BILINEAR_TOL)],
        GradOp::Deform => vec![(SuiteOp::Deform, DEFORM_TOL)],
    };
    let mut failures = Vec::new();
    for (suite, tol) in suites {
        let r = run_suite(suite, GRADCHECK_POINTS, seed)?;
        let ok = r.max_rel_error <= tol;
        println!(
            "{} {}: {} points, max relative error {:.3e} (tolerance {tol:.0e})",
            if ok { "PASS" } else { "FAIL" },
            r.op,
            r.points,
            r.max_rel_error
        );
        if !ok {
            failures.push(r.op);
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::GradcheckFailed(failures.join(", ")))
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenScene {
            seed,
            objects,
            out,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let scene = gen_scene(seed, objects, &cfg);
            write_scene(&scene, &cfg, &out)?;
            log::info!("wrote scene with {} objects to {}", scene.objects.len(), out.display());
        }
        Command::Mask {
            rig,
            grid,
            depth,
            out,
            dump_pgm,
            config,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.grid.rows = grid[0];
            cfg.grid.cols = grid[1];
            cfg.grid.z_samples = depth;
            let bev = cfg.grid.bev_grid().map_err(|e| HarnessError::Config(e.to_string()))?;
            stage_mask(&rig, &bev, cfg.grid.depth_eps, &out, dump_pgm)?;
        }
        Command::Rebatch {
            mask,
            queries,
            out,
            dump_indices,
        } => {
            stage_rebatch(&mask, &queries, &out, dump_indices)?;
        }
        Command::Riskhead { input, params, out } => {
            let objects = stage_riskhead(&input, &params, &out, true)?;
            print_json(&objects);
        }
        Command::InitParams { out, config } => {
            init_params(&load_config(config.as_deref())?).save(&out)?;
        }
        Command::Eval {
            pred,
            gt,
            report,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            print_json(&stage_eval(&pred, &gt, &report, &cfg.eval.options())?);
        }
        Command::DiffRisk { gt, pred, elementwise } => {
            let mode = if elementwise {
                DiffRiskMode::Elementwise
            } else {
                DiffRiskMode::Frobenius
            };
            diff_risk(&gt, &pred, mode)?;
        }
        Command::ValidateAnnotations { files, image, config } => {
            let vocab = load_config(config.as_deref())?.annotation.vocabulary();
            validate_annotations(&files, image.as_deref(), &vocab)?
        }
        Command::Gradcheck { op, seed } => gradcheck(op, seed)?,
        Command::Run { scene, out, config } => {
            let cfg = load_config(config.as_deref())?;
            let run = run_pipeline(&cfg, &scene, &out)?;
            print_json(&run.report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
