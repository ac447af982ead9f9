//! Pipeline stages over directories. Each stage reads only the files named in
//! its signature and writes into its own output directory, so running the
//! stages one by one produces the same bytes as [`run_pipeline`].

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Array5};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::RunConfig;
use super::scene::{GT_FILE, PRED_FILE, QUERIES_FILE, RIG_FILE};
use super::{HarnessError, Result, Stage};
use crate::geometry::{compute_bev_mask, lift_bev_to_pillar, BevGrid, BevMask, CameraRig, ProjectedPoints2D};
use crate::io::{self, TensorBundle};
use crate::losses::{risk_loss, total_loss, LossBreakdown, RiskReduction};
use crate::metrics::{align_risk, evaluate, join_frames, read_frames, write_frames, EvalOptions, MetricReport, RiskBox};
use crate::rebatch::{extract_visible, rebatch, RebatchedQueries, VisibleIndexSets};
use crate::riskhead::{
    decode_batch, rha_forward, DeformAttnParams, PvQueryGrid, RiskDecoder, RiskHeadParams, RiskObject,
};

pub const PROJECTIONS_FILE: &str = "projections.bin";
pub const REBATCHED_FILE: &str = "rebatched.bin";
pub const INDICES_FILE: &str = "indices.json";
pub const RISK_OBJECTS_FILE: &str = "risk_objects.json";
pub const RISK_MAP_FILE: &str = "pv_risk_map.bin";
pub const PARAMS_FILE: &str = "params.bin";
pub const REPORT_FILE: &str = "report.json";
pub const LOSS_FILE: &str = "loss.json";

fn meta<T: for<'de> Deserialize<'de>>(bundle: &TensorBundle, key: &str, file: &Path) -> Result<T> {
    let v = bundle
        .meta(key)
        .ok_or_else(|| HarnessError::Input(format!("{}: missing meta `{key}`", file.display())))?;
    serde_json::from_value(v.clone())
        .map_err(|e| HarnessError::Input(format!("{}: bad meta `{key}`: {e}", file.display())))
}

fn tensor(bundle: &TensorBundle, name: &str, rank: usize, file: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let (shape, values) = bundle.get(name)?;
    if shape.len() != rank {
        return Err(HarnessError::Input(format!(
            "{}: `{name}` has rank {}, expected {rank}",
            file.display(),
            shape.len()
        )));
    }
    Ok((shape.to_vec(), values.to_vec()))
}

/// Output of the mask stage as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskArtifacts {
    pub grid: BevGrid,
    pub cameras: Vec<String>,
    pub projections: ProjectedPoints2D,
    pub mask: BevMask,
}

impl MaskArtifacts {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let p = &self.projections;
        let mut b = TensorBundle::new();
        b.set_meta("grid", serde_json::to_value(self.grid).expect("grid serializes"));
        b.set_meta("cameras", json!(self.cameras));
        b.push("coords", p.coords.shape(), p.coords.iter().copied());
        b.push("depth", p.depth.shape(), p.depth.iter().copied());
        b.push(
            "visible",
            self.mask.visible.shape(),
            self.mask.visible.iter().map(|v| if *v { 1.0 } else { 0.0 }),
        );
        b.write(&dir.join(PROJECTIONS_FILE))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let file = dir.join(PROJECTIONS_FILE);
        let b = TensorBundle::read(&file)?;
        let shape_err = |what: &str| HarnessError::Input(format!("{}: inconsistent `{what}` shape", file.display()));
        let (cs, cv) = tensor(&b, "coords", 5, &file)?;
        let coords = Array5::from_shape_vec((cs[0], cs[1], cs[2], cs[3], cs[4]), cv).map_err(|_| shape_err("coords"))?;
        let (ds, dv) = tensor(&b, "depth", 4, &file)?;
        let depth = Array4::from_shape_vec((ds[0], ds[1], ds[2], ds[3]), dv).map_err(|_| shape_err("depth"))?;
        let (vs, vv) = tensor(&b, "visible", 4, &file)?;
        let visible = Array4::from_shape_vec((vs[0], vs[1], vs[2], vs[3]), vv.iter().map(|v| *v != 0.0).collect())
            .map_err(|_| shape_err("visible"))?;
        if ds != vs || cs[..4] != ds[..] {
            return Err(shape_err("coords/depth/visible"));
        }
        let grid: BevGrid = meta(&b, "grid", &file)?;
        grid.validate()?;
        if grid.n_bev() != ds[2] || grid.z_samples != ds[3] {
            return Err(shape_err("grid"));
        }
        Ok(Self {
            grid,
            cameras: meta(&b, "cameras", &file)?,
            projections: ProjectedPoints2D { coords, depth },
            mask: BevMask { visible },
        })
    }
}

/// Geometry stage: project the pillar lattice into every camera of the rig.
pub fn stage_mask(rig_file: &Path, grid: &BevGrid, eps: f64, out: &Path, dump_pgm: bool) -> Result<MaskArtifacts> {
    let text = io::read_string(rig_file)?;
    let rig = CameraRig::from_json(&text)?;
    let ref3d = lift_bev_to_pillar(grid);
    let (projections, mask) = compute_bev_mask(grid, &ref3d, std::slice::from_ref(&rig), eps)?;
    let art = MaskArtifacts {
        grid: *grid,
        cameras: rig.cameras.iter().map(|c| c.name.clone()).collect(),
        projections,
        mask,
    };
    art.write(out)?;
    if dump_pgm {
        for (k, name) in art.cameras.iter().enumerate() {
            for d in 0..grid.z_samples {
                let img = art.mask.slice_image(0, k, d);
                io::write_pgm(&out.join(format!("mask_{k}_{name}_z{d}.pgm")), grid.cols, grid.rows, &img)?;
            }
        }
    }
    let idx = extract_visible(&art.mask);
    log::info!(
        "mask: {} cameras, {} visible (camera, query) pairs, l_max {}",
        art.cameras.len(),
        idx.total(),
        idx.l_max
    );
    Ok(art)
}

/// Reads `[1, N_BEV, d]` BEV queries.
pub fn read_queries(file: &Path) -> Result<Array3<f64>> {
    let b = TensorBundle::read(file)?;
    let (s, v) = tensor(&b, "bev_queries", 3, file)?;
    Array3::from_shape_vec((s[0], s[1], s[2]), v)
        .map_err(|_| HarnessError::Input(format!("{}: inconsistent `bev_queries` shape", file.display())))
}

/// Output of the rebatch stage as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RebatchArtifacts {
    pub grid: BevGrid,
    pub cameras: Vec<String>,
    pub queries: RebatchedQueries,
    pub index: VisibleIndexSets,
}

impl RebatchArtifacts {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let q = &self.queries;
        let mut b = TensorBundle::new();
        b.set_meta("grid", serde_json::to_value(self.grid).expect("grid serializes"));
        b.set_meta("cameras", json!(self.cameras));
        b.set_meta("l_max", self.index.l_max.into());
        b.push("bev_prime", q.bev_prime.shape(), q.bev_prime.iter().copied());
        b.push("ref2d_prime", q.ref2d_prime.shape(), q.ref2d_prime.iter().copied());
        b.push("lengths", q.lengths.shape(), q.lengths.iter().map(|v| *v as f64));
        b.push(
            "indices",
            &[self.index.total()],
            self.index.sets.iter().flatten().map(|v| *v as f64),
        );
        b.write(&dir.join(REBATCHED_FILE))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let file = dir.join(REBATCHED_FILE);
        let b = TensorBundle::read(&file)?;
        let shape_err = |what: &str| HarnessError::Input(format!("{}: inconsistent `{what}`", file.display()));
        let (bs, bv) = tensor(&b, "bev_prime", 4, &file)?;
        let bev_prime = Array4::from_shape_vec((bs[0], bs[1], bs[2], bs[3]), bv).map_err(|_| shape_err("bev_prime"))?;
        let (rs, rv) = tensor(&b, "ref2d_prime", 5, &file)?;
        let ref2d_prime =
            Array5::from_shape_vec((rs[0], rs[1], rs[2], rs[3], rs[4]), rv).map_err(|_| shape_err("ref2d_prime"))?;
        let (ls, lv) = tensor(&b, "lengths", 2, &file)?;
        let lengths = Array2::from_shape_vec((ls[0], ls[1]), lv.iter().map(|v| *v as usize).collect())
            .map_err(|_| shape_err("lengths"))?;
        let (_, iv) = tensor(&b, "indices", 1, &file)?;
        if ls[..] != bs[..2] || rs[..3] != bs[..3] || lengths.sum() != iv.len() {
            return Err(shape_err("lengths/indices"));
        }
        let mut sets = Vec::with_capacity(lengths.len());
        let mut at = 0;
        for &n in lengths.iter() {
            sets.push(iv[at..at + n].iter().map(|v| *v as usize).collect());
            at += n;
        }
        let l_max: usize = meta(&b, "l_max", &file)?;
        let grid: BevGrid = meta(&b, "grid", &file)?;
        grid.validate()?;
        Ok(Self {
            grid,
            cameras: meta(&b, "cameras", &file)?,
            queries: RebatchedQueries {
                bev_prime,
                ref2d_prime,
                lengths,
            },
            index: VisibleIndexSets {
                batch: bs[0],
                n_cam: bs[1],
                sets,
                l_max,
            },
        })
    }
}

/// Rebatch stage: gather each camera's visible queries.
pub fn stage_rebatch(mask_dir: &Path, queries_file: &Path, out: &Path, dump_indices: bool) -> Result<RebatchArtifacts> {
    let mask = MaskArtifacts::read(mask_dir)?;
    let queries = read_queries(queries_file)?;
    let index = extract_visible(&mask.mask);
    let rb = rebatch(&queries, &mask.projections, &index)?;
    let art = RebatchArtifacts {
        grid: mask.grid,
        cameras: mask.cameras,
        queries: rb,
        index,
    };
    art.write(out)?;
    if dump_indices {
        io::write_json(&out.join(INDICES_FILE), &art.index.debug_dump(&art.cameras))?;
    }
    Ok(art)
}

/// Collapse-initialized head whose decoder reads the risk channel (feature 0).
pub fn init_params(cfg: &RunConfig) -> RiskHeadParams {
    let m = &cfg.model;
    let mut attn = DeformAttnParams::new(m.dim, m.n_heads, m.n_points);
    attn.offset_scale = m.offset_scale;
    let mut decoder = RiskDecoder::zeros(m.dim);
    // the head sums over n_ref references
    decoder.weight[0] = m.decoder_gain / cfg.n_ref() as f64;
    decoder.bias = m.decoder_bias;
    decoder.threshold = m.risk_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    RiskHeadParams {
        attn,
        decoder,
        pv: PvQueryGrid::random(m.pv_views, m.pv_height, m.pv_width, m.dim, 0.01, &mut rng),
        n_ref: cfg.n_ref(),
    }
}

/// Risk objects as written by the riskhead stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskObjectsFile {
    pub cameras: Vec<String>,
    pub objects: Vec<RiskObject>,
}

/// Risk head stage: aggregate PV risk features, decode maps and objects.
pub fn stage_riskhead(in_dir: &Path, params_file: &Path, out: &Path, dump_maps: bool) -> Result<RiskObjectsFile> {
    let art = RebatchArtifacts::read(in_dir)?;
    let params = RiskHeadParams::load(params_file)?;
    let rha = rha_forward(&params.pv, &art.queries, &art.index, &art.grid, &params.attn, params.n_ref)?;
    let pred = decode_batch(&rha, 0, &params.decoder);
    let map = &pred.pv_risk_map;
    let mut b = TensorBundle::new();
    b.set_meta("cameras", json!(art.cameras));
    b.push("pv_risk_map", map.shape(), map.iter().copied());
    b.write(&out.join(RISK_MAP_FILE))?;
    if dump_maps {
        let (views, h, w) = map.dim();
        for v in 0..views {
            let name = art.cameras.get(v).cloned().unwrap_or_else(|| format!("view{v}"));
            io::write_pgm(&out.join(format!("risk_{v}_{name}.pgm")), w, h, &pred.view_image(v))?;
        }
    }
    let file = RiskObjectsFile {
        cameras: art.cameras,
        objects: pred.objects,
    };
    io::write_json(&out.join(RISK_OBJECTS_FILE), &file)?;
    log::info!("riskhead: {} risk objects", file.objects.len());
    Ok(file)
}

/// Adds the decoded risk objects to every prediction frame.
pub fn attach_risk(pred_file: &Path, risk: &RiskObjectsFile, out_file: &Path) -> Result<()> {
    let mut frames = read_frames(pred_file)?;
    let boxes: Vec<RiskBox> = risk
        .objects
        .iter()
        .map(|o| RiskBox {
            view: o.view,
            bbox: o.bbox,
            risk_score: o.risk_score,
        })
        .collect();
    for f in &mut frames {
        f.risk_pred = Some(boxes.clone());
    }
    Ok(write_frames(out_file, &frames)?)
}

/// Evaluation stage.
pub fn stage_eval(pred: &Path, gt: &Path, report_file: &Path, opts: &EvalOptions) -> Result<MetricReport> {
    let frames = join_frames(read_frames(pred)?, read_frames(gt)?)?;
    let report = evaluate(&frames, opts)?;
    io::write_json(report_file, &report)?;
    Ok(report)
}

/// Composed loss with the risk term from aligned risk annotations.
pub fn stage_loss(pred: &Path, gt: &Path, cfg: &RunConfig, out_file: &Path) -> Result<LossBreakdown> {
    let frames = join_frames(read_frames(pred)?, read_frames(gt)?)?;
    let mut risk = 0.0;
    for f in &frames {
        if let Some(g) = &f.risk_gt {
            let pair = align_risk(g, f.risk_pred.as_deref().unwrap_or(&[]))?;
            risk += risk_loss(&pair.r_pred, &pair.r_gt, RiskReduction::Sum)?;
        }
    }
    let breakdown = total_loss(&cfg.loss.planner_terms.with_risk(risk), &cfg.loss.weights())?;
    io::write_json(out_file, &breakdown)?;
    Ok(breakdown)
}

/// Paths of a finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub out: PathBuf,
    pub report: MetricReport,
    pub loss: LossBreakdown,
    pub risk_objects: usize,
}

pub const MASK_DIR: &str = "mask";
pub const REBATCH_DIR: &str = "rebatch";
pub const RISKHEAD_DIR: &str = "riskhead";

/// Runs geometry, rebatch, risk head and metrics on a scene directory
/// produced by `gen-scene`. Any failure is tagged with its stage.
pub fn run_pipeline(cfg: &RunConfig, scene: &Path, out: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    let grid = cfg.grid.bev_grid()?;
    let mask_dir = out.join(MASK_DIR);
    let rebatch_dir = out.join(REBATCH_DIR);
    let risk_dir = out.join(RISKHEAD_DIR);

    stage_mask(&scene.join(RIG_FILE), &grid, cfg.grid.depth_eps, &mask_dir, cfg.dump.mask_pgm)
        .map_err(|e| e.in_stage(Stage::Geometry))?;

    let art = stage_rebatch(&mask_dir, &scene.join(QUERIES_FILE), &rebatch_dir, cfg.dump.indices)
        .map_err(|e| e.in_stage(Stage::Rebatch))?;

    let params_file = match &cfg.params {
        Some(p) => p.clone(),
        None => {
            let p = out.join(PARAMS_FILE);
            init_params(cfg).save(&p).map_err(|e| HarnessError::from(e).in_stage(Stage::RiskHead))?;
            p
        }
    };
    let risk = (|| {
        let params = RiskHeadParams::load(&params_file)?;
        if params.attn.dim != art.queries.embed_dim() || params.pv.views() != art.index.n_cam {
            return Err(HarnessError::Input(format!(
                "parameters expect dim {} and {} views; scene has dim {} and {} cameras",
                params.attn.dim,
                params.pv.views(),
                art.queries.embed_dim(),
                art.index.n_cam
            )));
        }
        stage_riskhead(&rebatch_dir, &params_file, &risk_dir, cfg.dump.risk_maps)
    })()
    .map_err(|e| e.in_stage(Stage::RiskHead))?;

    let pred_with_risk = out.join(PRED_FILE);
    let gt = scene.join(GT_FILE);
    let (report, loss) = (|| {
        attach_risk(&scene.join(PRED_FILE), &risk, &pred_with_risk)?;
        let report = stage_eval(&pred_with_risk, &gt, &out.join(REPORT_FILE), &cfg.eval.options())?;
        let loss = stage_loss(&pred_with_risk, &gt, cfg, &out.join(LOSS_FILE))?;
        Ok((report, loss))
    })()
    .map_err(|e: HarnessError| e.in_stage(Stage::Eval))?;

    Ok(RunArtifacts {
        out: out.to_path_buf(),
        report,
        loss,
        risk_objects: risk.objects.len(),
    })
}
