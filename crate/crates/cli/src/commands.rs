//! The subcommands, usable as library calls. Each one validates the whole
//! configuration, echoes it into the output directory and writes its
//! artifacts there.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dp3d_core::checkpoint::Checkpoint;
use dp3d_core::data::{corrupt, read_dataset, synth_dataset, write_dataset, Instance};
use dp3d_core::eval::{evaluate, hard_labels, seg_agreement, seg_purity, EvalReport, JointRegressor, Scored};
use dp3d_core::loss::KeypointSet;
use dp3d_core::mesh::{export_mesh, spectral_basis, SpectralBasis, TriMesh};
use dp3d_core::optim::{history_csv, train, EpochRecord, TrainStatus};
use dp3d_core::pipeline::{Model, TrainObjective};

use crate::config::{RunConfig, Template};
use crate::error::{CliError, CliResult};

pub const CONFIG_ECHO: &str = "config.json";
pub const BASIS_FILE: &str = "basis.json";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "loss.csv";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// Categorical colours assigned by part index.
pub const PALETTE: [[u8; 3]; 16] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
    [174, 199, 232],
    [255, 187, 120],
    [152, 223, 138],
    [255, 152, 150],
    [197, 176, 213],
    [196, 156, 148],
];

pub fn part_color(part: usize) -> [f64; 3] {
    PALETTE[part % PALETTE.len()].map(|c| c as f64 / 255.0)
}

/// Runs `f` on a dedicated pool of `threads` workers (rayon's default when
/// `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> CliResult<T> + Send) -> CliResult<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| CliError::Threads(e.to_string()))?;
    pool.install(f)
}

struct Prepared {
    template: Template,
}

/// Loads the template, validates everything and echoes the config.
fn prepare(cfg: &RunConfig) -> CliResult<Prepared> {
    let template = cfg.load_template()?;
    cfg.validate(&template.mesh)?;
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join(CONFIG_ECHO), cfg.to_json().as_bytes())?;
    Ok(Prepared { template })
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn load_basis(cfg: &RunConfig, mesh: &TriMesh) -> CliResult<Arc<SpectralBasis>> {
    let basis = match &cfg.basis {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let b: SpectralBasis = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if b.n_vertices() != mesh.n_vertices() {
                return Err(CliError::Config(format!(
                    "basis has {} vertices, mesh has {}",
                    b.n_vertices(),
                    mesh.n_vertices()
                )));
            }
            b
        }
        None => spectral_basis(mesh, cfg.n_u)?,
    };
    Ok(Arc::new(basis))
}

fn load_dataset(cfg: &RunConfig, mesh: &TriMesh) -> CliResult<Vec<Instance>> {
    let path = cfg.require(&cfg.dataset, "dataset")?;
    let data = read_dataset(path)?;
    if data.is_empty() {
        return Err(CliError::Config(format!("{} holds no instances", path.display())));
    }
    if let Some(bad) = data.iter().find(|d| d.keypoints.len() != mesh.n_vertices()) {
        return Err(CliError::Config(format!(
            "instance {} has {} keypoints, mesh has {} vertices",
            bad.id,
            bad.keypoints.len(),
            mesh.n_vertices()
        )));
    }
    Ok(data)
}

fn load_model(cfg: &RunConfig, template: &Template) -> CliResult<(Model, Checkpoint)> {
    let ck = Checkpoint::load(cfg.require(&cfg.checkpoint, "checkpoint")?)?;
    let mesh = Arc::new(template.mesh.clone());
    let basis = match &cfg.basis {
        Some(_) => load_basis(cfg, &mesh)?,
        None => Arc::new(spectral_basis(&mesh, ck.model.n_u)?),
    };
    let model = ck.bind(mesh, basis)?;
    Ok((model, ck))
}

/// Colour map for a signed scalar field: blue for negative, white at zero,
/// red for positive, scaled by the largest magnitude. A (numerically)
/// constant field comes out uniform.
pub fn diverging_colors(values: &[f64]) -> Vec<[f64; 3]> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let scale = lo.abs().max(hi.abs());
    if !(scale > 0.0) || hi - lo <= 1e-9 * scale {
        return vec![[0.5, 0.5, 0.5]; values.len()];
    }
    values
        .iter()
        .map(|v| {
            let t = (v / scale).clamp(-1.0, 1.0);
            if t >= 0.0 {
                [1.0, 1.0 - t, 1.0 - t]
            } else {
                [1.0 + t, 1.0 + t, 1.0]
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LboOutput {
    pub basis: PathBuf,
    pub previews: Vec<PathBuf>,
}

/// Spectral basis plus one colour-mapped preview mesh per eigenfunction.
pub fn cmd_lbo(cfg: &RunConfig) -> CliResult<LboOutput> {
    let p = prepare(cfg)?;
    let mesh = &p.template.mesh;
    let basis = spectral_basis(mesh, cfg.n_u)?;
    let basis_path = cfg.out_dir.join(BASIS_FILE);
    write_file(&basis_path, serde_json::to_string(&basis).map_err(dp3d_core::Error::from)?.as_bytes())?;
    let n_preview = cfg.n_preview.unwrap_or(cfg.n_u);
    let mut previews = Vec::with_capacity(n_preview);
    for i in 0..n_preview {
        let col: Vec<f64> = basis.u.column(i).iter().copied().collect();
        let path = cfg.out_dir.join(format!("eigen_{i:03}.ply"));
        export_mesh(mesh, Some(&diverging_colors(&col)), &path)?;
        previews.push(path);
    }
    Ok(LboOutput {
        basis: basis_path,
        previews,
    })
}

/// Writes a synthetic dataset (optionally corrupted) as JSON lines.
pub fn cmd_synth(cfg: &RunConfig) -> CliResult<PathBuf> {
    let p = prepare(cfg)?;
    let labels = p.template.labels.as_ref().ok_or_else(|| {
        CliError::Config("synth needs ground-truth labels (a built-in cylinder or `labels`)".into())
    })?;
    let mut data = synth_dataset(&p.template.mesh, labels, &cfg.synth.pose, cfg.synth.n_instances, cfg.seed)?;
    if let Some(c) = cfg.synth.corruption {
        data = corrupt(&data, c, &p.template.mesh, cfg.seed)?;
    }
    let path = cfg.out_dir.join(DATASET_FILE);
    write_dataset(&path, &data)?;
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub n_parts: usize,
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub history: Vec<EpochRecord>,
}

/// Output directory for one entry of a part-count sweep.
pub fn sweep_dir(cfg: &RunConfig, n_parts: usize) -> PathBuf {
    if cfg.m_parts.len() > 1 {
        cfg.out_dir.join(format!("m{n_parts}"))
    } else {
        cfg.out_dir.clone()
    }
}

/// Trains one model per entry of `m_parts`, writing a checkpoint and the
/// loss history for each.
pub fn cmd_train(cfg: &RunConfig, mut on_epoch: impl FnMut(usize, &EpochRecord)) -> CliResult<Vec<TrainOutput>> {
    let p = prepare(cfg)?;
    let mesh = Arc::new(p.template.mesh.clone());
    let basis = load_basis(cfg, &mesh)?;
    let data = load_dataset(cfg, &mesh)?;
    let kps: Vec<KeypointSet> = data.into_iter().map(|d| d.keypoints).collect();
    let mut outs = Vec::with_capacity(cfg.m_parts.len());
    for &m in &cfg.m_parts {
        let dir = sweep_dir(cfg, m);
        create_dir(&dir)?;
        let (model, params) = Model::new(
            mesh.clone(),
            basis.clone(),
            cfg.model_config(m),
            cfg.loss_weights,
            cfg.seed,
        )?;
        let objective = TrainObjective {
            model: &model,
            data: &kps,
        };
        let outcome = train(params, &objective, &cfg.optimizer, |r| on_epoch(m, r))?;
        let checkpoint = dir.join(CHECKPOINT_FILE);
        let epochs = outcome.history.len();
        Checkpoint::new(&model, &outcome.params, Some(cfg.mesh.clone()), epochs).save(&checkpoint)?;
        write_file(&dir.join(HISTORY_FILE), history_csv(&outcome.history).as_bytes())?;
        if let TrainStatus::Diverged { epoch } = outcome.status {
            return Err(dp3d_core::Error::Diverged { epoch }.into());
        }
        outs.push(TrainOutput {
            n_parts: m,
            dir,
            checkpoint,
            history: outcome.history,
        });
    }
    Ok(outs)
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    /// Posed vertices in the camera frame.
    pub x: Vec<[f64; 3]>,
    /// Camera twist followed by part twists, `[ω; v]` each.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub twists: Vec<[f64; 6]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

impl PredictionRecord {
    pub fn points(&self) -> Vec<Vector3<f64>> {
        self.x.iter().map(|p| Vector3::from(*p)).collect()
    }
}

pub fn write_predictions(path: &Path, preds: &[PredictionRecord]) -> CliResult<()> {
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in preds {
        serde_json::to_writer(&mut w, p).map_err(dp3d_core::Error::from)?;
        w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_predictions(path: &Path) -> CliResult<Vec<PredictionRecord>> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            CliError::Core(dp3d_core::Error::Parse {
                line: n + 1,
                msg: e.to_string(),
            })
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Per-instance pose optimisation, initialised from the regressor's
/// prediction. Writes the posed vertices.
pub fn cmd_fit(cfg: &RunConfig) -> CliResult<PathBuf> {
    let p = prepare(cfg)?;
    let (model, ck) = load_model(cfg, &p.template)?;
    let data = load_dataset(cfg, &p.template.mesh)?;
    let kps: Vec<&KeypointSet> = data.iter().map(|d| &d.keypoints).collect();
    let init = model.phi_forward(&ck.params, &kps)?;
    let preds: Vec<PredictionRecord> = data
        .par_iter()
        .zip(&init)
        .map(|(d, pose0)| {
            let (pose, loss) = model.fit_instance(&ck.params, &d.keypoints, pose0, &cfg.fit)?;
            let pred = model.pose(&ck.params, &pose)?;
            Ok(PredictionRecord {
                id: d.id.clone(),
                x: pred.x_camera.iter().map(|v| [v.x, v.y, v.z]).collect(),
                twists: pose.twists.iter().map(|t| t.to_array()).collect(),
                loss: Some(loss.total),
            })
        })
        .collect::<CliResult<_>>()?;
    let path = cfg.out_dir.join(PREDICTIONS_FILE);
    write_predictions(&path, &preds)?;
    Ok(path)
}

/// Scores predictions (from a file, else from the checkpoint's regressor)
/// against the dataset's ground truth.
pub fn cmd_eval(cfg: &RunConfig) -> CliResult<EvalReport> {
    let p = prepare(cfg)?;
    let mesh = &p.template.mesh;
    let data = load_dataset(cfg, mesh)?;
    let regressor = match &cfg.joint_regressor {
        Some(path) => JointRegressor::from_csv(path)?,
        None => JointRegressor::identity(mesh.n_vertices()),
    };
    let mut segmentation: Option<DMatrix<f64>> = None;
    let preds: Vec<Vec<Vector3<f64>>> = match (&cfg.predictions, &cfg.checkpoint) {
        (Some(path), _) => {
            let recs = read_predictions(path)?;
            let by_id: HashMap<&str, &PredictionRecord> = recs.iter().map(|r| (r.id.as_str(), r)).collect();
            data.iter()
                .map(|d| {
                    let r = by_id
                        .get(d.id.as_str())
                        .ok_or_else(|| CliError::Config(format!("no prediction for instance {}", d.id)))?;
                    Ok(r.points())
                })
                .collect::<CliResult<_>>()?
        }
        (None, Some(_)) => {
            let (model, ck) = load_model(cfg, &p.template)?;
            segmentation = model.segmentation(&ck.params);
            let kps: Vec<&KeypointSet> = data.iter().map(|d| &d.keypoints).collect();
            model.predict(&ck.params, &kps)?.into_iter().map(|p| p.x_camera).collect()
        }
        (None, None) => {
            return Err(CliError::Config("eval needs `predictions` or `checkpoint`".into()));
        }
    };
    let items = data
        .iter()
        .zip(&preds)
        .map(|(d, x)| {
            let gt = d
                .gt_vertices
                .as_deref()
                .ok_or_else(|| CliError::Config(format!("instance {} has no ground truth", d.id)))?;
            Ok(Scored {
                id: &d.id,
                pred: x,
                gt,
                keypoints: &d.keypoints,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut report = evaluate(&items, &regressor)?;
    if let (Some(seg), Some(labels)) = (&segmentation, &p.template.labels) {
        report.seg_agreement = Some(seg_agreement(seg, labels)?);
        report.seg_purity = Some(seg_purity(seg, labels)?);
    }
    let text = serde_json::to_string_pretty(&report).map_err(dp3d_core::Error::from)? + "\n";
    write_file(&cfg.out_dir.join(REPORT_FILE), text.as_bytes())?;
    Ok(report)
}

/// Posed, part-coloured meshes: the rest-pose template plus one per
/// instance.
pub fn cmd_export(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let p = prepare(cfg)?;
    let (model, ck) = load_model(cfg, &p.template)?;
    let data = load_dataset(cfg, &p.template.mesh)?;
    let n = cfg.max_export.unwrap_or(data.len()).min(data.len());
    let colors: Vec<[f64; 3]> = match model.segmentation(&ck.params) {
        Some(seg) => hard_labels(&seg).into_iter().map(part_color).collect(),
        None => vec![part_color(0); p.template.mesh.n_vertices()],
    };
    let dir = cfg.out_dir.join("export");
    create_dir(&dir)?;
    let mut written = Vec::with_capacity(n + 1);
    let rest = dir.join("template.ply");
    export_mesh(&p.template.mesh, Some(&colors), &rest)?;
    written.push(rest);
    let kps: Vec<&KeypointSet> = data[..n].iter().map(|d| &d.keypoints).collect();
    for (d, pred) in data[..n].iter().zip(model.predict(&ck.params, &kps)?) {
        let posed = p.template.mesh.with_vertices(pred.x_camera)?;
        let path = dir.join(format!("{}.ply", sanitize(&d.id)));
        export_mesh(&posed, Some(&colors), &path)?;
        written.push(path);
    }
    Ok(written)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
