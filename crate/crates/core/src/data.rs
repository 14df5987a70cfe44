//! Synthetic datasets: posing a labelled template with a random kinematic
//! chain, orthographic projection with ray-cast visibility, pixel-match
//! keypoint extraction, robustness corruptions and JSON-lines I/O.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{random_rotation, se3_exp, RigidTransform, Twist};
use crate::loss::KeypointSet;
use crate::mesh::{primitives, TriMesh};

/// Offset along the ray that keeps a vertex from hitting its own faces.
pub const RAY_EPS: f64 = 1e-6;
pub const MAX_POSE_TRIES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub keypoints: KeypointSet,
    /// Ground-truth vertices in the camera frame.
    pub gt_vertices: Option<Vec<Vector3<f64>>>,
    pub gt_camera: Option<RigidTransform>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseSamplerConfig {
    /// Per-joint rotation angle bound, in degrees.
    pub max_angle_deg: f64,
    /// Haar-uniform camera rotations; identity otherwise.
    pub random_camera: bool,
}

impl Default for PoseSamplerConfig {
    fn default() -> Self {
        PoseSamplerConfig {
            max_angle_deg: 45.0,
            random_camera: true,
        }
    }
}

impl PoseSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_angle_deg.is_finite() && self.max_angle_deg >= 0.0) {
            return Err(Error::InvalidArgument("max_angle_deg must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Per-instance generator: the stream index keeps instances independent of
/// how work is scheduled.
pub fn instance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// The two-part hinged cylinder: 602 vertices, split at mid-length.
pub fn hinged_cylinder() -> (TriMesh, Vec<usize>) {
    segmented_cylinder(2, 0.15, 25, 24)
}

/// A closed cylinder scaled to unit bounding-box diagonal and labelled by
/// `n_segments` equal slabs along its axis.
pub fn segmented_cylinder(n_segments: usize, radius: f64, n_around: usize, n_rings: usize) -> (TriMesh, Vec<usize>) {
    let mesh = primitives::cylinder(radius, 1.0, n_around, n_rings).normalized();
    let labels = primitives::axial_labels(&mesh, n_segments);
    (mesh, labels)
}

/// Rigid transform of each labelled part for one draw of the chain. Part
/// `g` rotates about the centroid of its border with part `g - 1` and
/// inherits the motion of its parent.
pub struct KinematicChain {
    pivots: Vec<Vector3<f64>>,
}

impl KinematicChain {
    pub fn new(template: &TriMesh, labels: &[usize]) -> Result<Self> {
        let n_parts = check_labels(template, labels)?;
        let mut border: Vec<(Vector3<f64>, usize)> = vec![(Vector3::zeros(), 0); n_parts];
        let mut centroid: Vec<(Vector3<f64>, usize)> = vec![(Vector3::zeros(), 0); n_parts];
        let nb = template.neighbours();
        for (k, v) in template.vertices().iter().enumerate() {
            let g = labels[k];
            centroid[g].0 += v;
            centroid[g].1 += 1;
            if g > 0 && nb[k].iter().any(|&q| labels[q] == g - 1) {
                border[g].0 += v;
                border[g].1 += 1;
            }
        }
        let pivots = (0..n_parts)
            .map(|g| {
                let (s, n) = if border[g].1 > 0 { border[g] } else { centroid[g] };
                if n == 0 {
                    Vector3::zeros()
                } else {
                    s / n as f64
                }
            })
            .collect();
        Ok(KinematicChain { pivots })
    }

    pub fn n_parts(&self) -> usize {
        self.pivots.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, max_angle: f64, rng: &mut R) -> Vec<RigidTransform> {
        let mut world: Vec<RigidTransform> = Vec::with_capacity(self.pivots.len());
        for (g, c) in self.pivots.iter().enumerate() {
            if g == 0 {
                world.push(RigidTransform::identity());
                continue;
            }
            let axis = random_unit(rng);
            let angle = if max_angle > 0.0 { rng.random_range(-max_angle..=max_angle) } else { 0.0 };
            let rot = se3_exp(&Twist::new(axis * angle, Vector3::zeros()));
            let local = RigidTransform::from_translation(-c)
                .compose(&rot)
                .compose(&RigidTransform::from_translation(*c));
            world.push(local.compose(&world[g - 1]));
        }
        world
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn check_labels(template: &TriMesh, labels: &[usize]) -> Result<usize> {
    if labels.len() != template.n_vertices() {
        return Err(Error::Shape(format!(
            "{} labels for {} vertices",
            labels.len(),
            template.n_vertices()
        )));
    }
    Ok(labels.iter().max().map_or(0, |m| m + 1))
}

/// Visibility under an orthographic camera looking along `+z`: a vertex is
/// visible when the ray from it towards `z = -∞` meets no face.
pub fn ray_cast_visibility(points: &[Vector3<f64>], faces: &[[usize; 3]]) -> Vec<bool> {
    let grid = FaceGrid::new(points, faces);
    points
        .par_iter()
        .map(|p| !grid.occluded(points, faces, p))
        .collect()
}

/// Uniform 2D grid over the `xy` bounding boxes of the faces.
struct FaceGrid {
    lo: Vector2<f64>,
    cell: f64,
    n: usize,
    cells: Vec<Vec<usize>>,
}

impl FaceGrid {
    fn new(points: &[Vector3<f64>], faces: &[[usize; 3]]) -> Self {
        let mut lo = Vector2::repeat(f64::INFINITY);
        let mut hi = Vector2::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(&p.xy());
            hi = hi.sup(&p.xy());
        }
        let n = ((faces.len() as f64).sqrt().ceil() as usize).clamp(1, 256);
        let span = (hi - lo).max().max(1e-12);
        let cell = span / n as f64 * (1.0 + 1e-9);
        let mut cells = vec![Vec::new(); n * n];
        let idx = |v: f64, o: f64| (((v - o) / cell).floor().max(0.0) as usize).min(n - 1);
        for (f, face) in faces.iter().enumerate() {
            let [a, b, c] = face.map(|i| points[i].xy());
            let (flo, fhi) = (a.inf(&b).inf(&c), a.sup(&b).sup(&c));
            for i in idx(flo.x, lo.x)..=idx(fhi.x, lo.x) {
                for j in idx(flo.y, lo.y)..=idx(fhi.y, lo.y) {
                    cells[i * n + j].push(f);
                }
            }
        }
        FaceGrid { lo, cell, n, cells }
    }

    fn occluded(&self, points: &[Vector3<f64>], faces: &[[usize; 3]], p: &Vector3<f64>) -> bool {
        let i = (((p.x - self.lo.x) / self.cell).floor().max(0.0) as usize).min(self.n - 1);
        let j = (((p.y - self.lo.y) / self.cell).floor().max(0.0) as usize).min(self.n - 1);
        self.cells[i * self.n + j].iter().any(|&f| {
            let [a, b, c] = faces[f].map(|k| points[k]);
            match ray_hit_depth(&a, &b, &c, &p.xy()) {
                Some(z) => z < p.z - RAY_EPS,
                None => false,
            }
        })
    }
}

/// Depth of the triangle at `q` if `q` lies inside its `xy` projection.
fn ray_hit_depth(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>, q: &Vector2<f64>) -> Option<f64> {
    let (e1, e2) = (b.xy() - a.xy(), c.xy() - a.xy());
    let det = e1.x * e2.y - e1.y * e2.x;
    if det.abs() < 1e-18 {
        return None;
    }
    let r = q - a.xy();
    let u = (r.x * e2.y - r.y * e2.x) / det;
    let v = (e1.x * r.y - e1.y * r.x) / det;
    if u < 0.0 || v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(a.z + u * (b.z - a.z) + v * (c.z - a.z))
}

/// Samples one posed, projected instance.
pub fn synth_instance<R: Rng + ?Sized>(
    template: &TriMesh,
    labels: &[usize],
    chain: &KinematicChain,
    cfg: &PoseSamplerConfig,
    id: String,
    rng: &mut R,
) -> Result<Instance> {
    let max_angle = cfg.max_angle_deg.to_radians();
    for _ in 0..MAX_POSE_TRIES {
        let parts = chain.sample(max_angle, rng);
        let rot = if cfg.random_camera {
            random_rotation(rng)
        } else {
            RigidTransform::identity()
        };
        let posed: Vec<Vector3<f64>> = template
            .vertices()
            .iter()
            .zip(labels)
            .map(|(v, &g)| rot.apply(&parts[g].apply(v)))
            .collect();
        let z = ray_cast_visibility(&posed, template.faces());
        let n_vis = z.iter().filter(|&&v| v).count();
        if n_vis < 3 {
            continue;
        }
        let mean = posed
            .iter()
            .zip(&z)
            .filter(|(_, v)| **v)
            .fold(Vector2::zeros(), |a, (p, _)| a + p.xy())
            / n_vis as f64;
        let shift = Vector3::new(-mean.x, -mean.y, 0.0);
        let gt: Vec<Vector3<f64>> = posed.iter().map(|p| p + shift).collect();
        let camera = RigidTransform {
            rotation: rot.rotation,
            translation: rot.translation + shift,
        };
        let keypoints = KeypointSet::new(gt.iter().map(|p| p.xy()).collect(), z)?;
        return Ok(Instance {
            id,
            keypoints,
            gt_vertices: Some(gt),
            gt_camera: Some(camera),
        });
    }
    Err(Error::SamplingFailed(MAX_POSE_TRIES))
}

/// `n` instances of the labelled template. Instance `i` draws from stream
/// `i` of the master seed, so output does not depend on the thread count.
pub fn synth_dataset(
    template: &TriMesh,
    labels: &[usize],
    cfg: &PoseSamplerConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<Instance>> {
    cfg.validate()?;
    let chain = KinematicChain::new(template, labels)?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = instance_rng(seed, i);
            synth_instance(template, labels, &chain, cfg, format!("synth_{i:05}"), &mut rng)
        })
        .collect()
}

/// Pixel-to-vertex correspondences from a dense surface map.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PixelMatchSet {
    pub matches: Vec<(Vector2<f64>, usize)>,
}

/// Keypoint `k` is the mean of the pixels matched to vertex `k`; vertices
/// with no match are invisible.
pub fn extract_keypoints(matches: &PixelMatchSet, k: usize) -> Result<KeypointSet> {
    if matches.matches.is_empty() {
        return Err(Error::InvalidArgument("empty pixel match set".into()));
    }
    let mut sum = vec![Vector2::zeros(); k];
    let mut count = vec![0usize; k];
    for (px, v) in &matches.matches {
        if *v >= k {
            return Err(Error::InvalidArgument(format!("matched vertex {v} out of range for {k} vertices")));
        }
        sum[*v] += px;
        count[*v] += 1;
    }
    let y = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { Vector2::zeros() })
        .collect();
    KeypointSet::new(y, count.iter().map(|&c| c > 0).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Corruption {
    GaussianNoise { sigma: f64 },
    Sparsify { keep_fraction: f64 },
    DropLowerHalf { rate: f64 },
}

impl Corruption {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Corruption::GaussianNoise { sigma } => sigma.is_finite() && sigma >= 0.0,
            Corruption::Sparsify { keep_fraction: f } | Corruption::DropLowerHalf { rate: f } => (0.0..=1.0).contains(&f),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid corruption {self:?}")))
        }
    }
}

/// Applies a corruption to the keypoints; ground truth is left untouched.
/// `template` supplies the canonical vertical axis for `DropLowerHalf`.
pub fn corrupt(dataset: &[Instance], mode: Corruption, template: &TriMesh, seed: u64) -> Result<Vec<Instance>> {
    mode.validate()?;
    let k = template.n_vertices();
    let mut lower = vec![false; k];
    let mut chosen = vec![false; dataset.len()];
    if let Corruption::DropLowerHalf { rate } = mode {
        let mut zs: Vec<f64> = template.vertices().iter().map(|v| v.z).collect();
        zs.sort_by(f64::total_cmp);
        let median = if k % 2 == 1 {
            zs[k / 2]
        } else {
            0.5 * (zs[k / 2 - 1] + zs[k / 2])
        };
        for (l, v) in lower.iter_mut().zip(template.vertices()) {
            *l = v.z < median;
        }
        let n_drop = (rate * dataset.len() as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in sample(&mut rng, dataset.len(), n_drop) {
            chosen[i] = true;
        }
    }
    dataset
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            if inst.keypoints.len() != k {
                return Err(Error::Shape(format!(
                    "instance {} has {} keypoints, template has {k} vertices",
                    inst.id,
                    inst.keypoints.len()
                )));
            }
            let mut rng = instance_rng(seed.wrapping_add(1), i);
            let mut kp = inst.keypoints.clone();
            match mode {
                Corruption::GaussianNoise { sigma } => {
                    if sigma > 0.0 {
                        let normal = Normal::new(0.0, sigma).expect("sigma validated");
                        for (y, _) in kp.y.iter_mut().zip(&kp.z).filter(|(_, z)| **z) {
                            y.x += normal.sample(&mut rng);
                            y.y += normal.sample(&mut rng);
                        }
                    }
                }
                Corruption::Sparsify { keep_fraction } => {
                    let visible: Vec<usize> = (0..k).filter(|&j| kp.z[j]).collect();
                    let n_hide = ((1.0 - keep_fraction) * visible.len() as f64).round() as usize;
                    for j in sample(&mut rng, visible.len(), n_hide) {
                        kp.z[visible[j]] = false;
                    }
                }
                Corruption::DropLowerHalf { .. } => {
                    if chosen[i] {
                        for (z, l) in kp.z.iter_mut().zip(&lower) {
                            *z &= !l;
                        }
                    }
                }
            }
            let visible = kp.n_visible();
            if visible < 3 {
                return Err(Error::TooFewVisible {
                    id: inst.id.clone(),
                    visible,
                });
            }
            Ok(Instance {
                keypoints: kp,
                ..inst.clone()
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    id: String,
    y: Vec<[f64; 2]>,
    z: Vec<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    gt_x: Option<Vec<[f64; 3]>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    gt_cam: Option<RigidTransform>,
}

impl From<&Instance> for InstanceRecord {
    fn from(i: &Instance) -> Self {
        InstanceRecord {
            id: i.id.clone(),
            y: i.keypoints.y.iter().map(|p| [p.x, p.y]).collect(),
            z: i.keypoints.z.clone(),
            gt_x: i.gt_vertices.as_ref().map(|v| v.iter().map(|p| [p.x, p.y, p.z]).collect()),
            gt_cam: i.gt_camera.clone(),
        }
    }
}

impl InstanceRecord {
    fn into_instance(self, line: usize) -> Result<Instance> {
        if self.gt_x.is_some() != self.gt_cam.is_some() {
            return Err(Error::Parse {
                line,
                msg: "gt_x and gt_cam must be given together".into(),
            });
        }
        // Invisible entries may carry anything, including nulls.
        let kp = KeypointSet {
            y: self.y.iter().map(|p| Vector2::new(p[0], p[1])).collect(),
            z: self.z,
        };
        kp.validate().map_err(|e| match e {
            Error::TooFewVisible { visible, .. } => Error::TooFewVisible { id: self.id.clone(), visible },
            other => Error::Parse {
                line,
                msg: other.to_string(),
            },
        })?;
        let gt_vertices = self.gt_x.map(|v| v.iter().map(|p| Vector3::from(*p)).collect::<Vec<_>>());
        if let Some(g) = &gt_vertices {
            if g.len() != kp.len() {
                return Err(Error::Parse {
                    line,
                    msg: format!("gt_x has {} rows for {} keypoints", g.len(), kp.len()),
                });
            }
        }
        Ok(Instance {
            id: self.id,
            keypoints: kp,
            gt_vertices,
            gt_camera: self.gt_cam,
        })
    }
}

pub fn dataset_to_string(dataset: &[Instance]) -> Result<String> {
    let mut s = String::new();
    for inst in dataset {
        s.push_str(&serde_json::to_string(&InstanceRecord::from(inst))?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_dataset(path: &Path, dataset: &[Instance]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in dataset {
        serde_json::to_writer(&mut w, &InstanceRecord::from(inst))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Instance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            msg: e.to_string(),
        })?;
        out.push(rec.into_instance(n + 1)?);
    }
    Ok(out)
}
