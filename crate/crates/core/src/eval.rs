//! Reconstruction metrics: depth-centred MPJPE, similarity-aligned
//! reconstruction error, joint regression and segmentation agreement.

use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use pathfinding::prelude::{kuhn_munkres, Matrix as CostMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::KeypointSet;

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::Shape(format!("point sets of size {a} and {b}")));
    }
    Ok(())
}

/// Mean per-joint error after subtracting each set's mean depth.
pub fn mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    same_len(pred.len(), gt.len())?;
    let n = pred.len() as f64;
    let dp = pred.iter().map(|p| p.z).sum::<f64>() / n;
    let dg = gt.iter().map(|p| p.z).sum::<f64>() / n;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (Vector3::new(p.x - g.x, p.y - g.y, (p.z - dp) - (g.z - dg))).norm())
        .sum::<f64>()
        / n)
}

/// Similarity `x ↦ s R x + t` taking one cloud onto another.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }
}

/// Least-squares similarity alignment of `src` onto `dst` with `det R = +1`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Similarity> {
    umeyama_weighted(src, dst, &vec![1.0; src.len()])
}

/// Weighted variant: minimises `Σ w_i ‖s R src_i + t − dst_i‖²`.
pub fn umeyama_weighted(src: &[Vector3<f64>], dst: &[Vector3<f64>], w: &[f64]) -> Result<Similarity> {
    same_len(src.len(), dst.len())?;
    same_len(src.len(), w.len())?;
    if src.len() < 3 {
        return Err(Error::Degenerate("alignment needs at least 3 points".into()));
    }
    let wsum: f64 = w.iter().sum();
    let ms: Vector3<f64> = src.iter().zip(w).map(|(p, w)| p * *w).sum::<Vector3<f64>>() / wsum;
    let md: Vector3<f64> = dst.iter().zip(w).map(|(p, w)| p * *w).sum::<Vector3<f64>>() / wsum;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for ((s, d), w) in src.iter().zip(dst).zip(w) {
        let (a, b) = (s - ms, d - md);
        cov += b * a.transpose() * *w;
        var_s += a.norm_squared() * *w;
    }
    cov /= wsum;
    var_s /= wsum;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let sv = svd.singular_values;
    // Rank below 2 leaves the rotation undetermined.
    let scale_ref = sv.max().max(f64::MIN_POSITIVE);
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if var_s <= 1e-300 || sorted[1] <= 1e-12 * scale_ref {
        return Err(Error::Degenerate("point configuration is rank deficient".into()));
    }
    let d = (u.determinant() * v_t.determinant()).signum();
    let corr = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = u * corr * v_t;
    let trace = (corr * Matrix3::from_diagonal(&sv)).trace();
    let scale = trace / var_s;
    Ok(Similarity {
        scale,
        rotation,
        translation: md - rotation * ms * scale,
    })
}

fn mean_distance(sim: &Similarity, src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
    src.iter().zip(dst).map(|(p, g)| (sim.apply(p) - g).norm()).sum::<f64>() / src.len() as f64
}

/// Iteratively reweighted least squares on the mean distance. Each step
/// minimises a quadratic majoriser, so the objective never increases.
fn refine_l1(mut sim: Similarity, src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> (Similarity, f64) {
    let mut cost = mean_distance(&sim, src, dst);
    let floor = 1e-12 * (cost + f64::MIN_POSITIVE);
    for _ in 0..10_000 {
        let w: Vec<f64> = src
            .iter()
            .zip(dst)
            .map(|(p, g)| 1.0 / (sim.apply(p) - g).norm().max(floor))
            .collect();
        let Ok(next) = umeyama_weighted(src, dst, &w) else { break };
        let c = mean_distance(&next, src, dst);
        if !(c < cost) {
            break;
        }
        let done = cost - c <= 1e-15 * cost;
        sim = next;
        cost = c;
        if done {
            break;
        }
    }
    (sim, cost)
}

/// Best similarity under the mean point distance, started from both the
/// least-squares solution and the identity.
pub fn align_mean_distance(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<(Similarity, f64)> {
    let ls = umeyama(pred, gt)?;
    let ident = Similarity {
        scale: 1.0,
        rotation: Matrix3::identity(),
        translation: Vector3::zeros(),
    };
    let a = refine_l1(ls, pred, gt);
    let b = refine_l1(ident, pred, gt);
    Ok(if a.1 <= b.1 { a } else { b })
}

/// Mean point distance after the best similarity alignment of `pred` onto
/// `gt`.
pub fn re_aligned(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    Ok(align_mean_distance(pred, gt)?.1)
}

/// Mean 2D distance between the projection of `pred` (camera frame) and
/// the visible keypoints.
pub fn reprojection_error(pred: &[Vector3<f64>], kp: &KeypointSet) -> Result<f64> {
    same_len(pred.len(), kp.len())?;
    let n = kp.n_visible();
    if n == 0 {
        return Err(Error::NoVisibleKeypoints);
    }
    Ok(pred
        .iter()
        .zip(&kp.y)
        .zip(&kp.z)
        .filter(|(_, z)| **z)
        .map(|((p, y), _)| (p.xy() - y).norm())
        .sum::<f64>()
        / n as f64)
}

/// Linear map from vertices to joints; rows are convex weights.
#[derive(Debug, Clone, PartialEq)]
pub struct JointRegressor {
    matrix: DMatrix<f64>,
}

impl JointRegressor {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::Shape("empty joint regressor".into()));
        }
        for (j, row) in matrix.row_iter().enumerate() {
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (row.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "joint regressor row {j} is not a convex combination"
                )));
            }
        }
        Ok(JointRegressor { matrix })
    }

    /// One joint per vertex.
    pub fn identity(k: usize) -> Self {
        JointRegressor {
            matrix: DMatrix::identity(k, k),
        }
    }

    pub fn n_joints(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_vertices(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Comma-separated rows, one per joint; blank lines and `#` comments
    /// are skipped.
    pub fn from_csv_str(s: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (n, line) in s.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split(',')
                .map(|t| {
                    t.trim().parse::<f64>().map_err(|e| Error::Parse {
                        line: n + 1,
                        msg: format!("`{}`: {e}", t.trim()),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(Error::Parse {
                        line: n + 1,
                        msg: format!("{} columns, expected {}", row.len(), first.len()),
                    });
                }
            }
            rows.push(row);
        }
        let cols = rows.first().map_or(0, Vec::len);
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        JointRegressor::new(DMatrix::from_row_slice(rows.len(), cols, &flat))
    }

    pub fn from_csv(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&s)
    }

    pub fn apply(&self, x: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
        if x.len() != self.n_vertices() {
            return Err(Error::Shape(format!(
                "regressor expects {} vertices, got {}",
                self.n_vertices(),
                x.len()
            )));
        }
        Ok(self
            .matrix
            .row_iter()
            .map(|r| r.iter().zip(x).map(|(w, p)| p * *w).sum())
            .collect())
    }
}

/// Per-vertex argmax, ties to the lowest index.
pub fn hard_labels(p: &DMatrix<f64>) -> Vec<usize> {
    p.row_iter()
        .map(|r| {
            let mut best = 0;
            for (m, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = m;
                }
            }
            best
        })
        .collect()
}

fn confusion(pred: &[usize], n_pred: usize, gt: &[usize]) -> Vec<Vec<i64>> {
    let n_gt = gt.iter().max().map_or(0, |m| m + 1);
    let mut c = vec![vec![0i64; n_pred]; n_gt];
    for (&p, &g) in pred.iter().zip(gt) {
        c[g][p] += 1;
    }
    c
}

/// Fraction of vertices whose argmax part maps to their ground-truth label
/// under the best one-to-one assignment of labels to parts.
pub fn seg_agreement(pred_p: &DMatrix<f64>, gt_labels: &[usize]) -> Result<f64> {
    same_len(pred_p.nrows(), gt_labels.len())?;
    let c = confusion(&hard_labels(pred_p), pred_p.ncols(), gt_labels);
    let (rows, cols) = (c.len(), pred_p.ncols());
    // The assignment solver needs rows <= columns.
    let weights = if rows <= cols {
        CostMatrix::from_rows(c).expect("rectangular")
    } else {
        CostMatrix::from_fn(cols, rows, |(i, j)| c[j][i])
    };
    let (total, _) = kuhn_munkres(&weights);
    Ok(total as f64 / gt_labels.len() as f64)
}

/// Fraction of vertices whose argmax part's majority label is their own:
/// the many-to-one counterpart of `seg_agreement`.
pub fn seg_purity(pred_p: &DMatrix<f64>, gt_labels: &[usize]) -> Result<f64> {
    same_len(pred_p.nrows(), gt_labels.len())?;
    let c = confusion(&hard_labels(pred_p), pred_p.ncols(), gt_labels);
    let hit: i64 = (0..pred_p.ncols())
        .map(|m| c.iter().map(|row| row[m]).max().unwrap_or(0))
        .sum();
    Ok(hit as f64 / gt_labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub id: String,
    pub mpjpe: f64,
    pub re: f64,
    /// Mean 2D error over visible keypoints.
    pub reprojection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mpjpe: f64,
    pub re: f64,
    pub reprojection: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seg_agreement: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seg_purity: Option<f64>,
    pub per_instance: Vec<InstanceMetrics>,
}

/// One scored instance: prediction and ground truth, both in the camera
/// frame and over all template vertices.
pub struct Scored<'a> {
    pub id: &'a str,
    pub pred: &'a [Vector3<f64>],
    pub gt: &'a [Vector3<f64>],
    pub keypoints: &'a KeypointSet,
}

/// Scores every instance (in parallel) and averages. MPJPE and RE are
/// computed on regressed joints.
pub fn evaluate(items: &[Scored<'_>], regressor: &JointRegressor) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let per_instance: Vec<InstanceMetrics> = items
        .par_iter()
        .map(|it| {
            let pj = regressor.apply(it.pred)?;
            let gj = regressor.apply(it.gt)?;
            Ok(InstanceMetrics {
                id: it.id.to_string(),
                mpjpe: mpjpe(&pj, &gj)?,
                re: re_aligned(&pj, &gj)?,
                reprojection: reprojection_error(it.pred, it.keypoints)?,
            })
        })
        .collect::<Result<_>>()?;
    let n = per_instance.len() as f64;
    let mean = |f: fn(&InstanceMetrics) -> f64| per_instance.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        mpjpe: mean(|m| m.mpjpe),
        re: mean(|m| m.re),
        reprojection: mean(|m| m.reprojection),
        seg_agreement: None,
        seg_purity: None,
        per_instance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{random_rotation, se3_exp, Twist};
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn mpjpe_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = cloud(14, &mut rng);
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
        let deeper: Vec<_> = gt.iter().map(|p| p + Vector3::new(0.0, 0.0, 3.5)).collect();
        assert!(mpjpe(&deeper, &gt).unwrap() < 1e-15);
        let shifted: Vec<_> = gt.iter().map(|p| p + Vector3::new(1.0, 0.0, 0.0)).collect();
        assert!((mpjpe(&shifted, &gt).unwrap() - 1.0).abs() < 1e-15);
        let pred = cloud(14, &mut rng);
        let a = mpjpe(&pred, &gt).unwrap();
        let p2: Vec<_> = pred.iter().map(|p| p + Vector3::new(0.0, 0.0, -2.0)).collect();
        let g2: Vec<_> = gt.iter().map(|p| p + Vector3::new(0.0, 0.0, 7.0)).collect();
        assert!((mpjpe(&p2, &g2).unwrap() - a).abs() < 1e-12);
        assert!(mpjpe(&pred[..3], &gt).is_err());
    }

    #[test]
    fn re_absorbs_similarities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = cloud(14, &mut rng);
        let r = random_rotation(&mut rng);
        let pred: Vec<_> = gt.iter().map(|p| r.rotate(p) * 2.0 + Vector3::new(0.3, -1.0, 4.0)).collect();
        assert!(re_aligned(&pred, &gt).unwrap() < 1e-9);
    }

    #[test]
    fn re_with_one_displaced_joint_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = cloud(14, &mut rng);
        let mut pred = gt.clone();
        let d = 0.7;
        pred[5].y += d;
        let re = re_aligned(&pred, &gt).unwrap();
        assert!(re <= d / 14.0 + 1e-12, "{re}");
    }

    #[test]
    fn re_never_exceeds_unaligned_error_and_is_similarity_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let gt = cloud(14, &mut rng);
            let pred = cloud(14, &mut rng);
            let raw = pred.iter().zip(&gt).map(|(a, b)| (a - b).norm()).sum::<f64>() / 14.0;
            let re = re_aligned(&pred, &gt).unwrap();
            assert!(re <= raw + 1e-12);
            let r = random_rotation(&mut rng);
            let t = Vector3::new(1.0, 2.0, 3.0);
            let map = |v: &Vec<Vector3<f64>>| v.iter().map(|p| r.rotate(p) * 1.7 + t).collect::<Vec<_>>();
            let re2 = re_aligned(&map(&pred), &map(&gt)).unwrap();
            assert!((re2 - 1.7 * re).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_clouds_are_rejected() {
        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(re_aligned(&line, &line), Err(Error::Degenerate(_))));
        let same = vec![Vector3::new(1.0, 1.0, 1.0); 4];
        assert!(re_aligned(&same, &same).is_err());
    }

    /// Downhill simplex over (log s, ω, t) on the mean distance,
    /// restarted from its own best point.
    fn nelder_mead_alignment(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
        let transform = |x: &[f64; 7]| {
            let r = se3_exp(&Twist::new(Vector3::new(x[1], x[2], x[3]), Vector3::zeros())).rotation.transpose();
            (x[0].exp(), r, Vector3::new(x[4], x[5], x[6]))
        };
        let cost = |x: &[f64; 7]| -> f64 {
            let (s, r, t) = transform(x);
            src.iter().zip(dst).map(|(p, q)| (r * p * s + t - q).norm()).sum::<f64>() / src.len() as f64
        };
        let mut best = [0.0; 7];
        for _restart in 0..30 {
            let mut simplex: Vec<[f64; 7]> = vec![best];
            for i in 0..7 {
                let mut v = best;
                v[i] += 0.3;
                simplex.push(v);
            }
            let mut f: Vec<f64> = simplex.iter().map(cost).collect();
            for _ in 0..20_000 {
                let mut order: Vec<usize> = (0..8).collect();
                order.sort_by(|&a, &b| f[a].total_cmp(&f[b]));
                simplex = order.iter().map(|&i| simplex[i]).collect();
                f = order.iter().map(|&i| f[i]).collect();
                if f[7] - f[0] < 1e-16 {
                    break;
                }
                let mut c = [0.0; 7];
                for v in &simplex[..7] {
                    for i in 0..7 {
                        c[i] += v[i] / 7.0;
                    }
                }
                let along = |t: f64| -> [f64; 7] { std::array::from_fn(|i| c[i] + t * (simplex[7][i] - c[i])) };
                let xr = along(-1.0);
                let fr = cost(&xr);
                if fr < f[0] {
                    let xe = along(-2.0);
                    let fe = cost(&xe);
                    if fe < fr {
                        simplex[7] = xe;
                        f[7] = fe;
                    } else {
                        simplex[7] = xr;
                        f[7] = fr;
                    }
                } else if fr < f[6] {
                    simplex[7] = xr;
                    f[7] = fr;
                } else {
                    let xc = if fr < f[7] { along(-0.5) } else { along(0.5) };
                    let fc = cost(&xc);
                    if fc < f[7].min(fr) {
                        simplex[7] = xc;
                        f[7] = fc;
                    } else {
                        for j in 1..8 {
                            simplex[j] = std::array::from_fn(|i| simplex[0][i] + 0.5 * (simplex[j][i] - simplex[0][i]));
                            f[j] = cost(&simplex[j]);
                        }
                    }
                }
            }
            let i0 = (0..8).min_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
            best = simplex[i0];
        }
        cost(&best)
    }

    #[test]
    fn re_matches_a_direct_optimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3 {
            let gt = cloud(14, &mut rng);
            // Nearby prediction so the optimizer starts in the right basin.
            let r = se3_exp(&Twist::new(Vector3::new(0.3, -0.2, 0.4), Vector3::zeros()));
            let pred: Vec<_> = gt
                .iter()
                .map(|p| r.rotate(p) * 1.3 + Vector3::new(0.2, 0.1, -0.3) + Vector3::from_fn(|_, _| rng.random_range(-0.2..0.2)))
                .collect();
            let closed = re_aligned(&pred, &gt).unwrap();
            let direct = nelder_mead_alignment(&pred, &gt);
            assert!((closed - direct).abs() < 1e-6, "{closed} vs {direct}");
        }
    }

    #[test]
    fn reflections_are_not_allowed() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = cloud(14, &mut rng);
        let mirrored: Vec<_> = gt.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        let sim = umeyama(&mirrored, &gt).unwrap();
        assert!((sim.rotation.determinant() - 1.0).abs() < 1e-12);
        assert!(re_aligned(&mirrored, &gt).unwrap() > 1e-3);
    }

    #[test]
    fn joint_regressor() {
        let r = JointRegressor::from_csv_str("# two joints\n0.5,0.5,0\n0,0,1\n").unwrap();
        assert_eq!((r.n_joints(), r.n_vertices()), (2, 3));
        let x = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(2.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)];
        assert_eq!(r.apply(&x).unwrap(), vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)]);
        assert!(JointRegressor::from_csv_str("0.5,0.6\n").is_err());
        assert!(JointRegressor::from_csv_str("1.5,-0.5\n").is_err());
        assert!(matches!(JointRegressor::from_csv_str("1,0\n1\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(JointRegressor::from_csv_str("a,b\n"), Err(Error::Parse { line: 1, .. })));
        assert!(r.apply(&x[..2]).is_err());
    }

    fn one_hot(labels: &[usize], m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(labels.len(), m, |k, j| if labels[k] == j { 1.0 } else { 0.0 })
    }

    #[test]
    fn agreement_examples() {
        let gt = [0, 0, 1, 1, 2, 2];
        let perm = [2, 2, 0, 0, 1, 1];
        assert_eq!(seg_agreement(&one_hot(&perm, 3), &gt).unwrap(), 1.0);
        let uniform = DMatrix::from_element(100, 2, 0.5);
        let balanced: Vec<usize> = (0..100).map(|k| k % 2).collect();
        assert_eq!(seg_agreement(&uniform, &balanced).unwrap(), 0.5);
        // more parts than labels
        let pred = [4, 4, 1, 1, 1, 3];
        let a = seg_agreement(&one_hot(&pred, 5), &[0, 0, 1, 1, 1, 1]).unwrap();
        assert!((a - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(seg_purity(&one_hot(&pred, 5), &[0, 0, 1, 1, 1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn agreement_equals_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let gt: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
            let pred: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
            let p = one_hot(&pred, 4);
            let n_gt = gt.iter().max().unwrap() + 1;
            // every injective map from labels to parts
            let mut best = 0;
            for a in 0..4 {
                for b in 0..4 {
                    for c in 0..4 {
                        let map = [a, b, c];
                        if map[..n_gt].iter().enumerate().any(|(i, x)| map[..i].contains(x)) {
                            continue;
                        }
                        let hits = (0..6).filter(|&k| map[gt[k]] == pred[k]).count();
                        best = best.max(hits);
                    }
                }
            }
            assert_eq!(seg_agreement(&p, &gt).unwrap(), best as f64 / 6.0);
        }
    }

    #[test]
    fn report_on_perfect_predictions_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt = cloud(10, &mut rng);
        let kp = KeypointSet::new(gt.iter().map(|p| Vector2::new(p.x, p.y)).collect(), vec![true; 10]).unwrap();
        let items = [Scored {
            id: "a",
            pred: &gt,
            gt: &gt,
            keypoints: &kp,
        }];
        let rep = evaluate(&items, &JointRegressor::identity(10)).unwrap();
        assert_eq!((rep.mpjpe, rep.reprojection), (0.0, 0.0));
        assert!(rep.re < 1e-12);
        let json = serde_json::to_string(&rep).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), rep);
    }
}
