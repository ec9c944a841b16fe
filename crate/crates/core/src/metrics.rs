//! Evaluation metrics: point error, accuracy/completeness, ATE, AFE and rank correlation.

use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::{Mask, PointMap, PoseSE3};
use crate::pairwise::weighted_similarity;

/// Camera-to-world poses keyed by view id.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    ids: Vec<usize>,
    poses: Vec<PoseSE3>,
}

impl Trajectory {
    pub fn new(ids: Vec<usize>, poses: Vec<PoseSE3>) -> Result<Self> {
        if ids.len() != poses.len() {
            return Err(Error::InvalidInput(format!(
                "{} ids for {} poses",
                ids.len(),
                poses.len()
            )));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput("duplicate view id in trajectory".into()));
        }
        Ok(Self { ids, poses })
    }

    /// Views numbered `0..poses.len()`.
    pub fn from_poses(poses: Vec<PoseSE3>) -> Self {
        Self {
            ids: (0..poses.len()).collect(),
            poses,
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn poses(&self) -> &[PoseSE3] {
        &self.poses
    }

    fn position(&self, id: usize) -> Option<Vector3<f64>> {
        self.ids.iter().position(|&i| i == id).map(|k| self.poses[k].translation)
    }
}

/// Mean distance after bringing `pred` to the scale of `gt`.
///
/// Both maps are divided by their mean point norm over the shared valid pixels,
/// and the prediction is then multiplied by the ground-truth factor.
pub fn avg_point_error(pred: &PointMap, pred_mask: &Mask, gt: &PointMap, gt_mask: &Mask) -> Result<f64> {
    if !pred.same_shape(gt) || !pred.same_shape(pred_mask) || !gt.same_shape(gt_mask) {
        return Err(Error::InvalidInput("point map and mask shapes differ".into()));
    }
    let valid: Vec<usize> = (0..pred.len())
        .filter(|&i| pred_mask.data()[i] && gt_mask.data()[i])
        .collect();
    if valid.is_empty() {
        return Err(Error::Degenerate("masks do not intersect".into()));
    }
    let mean_norm = |m: &PointMap| valid.iter().map(|&i| m.data()[i].norm()).sum::<f64>() / valid.len() as f64;
    let (z_pred, z_gt) = (mean_norm(pred), mean_norm(gt));
    if !(z_pred > 0.0 && z_gt > 0.0) {
        return Err(Error::Degenerate("all valid points at the origin".into()));
    }
    let ratio = z_gt / z_pred;
    Ok(valid
        .iter()
        .map(|&i| (pred.data()[i] * ratio - gt.data()[i]).norm())
        .sum::<f64>()
        / valid.len() as f64)
}

fn mean_nearest(queries: &[Vector3<f64>], tree: &ImmutableKdTree<f64, u64, 3, 32>) -> f64 {
    queries
        .iter()
        .map(|q| tree.nearest_one::<SquaredEuclidean>(&[q.x, q.y, q.z]).distance.sqrt())
        .sum::<f64>()
        / queries.len() as f64
}

fn kd_tree(points: &[Vector3<f64>]) -> ImmutableKdTree<f64, u64, 3, 32> {
    let coords: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
    ImmutableKdTree::new_from_slice(&coords)
}

/// `(accuracy, completeness)`: mean nearest distance from `recon` to `gt` and back.
pub fn accuracy_completeness(recon: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<(f64, f64)> {
    if recon.is_empty() || gt.is_empty() {
        return Err(Error::Degenerate("empty point set".into()));
    }
    if recon.iter().chain(gt).any(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(Error::InvalidInput("non-finite point".into()));
    }
    Ok((mean_nearest(recon, &kd_tree(gt)), mean_nearest(gt, &kd_tree(recon))))
}

/// Root-mean-square camera position error after a similarity alignment of
/// `est` onto `gt`.
pub fn ate(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    if est.ids.len() != gt.ids.len() {
        return Err(Error::InvalidInput("trajectories have different lengths".into()));
    }
    if est.ids.len() < 3 {
        return Err(Error::Degenerate(format!(
            "at least 3 poses required, got {}",
            est.ids.len()
        )));
    }
    let mut src = Vec::with_capacity(est.ids.len());
    let mut dst = Vec::with_capacity(est.ids.len());
    for (&id, pose) in est.ids.iter().zip(&est.poses) {
        let target = gt
            .position(id)
            .ok_or_else(|| Error::InvalidInput(format!("view {id} missing from ground truth")))?;
        src.push(pose.translation);
        dst.push(target);
    }
    let (pose, scale) = weighted_similarity(&src, &dst, &vec![1.0; src.len()])?;
    let sq: f64 = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (pose.transform_point(s) * scale - d).norm_squared())
        .sum();
    Ok((sq / src.len() as f64).sqrt())
}

/// Mean absolute focal error in percent.
pub fn afe(est: &[f64], gt: &[f64]) -> Result<f64> {
    if est.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "{} estimated focals for {} ground-truth focals",
            est.len(),
            gt.len()
        )));
    }
    if est.is_empty() {
        return Err(Error::InvalidInput("no focals".into()));
    }
    if gt.iter().any(|f| !(*f > 0.0)) {
        return Err(Error::InvalidInput("ground-truth focals must be positive".into()));
    }
    Ok(est.iter().zip(gt).map(|(e, g)| 100.0 * (e - g).abs() / g).sum::<f64>() / est.len() as f64)
}

/// 1-based ranks with ties sharing their average rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!("lengths {} and {} differ", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::InvalidInput(format!("need at least 3 samples, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite sample".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let mean = (x.len() + 1) as f64 / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (da, db) = (a - mean, b - mean);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}
