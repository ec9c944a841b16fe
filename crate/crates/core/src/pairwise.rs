//! Focal length and relative pose/scale recovery from a single pair prediction.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geom::{centered_pixel, ConfMap, PointMap, PoseSE3};

const WEISZFELD_MAX_ITERS: usize = 100;
const WEISZFELD_REL_TOL: f64 = 1e-9;
const RESIDUAL_FLOOR: f64 = 1e-12;

/// Output of the pair predictor for the directed image pair `(src, tgt)`.
///
/// Both point maps live in the camera frame of `src`: `points_src` holds the
/// source view's own points and `points_tgt` the target view's points.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPrediction {
    pub view_src: usize,
    pub view_tgt: usize,
    pub points_src: PointMap,
    pub points_tgt: PointMap,
    pub conf_src: ConfMap,
    pub conf_tgt: ConfMap,
}

impl PairPrediction {
    pub fn new(
        view_src: usize,
        view_tgt: usize,
        points_src: PointMap,
        points_tgt: PointMap,
        conf_src: ConfMap,
        conf_tgt: ConfMap,
    ) -> Result<Self> {
        let p = Self {
            view_src,
            view_tgt,
            points_src,
            points_tgt,
            conf_src,
            conf_tgt,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.view_src == self.view_tgt {
            return Err(Error::InvalidInput(format!(
                "self pair ({}, {})",
                self.view_src, self.view_tgt
            )));
        }
        let shape_ok = self.points_src.same_shape(&self.points_tgt)
            && self.points_src.same_shape(&self.conf_src)
            && self.points_src.same_shape(&self.conf_tgt);
        if !shape_ok {
            return Err(Error::InvalidInput(format!(
                "prediction ({}, {}) grids differ in shape",
                self.view_src, self.view_tgt
            )));
        }
        let conf_ok = self
            .conf_src
            .iter()
            .chain(self.conf_tgt.iter())
            .all(|c| c.is_finite() && *c >= 0.0);
        if !conf_ok {
            return Err(Error::InvalidInput(format!(
                "prediction ({}, {}) has negative or non-finite confidence",
                self.view_src, self.view_tgt
            )));
        }
        let pts_ok = self
            .points_src
            .iter()
            .chain(self.points_tgt.iter())
            .all(|p| p.iter().all(|x| x.is_finite()));
        if !pts_ok {
            return Err(Error::InvalidInput(format!(
                "prediction ({}, {}) has non-finite points",
                self.view_src, self.view_tgt
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.points_src.width()
    }

    pub fn height(&self) -> usize {
        self.points_src.height()
    }

    /// Points and confidences of view `v` (which must be the source or target).
    pub fn view(&self, v: usize) -> Option<(&PointMap, &ConfMap)> {
        if v == self.view_src {
            Some((&self.points_src, &self.conf_src))
        } else if v == self.view_tgt {
            Some((&self.points_tgt, &self.conf_tgt))
        } else {
            None
        }
    }
}

/// Result of the Weiszfeld focal iteration.
#[derive(Debug, Clone)]
pub struct FocalEstimate {
    pub focal: f64,
    /// Objective value at the initial focal and after every iteration.
    pub objective_trace: Vec<f64>,
}

struct FocalTerm {
    weight: f64,
    pixel: (f64, f64),
    ray: (f64, f64),
}

fn focal_terms(points: &PointMap, conf: &ConfMap) -> Result<Vec<FocalTerm>> {
    if !points.same_shape(conf) {
        return Err(Error::InvalidInput(
            "point and confidence maps differ in shape".into(),
        ));
    }
    let (w, h) = (points.width(), points.height());
    let terms: Vec<FocalTerm> = points
        .iter()
        .zip(conf.iter())
        .enumerate()
        .filter(|(_, (p, c))| **c > 0.0 && p.z > 0.0 && p.iter().all(|x| x.is_finite()))
        .map(|(idx, (p, c))| {
            let (u, v) = points.coords(idx);
            FocalTerm {
                weight: *c,
                pixel: centered_pixel(u, v, w, h),
                ray: (p.x / p.z, p.y / p.z),
            }
        })
        .collect();
    if terms.len() < 2 {
        return Err(Error::Degenerate(format!(
            "focal estimation needs at least 2 pixels with positive confidence and depth, got {}",
            terms.len()
        )));
    }
    Ok(terms)
}

fn focal_residual(t: &FocalTerm, f: f64) -> f64 {
    let dx = t.pixel.0 - f * t.ray.0;
    let dy = t.pixel.1 - f * t.ray.1;
    (dx * dx + dy * dy).sqrt()
}

/// Confidence-weighted reprojection objective of a candidate focal.
pub fn focal_objective(points: &PointMap, conf: &ConfMap, focal: f64) -> Result<f64> {
    let terms = focal_terms(points, conf)?;
    Ok(terms.iter().map(|t| t.weight * focal_residual(t, focal)).sum())
}

/// Focal length minimizing `sum_p C_p |(u'_p, v'_p) - f (X_p0, X_p1) / X_p2|`.
pub fn estimate_focal(points: &PointMap, conf: &ConfMap) -> Result<f64> {
    estimate_focal_traced(points, conf).map(|e| e.focal)
}

pub fn estimate_focal_traced(points: &PointMap, conf: &ConfMap) -> Result<FocalEstimate> {
    let terms = focal_terms(points, conf)?;
    let objective = |f: f64| -> f64 { terms.iter().map(|t| t.weight * focal_residual(t, f)).sum() };

    let mut focal = points.width().max(points.height()) as f64;
    let mut trace = vec![objective(focal)];
    for _ in 0..WEISZFELD_MAX_ITERS {
        let (mut num, mut den) = (0.0, 0.0);
        for t in &terms {
            let omega = t.weight / focal_residual(t, focal).max(RESIDUAL_FLOOR);
            num += omega * (t.pixel.0 * t.ray.0 + t.pixel.1 * t.ray.1);
            den += omega * (t.ray.0 * t.ray.0 + t.ray.1 * t.ray.1);
        }
        if den <= 0.0 {
            return Err(Error::Degenerate(
                "all usable points lie on the optical axis".into(),
            ));
        }
        let next = num / den;
        if !(next.is_finite() && next > 0.0) {
            return Err(Error::Degenerate(format!(
                "focal iteration left the positive axis ({next})"
            )));
        }
        let delta = (next - focal).abs() / focal;
        focal = next;
        trace.push(objective(focal));
        if delta < WEISZFELD_REL_TOL {
            break;
        }
    }
    Ok(FocalEstimate {
        focal,
        objective_trace: trace,
    })
}

/// Similarity `(pose, scale)` minimizing `sum_p w_p |scale * (R x_p + t) - y_p|^2`.
///
/// Pixels with zero weight are skipped without being read.
pub fn weighted_similarity(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    weights: &[f64],
) -> Result<(PoseSE3, f64)> {
    if src.len() != dst.len() || src.len() != weights.len() {
        return Err(Error::InvalidInput(
            "similarity fit inputs differ in length".into(),
        ));
    }
    let active: Vec<usize> = (0..src.len()).filter(|&i| weights[i] > 0.0).collect();
    if active.len() < 3 {
        return Err(Error::Degenerate(format!(
            "similarity fit needs at least 3 weighted points, got {}",
            active.len()
        )));
    }
    let wsum: f64 = active.iter().map(|&i| weights[i]).sum();
    let mean_src = active.iter().map(|&i| src[i] * weights[i]).sum::<Vector3<f64>>() / wsum;
    let mean_dst = active.iter().map(|&i| dst[i] * weights[i]).sum::<Vector3<f64>>() / wsum;

    let mut cov = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    let mut src_var = 0.0;
    for &i in &active {
        let a = src[i] - mean_src;
        let b = dst[i] - mean_dst;
        cov += b * a.transpose() * weights[i];
        src_cov += a * a.transpose() * weights[i];
        src_var += a.norm_squared() * weights[i];
    }
    cov /= wsum;
    src_cov /= wsum;
    src_var /= wsum;

    let mut eig = src_cov.symmetric_eigenvalues().as_slice().to_vec();
    eig.sort_by(|a, b| b.total_cmp(a));
    if !(eig[0] > 0.0) || eig[1] <= 1e-12 * eig[0] {
        return Err(Error::Degenerate(
            "similarity fit support is collinear".into(),
        ));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut s = Matrix3::identity();
    if u.determinant() * vt.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * vt;
    let trace_ds: f64 = (0..3).map(|k| svd.singular_values[k] * s[(k, k)]).sum();
    let scale = trace_ds / src_var;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Degenerate(format!(
            "similarity fit produced non-positive scale {scale}"
        )));
    }
    let translation = (mean_dst - rotation * mean_src * scale) / scale;
    Ok((
        PoseSE3 {
            rotation,
            translation,
        },
        scale,
    ))
}

/// Weighted Procrustes between two point maps of the same view, with per-pixel
/// weight `conf_a * conf_b`.
pub fn estimate_relative_pose(
    points_a: &PointMap,
    points_b: &PointMap,
    conf_a: &ConfMap,
    conf_b: &ConfMap,
) -> Result<(PoseSE3, f64)> {
    if !(points_a.same_shape(points_b) && points_a.same_shape(conf_a) && points_a.same_shape(conf_b))
    {
        return Err(Error::InvalidInput(
            "relative pose inputs differ in shape".into(),
        ));
    }
    let weights: Vec<f64> = conf_a
        .iter()
        .zip(conf_b.iter())
        .map(|(a, b)| a * b)
        .collect();
    weighted_similarity(points_a.data(), points_b.data(), &weights)
}
