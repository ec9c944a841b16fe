//! Synthetic scenes and noisy pair predictions with known ground truth.
//!
//! The surface is a smooth random height field `z = h(x, y)`; cameras sit on a
//! jittered ring above it, all looking at the scene center, so every pixel ray
//! hits the surface. Randomness is derived from `(seed, stream, view, pixel)`
//! keys, so results do not depend on evaluation order.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, DepthMap, Grid, Mask, PointMap, PoseSE3};
use crate::graph::{GlobalState, ViewGraph};
use crate::pairwise::PairPrediction;

const STREAM_SURFACE: u64 = 1;
const STREAM_CAMERA: u64 = 2;
const STREAM_NOISE_SCALE: u64 = 3;
const STREAM_DEPTH_NOISE: u64 = 4;
const STREAM_OUTLIER_PICK: u64 = 5;
const STREAM_OUTLIER_DIR: u64 = 6;
const STREAM_PAIR_SCALE: u64 = 7;
const STREAM_SURFACE_SAMPLES: u64 = 8;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for the stream identified by `keys`.
pub fn keyed_rng(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k));
    }
    ChaCha8Rng::seed_from_u64(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub num_views: usize,
    pub width: usize,
    pub height: usize,
    /// Focal range in pixels, `[min, max]`.
    pub focal_range: [f64; 2],
    pub num_surface_points: usize,
    pub scene_extent: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_views: 5,
            width: 32,
            height: 24,
            focal_range: [28.0, 40.0],
            num_surface_points: 2000,
            scene_extent: 2.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_views < 2 {
            return Err(Error::Config(format!(
                "num_views must be at least 2, got {}",
                self.num_views
            )));
        }
        if self.width < 8 || self.height < 6 {
            return Err(Error::Config(format!(
                "resolution must be at least 8x6, got {}x{}",
                self.width, self.height
            )));
        }
        let [lo, hi] = self.focal_range;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!("invalid focal range [{lo}, {hi}]")));
        }
        if !(self.scene_extent.is_finite() && self.scene_extent > 0.0) {
            return Err(Error::Config(format!(
                "scene_extent must be positive, got {}",
                self.scene_extent
            )));
        }
        Ok(())
    }
}

/// Maps a pixel's true noise scale to the emitted confidence:
/// `clamp(1 + 1 / (noise_scale + offset), min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfModel {
    pub offset: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for ConfModel {
    fn default() -> Self {
        Self {
            offset: 0.1,
            min: 0.1,
            max: 10.0,
        }
    }
}

impl ConfModel {
    pub fn confidence(&self, noise_scale: f64) -> f64 {
        (1.0 + 1.0 / (noise_scale + self.offset)).clamp(self.min, self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Mean relative standard deviation of the log-normal depth noise. Each
    /// `(view, pixel)` draws its own level uniformly in `[0, 2 * depth_noise_rel]`.
    pub depth_noise_rel: f64,
    pub outlier_fraction: f64,
    /// Outlier displacement as a fraction of the scene extent.
    pub outlier_magnitude_rel: f64,
    /// Outliers receive confidences from the top decile of clean pixels.
    pub overconfident: bool,
    pub conf_model: ConfModel,
    /// Each prediction is scaled by `exp(U(-j, j))` to mimic the unknown
    /// per-pair scale of a learned predictor.
    pub scale_jitter: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            depth_noise_rel: 0.01,
            outlier_fraction: 0.0,
            outlier_magnitude_rel: 0.1,
            overconfident: true,
            conf_model: ConfModel::default(),
            scale_jitter: 0.0,
        }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self {
            depth_noise_rel: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.depth_noise_rel) {
            return Err(Error::Config(format!(
                "depth_noise_rel must be non-negative, got {}",
                self.depth_noise_rel
            )));
        }
        if !(self.outlier_fraction >= 0.0 && self.outlier_fraction < 1.0) {
            return Err(Error::Config(format!(
                "outlier_fraction must lie in [0, 1), got {}",
                self.outlier_fraction
            )));
        }
        if !finite_nonneg(self.outlier_magnitude_rel) || !finite_nonneg(self.scale_jitter) {
            return Err(Error::Config(
                "outlier_magnitude_rel and scale_jitter must be non-negative".into(),
            ));
        }
        let c = &self.conf_model;
        if !(c.offset > 0.0 && c.min >= 0.0 && c.max >= c.min && c.max.is_finite()) {
            return Err(Error::Config("invalid confidence model".into()));
        }
        Ok(())
    }
}

/// Ground-truth points of the directed pair `(src, tgt)`, both in frame `src`.
#[derive(Debug, Clone, PartialEq)]
pub struct GtPair {
    pub src: usize,
    pub tgt: usize,
    pub points_src: PointMap,
    pub points_tgt: PointMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub gt_poses: Vec<PoseSE3>,
    pub gt_focals: Vec<f64>,
    pub gt_depths: Vec<DepthMap>,
    /// Per-view point maps in each camera's own frame.
    pub gt_points: Vec<PointMap>,
    /// One entry per directed pair, ordered by `(src, tgt)`.
    pub gt_pair_points: Vec<GtPair>,
    /// Dense samples of the surface over the observed region (world frame).
    pub surface_points: Vec<Vector3<f64>>,
    /// Pixels whose ray missed the surface and fell back to the mean-depth plane.
    pub fallback_pixels: usize,
}

struct HeightField {
    terms: Vec<(f64, Vector3<f64>, f64)>,
}

impl HeightField {
    fn random(extent: f64, rng: &mut ChaCha8Rng) -> Self {
        let count = rng.random_range(4..=8);
        let amplitude = 0.3 * extent / count as f64;
        let terms = (0..count)
            .map(|_| {
                let a = amplitude * rng.random_range(0.5..1.5);
                let freq = rng.random_range(0.5..2.0) * std::f64::consts::TAU / extent;
                let dir = rng.random_range(0.0..std::f64::consts::TAU);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (a, Vector3::new(freq * dir.cos(), freq * dir.sin(), 0.0), phase)
            })
            .collect();
        Self { terms }
    }

    fn height(&self, x: f64, y: f64) -> f64 {
        self.terms
            .iter()
            .map(|(a, k, phase)| a * (k.x * x + k.y * y + phase).sin())
            .sum()
    }

    fn bound(&self) -> f64 {
        self.terms.iter().map(|(a, _, _)| a.abs()).sum()
    }

    /// First intersection of `origin + t * dir` with the surface, if any.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, extent: f64) -> Option<f64> {
        if dir.z >= 0.0 {
            return None;
        }
        let g = |t: f64| {
            let p = origin + dir * t;
            p.z - self.height(p.x, p.y)
        };
        let t_max = (origin.z + self.bound()) / -dir.z;
        let step = 0.01 * extent / dir.norm();
        let (mut lo, mut g_lo) = (0.0, g(0.0));
        if g_lo <= 0.0 {
            return None;
        }
        let mut hi = lo;
        loop {
            hi += step;
            let g_hi = g(hi);
            if g_hi <= 0.0 {
                break;
            }
            if hi > t_max + step {
                return None;
            }
            lo = hi;
            g_lo = g_hi;
        }
        let _ = g_lo;
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }
}

fn look_at(center: &Vector3<f64>, target: &Vector3<f64>, tangent: &Vector3<f64>) -> Matrix3<f64> {
    let z = (target - center).normalize();
    let mut x = (tangent - z * tangent.dot(&z)).normalize();
    let y = z.cross(&x);
    x = y.cross(&z);
    Matrix3::from_columns(&[x, y, z])
}

/// Deterministic scene for `config`.
pub fn generate_scene(config: &SceneConfig) -> Result<SyntheticScene> {
    config.validate()?;
    let extent = config.scene_extent;
    let surface = HeightField::random(extent, &mut keyed_rng(config.seed, &[STREAM_SURFACE]));
    let (w, h) = (config.width, config.height);

    let mut gt_poses = Vec::new();
    let mut gt_focals = Vec::new();
    for v in 0..config.num_views {
        let mut rng = keyed_rng(config.seed, &[STREAM_CAMERA, v as u64]);
        let angle = std::f64::consts::TAU * v as f64 / config.num_views as f64
            + rng.random_range(-0.2..0.2);
        let radius = extent * rng.random_range(0.9..1.1);
        let height = extent * rng.random_range(0.5..0.7);
        let center = Vector3::new(radius * angle.cos(), radius * angle.sin(), height);
        let target = Vector3::new(
            rng.random_range(-0.05..0.05) * extent,
            rng.random_range(-0.05..0.05) * extent,
            0.0,
        );
        let tangent = Vector3::new(-angle.sin(), angle.cos(), 0.0);
        gt_poses.push(PoseSE3 {
            rotation: look_at(&center, &target, &tangent),
            translation: center,
        });
        let [lo, hi] = config.focal_range;
        gt_focals.push(if hi > lo { rng.random_range(lo..hi) } else { lo });
    }

    let mut fallback_pixels = 0;
    let mut gt_depths = Vec::new();
    for v in 0..config.num_views {
        let intr = CameraIntrinsics::new(gt_focals[v], w, h)?;
        let pose = &gt_poses[v];
        let hits: Vec<Option<f64>> = (0..w * h)
            .map(|idx| {
                let ray = intr.unproject(idx % w, idx / w, 1.0);
                surface.intersect(&pose.translation, &(pose.rotation * ray), extent)
            })
            .collect();
        let found: Vec<f64> = hits.iter().flatten().copied().collect();
        let mean = if found.is_empty() {
            pose.translation.z
        } else {
            found.iter().sum::<f64>() / found.len() as f64
        };
        fallback_pixels += hits.len() - found.len();
        let depth = Grid::new(w, h, hits.into_iter().map(|d| d.unwrap_or(mean)).collect())?;
        gt_depths.push(DepthMap::new(depth)?);
    }

    let gt_points: Vec<PointMap> = gt_depths
        .iter()
        .zip(&gt_focals)
        .map(|(d, &f)| {
            let intr = CameraIntrinsics::new(f, w, h).expect("validated focal");
            Grid::from_fn(w, h, |u, v| intr.unproject(u, v, *d.grid().get(u, v)))
        })
        .collect();

    let mut gt_pair_points = Vec::new();
    for i in 0..config.num_views {
        let inv_i = gt_poses[i].inverse();
        for j in 0..config.num_views {
            if i == j {
                continue;
            }
            let j_to_i = inv_i.compose(&gt_poses[j]);
            gt_pair_points.push(GtPair {
                src: i,
                tgt: j,
                points_src: gt_points[i].clone(),
                points_tgt: gt_points[j].map(|p| j_to_i.transform_point(p)),
            });
        }
    }

    let world: Vec<Vector3<f64>> = gt_points
        .iter()
        .zip(&gt_poses)
        .flat_map(|(pts, pose)| pts.iter().map(move |p| pose.transform_point(p)))
        .collect();
    let (mut min, mut max) = (world[0], world[0]);
    for p in &world {
        min = min.inf(p);
        max = max.sup(p);
    }
    let mut rng = keyed_rng(config.seed, &[STREAM_SURFACE_SAMPLES]);
    let surface_points = (0..config.num_surface_points)
        .map(|_| {
            let x = if max.x > min.x { rng.random_range(min.x..max.x) } else { min.x };
            let y = if max.y > min.y { rng.random_range(min.y..max.y) } else { min.y };
            Vector3::new(x, y, surface.height(x, y))
        })
        .collect();

    Ok(SyntheticScene {
        config: config.clone(),
        gt_poses,
        gt_focals,
        gt_depths,
        gt_points,
        gt_pair_points,
        surface_points,
        fallback_pixels,
    })
}

/// Predictions plus the simulator's bookkeeping.
#[derive(Debug, Clone)]
pub struct RenderedPredictions {
    pub predictions: Vec<PairPrediction>,
    /// Factor each prediction's points were multiplied by.
    pub pair_scales: Vec<f64>,
    /// Outlier pixels of `(points_src, points_tgt)` per prediction.
    pub outliers: Vec<(Mask, Mask)>,
}

/// Fabricates noisy predictions for every directed pair of `scene`.
pub fn render_pair_predictions(
    scene: &SyntheticScene,
    noise: &NoiseModel,
    seed: u64,
) -> Result<Vec<PairPrediction>> {
    render_pair_predictions_detailed(scene, noise, seed).map(|r| r.predictions)
}

pub fn render_pair_predictions_detailed(
    scene: &SyntheticScene,
    noise: &NoiseModel,
    seed: u64,
) -> Result<RenderedPredictions> {
    noise.validate()?;
    let (w, h) = (scene.config.width, scene.config.height);
    let extent = scene.config.scene_extent;
    let n_pixels = w * h;
    let n_outliers = (noise.outlier_fraction * n_pixels as f64).floor() as usize;

    // Per-(view, pixel) noise level multiplier in [0, 2].
    let levels: Vec<Vec<f64>> = (0..scene.config.num_views)
        .map(|v| {
            (0..n_pixels)
                .map(|p| {
                    keyed_rng(seed, &[STREAM_NOISE_SCALE, v as u64, p as u64]).random_range(0.0..2.0)
                })
                .collect()
        })
        .collect();

    let mut predictions = Vec::new();
    let mut pair_scales = Vec::new();
    let mut outliers = Vec::new();
    for (k, gt) in scene.gt_pair_points.iter().enumerate() {
        let pair_key = (gt.src * scene.config.num_views + gt.tgt) as u64;
        let scale = if noise.scale_jitter > 0.0 {
            keyed_rng(seed, &[STREAM_PAIR_SCALE, pair_key])
                .random_range(-noise.scale_jitter..noise.scale_jitter)
                .exp()
        } else {
            1.0
        };
        let src_to_cam = scene.gt_poses[gt.src].inverse();
        let mut maps = Vec::with_capacity(2);
        for (slot, (view, gt_map)) in [(gt.src, &gt.points_src), (gt.tgt, &gt.points_tgt)]
            .into_iter()
            .enumerate()
        {
            let view_to_src = src_to_cam.compose(&scene.gt_poses[view]);
            let intr = CameraIntrinsics::new(scene.gt_focals[view], w, h)?;
            let mut points = Vec::with_capacity(n_pixels);
            let mut conf = Vec::with_capacity(n_pixels);
            for p in 0..n_pixels {
                let rel_sigma = noise.depth_noise_rel * levels[view][p];
                let depth = *scene.gt_depths[view].grid().data().get(p).expect("pixel");
                let factor = if rel_sigma > 0.0 {
                    let mut rng = keyed_rng(seed, &[STREAM_DEPTH_NOISE, pair_key, slot as u64, p as u64]);
                    (Normal::new(0.0, rel_sigma).expect("finite sigma").sample(&mut rng)).exp()
                } else {
                    1.0
                };
                let cam = intr.unproject(p % w, p / w, depth * factor);
                points.push(view_to_src.transform_point(&cam));
                // noise level in percent of the scene extent
                let abs_sigma = rel_sigma * depth;
                conf.push(noise.conf_model.confidence(abs_sigma / (0.01 * extent)));
            }

            let mut outlier_mask = vec![false; n_pixels];
            if n_outliers > 0 {
                let mut clean_sorted = conf.clone();
                clean_sorted.sort_by(f64::total_cmp);
                let top = &clean_sorted[(clean_sorted.len() * 9) / 10..];
                let mut pick = keyed_rng(seed, &[STREAM_OUTLIER_PICK, pair_key, slot as u64]);
                let chosen = rand::seq::index::sample(&mut pick, n_pixels, n_outliers);
                for p in chosen.iter() {
                    let mut rng = keyed_rng(seed, &[STREAM_OUTLIER_DIR, pair_key, slot as u64, p as u64]);
                    let dir: [f64; 3] = UnitSphere.sample(&mut rng);
                    let offset = Vector3::from(dir) * (noise.outlier_magnitude_rel * extent);
                    points[p] = gt_map.data()[p] + offset;
                    conf[p] = if noise.overconfident {
                        top[rng.random_range(0..top.len())]
                    } else {
                        noise
                            .conf_model
                            .confidence(noise.outlier_magnitude_rel * extent / (0.01 * extent))
                    };
                    outlier_mask[p] = true;
                }
            }
            let points = Grid::new(w, h, points.into_iter().map(|x| x * scale).collect())?;
            maps.push((points, Grid::new(w, h, conf)?, Grid::new(w, h, outlier_mask)?));
        }
        let (pt, ct, mt) = maps.pop().expect("target map");
        let (ps, cs, ms) = maps.pop().expect("source map");
        predictions.push(PairPrediction::new(gt.src, gt.tgt, ps, pt, cs, ct)?);
        pair_scales.push(scale);
        outliers.push((ms, mt));
        debug_assert_eq!(predictions.len(), k + 1);
    }
    Ok(RenderedPredictions {
        predictions,
        pair_scales,
        outliers,
    })
}

/// Ground-truth optimization state for predictions rendered with `pair_scales`,
/// normalized so that the edge scales multiply to one.
pub fn ground_truth_state(
    scene: &SyntheticScene,
    graph: &ViewGraph,
    pair_scales: &[f64],
) -> Result<GlobalState> {
    if pair_scales.len() != graph.predictions().len() {
        return Err(Error::InvalidInput(
            "one pair scale per prediction required".into(),
        ));
    }
    let edge_poses = graph
        .predictions()
        .iter()
        .zip(pair_scales)
        .map(|(p, s)| {
            let t = &scene.gt_poses[p.view_src];
            PoseSE3 {
                rotation: t.rotation,
                translation: t.translation * *s,
            }
        })
        .collect();
    let mut state = GlobalState {
        poses: scene.gt_poses.clone(),
        focals: scene.gt_focals.clone(),
        depths: scene.gt_depths.clone(),
        edge_poses,
        edge_scales: pair_scales.iter().map(|s| 1.0 / s).collect(),
    };
    let log_mean = state.edge_scales.iter().map(|s| s.ln()).sum::<f64>() / state.edge_scales.len() as f64;
    state.rescale((-log_mean).exp());
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairwise::estimate_relative_pose;

    fn small() -> SceneConfig {
        SceneConfig {
            num_views: 3,
            width: 16,
            height: 12,
            focal_range: [14.0, 20.0],
            num_surface_points: 200,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn deterministic_scene() {
        let a = generate_scene(&small()).unwrap();
        let b = generate_scene(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fallback_pixels, 0);
        let c = generate_scene(&SceneConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.gt_poses, c.gt_poses);
    }

    #[test]
    fn pair_points_consistent() {
        let cfg = SceneConfig { num_views: 2, ..small() };
        for seed in 0..5 {
            let s = generate_scene(&SceneConfig { seed, ..cfg.clone() }).unwrap();
            let pair = &s.gt_pair_points[0];
            assert_eq!((pair.src, pair.tgt), (0, 1));
            let rel = s.gt_poses[0].inverse().compose(&s.gt_poses[1]);
            for (a, b) in pair.points_tgt.iter().zip(s.gt_points[1].iter()) {
                assert!((a - rel.transform_point(b)).norm() < 1e-12);
            }
            // relative pose from camera 0 to camera 1 recovered by Procrustes
            let rev = &s.gt_pair_points[1];
            let ones = Grid::filled(16, 12, 1.0);
            let (pose, scale) = estimate_relative_pose(&pair.points_src, &rev.points_tgt, &ones, &ones).unwrap();
            let expect = s.gt_poses[1].inverse().compose(&s.gt_poses[0]);
            assert!((pose.rotation - expect.rotation).abs().max() < 1e-9);
            assert!((pose.translation - expect.translation).norm() < 1e-9);
            assert!((scale - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn noiseless_predictions_are_ground_truth() {
        let s = generate_scene(&small()).unwrap();
        let preds = render_pair_predictions(&s, &NoiseModel::noiseless(), 3).unwrap();
        assert_eq!(preds.len(), 6);
        for (p, gt) in preds.iter().zip(&s.gt_pair_points) {
            for (a, b) in p.points_src.iter().zip(gt.points_src.iter()) {
                assert!((a - b).norm() < 1e-12);
            }
            for (a, b) in p.points_tgt.iter().zip(gt.points_tgt.iter()) {
                assert!((a - b).norm() < 1e-12);
            }
            assert!(p.conf_src.iter().chain(p.conf_tgt.iter()).all(|&c| c == 10.0));
        }
    }

    #[test]
    fn outlier_count_and_magnitude() {
        let cfg = SceneConfig { width: 32, height: 24, ..small() };
        let s = generate_scene(&cfg).unwrap();
        let noise = NoiseModel { outlier_fraction: 0.1, ..NoiseModel::default() };
        let r = render_pair_predictions_detailed(&s, &noise, 5).unwrap();
        let min_err = 0.5 * noise.outlier_magnitude_rel * cfg.scene_extent;
        for ((p, gt), (ms, mt)) in r.predictions.iter().zip(&s.gt_pair_points).zip(&r.outliers) {
            assert_eq!(ms.iter().filter(|&&b| b).count(), 76);
            assert_eq!(mt.iter().filter(|&&b| b).count(), 76);
            for (idx, &flag) in mt.iter().enumerate() {
                if flag {
                    assert!((p.points_tgt.data()[idx] - gt.points_tgt.data()[idx]).norm() >= min_err);
                }
            }
        }
        let again = render_pair_predictions(&s, &noise, 5).unwrap();
        assert_eq!(again, r.predictions);
    }

    #[test]
    fn clean_confidence_monotone() {
        let m = ConfModel::default();
        let mut prev = f64::INFINITY;
        for i in 0..100 {
            let c = m.confidence(i as f64 * 0.05);
            assert!(c <= prev);
            prev = c;
        }
        assert_eq!(m.confidence(0.0), 10.0);
    }

    #[test]
    fn invalid_configs() {
        assert!(generate_scene(&SceneConfig { num_views: 1, ..small() }).is_err());
        assert!(generate_scene(&SceneConfig { width: 4, ..small() }).is_err());
        let bad = NoiseModel { outlier_fraction: -0.1, ..NoiseModel::default() };
        assert!(bad.validate().is_err());
    }
}
