//! Confidence-thresholded pseudo-labels in pair frames and the losses a
//! fine-tuner would train them with.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::align::{check_weights, WeightMaps};
use crate::error::{Error, Result};
use crate::geom::{centered_pixel, ConfMap, Grid, Mask, PointMap};
use crate::graph::{GlobalState, ViewGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    /// Pixels are labeled only where the calibrated weight is strictly above this.
    pub cutoff: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.2, cutoff: 1.5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.cutoff.is_finite() && self.cutoff > 0.0) {
            return Err(Error::Config(format!("cutoff must be > 0, got {}", self.cutoff)));
        }
        Ok(())
    }
}

/// Labels for one directed pair `(src, tgt)`, both expressed in the frame of `src`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLabels {
    pub src: usize,
    pub tgt: usize,
    /// `[source view, target view]`; masked-out entries are NaN.
    pub labels: [PointMap; 2],
    pub masks: [Mask; 2],
}

impl PairLabels {
    pub fn retained(&self) -> usize {
        self.masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum()
    }
}

/// One [`PairLabels`] per prediction, in graph order.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub pairs: Vec<PairLabels>,
}

impl PseudoLabelSet {
    pub fn retained(&self) -> usize {
        self.pairs.iter().map(PairLabels::retained).sum()
    }

    pub fn total(&self) -> usize {
        self.pairs.iter().map(|p| 2 * p.masks[0].len()).sum()
    }

    pub fn retained_fraction(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.retained() as f64 / t as f64,
        }
    }
}

/// Optimized points of view `v` expressed in the frame of view `frame`.
pub fn points_in_frame(state: &GlobalState, v: usize, frame: usize) -> PointMap {
    let depth = state.depths[v].grid();
    let (w, h) = (depth.width(), depth.height());
    let f = state.focals[v];
    let to_frame = state.poses[frame].inverse().compose(&state.poses[v]);
    Grid::from_fn(w, h, |u, vv| {
        let (x, y) = centered_pixel(u, vv, w, h);
        let d = *depth.get(u, vv);
        to_frame.transform_point(&Vector3::new(d * x / f, d * y / f, d))
    })
}

pub fn generate_pseudo_labels(
    state: &GlobalState,
    weights: &WeightMaps,
    graph: &ViewGraph,
    cutoff: f64,
) -> Result<PseudoLabelSet> {
    state.check_against(graph)?;
    check_weights(graph, weights)?;
    let pairs = graph
        .predictions()
        .iter()
        .zip(&weights.maps)
        .map(|(p, w)| {
            let make = |slot: usize, v: usize| {
                let mask = w[slot].map(|x| *x > cutoff);
                let mut pts = points_in_frame(state, v, p.view_src);
                for (x, keep) in pts.data_mut().iter_mut().zip(mask.iter()) {
                    if !keep {
                        *x = Vector3::repeat(f64::NAN);
                    }
                }
                (pts, mask)
            };
            let (ls, ms) = make(0, p.view_src);
            let (lt, mt) = make(1, p.view_tgt);
            PairLabels {
                src: p.view_src,
                tgt: p.view_tgt,
                labels: [ls, lt],
                masks: [ms, mt],
            }
        })
        .collect();
    Ok(PseudoLabelSet { pairs })
}

/// Mean distance to the origin over the valid points of both views.
pub fn normalization_factor(points_i: &PointMap, mask_i: &Mask, points_j: &PointMap, mask_j: &Mask) -> Result<f64> {
    if !points_i.same_shape(mask_i) || !points_j.same_shape(mask_j) {
        return Err(Error::InvalidInput("points and mask shapes differ".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pts, mask) in [(points_i, mask_i), (points_j, mask_j)] {
        for (x, _) in pts.iter().zip(mask.iter()).filter(|(_, m)| **m) {
            sum += x.norm();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("no valid points".into()));
    }
    Ok(sum / count as f64)
}

/// Per-pixel `|pred / z_pred - label / z_label|`; `None` outside the mask.
pub fn regression_loss(
    pred: &PointMap,
    label: &PointMap,
    mask: &Mask,
    z_pred: f64,
    z_label: f64,
) -> Result<Grid<Option<f64>>> {
    if !(z_pred > 0.0 && z_label > 0.0) {
        return Err(Error::InvalidInput(format!(
            "normalizers must be positive, got {z_pred} and {z_label}"
        )));
    }
    if !pred.same_shape(label) || !pred.same_shape(mask) {
        return Err(Error::InvalidInput("prediction, label and mask shapes differ".into()));
    }
    let data = pred
        .iter()
        .zip(label.iter())
        .zip(mask.iter())
        .map(|((p, l), m)| m.then(|| (p / z_pred - l / z_label).norm()))
        .collect();
    Grid::new(pred.width(), pred.height(), data)
}

/// `sum C_p l_p - alpha log C_p` over the pixels that carry a loss.
pub fn confidence_aware_loss(losses: &Grid<Option<f64>>, conf: &ConfMap, alpha: f64) -> Result<f64> {
    if !losses.same_shape(conf) {
        return Err(Error::InvalidInput("loss and confidence shapes differ".into()));
    }
    let mut total = 0.0;
    for (l, c) in losses.iter().zip(conf.iter()) {
        if let Some(l) = l {
            if !(*c > 0.0) {
                return Err(Error::InvalidInput(format!("non-positive confidence {c} on a labeled pixel")));
            }
            total += c * l - alpha * c.ln();
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_view_graph;
    use crate::synth::{generate_scene, ground_truth_state, render_pair_predictions_detailed, NoiseModel, SceneConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_scene() -> (crate::synth::SyntheticScene, GlobalState, ViewGraph) {
        let cfg = SceneConfig {
            num_views: 3,
            width: 12,
            height: 9,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        let r = render_pair_predictions_detailed(&scene, &NoiseModel::noiseless(), 0).unwrap();
        let graph = build_view_graph(r.predictions, 3).unwrap();
        let state = ground_truth_state(&scene, &graph, &r.pair_scales).unwrap();
        (scene, state, graph)
    }

    fn constant_weights(graph: &ViewGraph, value: f64) -> WeightMaps {
        WeightMaps {
            maps: graph
                .predictions()
                .iter()
                .map(|_| [0, 1].map(|_| Grid::filled(graph.width(), graph.height(), value)))
                .collect(),
        }
    }

    fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize) -> PointMap {
        Grid::from_fn(w, h, |_, _| {
            Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.5..3.0))
        })
    }

    #[test]
    fn all_weights_above_cutoff_label_everything() {
        let (_, state, graph) = small_scene();
        let labels = generate_pseudo_labels(&state, &constant_weights(&graph, 3.0), &graph, 1.5).unwrap();
        assert_eq!(labels.retained(), labels.total());
        for (pair, p) in labels.pairs.iter().zip(graph.predictions()) {
            let expect = points_in_frame(&state, p.view_tgt, p.view_src);
            assert_eq!(pair.labels[1], expect);
        }
    }

    #[test]
    fn cutoff_is_strict() {
        let (_, state, graph) = small_scene();
        let labels = generate_pseudo_labels(&state, &constant_weights(&graph, 1.5), &graph, 1.5).unwrap();
        assert_eq!(labels.retained(), 0);
        assert_eq!(labels.retained_fraction(), 0.0);
        assert!(labels.pairs[0].labels[0].iter().all(|x| x.x.is_nan()));
    }

    #[test]
    fn cutoff_zero_keeps_positive_weights() {
        let (_, state, graph) = small_scene();
        let labels = generate_pseudo_labels(&state, &constant_weights(&graph, 1e-6), &graph, 0.0).unwrap();
        assert_eq!(labels.retained_fraction(), 1.0);
    }

    #[test]
    fn noiseless_labels_match_ground_truth_pair_points() {
        let (scene, state, graph) = small_scene();
        let labels = generate_pseudo_labels(&state, &constant_weights(&graph, 10.0), &graph, 1.5).unwrap();
        for (pair, gt) in labels.pairs.iter().zip(&scene.gt_pair_points) {
            assert_eq!((pair.src, pair.tgt), (gt.src, gt.tgt));
            for (label, truth) in [(&pair.labels[0], &gt.points_src), (&pair.labels[1], &gt.points_tgt)] {
                // ground-truth state carries the scene's own scale
                for (a, b) in label.iter().zip(truth.iter()) {
                    assert!((a - b).norm() < 1e-6, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn masks_shrink_as_cutoff_rises() {
        let (_, state, graph) = small_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let weights = WeightMaps {
            maps: graph
                .predictions()
                .iter()
                .map(|_| [0, 1].map(|_| Grid::from_fn(12, 9, |_, _| rng.random_range(0.0..4.0))))
                .collect(),
        };
        let mut previous = usize::MAX;
        for cutoff in [0.1, 0.5, 1.0, 1.5, 2.0, 3.0, 3.9] {
            let labels = generate_pseudo_labels(&state, &weights, &graph, cutoff).unwrap();
            let lower = generate_pseudo_labels(&state, &weights, &graph, cutoff - 0.05).unwrap();
            for (hi, lo) in labels.pairs.iter().zip(&lower.pairs) {
                for s in 0..2 {
                    assert!(hi.masks[s].iter().zip(lo.masks[s].iter()).all(|(a, b)| !a || *b));
                }
            }
            assert!(labels.retained() <= previous);
            previous = labels.retained();
        }
    }

    #[test]
    fn normalization_examples() {
        let one = |p: Vector3<f64>| Grid::filled(1, 1, p);
        let yes = Grid::filled(1, 1, true);
        let z = normalization_factor(&one(Vector3::new(0.0, 3.0, 0.0)), &yes, &one(Vector3::new(3.0, 4.0, 0.0)), &yes).unwrap();
        assert_eq!(z, 4.0);
        let units = Grid::from_fn(3, 2, |u, v| Vector3::new((u + v) as f64, 1.0, 0.0).normalize());
        let all = Grid::filled(3, 2, true);
        assert!((normalization_factor(&units, &all, &units, &all).unwrap() - 1.0).abs() < 1e-15);
        let none = Grid::filled(3, 2, false);
        assert!(matches!(
            normalization_factor(&units, &none, &units, &none),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn normalization_matches_resummation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (a, b) = (random_map(&mut rng, 5, 4), random_map(&mut rng, 5, 4));
            let ma = Grid::from_fn(5, 4, |_, _| rng.random_bool(0.6));
            let mb = Grid::from_fn(5, 4, |_, _| rng.random_bool(0.6));
            let mut norms = vec![];
            for idx in 0..20 {
                if ma.data()[idx] {
                    norms.push(a.data()[idx].norm());
                }
                if mb.data()[idx] {
                    norms.push(b.data()[idx].norm());
                }
            }
            if norms.is_empty() {
                continue;
            }
            let expect = norms.iter().sum::<f64>() / norms.len() as f64;
            assert!((normalization_factor(&a, &ma, &b, &mb).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn regression_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let label = random_map(&mut rng, 4, 3);
        let mask = Grid::filled(4, 3, true);
        let same = regression_loss(&label, &label, &mask, 1.3, 1.3).unwrap();
        assert!(same.iter().all(|l| *l == Some(0.0)));
        let doubled = label.map(|x| x * 2.0);
        let scaled = regression_loss(&doubled, &label, &mask, 2.6, 1.3).unwrap();
        assert!(scaled.iter().all(|l| l.unwrap() < 1e-15));
        assert!(matches!(
            regression_loss(&label, &label, &mask, 0.0, 1.0),
            Err(Error::InvalidInput(_))
        ));
        let pred = random_map(&mut rng, 4, 3);
        let partial = Grid::from_fn(4, 3, |u, _| u % 2 == 0);
        let got = regression_loss(&pred, &label, &partial, 1.7, 0.9).unwrap();
        for idx in 0..12 {
            let direct = if partial.data()[idx] {
                let d = pred.data()[idx] / 1.7 - label.data()[idx] / 0.9;
                Some((d.x * d.x + d.y * d.y + d.z * d.z).sqrt())
            } else {
                None
            };
            match (got.data()[idx], direct) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn confidence_loss_examples() {
        let losses = Grid::from_fn(3, 2, |u, v| Some((u + 2 * v) as f64 * 0.1));
        let ones = Grid::filled(3, 2, 1.0);
        let sum: f64 = losses.iter().map(|l| l.unwrap()).sum();
        assert!((confidence_aware_loss(&losses, &ones, 0.7).unwrap() - sum).abs() < 1e-15);
        let zeros = Grid::filled(3, 2, Some(0.0));
        let e = Grid::filled(3, 2, std::f64::consts::E);
        assert!((confidence_aware_loss(&zeros, &e, 1.0).unwrap() + 6.0).abs() < 1e-12);
        let bad = Grid::from_fn(3, 2, |u, _| if u == 0 { 0.0 } else { 1.0 });
        assert!(matches!(
            confidence_aware_loss(&zeros, &bad, 1.0),
            Err(Error::InvalidInput(_))
        ));
        // unlabeled pixels may carry any confidence
        let sparse = Grid::from_fn(3, 2, |u, _| (u != 0).then_some(0.5));
        assert!(confidence_aware_loss(&sparse, &bad, 1.0).is_ok());
    }

    #[test]
    fn confidence_loss_matches_resummation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let losses = Grid::from_fn(6, 5, |_, _| rng.random_bool(0.7).then(|| rng.random_range(0.0..2.0)));
            let conf = Grid::from_fn(6, 5, |_, _| rng.random_range(0.1..10.0));
            let alpha: f64 = rng.random_range(0.0..1.0);
            let mut direct = 0.0;
            for idx in 0..30 {
                if let Some(l) = losses.data()[idx] {
                    let c: f64 = conf.data()[idx];
                    direct += c * l - alpha * c.ln();
                }
            }
            assert!((confidence_aware_loss(&losses, &conf, alpha).unwrap() - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn loss_config_defaults() {
        let c = LossConfig::default();
        assert_eq!(c.cutoff, 1.5);
        assert!(c.validate().is_ok());
        assert!(LossConfig { cutoff: 0.0, ..c.clone() }.validate().is_err());
        assert!(LossConfig { alpha: -1.0, ..c }.validate().is_err());
    }

    proptest! {
        #[test]
        fn regression_loss_ignores_joint_rescaling(lambda in 0.01f64..100.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred = random_map(&mut rng, 4, 3);
            let label = random_map(&mut rng, 4, 3);
            let mask = Grid::from_fn(4, 3, |u, v| (u + v) % 3 != 0);
            let base = regression_loss(&pred, &label, &mask, 1.1, 0.8).unwrap();
            let scaled = regression_loss(&pred.map(|x| x * lambda), &label, &mask, 1.1 * lambda, 0.8).unwrap();
            for (a, b) in base.iter().zip(scaled.iter()) {
                match (a, b) {
                    (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12 * (1.0 + a.abs())),
                    (a, b) => prop_assert_eq!(a, b),
                }
            }
        }

        #[test]
        fn confidence_loss_minimized_at_alpha_over_loss(l in 0.01f64..5.0, alpha in 0.01f64..2.0) {
            let at = |c: f64| {
                confidence_aware_loss(&Grid::filled(1, 1, Some(l)), &Grid::filled(1, 1, c), alpha).unwrap()
            };
            let best = alpha / l;
            let here = at(best);
            for factor in [0.5, 0.9, 0.99, 1.01, 1.1, 2.0] {
                prop_assert!(here <= at(best * factor));
            }
            // vanishing central slope
            let h = 1e-6 * best;
            prop_assert!(((at(best + h) - at(best - h)) / (2.0 * h)).abs() < 1e-5 * (1.0 + l));
        }
    }
}
