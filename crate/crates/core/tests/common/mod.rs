//! Finite-difference gradient check shared by the gradient and acceptance targets.

use nalgebra::Vector3;
use pointmap_align::align::{objective, objective_and_gradient, AlignConfig, StateGradient, WeightMaps};
use pointmap_align::geom::{DepthMap, Grid};
use pointmap_align::graph::{build_view_graph, GlobalState, ViewGraph};
use pointmap_align::synth::{generate_scene, ground_truth_state, render_pair_predictions_detailed, NoiseModel, SceneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

pub fn instance(seed: u64) -> (GlobalState, ViewGraph, WeightMaps) {
    let cfg = SceneConfig {
        num_views: 2,
        width: 8,
        height: 6,
        seed,
        ..SceneConfig::default()
    };
    let scene = generate_scene(&cfg).unwrap();
    let noise = NoiseModel {
        depth_noise_rel: 0.02,
        outlier_fraction: 0.1,
        ..NoiseModel::default()
    };
    let r = render_pair_predictions_detailed(&scene, &noise, seed).unwrap();
    let graph = build_view_graph(r.predictions, 2).unwrap();
    let mut state = ground_truth_state(&scene, &graph, &r.pair_scales).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mut jitter = |s: f64| Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
    for p in state.poses.iter_mut().chain(state.edge_poses.iter_mut()) {
        p.perturb_rotation_left(&jitter(0.05));
        p.translation += jitter(0.05);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdef);
    for f in &mut state.focals {
        *f *= rng.random_range(0.9..1.1);
    }
    for s in &mut state.edge_scales {
        *s *= rng.random_range(0.9..1.1);
    }
    for d in &mut state.depths {
        *d = DepthMap::new(d.grid().map(|x| x * rng.random_range(0.95..1.05))).unwrap();
    }
    let weights = WeightMaps {
        maps: graph
            .predictions()
            .iter()
            .map(|_| [0, 1].map(|_| Grid::from_fn(8, 6, |_, _| rng.random_range(0.0..5.0))))
            .collect(),
    };
    (state, graph, weights)
}

pub fn value(state: &GlobalState, graph: &ViewGraph, weights: &WeightMaps) -> f64 {
    let config = AlignConfig {
        robust: false,
        ..AlignConfig::default()
    };
    objective(state, graph, weights, &config).unwrap()
}

fn central(state: &GlobalState, graph: &ViewGraph, weights: &WeightMaps, nudge: impl Fn(&mut GlobalState, f64)) -> f64 {
    let mut plus = state.clone();
    nudge(&mut plus, H);
    let mut minus = state.clone();
    nudge(&mut minus, -H);
    (value(&plus, graph, weights) - value(&minus, graph, weights)) / (2.0 * H)
}

fn axis(i: usize, h: f64) -> Vector3<f64> {
    let mut a = Vector3::zeros();
    a[i] = h;
    a
}

fn scale_depth(state: &mut GlobalState, v: usize, idx: usize, h: f64) {
    let mut g = state.depths[v].grid().clone();
    g.data_mut()[idx] *= h.exp();
    state.depths[v] = DepthMap::new(g).unwrap();
}

/// Finite-difference gradient laid out like the analytic one.
fn numeric_gradient(state: &GlobalState, graph: &ViewGraph, weights: &WeightMaps) -> StateGradient {
    let n = state.num_views();
    let m = state.edge_scales.len();
    let hw = graph.width() * graph.height();
    let fd = |f: &dyn Fn(&mut GlobalState, f64)| central(state, graph, weights, f);
    StateGradient {
        view_rotation: (0..n)
            .map(|v| Vector3::from_fn(|i, _| fd(&|s, h| s.poses[v].perturb_rotation_left(&axis(i, h)))))
            .collect(),
        view_translation: (0..n)
            .map(|v| Vector3::from_fn(|i, _| fd(&|s, h| s.poses[v].translation += axis(i, h))))
            .collect(),
        log_focal: (0..n).map(|v| fd(&|s, h| s.focals[v] *= h.exp())).collect(),
        log_depth: (0..n)
            .map(|v| (0..hw).map(|idx| fd(&|s, h| scale_depth(s, v, idx, h))).collect())
            .collect(),
        edge_rotation: (0..m)
            .map(|k| Vector3::from_fn(|i, _| fd(&|s, h| s.edge_poses[k].perturb_rotation_left(&axis(i, h)))))
            .collect(),
        edge_translation: (0..m)
            .map(|k| Vector3::from_fn(|i, _| fd(&|s, h| s.edge_poses[k].translation += axis(i, h))))
            .collect(),
        edge_log_scale: (0..m).map(|k| fd(&|s, h| s.edge_scales[k] *= h.exp())).collect(),
    }
}

fn flatten(g: &StateGradient) -> Vec<(&'static str, Vec<f64>)> {
    let vecs = |v: &[Vector3<f64>]| v.iter().flat_map(|x| x.iter().copied()).collect::<Vec<_>>();
    vec![
        ("view rotation", vecs(&g.view_rotation)),
        ("view translation", vecs(&g.view_translation)),
        ("log focal", g.log_focal.clone()),
        ("log depth", g.log_depth.concat()),
        ("edge rotation", vecs(&g.edge_rotation)),
        ("edge translation", vecs(&g.edge_translation)),
        ("edge log scale", g.edge_log_scale.clone()),
    ]
}

/// Largest relative error over all coordinates, measured against the block norm.
pub fn worst_relative_error(seed: u64) -> f64 {
    let (state, graph, weights) = instance(seed);
    let (_, analytic) = objective_and_gradient(&state, &graph, &weights, 1e-9).unwrap();
    let numeric = numeric_gradient(&state, &graph, &weights);
    let mut worst: f64 = 0.0;
    for ((name, a), (_, b)) in flatten(&analytic).into_iter().zip(flatten(&numeric)) {
        let scale = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for (x, y) in a.iter().zip(&b) {
            let rel = (x - y).abs() / scale;
            if rel > 1e-5 {
                eprintln!("seed {seed} {name}: analytic {x} numeric {y}");
            }
            worst = worst.max(rel);
        }
    }
    worst
}
