//! File-based pipeline stages: simulate, align, pseudo-label and evaluate.
//!
//! Every stage reads and writes the tensor containers of [`crate::io`]; paths
//! inside a manifest are relative to the manifest's directory.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::align::{optimize, AlignConfig, WeightMaps};
use crate::error::{Error, Result};
use crate::geom::{back_project, CameraIntrinsics, DepthMap, Grid, Mask, PointMap};
use crate::graph::{build_view_graph, extract_spanning_tree, propagate_initialization, GlobalState, PairwiseEstimates, ViewGraph};
use crate::io::{
    mask_tensor, point_map_tensor, points_tensor, pose_tensor, read_json, read_mask, read_pose, read_scalar_map,
    scalar_map_tensor, write_json, write_ply, write_tensor, GroundTruth, GroundTruthEntry, GtPairEntry,
    LoadedScene, PredictionEntry, SceneManifest, ViewEntry,
};
use crate::metrics::{accuracy_completeness, afe, ate, avg_point_error, spearman, Trajectory};
use crate::pairwise::weighted_similarity;
use crate::pseudo_label::{generate_pseudo_labels, normalization_factor, points_in_frame, LossConfig, PseudoLabelSet};
use crate::synth::{generate_scene, render_pair_predictions, NoiseModel, SceneConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

fn pair_dir(src: usize, tgt: usize) -> String {
    format!("{src}_{tgt}")
}

fn base_dir(manifest: &Path) -> PathBuf {
    match manifest.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Loads a manifest and every tensor it references.
pub fn load_scene(manifest: &Path) -> Result<LoadedScene> {
    SceneManifest::read(manifest)?.load(&base_dir(manifest))
}

/// Generates a synthetic scene and writes it with its ground truth under `out`.
///
/// `seed` replaces the seed in `scene` and also drives the prediction noise.
/// Returns the manifest path.
pub fn simulate(scene: &SceneConfig, noise: &NoiseModel, seed: u64, out: &Path) -> Result<PathBuf> {
    noise.validate()?;
    let config = SceneConfig {
        seed,
        ..scene.clone()
    };
    let synthetic = generate_scene(&config)?;
    let predictions = render_pair_predictions(&synthetic, noise, seed)?;
    let (w, h) = (config.width, config.height);

    let mut entries = Vec::with_capacity(predictions.len());
    for p in &predictions {
        let dir = PathBuf::from("predictions").join(pair_dir(p.view_src, p.view_tgt));
        let entry = PredictionEntry {
            src: p.view_src,
            tgt: p.view_tgt,
            points_src: dir.join("points_src.json"),
            points_tgt: dir.join("points_tgt.json"),
            conf_src: dir.join("conf_src.json"),
            conf_tgt: dir.join("conf_tgt.json"),
        };
        write_tensor(&out.join(&entry.points_src), &point_map_tensor(&p.points_src))?;
        write_tensor(&out.join(&entry.points_tgt), &point_map_tensor(&p.points_tgt))?;
        write_tensor(&out.join(&entry.conf_src), &scalar_map_tensor(&p.conf_src))?;
        write_tensor(&out.join(&entry.conf_tgt), &scalar_map_tensor(&p.conf_tgt))?;
        entries.push(entry);
    }

    let gt_dir = PathBuf::from("ground_truth");
    let mut poses = Vec::new();
    let mut view_points = Vec::new();
    for v in 0..config.num_views {
        let pose = gt_dir.join("poses").join(format!("{v}.json"));
        write_tensor(&out.join(&pose), &pose_tensor(&synthetic.gt_poses[v]))?;
        poses.push(pose);
        let pts = gt_dir.join("points").join(format!("{v}.json"));
        let world = synthetic.gt_points[v].map(|p| synthetic.gt_poses[v].transform_point(p));
        write_tensor(&out.join(&pts), &point_map_tensor(&world))?;
        view_points.push(pts);
    }
    let mut pair_points = Vec::new();
    for g in &synthetic.gt_pair_points {
        let dir = gt_dir.join("pairs").join(pair_dir(g.src, g.tgt));
        let entry = GtPairEntry {
            src: g.src,
            tgt: g.tgt,
            points_src: dir.join("points_src.json"),
            points_tgt: dir.join("points_tgt.json"),
        };
        write_tensor(&out.join(&entry.points_src), &point_map_tensor(&g.points_src))?;
        write_tensor(&out.join(&entry.points_tgt), &point_map_tensor(&g.points_tgt))?;
        pair_points.push(entry);
    }
    let surface = gt_dir.join("surface.json");
    write_tensor(&out.join(&surface), &points_tensor(&synthetic.surface_points))?;

    let manifest = SceneManifest {
        num_views: config.num_views,
        views: vec![ViewEntry { width: w, height: h }; config.num_views],
        predictions: entries,
        ground_truth: Some(GroundTruthEntry {
            poses,
            focals: synthetic.gt_focals.clone(),
            scene_extent: config.scene_extent,
            pair_points,
            surface_points: surface,
            view_points,
        }),
    };
    write_json(&out.join("scene.json"), &config)?;
    write_json(&out.join("noise.json"), noise)?;
    let path = out.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EdgeScale {
    src: usize,
    tgt: usize,
    scale: f64,
}

/// Optimized state and calibrated weights read back from an aligned directory.
#[derive(Debug, Clone)]
pub struct Aligned {
    pub state: GlobalState,
    pub weights: WeightMaps,
}

/// World-frame points of every view, concatenated in view order.
pub fn fused_points(state: &GlobalState) -> Result<Vec<Vector3<f64>>> {
    let mut out = Vec::new();
    for v in 0..state.num_views() {
        let d = &state.depths[v];
        let intr = CameraIntrinsics::new(state.focals[v], d.width(), d.height())?;
        out.extend(back_project(d, &intr, &state.poses[v])?.into_data());
    }
    Ok(out)
}

/// Writes an optimized state, its weights and traces under `out`.
pub fn write_aligned(
    out: &Path,
    graph: &ViewGraph,
    aligned: &Aligned,
    objective_trace: &[f64],
    scale_product_trace: &[f64],
) -> Result<()> {
    let state = &aligned.state;
    state.check_against(graph)?;
    for v in 0..state.num_views() {
        write_tensor(&out.join("poses").join(format!("{v}.json")), &pose_tensor(&state.poses[v]))?;
        write_tensor(&out.join("depths").join(format!("{v}.json")), &scalar_map_tensor(state.depths[v].grid()))?;
    }
    write_json(&out.join("focals.json"), &state.focals)?;
    let mut scales = Vec::new();
    for (k, p) in graph.predictions().iter().enumerate() {
        let name = pair_dir(p.view_src, p.view_tgt);
        write_tensor(&out.join("edges").join(format!("{name}.json")), &pose_tensor(&state.edge_poses[k]))?;
        scales.push(EdgeScale {
            src: p.view_src,
            tgt: p.view_tgt,
            scale: state.edge_scales[k],
        });
        let [ws, wt] = &aligned.weights.maps[k];
        write_tensor(&out.join("weights").join(format!("{name}_src.json")), &scalar_map_tensor(ws))?;
        write_tensor(&out.join("weights").join(format!("{name}_tgt.json")), &scalar_map_tensor(wt))?;
    }
    write_json(&out.join("edge_scales.json"), &scales)?;
    write_json(&out.join("objective_trace.json"), &objective_trace)?;
    write_json(&out.join("scale_product_trace.json"), &scale_product_trace)?;
    write_ply(&out.join("fused.ply"), &fused_points(state)?)
}

/// Reads a directory written by [`write_aligned`] for the predictions of `graph`.
pub fn read_aligned(dir: &Path, graph: &ViewGraph) -> Result<Aligned> {
    let (w, h) = (graph.width(), graph.height());
    let n = graph.num_views();
    let poses = (0..n)
        .map(|v| read_pose(&dir.join("poses").join(format!("{v}.json"))))
        .collect::<Result<Vec<_>>>()?;
    let depths = (0..n)
        .map(|v| DepthMap::new(read_scalar_map(&dir.join("depths").join(format!("{v}.json")), w, h)?))
        .collect::<Result<Vec<_>>>()?;
    let focals: Vec<f64> = read_json(&dir.join("focals.json"))?;
    let scales: Vec<EdgeScale> = read_json(&dir.join("edge_scales.json"))?;
    let mut edge_poses = Vec::new();
    let mut edge_scales = Vec::new();
    let mut maps = Vec::new();
    for p in graph.predictions() {
        let name = pair_dir(p.view_src, p.view_tgt);
        edge_poses.push(read_pose(&dir.join("edges").join(format!("{name}.json")))?);
        let s = scales
            .iter()
            .find(|s| s.src == p.view_src && s.tgt == p.view_tgt)
            .ok_or_else(|| Error::InvalidInput(format!("no edge scale for pair ({}, {})", p.view_src, p.view_tgt)))?;
        edge_scales.push(s.scale);
        maps.push([
            read_scalar_map(&dir.join("weights").join(format!("{name}_src.json")), w, h)?,
            read_scalar_map(&dir.join("weights").join(format!("{name}_tgt.json")), w, h)?,
        ]);
    }
    let state = GlobalState {
        poses,
        focals,
        depths,
        edge_poses,
        edge_scales,
    };
    state.check_against(graph)?;
    Ok(Aligned {
        state,
        weights: WeightMaps { maps },
    })
}

fn scene_graph(scene: &LoadedScene) -> Result<ViewGraph> {
    build_view_graph(scene.predictions.clone(), scene.num_views)
}

/// Initializes from pairwise estimates, optimizes and writes the result to `out`.
pub fn align(manifest: &Path, config: &AlignConfig, out: &Path) -> Result<Aligned> {
    config.validate()?;
    let scene = load_scene(manifest)?;
    let graph = scene_graph(&scene)?;
    let tree = extract_spanning_tree(&graph)?;
    let init = propagate_initialization(&graph, &tree, &PairwiseEstimates::compute(&graph))?;
    let result = optimize(&init, &graph, config)?;
    let aligned = Aligned {
        state: result.state,
        weights: result.weights,
    };
    write_json(&out.join("align_config.json"), config)?;
    write_aligned(out, &graph, &aligned, &result.objective_trace, &result.scale_product_trace)?;
    Ok(aligned)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub src: usize,
    pub tgt: usize,
    pub retained: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub cutoff: f64,
    pub retained: usize,
    pub total: usize,
    pub retained_fraction: f64,
    pub pairs: Vec<PairSummary>,
}

/// Thresholds the aligned weights and writes labels, masks and a summary.
pub fn pseudo_label(manifest: &Path, aligned_dir: &Path, cutoff: f64, out: &Path) -> Result<LabelSummary> {
    LossConfig {
        cutoff,
        ..LossConfig::default()
    }
    .validate()?;
    let scene = load_scene(manifest)?;
    let graph = scene_graph(&scene)?;
    let aligned = read_aligned(aligned_dir, &graph)?;
    let set = generate_pseudo_labels(&aligned.state, &aligned.weights, &graph, cutoff)?;
    for pair in &set.pairs {
        let name = pair_dir(pair.src, pair.tgt);
        for (slot, tag) in ["src", "tgt"].iter().enumerate() {
            write_tensor(&out.join("labels").join(format!("{name}_{tag}.json")), &point_map_tensor(&pair.labels[slot]))?;
            write_tensor(&out.join("masks").join(format!("{name}_{tag}.json")), &mask_tensor(&pair.masks[slot]))?;
        }
    }
    let summary = summarize(&set, cutoff);
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn summarize(set: &PseudoLabelSet, cutoff: f64) -> LabelSummary {
    LabelSummary {
        cutoff,
        retained: set.retained(),
        total: set.total(),
        retained_fraction: set.retained_fraction(),
        pairs: set
            .pairs
            .iter()
            .map(|p| PairSummary {
                src: p.src,
                tgt: p.tgt,
                retained: p.retained(),
                total: 2 * p.masks[0].len(),
            })
            .collect(),
    }
}

/// Flat metric report. Keys are always present; undefined values are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ate: Option<f64>,
    pub afe_percent: Option<f64>,
    pub accuracy: Option<f64>,
    pub completeness: Option<f64>,
    pub avg_point_error: Option<f64>,
    pub spearman_weight_vs_neg_error: Option<f64>,
    pub spearman_rawconf_vs_neg_error: Option<f64>,
    pub label_retained_fraction: Option<f64>,
    pub label_retained_error: Option<f64>,
    pub label_rejected_error: Option<f64>,
}

/// Maps the "undefined for this scene" errors to `None`.
fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(x) => Ok(Some(x)),
        Err(Error::Degenerate(_) | Error::UndefinedCorrelation(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Per-pixel distance of `pred` to `gt` after both pairs are brought to the
/// ground-truth normalization.
fn scaled_errors(pred: [&PointMap; 2], gt: [&PointMap; 2]) -> Result<[Grid<f64>; 2]> {
    let all = Mask::filled(pred[0].width(), pred[0].height(), true);
    let z_pred = normalization_factor(pred[0], &all, pred[1], &all)?;
    let z_gt = normalization_factor(gt[0], &all, gt[1], &all)?;
    let ratio = z_gt / z_pred;
    let err = |slot: usize| {
        let data = pred[slot]
            .iter()
            .zip(gt[slot].iter())
            .map(|(p, g)| (p * ratio - g).norm())
            .collect();
        Grid::new(pred[slot].width(), pred[slot].height(), data)
    };
    Ok([err(0)?, err(1)?])
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Reads the masks written by [`pseudo_label`] for the predictions of `graph`.
pub fn read_masks(dir: &Path, graph: &ViewGraph) -> Result<Vec<[Mask; 2]>> {
    let (w, h) = (graph.width(), graph.height());
    graph
        .predictions()
        .iter()
        .map(|p| {
            let name = pair_dir(p.view_src, p.view_tgt);
            Ok([
                read_mask(&dir.join("masks").join(format!("{name}_src.json")), w, h)?,
                read_mask(&dir.join("masks").join(format!("{name}_tgt.json")), w, h)?,
            ])
        })
        .collect()
}

/// Scores an aligned state (and optionally its labels) against ground truth.
pub fn compute_metrics(
    graph: &ViewGraph,
    gt: &GroundTruth,
    aligned: &Aligned,
    masks: Option<&[[Mask; 2]]>,
) -> Result<Metrics> {
    let state = &aligned.state;
    let ate = defined(ate(
        &Trajectory::from_poses(state.poses.clone()),
        &Trajectory::from_poses(gt.poses.clone()),
    ))?;
    let afe_percent = defined(afe(&state.focals, &gt.focals))?;

    let fused = fused_points(state)?;
    let gt_pixels: Vec<Vector3<f64>> = gt.view_points.iter().flat_map(|m| m.iter().copied()).collect();
    let (fit, scale) = weighted_similarity(&fused, &gt_pixels, &vec![1.0; fused.len()])?;
    let moved: Vec<Vector3<f64>> = fused.iter().map(|p| fit.transform_point(p) * scale).collect();
    let mut reference = gt_pixels;
    reference.extend(gt.surface_points.iter().copied());
    let (accuracy, completeness) = match accuracy_completeness(&moved, &reference) {
        Ok((a, c)) => (Some(a), Some(c)),
        Err(Error::Degenerate(_)) => (None, None),
        Err(e) => return Err(e),
    };

    let mut point_errors = Vec::new();
    let (mut weights, mut confs, mut neg_errors) = (Vec::new(), Vec::new(), Vec::new());
    let (mut kept, mut dropped) = (Vec::new(), Vec::new());
    for (k, p) in graph.predictions().iter().enumerate() {
        let pair_gt = &gt.pair_points[k];
        let labels = [
            points_in_frame(state, p.view_src, p.view_src),
            points_in_frame(state, p.view_tgt, p.view_src),
        ];
        let all = Mask::filled(graph.width(), graph.height(), true);
        for slot in 0..2 {
            if let Some(e) = defined(avg_point_error(&labels[slot], &all, &pair_gt[slot], &all))? {
                point_errors.push(e);
            }
        }
        let raw = scaled_errors([&p.points_src, &p.points_tgt], [&pair_gt[0], &pair_gt[1]])?;
        let conf = [&p.conf_src, &p.conf_tgt];
        for slot in 0..2 {
            weights.extend(aligned.weights.maps[k][slot].iter().copied());
            confs.extend(conf[slot].iter().copied());
            neg_errors.extend(raw[slot].iter().map(|e| -e));
        }
        if let Some(m) = masks {
            let label_err = scaled_errors([&labels[0], &labels[1]], [&pair_gt[0], &pair_gt[1]])?;
            for slot in 0..2 {
                for (e, keep) in label_err[slot].iter().zip(m[k][slot].iter()) {
                    if *keep { kept.push(*e) } else { dropped.push(*e) }
                }
            }
        }
    }

    let (label_retained_fraction, label_retained_error, label_rejected_error) = match masks {
        Some(_) => {
            let total = kept.len() + dropped.len();
            let fraction = (total > 0).then(|| kept.len() as f64 / total as f64);
            (fraction, mean(&kept), mean(&dropped))
        }
        None => (None, None, None),
    };
    Ok(Metrics {
        ate,
        afe_percent,
        accuracy,
        completeness,
        avg_point_error: mean(&point_errors),
        spearman_weight_vs_neg_error: defined(spearman(&weights, &neg_errors))?,
        spearman_rawconf_vs_neg_error: defined(spearman(&confs, &neg_errors))?,
        label_retained_fraction,
        label_retained_error,
        label_rejected_error,
    })
}

/// Evaluates an aligned directory against the manifest's ground truth and
/// writes the report to `out`.
pub fn evaluate(manifest: &Path, aligned_dir: &Path, labels_dir: Option<&Path>, out: &Path) -> Result<Metrics> {
    let scene = load_scene(manifest)?;
    let gt = scene
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::MissingGroundTruth(format!("{} has no ground_truth section", manifest.display())))?;
    let graph = scene_graph(&scene)?;
    let aligned = read_aligned(aligned_dir, &graph)?;
    let masks = labels_dir.map(|d| read_masks(d, &graph)).transpose()?;
    let metrics = compute_metrics(&graph, gt, &aligned, masks.as_deref())?;
    write_json(out, &metrics)?;
    Ok(metrics)
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub scene: SceneConfig,
    pub noise: NoiseModel,
    pub seed: u64,
    pub align: AlignConfig,
    pub cutoff: f64,
    /// Run both robust and plain alignment instead of the mode in `align`.
    pub ab: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbReport {
    pub robust_avg_point_error: Option<f64>,
    pub plain_avg_point_error: Option<f64>,
    /// `1 - robust / plain`.
    pub relative_improvement: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub manifest: PathBuf,
    /// `(run name, metrics)`; the name is the sub-directory holding the run.
    pub runs: Vec<(String, Metrics)>,
    pub ab: Option<AbReport>,
}

fn run_stages(manifest: &Path, config: &AlignConfig, cutoff: f64, dir: &Path) -> Result<Metrics> {
    let aligned = dir.join("aligned");
    let labels = dir.join("labels");
    align(manifest, config, &aligned)?;
    pseudo_label(manifest, &aligned, cutoff, &labels)?;
    evaluate(manifest, &aligned, Some(&labels), &dir.join("metrics.json"))
}

/// Simulate, align, pseudo-label and evaluate under `out`.
///
/// Without A/B the stages write to `out/{scene,aligned,labels,metrics.json}`;
/// with it each mode gets its own `out/robust` and `out/plain` directory and
/// `out/ab.json` compares them.
pub fn pipeline(options: &PipelineOptions, out: &Path) -> Result<PipelineReport> {
    options.align.validate()?;
    LossConfig {
        cutoff: options.cutoff,
        ..LossConfig::default()
    }
    .validate()?;
    let manifest = simulate(&options.scene, &options.noise, options.seed, &out.join("scene"))?;
    if !options.ab {
        let metrics = run_stages(&manifest, &options.align, options.cutoff, out)?;
        return Ok(PipelineReport {
            manifest,
            runs: vec![(".".into(), metrics)],
            ab: None,
        });
    }
    let mut runs = Vec::new();
    for (name, robust) in [("robust", true), ("plain", false)] {
        let config = AlignConfig {
            robust,
            ..options.align.clone()
        };
        runs.push((name.to_string(), run_stages(&manifest, &config, options.cutoff, &out.join(name))?));
    }
    let robust = runs[0].1.avg_point_error;
    let plain = runs[1].1.avg_point_error;
    let ab = AbReport {
        robust_avg_point_error: robust,
        plain_avg_point_error: plain,
        relative_improvement: match (robust, plain) {
            (Some(r), Some(p)) if p > 0.0 => Some(1.0 - r / p),
            _ => None,
        },
    };
    write_json(&out.join("ab.json"), &ab)?;
    Ok(PipelineReport {
        manifest,
        runs,
        ab: Some(ab),
    })
}
