//! Gradient-descent global alignment with optional closed-form confidence
//! re-weighting.
//!
//! For every directed prediction `k = (i, j)` and view `v` in `{i, j}` the pixel
//! residual is
//!
//! ```text
//! e_p = T_v D_p K_v^-1 (u_p, v_p, 1) - s_k (R_k X_p + t_k)
//! ```
//!
//! and the objective is `sum w_p sqrt(|e_p|^2 + eps^2)`, plus
//! `mu (sqrt(w_p) - sqrt(C_p))^2` in robust mode. Focals, depths and edge scales
//! are optimized in log-space; rotations take left axis-angle increments.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::error::{Error, Result};
use crate::geom::{centered_pixel, ConfMap, DepthMap, Grid, PointMap};
use crate::graph::{GlobalState, ViewGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub mu: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_update_every: usize,
    pub conf_floor: f64,
    pub robust: bool,
    pub residual_epsilon: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            mu: 0.01,
            steps: 300,
            learning_rate: 0.01,
            weight_update_every: 10,
            conf_floor: 0.5,
            robust: true,
            residual_epsilon: 1e-9,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.mu) {
            return Err(Error::Config(format!("mu must be positive, got {}", self.mu)));
        }
        if self.steps == 0 || self.weight_update_every == 0 {
            return Err(Error::Config(
                "steps and weight_update_every must be positive".into(),
            ));
        }
        if !positive(self.learning_rate) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.conf_floor.is_finite() && self.conf_floor >= 0.0) {
            return Err(Error::Config(format!(
                "conf_floor must be non-negative, got {}",
                self.conf_floor
            )));
        }
        if !positive(self.residual_epsilon) {
            return Err(Error::Config("residual_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Per-prediction `[source view, target view]` pixel weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMaps {
    pub maps: Vec<[ConfMap; 2]>,
}

impl WeightMaps {
    /// Raw confidences with pixels below `conf_floor` zeroed.
    pub fn from_confidences(graph: &ViewGraph, conf_floor: f64) -> Self {
        let floor = |c: &f64| if *c < conf_floor { 0.0 } else { *c };
        Self {
            maps: graph
                .predictions()
                .iter()
                .map(|p| [p.conf_src.map(floor), p.conf_tgt.map(floor)])
                .collect(),
        }
    }
}

/// Per-prediction `[source view, target view]` residual vectors.
pub type Residuals = Vec<[PointMap; 2]>;

/// Minimizer of `w |e| + mu (sqrt(w) - sqrt(c))^2` over `w >= 0`.
pub fn calibrated_weight(conf: f64, residual_norm: f64, mu: f64) -> f64 {
    let d = 1.0 + residual_norm / mu;
    conf / (d * d)
}

fn view_geometry(state: &GlobalState, v: usize, idx: usize, width: usize, height: usize) -> Vector3<f64> {
    let (uc, vc) = centered_pixel(idx % width, idx / width, width, height);
    let d = state.depths[v].grid().data()[idx];
    let f = state.focals[v];
    Vector3::new(d * uc / f, d * vc / f, d)
}

pub fn residuals(state: &GlobalState, graph: &ViewGraph) -> Result<Residuals> {
    state.check_against(graph)?;
    let (w, h) = (graph.width(), graph.height());
    Ok(graph
        .predictions()
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let edge = &state.edge_poses[k];
            let s = state.edge_scales[k];
            let make = |v: usize, pts: &PointMap| {
                let pose = &state.poses[v];
                Grid::from_fn(w, h, |u, vv| {
                    let idx = vv * w + u;
                    pose.transform_point(&view_geometry(state, v, idx, w, h))
                        - edge.transform_point(&pts.data()[idx]) * s
                })
            };
            [make(p.view_src, &p.points_src), make(p.view_tgt, &p.points_tgt)]
        })
        .collect())
}

/// Closed-form weights for the given residuals, zeroed where the raw
/// confidence is below `conf_floor`.
pub fn update_weights(residuals: &Residuals, graph: &ViewGraph, mu: f64, conf_floor: f64) -> WeightMaps {
    WeightMaps {
        maps: graph
            .predictions()
            .iter()
            .zip(residuals)
            .map(|(p, [rs, rt])| {
                let one = |conf: &ConfMap, res: &PointMap| {
                    Grid::new(
                        conf.width(),
                        conf.height(),
                        conf.iter()
                            .zip(res.iter())
                            .map(|(c, e)| {
                                if *c < conf_floor {
                                    0.0
                                } else {
                                    calibrated_weight(*c, e.norm(), mu)
                                }
                            })
                            .collect(),
                    )
                    .expect("shapes match")
                };
                [one(&p.conf_src, rs), one(&p.conf_tgt, rt)]
            })
            .collect(),
    }
}

fn regularizer(graph: &ViewGraph, weights: &WeightMaps, mu: f64) -> f64 {
    graph
        .predictions()
        .iter()
        .zip(&weights.maps)
        .map(|(p, [ws, wt])| {
            let term = |c: &ConfMap, w: &ConfMap| -> f64 {
                c.iter()
                    .zip(w.iter())
                    .map(|(c, w)| {
                        let d = w.sqrt() - c.sqrt();
                        mu * d * d
                    })
                    .sum()
            };
            term(&p.conf_src, ws) + term(&p.conf_tgt, wt)
        })
        .sum()
}

/// Objective value; the outlier-process term is included when `config.robust`.
pub fn objective(state: &GlobalState, graph: &ViewGraph, weights: &WeightMaps, config: &AlignConfig) -> Result<f64> {
    check_weights(graph, weights)?;
    let res = residuals(state, graph)?;
    let eps2 = config.residual_epsilon * config.residual_epsilon;
    let data: f64 = res
        .iter()
        .zip(&weights.maps)
        .map(|(r, w)| {
            (0..2)
                .map(|slot| {
                    r[slot]
                        .iter()
                        .zip(w[slot].iter())
                        .map(|(e, w)| w * (e.norm_squared() + eps2).sqrt())
                        .sum::<f64>()
                })
                .sum::<f64>()
        })
        .sum();
    Ok(if config.robust {
        data + regularizer(graph, weights, config.mu)
    } else {
        data
    })
}

pub(crate) fn check_weights(graph: &ViewGraph, weights: &WeightMaps) -> Result<()> {
    let ok = weights.maps.len() == graph.predictions().len()
        && weights.maps.iter().all(|[a, b]| {
            a.width() == graph.width()
                && a.height() == graph.height()
                && a.same_shape(b)
        });
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidInput("weight maps do not match the graph".into()))
    }
}

/// Divides every edge scale by their geometric mean.
pub fn normalize_scales(state: &mut GlobalState) -> Result<()> {
    if state.edge_scales.is_empty() {
        return Ok(());
    }
    if let Some(bad) = state.edge_scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::InvalidState(format!("edge scale {bad} is not positive")));
    }
    let log_mean = state.edge_scales.iter().map(|s| s.ln()).sum::<f64>() / state.edge_scales.len() as f64;
    let g = log_mean.exp();
    for s in &mut state.edge_scales {
        *s /= g;
    }
    Ok(())
}

/// Gradient of the data term with respect to every parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGradient {
    /// Left axis-angle increment of each view rotation.
    pub view_rotation: Vec<Vector3<f64>>,
    pub view_translation: Vec<Vector3<f64>>,
    pub log_focal: Vec<f64>,
    pub log_depth: Vec<Vec<f64>>,
    pub edge_rotation: Vec<Vector3<f64>>,
    pub edge_translation: Vec<Vector3<f64>>,
    pub edge_log_scale: Vec<f64>,
}

#[derive(Default)]
struct ViewPartial {
    rotation: Vector3<f64>,
    translation: Vector3<f64>,
    log_focal: f64,
    log_depth: Vec<f64>,
}

struct PredictionPartial {
    loss: f64,
    views: [ViewPartial; 2],
    edge_rotation: Vector3<f64>,
    edge_translation: Vector3<f64>,
    edge_log_scale: f64,
}

fn prediction_partial(
    state: &GlobalState,
    graph: &ViewGraph,
    weights: &[ConfMap; 2],
    k: usize,
    eps2: f64,
) -> PredictionPartial {
    let (w, h) = (graph.width(), graph.height());
    let p = &graph.predictions()[k];
    let edge = &state.edge_poses[k];
    let s = state.edge_scales[k];
    let mut out = PredictionPartial {
        loss: 0.0,
        views: Default::default(),
        edge_rotation: Vector3::zeros(),
        edge_translation: Vector3::zeros(),
        edge_log_scale: 0.0,
    };
    for (slot, (v, pts)) in [(p.view_src, &p.points_src), (p.view_tgt, &p.points_tgt)]
        .into_iter()
        .enumerate()
    {
        let pose = &state.poses[v];
        let vp = &mut out.views[slot];
        vp.log_depth = vec![0.0; w * h];
        for (idx, &wt) in weights[slot].data().iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            let cam = view_geometry(state, v, idx, w, h);
            let rotated = pose.rotation * cam;
            let world = rotated + pose.translation;
            let rx = edge.rotation * pts.data()[idx];
            let y = rx + edge.translation;
            let e = world - y * s;
            let n = (e.norm_squared() + eps2).sqrt();
            out.loss += wt * n;
            let g = e * (wt / n);

            vp.translation += g;
            vp.rotation += rotated.cross(&g);
            vp.log_depth[idx] += g.dot(&rotated);
            vp.log_focal -= g.dot(&(pose.rotation * Vector3::new(cam.x, cam.y, 0.0)));

            out.edge_translation -= g * s;
            out.edge_rotation -= rx.cross(&g) * s;
            out.edge_log_scale -= g.dot(&y) * s;
        }
    }
    out
}

/// Data-term value and its gradient for fixed weights.
pub fn objective_and_gradient(
    state: &GlobalState,
    graph: &ViewGraph,
    weights: &WeightMaps,
    residual_epsilon: f64,
) -> Result<(f64, StateGradient)> {
    state.check_against(graph)?;
    check_weights(graph, weights)?;
    let eps2 = residual_epsilon * residual_epsilon;
    let partials: Vec<PredictionPartial> = (0..graph.predictions().len())
        .into_par_iter()
        .map(|k| prediction_partial(state, graph, &weights.maps[k], k, eps2))
        .collect();

    let n = graph.num_views();
    let hw = graph.width() * graph.height();
    let mut grad = StateGradient {
        view_rotation: vec![Vector3::zeros(); n],
        view_translation: vec![Vector3::zeros(); n],
        log_focal: vec![0.0; n],
        log_depth: vec![vec![0.0; hw]; n],
        edge_rotation: Vec::with_capacity(partials.len()),
        edge_translation: Vec::with_capacity(partials.len()),
        edge_log_scale: Vec::with_capacity(partials.len()),
    };
    let mut loss = 0.0;
    for (k, part) in partials.into_iter().enumerate() {
        let p = &graph.predictions()[k];
        loss += part.loss;
        for (v, vp) in [p.view_src, p.view_tgt].into_iter().zip(part.views) {
            grad.view_rotation[v] += vp.rotation;
            grad.view_translation[v] += vp.translation;
            grad.log_focal[v] += vp.log_focal;
            for (acc, d) in grad.log_depth[v].iter_mut().zip(vp.log_depth) {
                *acc += d;
            }
        }
        grad.edge_rotation.push(part.edge_rotation);
        grad.edge_translation.push(part.edge_translation);
        grad.edge_log_scale.push(part.edge_log_scale);
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone)]
pub struct AlignOutput {
    pub state: GlobalState,
    pub weights: WeightMaps,
    /// Objective before every step, then once more for the final state.
    pub objective_trace: Vec<f64>,
    /// Product of edge scales after every step's normalization.
    pub scale_product_trace: Vec<f64>,
}

struct Layout {
    views: usize,
    hw: usize,
}

impl Layout {
    fn view_block(&self) -> usize {
        7 + self.hw
    }

    fn view_offset(&self, v: usize) -> usize {
        v * self.view_block()
    }

    fn edge_offset(&self, k: usize) -> usize {
        self.views * self.view_block() + k * 7
    }

    fn len(&self, edges: usize) -> usize {
        self.edge_offset(edges)
    }

    fn flatten(&self, g: &StateGradient) -> Vec<f64> {
        let mut flat = vec![0.0; self.len(g.edge_log_scale.len())];
        for v in 0..self.views {
            let o = self.view_offset(v);
            // view 0 is the gauge anchor
            if v != 0 {
                flat[o..o + 3].copy_from_slice(g.view_rotation[v].as_slice());
                flat[o + 3..o + 6].copy_from_slice(g.view_translation[v].as_slice());
            }
            flat[o + 6] = g.log_focal[v];
            flat[o + 7..o + 7 + self.hw].copy_from_slice(&g.log_depth[v]);
        }
        for k in 0..g.edge_log_scale.len() {
            let o = self.edge_offset(k);
            flat[o..o + 3].copy_from_slice(g.edge_rotation[k].as_slice());
            flat[o + 3..o + 6].copy_from_slice(g.edge_translation[k].as_slice());
            flat[o + 6] = g.edge_log_scale[k];
        }
        flat
    }

    fn apply(&self, state: &mut GlobalState, delta: &[f64]) -> Result<()> {
        let v3 = |o: usize| Vector3::new(delta[o], delta[o + 1], delta[o + 2]);
        for v in 0..self.views {
            let o = self.view_offset(v);
            state.poses[v].perturb_rotation_left(&v3(o));
            state.poses[v].translation += v3(o + 3);
            state.focals[v] *= delta[o + 6].exp();
            let depth = state.depths[v]
                .grid()
                .iter()
                .zip(&delta[o + 7..o + 7 + self.hw])
                .map(|(d, step)| d * step.exp())
                .collect();
            let grid = Grid::new(state.depths[v].width(), state.depths[v].height(), depth)?;
            state.depths[v] = DepthMap::new(grid).map_err(|e| Error::InvalidState(e.to_string()))?;
        }
        for k in 0..state.edge_scales.len() {
            let o = self.edge_offset(k);
            state.edge_poses[k].perturb_rotation_left(&v3(o));
            state.edge_poses[k].translation += v3(o + 3);
            state.edge_scales[k] *= delta[o + 6].exp();
        }
        Ok(())
    }
}

/// Runs `config.steps` Adam steps from `state`.
pub fn optimize(state: &GlobalState, graph: &ViewGraph, config: &AlignConfig) -> Result<AlignOutput> {
    config.validate()?;
    state.check_against(graph)?;
    let mut state = state.clone();
    normalize_scales(&mut state)?;

    let layout = Layout {
        views: graph.num_views(),
        hw: graph.width() * graph.height(),
    };
    let mut adam = Adam::new(layout.len(graph.predictions().len()), config.learning_rate);
    let mut weights = WeightMaps::from_confidences(graph, config.conf_floor);
    let reg = |w: &WeightMaps| if config.robust { regularizer(graph, w, config.mu) } else { 0.0 };

    let mut objective_trace = Vec::with_capacity(config.steps + 1);
    let mut scale_product_trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        if config.robust && step % config.weight_update_every == 0 {
            weights = update_weights(&residuals(&state, graph)?, graph, config.mu, config.conf_floor);
        }
        let (loss, grad) = objective_and_gradient(&state, graph, &weights, config.residual_epsilon)?;
        let flat = layout.flatten(&grad);
        if !loss.is_finite() || flat.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step });
        }
        objective_trace.push(loss + reg(&weights));
        let delta = adam.step(&flat);
        layout
            .apply(&mut state, &delta)
            .map_err(|_| Error::Diverged { step })?;
        normalize_scales(&mut state).map_err(|_| Error::Diverged { step })?;
        scale_product_trace.push(state.scale_product());
    }

    if config.robust {
        weights = update_weights(&residuals(&state, graph)?, graph, config.mu, config.conf_floor);
    }
    let final_value = objective(&state, graph, &weights, config)?;
    if !final_value.is_finite() {
        return Err(Error::Diverged { step: config.steps });
    }
    objective_trace.push(final_value);
    Ok(AlignOutput {
        state,
        weights,
        objective_trace,
        scale_product_trace,
    })
}
