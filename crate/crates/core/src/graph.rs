//! View graph, maximum-confidence spanning tree and initial parameter propagation.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geom::{DepthMap, Grid, PoseSE3};
use crate::pairwise::{estimate_focal, estimate_relative_pose, PairPrediction};

/// Undirected edge `{a, b}` with `a < b` and the indices of both directed predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UndirectedEdge {
    pub a: usize,
    pub b: usize,
    /// Index of the `(a, b)` prediction.
    pub forward: usize,
    /// Index of the `(b, a)` prediction.
    pub backward: usize,
}

#[derive(Debug, Clone)]
pub struct ViewGraph {
    num_views: usize,
    width: usize,
    height: usize,
    predictions: Vec<PairPrediction>,
    edges: Vec<UndirectedEdge>,
    lookup: BTreeMap<(usize, usize), usize>,
}

impl ViewGraph {
    pub fn num_views(&self) -> usize {
        self.num_views
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn predictions(&self) -> &[PairPrediction] {
        &self.predictions
    }

    pub fn edges(&self) -> &[UndirectedEdge] {
        &self.edges
    }

    /// Index of the directed prediction `(src, tgt)`.
    pub fn prediction_index(&self, src: usize, tgt: usize) -> Option<usize> {
        self.lookup.get(&(src, tgt)).copied()
    }

    /// Mean of all four confidence maps on the edge.
    pub fn edge_score(&self, edge: &UndirectedEdge) -> f64 {
        let (mut sum, mut count) = (0.0, 0usize);
        for k in [edge.forward, edge.backward] {
            let p = &self.predictions[k];
            sum += p.conf_src.iter().sum::<f64>() + p.conf_tgt.iter().sum::<f64>();
            count += p.conf_src.len() + p.conf_tgt.len();
        }
        sum / count as f64
    }
}

/// Groups directed predictions into undirected edges.
pub fn build_view_graph(predictions: Vec<PairPrediction>, num_views: usize) -> Result<ViewGraph> {
    if num_views < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 views, got {num_views}"
        )));
    }
    let first = predictions
        .first()
        .ok_or_else(|| Error::InvalidInput("no predictions".into()))?;
    let (width, height) = (first.width(), first.height());

    let mut lookup = BTreeMap::new();
    for (k, p) in predictions.iter().enumerate() {
        p.validate()?;
        if p.view_src >= num_views || p.view_tgt >= num_views {
            return Err(Error::InvalidInput(format!(
                "prediction ({}, {}) references a view outside [0, {num_views})",
                p.view_src, p.view_tgt
            )));
        }
        if p.width() != width || p.height() != height {
            return Err(Error::InvalidInput(format!(
                "prediction ({}, {}) is {}x{}, expected {width}x{height}",
                p.view_src,
                p.view_tgt,
                p.width(),
                p.height()
            )));
        }
        if lookup.insert((p.view_src, p.view_tgt), k).is_some() {
            return Err(Error::InvalidInput(format!(
                "duplicate prediction ({}, {})",
                p.view_src, p.view_tgt
            )));
        }
    }

    let mut edges = Vec::new();
    for (&(i, j), &k) in &lookup {
        let Some(&rev) = lookup.get(&(j, i)) else {
            return Err(Error::MissingReverse { src: j, tgt: i });
        };
        if i < j {
            edges.push(UndirectedEdge {
                a: i,
                b: j,
                forward: k,
                backward: rev,
            });
        }
    }
    Ok(ViewGraph {
        num_views,
        width,
        height,
        predictions,
        edges,
        lookup,
    })
}

/// Spanning tree as indices into [`ViewGraph::edges`], plus the anchor edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanningTree {
    pub edges: Vec<usize>,
    pub root: usize,
}

struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        self.parent[hi] = lo;
        true
    }
}

fn score_order(scores: &[f64], edges: &[UndirectedEdge], x: usize, y: usize) -> std::cmp::Ordering {
    scores[y]
        .total_cmp(&scores[x])
        .then((edges[x].a, edges[x].b).cmp(&(edges[y].a, edges[y].b)))
}

/// Maximum-total-score spanning tree (Kruskal). Ties go to the lexicographically
/// smaller `(a, b)`.
pub fn extract_spanning_tree(graph: &ViewGraph) -> Result<SpanningTree> {
    let edges = graph.edges();
    let scores: Vec<f64> = edges.iter().map(|e| graph.edge_score(e)).collect();
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by(|&x, &y| score_order(&scores, edges, x, y));

    let mut sets = DisjointSets::new(graph.num_views());
    let mut tree = Vec::with_capacity(graph.num_views() - 1);
    for &e in &order {
        if sets.union(edges[e].a, edges[e].b) {
            tree.push(e);
        }
    }
    if tree.len() + 1 != graph.num_views() {
        let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for v in 0..graph.num_views() {
            components.entry(sets.find(v)).or_default().push(v);
        }
        return Err(Error::Disconnected {
            components: components.into_values().collect(),
        });
    }
    let root = *tree
        .iter()
        .min_by(|&&x, &&y| score_order(&scores, edges, x, y))
        .expect("tree has at least one edge");
    tree.sort_unstable();
    Ok(SpanningTree { edges: tree, root })
}

/// Full optimization variable set. Edge quantities are indexed like
/// [`ViewGraph::predictions`]; an edge maps its prediction's points to the world
/// as `scale * (R x + t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub poses: Vec<PoseSE3>,
    pub focals: Vec<f64>,
    pub depths: Vec<DepthMap>,
    pub edge_poses: Vec<PoseSE3>,
    pub edge_scales: Vec<f64>,
}

impl GlobalState {
    pub fn num_views(&self) -> usize {
        self.poses.len()
    }

    pub fn scale_product(&self) -> f64 {
        self.edge_scales.iter().map(|s| s.ln()).sum::<f64>().exp()
    }

    /// Uniformly rescales the reconstruction: lengths by `factor`, geometry unchanged.
    pub fn rescale(&mut self, factor: f64) {
        for p in &mut self.poses {
            p.translation *= factor;
        }
        for d in &mut self.depths {
            *d = DepthMap::new(d.grid().map(|x| x * factor)).expect("positive factor keeps depth positive");
        }
        for s in &mut self.edge_scales {
            *s *= factor;
        }
    }

    pub fn check_against(&self, graph: &ViewGraph) -> Result<()> {
        let n = graph.num_views();
        let k = graph.predictions().len();
        if self.poses.len() != n || self.focals.len() != n || self.depths.len() != n {
            return Err(Error::InvalidInput(format!(
                "state has {} poses / {} focals / {} depths for {n} views",
                self.poses.len(),
                self.focals.len(),
                self.depths.len()
            )));
        }
        if self.edge_poses.len() != k || self.edge_scales.len() != k {
            return Err(Error::InvalidInput(format!(
                "state has {} edge poses / {} edge scales for {k} predictions",
                self.edge_poses.len(),
                self.edge_scales.len()
            )));
        }
        if let Some(d) = self
            .depths
            .iter()
            .find(|d| d.width() != graph.width() || d.height() != graph.height())
        {
            return Err(Error::InvalidInput(format!(
                "depth map is {}x{}, graph is {}x{}",
                d.width(),
                d.height(),
                graph.width(),
                graph.height()
            )));
        }
        if self.focals.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::InvalidState("focal must be positive".into()));
        }
        Ok(())
    }
}

/// Pairwise estimates for every directed prediction.
#[derive(Debug, Clone)]
pub struct PairwiseEstimates {
    /// Focal from the source view's own point map.
    pub focal: Vec<std::result::Result<f64, String>>,
    /// `(T, s)` with `s * T * X^{j,j} ~ X^{j,i}` for prediction `(i, j)`, where
    /// `X^{j,j}` comes from the reverse prediction `(j, i)`.
    pub cross: Vec<std::result::Result<(PoseSE3, f64), String>>,
}

impl PairwiseEstimates {
    pub fn compute(graph: &ViewGraph) -> Self {
        let preds = graph.predictions();
        let focal = preds
            .iter()
            .map(|p| estimate_focal(&p.points_src, &p.conf_src).map_err(|e| e.to_string()))
            .collect();
        let cross = preds
            .iter()
            .map(|p| {
                let rev = &preds[graph
                    .prediction_index(p.view_tgt, p.view_src)
                    .expect("graph guarantees reverse predictions")];
                estimate_relative_pose(&rev.points_src, &p.points_tgt, &rev.conf_src, &p.conf_tgt)
                    .map_err(|e| e.to_string())
            })
            .collect();
        Self { focal, cross }
    }
}

/// Similarity `x -> s R x + t`.
#[derive(Debug, Clone, Copy)]
struct Sim3 {
    scale: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Sim3 {
    fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// From the `s * (R x + t)` form used by the pairwise fits.
    fn from_scaled_pose(pose: &PoseSE3, s: f64) -> Self {
        Self {
            scale: s,
            rotation: pose.rotation,
            translation: pose.translation * s,
        }
    }

    fn then(&self, inner: &Sim3) -> Sim3 {
        Sim3 {
            scale: self.scale * inner.scale,
            rotation: self.rotation * inner.rotation,
            translation: self.rotation * inner.translation * self.scale + self.translation,
        }
    }

    fn rigid(&self) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation,
            translation: self.translation,
        }
    }
}

/// Places the root pair's source view at the origin and propagates poses,
/// scales, focals and depths breadth-first along the tree.
pub fn propagate_initialization(
    graph: &ViewGraph,
    tree: &SpanningTree,
    estimates: &PairwiseEstimates,
) -> Result<GlobalState> {
    let n = graph.num_views();
    let preds = graph.predictions();
    let edges = graph.edges();

    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &e in &tree.edges {
        adjacency[edges[e].a].push(edges[e].b);
        adjacency[edges[e].b].push(edges[e].a);
    }
    for list in &mut adjacency {
        list.sort_unstable();
    }

    // World mapping of the reference prediction of each placed view.
    let mut reference: Vec<Option<(usize, Sim3)>> = vec![None; n];
    let root = edges[tree.root];
    reference[root.a] = Some((root.forward, Sim3::identity()));

    // World mapping of prediction `k` given its source view is placed.
    let sibling_map = |k: usize, reference: &[Option<(usize, Sim3)>]| -> Result<Sim3> {
        let src = preds[k].view_src;
        let (ref_k, ref_map) = reference[src].expect("source view placed");
        if ref_k == k {
            return Ok(ref_map);
        }
        let r = &preds[ref_k];
        let p = &preds[k];
        let (pose, s) = estimate_relative_pose(&p.points_src, &r.points_src, &p.conf_src, &r.conf_src)
            .map_err(|e| {
                Error::Degenerate(format!(
                    "linking predictions ({}, {}) and ({}, {}): {e}",
                    p.view_src, p.view_tgt, r.view_src, r.view_tgt
                ))
            })?;
        Ok(ref_map.then(&Sim3::from_scaled_pose(&pose, s)))
    };

    let mut queue = VecDeque::from([root.a]);
    while let Some(v) = queue.pop_front() {
        for &w in &adjacency[v] {
            if reference[w].is_some() {
                continue;
            }
            let k_vw = graph.prediction_index(v, w).expect("edge prediction");
            let k_wv = graph.prediction_index(w, v).expect("edge prediction");
            let map_vw = sibling_map(k_vw, &reference)?;
            let (pose, s) = estimates.cross[k_vw].as_ref().map_err(|e| {
                Error::Degenerate(format!("relative pose for edge ({v}, {w}): {e}"))
            })?;
            reference[w] = Some((k_wv, map_vw.then(&Sim3::from_scaled_pose(pose, *s))));
            queue.push_back(w);
        }
    }
    if let Some(v) = reference.iter().position(|r| r.is_none()) {
        return Err(Error::InvalidInput(format!("spanning tree does not reach view {v}")));
    }

    let mut poses = Vec::with_capacity(n);
    let mut depths = Vec::with_capacity(n);
    for (v, r) in reference.iter().enumerate() {
        let (ref_k, map) = r.expect("all views placed");
        let rigid = map.rigid();
        poses.push(PoseSE3 {
            rotation: crate::geom::nearest_rotation(&rigid.rotation),
            translation: rigid.translation,
        });
        depths.push(initial_depth(&preds[ref_k], map.scale).map_err(|e| {
            Error::Degenerate(format!("depth initialization for view {v}: {e}"))
        })?);
    }

    let mut focal_sum = vec![0.0; n];
    let mut focal_weight = vec![0.0; n];
    for (k, p) in preds.iter().enumerate() {
        if let Ok(f) = estimates.focal[k] {
            let w: f64 = p.conf_src.iter().sum();
            focal_sum[p.view_src] += w * f;
            focal_weight[p.view_src] += w;
        }
    }
    let focals = (0..n)
        .map(|v| {
            if focal_weight[v] > 0.0 {
                Ok(focal_sum[v] / focal_weight[v])
            } else {
                Err(Error::Degenerate(format!("no usable focal estimate for view {v}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut edge_poses = Vec::with_capacity(preds.len());
    let mut edge_scales = Vec::with_capacity(preds.len());
    for k in 0..preds.len() {
        let map = sibling_map(k, &reference)?;
        edge_poses.push(PoseSE3 {
            rotation: crate::geom::nearest_rotation(&map.rotation),
            translation: map.translation / map.scale,
        });
        edge_scales.push(map.scale);
    }

    let mut state = GlobalState {
        poses,
        focals,
        depths,
        edge_poses,
        edge_scales,
    };
    let log_mean = state.edge_scales.iter().map(|s| s.ln()).sum::<f64>() / state.edge_scales.len() as f64;
    state.rescale((-log_mean).exp());
    Ok(state)
}

fn initial_depth(pred: &PairPrediction, scale: f64) -> Result<DepthMap> {
    let z: Vec<f64> = pred.points_src.iter().map(|p| p.z * scale).collect();
    let mut positive: Vec<f64> = z.iter().copied().filter(|d| d.is_finite() && *d > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::Degenerate("no pixel with positive depth".into()));
    }
    positive.sort_by(f64::total_cmp);
    let median = positive[positive.len() / 2];
    let values = z
        .into_iter()
        .map(|d| if d.is_finite() && d > 0.0 { d } else { median })
        .collect();
    DepthMap::new(Grid::new(pred.width(), pred.height(), values)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::so3_exp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Prediction with constant confidence `c` on a small grid.
    fn dummy(i: usize, j: usize, c: f64) -> PairPrediction {
        let pts = Grid::from_fn(4, 3, |u, v| Vector3::new(u as f64, v as f64, 1.0 + (u * v) as f64));
        PairPrediction::new(i, j, pts.clone(), pts, Grid::filled(4, 3, c), Grid::filled(4, 3, c)).unwrap()
    }

    fn complete(n: usize, score: impl Fn(usize, usize) -> f64) -> Vec<PairPrediction> {
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    out.push(dummy(i, j, score(i.min(j), i.max(j))));
                }
            }
        }
        out
    }

    #[test]
    fn graph_counts() {
        let g = build_view_graph(complete(3, |_, _| 1.0), 3).unwrap();
        assert_eq!(g.edges().len(), 3);
        let g = build_view_graph(complete(10, |_, _| 1.0), 10).unwrap();
        assert_eq!(g.edges().len(), 10 * 9 / 2);
    }

    #[test]
    fn missing_reverse_named() {
        let err = build_view_graph(vec![dummy(0, 1, 1.0)], 2).unwrap_err();
        match err {
            Error::MissingReverse { src, tgt } => assert_eq!((src, tgt), (1, 0)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_edge_tree() {
        let g = build_view_graph(complete(2, |_, _| 1.0), 2).unwrap();
        let t = extract_spanning_tree(&g).unwrap();
        assert_eq!(t.edges, vec![0]);
        assert_eq!(t.root, 0);
    }

    #[test]
    fn triangle_keeps_best_two() {
        let scores = |a: usize, b: usize| match (a, b) {
            (0, 1) => 3.0,
            (0, 2) => 1.0,
            _ => 2.0,
        };
        let g = build_view_graph(complete(3, scores), 3).unwrap();
        let t = extract_spanning_tree(&g).unwrap();
        let kept: Vec<(usize, usize)> = t.edges.iter().map(|&e| (g.edges()[e].a, g.edges()[e].b)).collect();
        assert_eq!(kept, vec![(0, 1), (1, 2)]);
        assert_eq!((g.edges()[t.root].a, g.edges()[t.root].b), (0, 1));
    }

    #[test]
    fn disconnected_components_reported() {
        let mut preds = vec![dummy(0, 1, 1.0), dummy(1, 0, 1.0), dummy(2, 3, 1.0), dummy(3, 2, 1.0)];
        preds.push(dummy(3, 4, 1.0));
        preds.push(dummy(4, 3, 1.0));
        let g = build_view_graph(preds, 5).unwrap();
        match extract_spanning_tree(&g).unwrap_err() {
            Error::Disconnected { components } => assert_eq!(components, vec![vec![0, 1], vec![2, 3, 4]]),
            other => panic!("unexpected {other:?}"),
        }
    }

    /// Every subset of N-1 edges that connects all views.
    fn brute_force_best(g: &ViewGraph) -> f64 {
        let m = g.edges().len();
        let n = g.num_views();
        let mut best = f64::NEG_INFINITY;
        let mut count = 0;
        for mask in 0u32..(1 << m) {
            if mask.count_ones() as usize != n - 1 {
                continue;
            }
            let mut sets = DisjointSets::new(n);
            let mut ok = true;
            let mut total = 0.0;
            for e in 0..m {
                if mask & (1 << e) != 0 {
                    ok &= sets.union(g.edges()[e].a, g.edges()[e].b);
                    total += g.edge_score(&g.edges()[e]);
                }
            }
            if ok {
                count += 1;
                best = f64::max(best, total);
            }
        }
        assert_eq!(count, n.pow(n as u32 - 2), "Cayley count");
        best
    }

    #[test]
    fn four_view_tree_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let s: Vec<f64> = (0..16).map(|_| rng.random_range(0.1..10.0)).collect();
            let g = build_view_graph(complete(4, |a, b| s[a * 4 + b]), 4).unwrap();
            let t = extract_spanning_tree(&g).unwrap();
            assert_eq!(t.edges.len(), 3);
            let total: f64 = t.edges.iter().map(|&e| g.edge_score(&g.edges()[e])).sum();
            assert!((total - brute_force_best(&g)).abs() < 1e-12);
            assert_eq!(t, extract_spanning_tree(&g).unwrap());
        }
    }

    #[test]
    fn chain_of_identity_poses() {
        // Every view sees the same points: all relative poses are identity.
        let pts = Grid::from_fn(4, 3, |u, v| Vector3::new(u as f64 - 2.0, v as f64 - 1.5, 2.0 + 0.1 * (u + v) as f64));
        let conf = Grid::filled(4, 3, 1.0);
        let mut preds = Vec::new();
        for (i, j) in [(0, 1), (1, 0), (1, 2), (2, 1)] {
            preds.push(PairPrediction::new(i, j, pts.clone(), pts.clone(), conf.clone(), conf.clone()).unwrap());
        }
        let g = build_view_graph(preds, 3).unwrap();
        let tree = extract_spanning_tree(&g).unwrap();
        let est = PairwiseEstimates::compute(&g);
        let state = propagate_initialization(&g, &tree, &est).unwrap();
        for p in &state.poses {
            assert!((p.rotation - Matrix3::identity()).abs().max() < 1e-12);
            assert!(p.translation.norm() < 1e-12);
        }
        assert!((state.scale_product() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_tree_edge_errors() {
        let line = Grid::from_fn(4, 3, |u, v| Vector3::new((u + 4 * v) as f64, 0.0, 1.0));
        let conf = Grid::filled(4, 3, 1.0);
        let preds = vec![
            PairPrediction::new(0, 1, line.clone(), line.clone(), conf.clone(), conf.clone()).unwrap(),
            PairPrediction::new(1, 0, line.clone(), line, conf.clone(), conf).unwrap(),
        ];
        let g = build_view_graph(preds, 2).unwrap();
        let tree = extract_spanning_tree(&g).unwrap();
        let est = PairwiseEstimates::compute(&g);
        assert!(matches!(propagate_initialization(&g, &tree, &est), Err(Error::Degenerate(_))));
    }

    #[test]
    fn sim3_composition() {
        let a = Sim3 { scale: 2.0, rotation: so3_exp(&Vector3::new(0.1, 0.2, 0.3)), translation: Vector3::new(1.0, 0.0, 2.0) };
        let b = Sim3 { scale: 0.5, rotation: so3_exp(&Vector3::new(-0.4, 0.0, 0.9)), translation: Vector3::new(0.0, 3.0, -1.0) };
        let x = Vector3::new(0.3, -0.7, 1.1);
        let apply = |s: &Sim3, x: Vector3<f64>| s.rotation * x * s.scale + s.translation;
        let c = a.then(&b);
        assert!((apply(&c, x) - apply(&a, apply(&b, x))).norm() < 1e-12);
    }
}
