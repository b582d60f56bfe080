//! Multi-view hypothesis fusion.
//!
//! Hypotheses from every visited view are moved into the world frame,
//! scored once against the depth data of the view that produced them,
//! grouped by single-linkage clustering on position, and the best-scoring
//! member of each cluster represents that object.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::estimator::Hypothesis;
use crate::geom::{Pose6D, Vec3, ViewGrid};
use crate::parallel;
use crate::scene::{ObjectModel, Rendering};

/// Inlier distance for the verification score, mm.
pub const DEFAULT_EPSILON: f64 = 5.0;
/// Cluster cut height as a fraction of model diameter.
pub const CLUSTER_THRESHOLD_FACTOR: f64 = 0.5;

/// Local fit between a scene point `q` and a model point `p`:
/// `½(1 − ‖p−q‖/ε) + ½ n_p·n_q` inside `ε`, else 0.
pub fn delta(p: &Vec3, q: &Vec3, n_p: &Vec3, n_q: &Vec3, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(invalid(format!("epsilon must be positive, got {eps}")));
    }
    Ok(delta_unchecked(p, q, n_p, n_q, eps))
}

#[inline]
fn delta_unchecked(p: &Vec3, q: &Vec3, n_p: &Vec3, n_q: &Vec3, eps: f64) -> f64 {
    let d = (p - q).norm();
    if d < eps {
        0.5 * (1.0 - d / eps) + 0.5 * n_p.dot(n_q)
    } else {
        0.0
    }
}

/// Mean local fit over the depth points inside the hypothesis mask that
/// lie within `eps` of the posed model; 0 when there are none.
///
/// Scene points are moved into the model frame rather than posing the
/// model, which keeps one prebuilt index per model.
pub fn verification_score(h: &Hypothesis, rendering: &Rendering, model: &ObjectModel, eps: f64) -> f64 {
    let model_from_cam = h.pose.inverse();
    let rot = model_from_cam.rotation_matrix();
    let tr = model_from_cam.translation;
    let index = model.index();
    let mut sum = 0.0;
    let mut inliers = 0usize;
    for &pix in &h.mask {
        let Some((q, n_q)) = rendering.pixel_point(pix) else { continue };
        let qm = rot * q + tr;
        if let Some(nb) = index.nn_query(&qm, eps) {
            let n_qm = rot * n_q;
            sum += delta_unchecked(&nb.point, &qm, &nb.normal, &n_qm, eps);
            inliers += 1;
        }
    }
    if inliers == 0 {
        0.0
    } else {
        sum / inliers as f64
    }
}

/// A pooled hypothesis with its world pose and frozen score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub hypothesis: Hypothesis,
    pub view_index: usize,
    pub world_pose: Pose6D,
    pub score: f64,
}

/// Append-only store of every hypothesis seen during an episode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HypothesisPool {
    pub entries: Vec<PoolEntry>,
}

impl HypothesisPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scores `new` against `rendering` and appends it in world frame.
    pub fn accumulate(
        &mut self,
        new: Vec<Hypothesis>,
        grid: &ViewGrid,
        view_index: usize,
        rendering: &Rendering,
        model: &ObjectModel,
        eps: f64,
    ) -> Result<()> {
        if !(eps > 0.0) {
            return Err(invalid(format!("epsilon must be positive, got {eps}")));
        }
        if view_index >= grid.len() {
            return Err(invalid(format!("view index {view_index} out of range")));
        }
        let scores = parallel::map_slice(&new, |h| verification_score(h, rendering, model, eps));
        let world_from_cam = grid.view(view_index).world_from_camera;
        for (mut h, score) in new.into_iter().zip(scores) {
            h.verification = score;
            self.entries.push(PoolEntry {
                world_pose: world_from_cam.compose(&h.pose),
                view_index,
                score,
                hypothesis: h,
            });
        }
        Ok(())
    }
}

/// Single-linkage clustering on world translation, cut at `threshold` mm.
///
/// Built from a minimum spanning tree (Prim, O(n²)); dropping tree edges
/// longer than the threshold leaves the clusters. Members are ascending and
/// clusters are ordered by their smallest member.
pub fn cluster_hypotheses(pool: &HypothesisPool, threshold: f64) -> Result<Vec<Vec<usize>>> {
    if !(threshold > 0.0) {
        return Err(invalid(format!("cluster threshold must be positive, got {threshold}")));
    }
    let n = pool.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let pos: Vec<Vec3> = pool.entries.iter().map(|e| e.world_pose.translation).collect();
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut uf = UnionFind::new(n);
    best[0] = 0.0;
    for _ in 0..n {
        let mut u = usize::MAX;
        for v in 0..n {
            if !in_tree[v] && (u == usize::MAX || best[v] < best[u]) {
                u = v;
            }
        }
        in_tree[u] = true;
        if parent[u] != usize::MAX && best[u] <= threshold {
            uf.union(u, parent[u]);
        }
        for v in 0..n {
            if !in_tree[v] {
                let d = (pos[u] - pos[v]).norm();
                if d < best[v] {
                    best[v] = d;
                    parent[v] = u;
                }
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let root = uf.find(i);
        if slot[root] == usize::MAX {
            slot[root] = clusters.len();
            clusters.push(Vec::new());
        }
        clusters[slot[root]].push(i);
    }
    Ok(clusters)
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Compact per-object description fed to attention: box, scaled mask
/// depth, verification score. Every component lies in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectFeature {
    pub b: [f64; 4],
    pub d: f64,
    pub c: f64,
}

impl ObjectFeature {
    pub const DIM: usize = 6;

    pub fn to_array(&self) -> [f64; 6] {
        [self.b[0], self.b[1], self.b[2], self.b[3], self.d, self.c]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        ObjectFeature {
            b: [v[0], v[1], v[2], v[3]],
            d: v[4],
            c: v[5],
        }
    }
}

/// Fused scene: one representative per cluster.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneEstimate {
    pub pool_indices: Vec<usize>,
    pub selected: Vec<PoolEntry>,
    pub features: Vec<ObjectFeature>,
}

impl SceneEstimate {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    /// Compact JSON for logs: world poses, scores and features.
    pub fn summary(&self) -> serde_json::Value {
        let objects: Vec<_> = self
            .selected
            .iter()
            .zip(&self.features)
            .map(|(e, f)| {
                serde_json::json!({
                    "pose": e.world_pose,
                    "score": e.score,
                    "view": e.view_index,
                    "feature": f.to_array(),
                })
            })
            .collect();
        serde_json::Value::Array(objects)
    }
}

/// Picks the highest-scoring entry per cluster (earliest on ties) and
/// builds its feature; mask depth is divided by `depth_scale`.
pub fn select_best(pool: &HypothesisPool, clusters: &[Vec<usize>], depth_scale: f64) -> SceneEstimate {
    let mut est = SceneEstimate::default();
    for cluster in clusters {
        let Some(&first) = cluster.first() else { continue };
        let mut best = first;
        for &i in cluster {
            let (s, b) = (pool.entries[i].score, pool.entries[best].score);
            if s > b || (s == b && i < best) {
                best = i;
            }
        }
        let e = &pool.entries[best];
        let h = &e.hypothesis;
        est.pool_indices.push(best);
        est.features.push(ObjectFeature {
            b: h.bbox.to_array(),
            d: (h.mean_mask_depth / depth_scale).clamp(0.0, 1.0),
            c: e.score.clamp(0.0, 1.0),
        });
        est.selected.push(e.clone());
    }
    est
}
