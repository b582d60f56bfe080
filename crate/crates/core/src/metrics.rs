//! Pose-error and detection metrics.

use serde::{Deserialize, Serialize};

use crate::geom::Pose6D;
use crate::scene::{ObjectModel, Scene};

/// Error assigned to an object without a matching estimate, mm.
pub const UNDETECTED_PENALTY: f64 = 50.0;
/// Rotations sampled about a symmetry axis.
pub const SYMMETRY_STEPS: usize = 72;
/// Detection threshold as a fraction of the model diameter.
pub const DETECTION_FRACTION: f64 = 0.1;

/// Mean distance between model points under `est` and `gt`.
pub fn e_add_plain(est: &Pose6D, gt: &Pose6D, model: &ObjectModel) -> f64 {
    let pts = &model.cloud.points;
    if pts.is_empty() {
        return (est.translation - gt.translation).norm();
    }
    let (re, rg) = (est.rotation_matrix(), gt.rotation_matrix());
    let dr = re - rg;
    let dt = est.translation - gt.translation;
    pts.iter().map(|p| (dr * p + dt).norm()).sum::<f64>() / pts.len() as f64
}

/// ADD error in mm; for symmetric models, the minimum over rotations of
/// the estimate about the model's symmetry axis.
pub fn e_add(est: &Pose6D, gt: &Pose6D, model: &ObjectModel) -> f64 {
    let Some(axis) = model.symmetry else {
        return e_add_plain(est, gt, model);
    };
    // Mean distance is at least the distance between posed centroids, so
    // rotations are tried in order of that bound and the rest are skipped
    // once it exceeds the best exact value.
    let c = model.centroid();
    let rg = gt.rotation_matrix();
    let dt = est.translation - gt.translation;
    let mut cand: Vec<(f64, Pose6D)> = (0..SYMMETRY_STEPS)
        .map(|k| {
            let theta = k as f64 * std::f64::consts::TAU / SYMMETRY_STEPS as f64;
            let spun = est.compose(&Pose6D::from_axis_angle(axis, theta));
            let bound = ((spun.rotation_matrix() - rg) * c + dt).norm();
            (bound, spun)
        })
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = f64::INFINITY;
    for (bound, spun) in &cand {
        if *bound > best * (1.0 + 1e-12) {
            break;
        }
        best = best.min(e_add_plain(spun, gt, model));
    }
    best
}

/// e_ADD over every one of the sampled rotations, without pruning.
pub fn e_add_exhaustive(est: &Pose6D, gt: &Pose6D, model: &ObjectModel) -> f64 {
    match model.symmetry {
        None => e_add_plain(est, gt, model),
        Some(axis) => (0..SYMMETRY_STEPS)
            .map(|k| {
                let theta = k as f64 * std::f64::consts::TAU / SYMMETRY_STEPS as f64;
                e_add_plain(&est.compose(&Pose6D::from_axis_angle(axis, theta)), gt, model)
            })
            .fold(f64::INFINITY, f64::min),
    }
}

/// Cheap lower bound on [`e_add`].
fn e_add_lower_bound(est: &Pose6D, gt: &Pose6D, model: &ObjectModel) -> f64 {
    let c = model.centroid();
    match model.symmetry {
        None => (est.transform_point(&c) - gt.transform_point(&c)).norm(),
        Some(_) => ((est.translation - gt.translation).norm() - 2.0 * c.norm()).max(0.0),
    }
}

/// One-to-one assignment of estimates to ground-truth objects, greedy by
/// ascending error. Pairs at or above `gate` are never matched.
///
/// Returns, per ground-truth object, the matched estimate and its error.
pub fn match_estimates(est: &[Pose6D], gt: &[Pose6D], model: &ObjectModel, gate: f64) -> Vec<Option<(usize, f64)>> {
    let mut pairs = Vec::new();
    for (i, e) in est.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            if e_add_lower_bound(e, g, model) >= gate {
                continue;
            }
            let err = e_add(e, g, model);
            if err < gate {
                pairs.push((err, j, i));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used = vec![false; est.len()];
    let mut out = vec![None; gt.len()];
    for (err, j, i) in pairs {
        if out[j].is_none() && !used[i] {
            used[i] = true;
            out[j] = Some((i, err));
        }
    }
    out
}

/// Per-object errors and detections for one scene estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    /// e_ADD per ground-truth object (penalty when unmatched), mm.
    pub per_object: Vec<f64>,
    pub detectable: Vec<usize>,
    /// Detectable objects matched below the detection threshold.
    pub detected: usize,
}

impl SceneScore {
    /// Mean e_ADD over the detectable objects.
    pub fn mean_e_add(&self) -> f64 {
        if self.detectable.is_empty() {
            return 0.0;
        }
        self.detectable.iter().map(|&i| self.per_object[i]).sum::<f64>() / self.detectable.len() as f64
    }

    pub fn detection_rate(&self) -> f64 {
        if self.detectable.is_empty() {
            return 0.0;
        }
        self.detected as f64 / self.detectable.len() as f64
    }
}

pub fn score_scene(est: &[Pose6D], scene: &Scene, detectable: &[usize]) -> SceneScore {
    score_scene_with(est, scene, detectable, DETECTION_FRACTION * scene.model.diameter)
}

/// Like [`score_scene`] with an explicit detection threshold in mm.
pub fn score_scene_with(est: &[Pose6D], scene: &Scene, detectable: &[usize], threshold: f64) -> SceneScore {
    let matches = match_estimates(est, &scene.gt_poses, &scene.model, UNDETECTED_PENALTY);
    let per_object: Vec<f64> = matches
        .iter()
        .map(|m| m.map_or(UNDETECTED_PENALTY, |(_, e)| e))
        .collect();
    let detected = detectable
        .iter()
        .filter(|&&i| matches[i].is_some_and(|(_, e)| e < threshold))
        .count();
    SceneScore {
        per_object,
        detectable: detectable.to_vec(),
        detected,
    }
}

/// Fraction of detectable objects matched below the detection threshold.
pub fn detection_rate(est: &[Pose6D], scene: &Scene, detectable: &[usize]) -> f64 {
    score_scene(est, scene, detectable).detection_rate()
}
