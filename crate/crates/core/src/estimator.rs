//! Simulated pose estimator.
//!
//! Stands in for a learned detector: each visible object is detected with a
//! probability that rises with its visibility, and detected poses are the
//! ground truth perturbed by noise that grows as the object gets occluded.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geom::{random_unit_vector, Pose6D, Vec3, ViewGrid};
use crate::scene::{BBox, Rendering, Scene};

/// Occlusion-dependent noise and detection parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Per-axis translation sigma at full visibility, mm.
    pub sigma_t_base: f64,
    /// Rotation-angle sigma at full visibility, rad.
    pub sigma_r_base: f64,
    /// Noise scale grows as `1 + occlusion_gain * (1 - visibility)`.
    pub occlusion_gain: f64,
    /// Extra multiplier on the camera-z translation sigma.
    pub depth_axis_gain: f64,
    /// Visibility at which detection probability is one half. Zero turns
    /// detection dropout off: every visible object is detected.
    pub detect_v0: f64,
    pub detect_sharpness: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            sigma_t_base: 2.0,
            sigma_r_base: 0.05,
            occlusion_gain: 4.0,
            depth_axis_gain: 3.0,
            detect_v0: 0.25,
            detect_sharpness: 12.0,
        }
    }
}

impl NoiseModel {
    /// No pose noise and no dropout.
    pub fn noiseless() -> Self {
        NoiseModel {
            sigma_t_base: 0.0,
            sigma_r_base: 0.0,
            occlusion_gain: 0.0,
            depth_axis_gain: 1.0,
            detect_v0: 0.0,
            detect_sharpness: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.sigma_t_base,
            self.sigma_r_base,
            self.occlusion_gain,
            self.depth_axis_gain,
            self.detect_v0,
            self.detect_sharpness,
        ];
        if fields.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("noise model parameters must be finite and non-negative"));
        }
        if self.depth_axis_gain < 1.0 {
            return Err(invalid("depth_axis_gain must be at least 1"));
        }
        if self.detect_v0 >= 1.0 {
            return Err(invalid("detect_v0 must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn detection_probability(&self, visibility: f64) -> f64 {
        if visibility <= 0.0 {
            return 0.0;
        }
        if self.detect_v0 == 0.0 {
            return 1.0;
        }
        1.0 / (1.0 + (-self.detect_sharpness * (visibility - self.detect_v0)).exp())
    }

    /// Multiplier applied to both sigmas at a given visibility.
    pub fn noise_scale(&self, visibility: f64) -> f64 {
        1.0 + self.occlusion_gain * (1.0 - visibility.clamp(0.0, 1.0))
    }
}

/// One detected object from one view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Camera frame of the emitting view.
    pub pose: Pose6D,
    /// Ground-truth object this came from. Used for rewards and metrics
    /// only; never part of the policy state.
    pub gt_index: usize,
    pub bbox: BBox,
    pub mask: Vec<u32>,
    pub mean_mask_depth: f64,
    /// Filled in by fusion.
    pub verification: f64,
}

/// Emits noisy hypotheses for the objects visible in `rendering`.
///
/// Random draws happen in object order, so a fixed rng seed reproduces the
/// output exactly.
pub fn estimate<R: Rng + ?Sized>(
    rendering: &Rendering,
    scene: &Scene,
    grid: &ViewGrid,
    view_index: usize,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<Vec<Hypothesis>> {
    if rendering.object_count() != scene.len() {
        return Err(invalid(format!(
            "rendering has {} objects but the scene has {}",
            rendering.object_count(),
            scene.len()
        )));
    }
    if rendering.view_index != view_index || view_index >= grid.len() {
        return Err(invalid(format!(
            "rendering is of view {} but view {view_index} was requested",
            rendering.view_index
        )));
    }
    let cam_from_world = grid.view(view_index).camera_from_world;
    let mut out = Vec::new();
    for (obj, gt) in scene.gt_poses.iter().enumerate() {
        let v = rendering.visibility[obj];
        let (Some(bbox), false) = (rendering.bboxes[obj], rendering.masks[obj].is_empty()) else {
            continue;
        };
        if rng.gen::<f64>() >= noise.detection_probability(v) {
            continue;
        }
        let scale = noise.noise_scale(v);
        let st = noise.sigma_t_base * scale;
        let sr = noise.sigma_r_base * scale;
        let dt = Vec3::new(
            st * rng.sample::<f64, _>(StandardNormal),
            st * rng.sample::<f64, _>(StandardNormal),
            st * noise.depth_axis_gain * rng.sample::<f64, _>(StandardNormal),
        );
        let axis = random_unit_vector(rng);
        let angle = (sr * rng.sample::<f64, _>(StandardNormal)).abs();

        let truth = cam_from_world.compose(gt);
        let wobble = Pose6D::from_axis_angle(axis, angle);
        let pose = Pose6D::new(wobble.compose(&truth).rotation, truth.translation + dt);
        let mask = rendering.masks[obj].clone();
        out.push(Hypothesis {
            pose,
            gt_index: obj,
            bbox,
            mean_mask_depth: rendering.mean_depth(&mask),
            mask,
            verification: 0.0,
        });
    }
    Ok(out)
}

/// Number of hypotheses emitted for a view.
pub fn k_of(hyps: &[Hypothesis]) -> usize {
    hyps.len()
}
