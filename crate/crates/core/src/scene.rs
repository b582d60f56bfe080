//! Procedural object models, cluttered bin scenes, and a point-splat depth
//! renderer producing masks, boxes and visibility fractions.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, AplError, Result};
use crate::geom::{random_rotation, NeighborIndex, PointSet, Pose6D, Vec3, ViewGrid};
use crate::parallel;

/// Fraction of model diameter below which two object centres may not come.
pub const MIN_SEPARATION_FACTOR: f64 = 0.6;
/// Objects whose best visibility over all views is below this are not ground truth.
pub const DETECTABILITY_THRESHOLD: f64 = 0.15;
/// Consecutive rejected placements before scene generation gives up.
pub const MAX_REJECTIONS: usize = 10_000;
/// Default points per procedural model.
pub const DEFAULT_MODEL_POINTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[serde(alias = "cup-like")]
    Cup,
    #[serde(alias = "bunny-like")]
    Bunny,
}

impl ModelKind {
    /// Inclusive range of instances per scene.
    pub fn instance_range(self) -> (usize, usize) {
        match self {
            ModelKind::Cup => (15, 20),
            ModelKind::Bunny => (7, 12),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Cup => "cup",
            ModelKind::Bunny => "bunny",
        })
    }
}

impl FromStr for ModelKind {
    type Err = AplError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cup" | "cup-like" => Ok(ModelKind::Cup),
            "bunny" | "bunny-like" => Ok(ModelKind::Bunny),
            other => Err(invalid(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Rigid object model in its own frame.
#[derive(Clone, Debug)]
pub struct ObjectModel {
    pub kind: ModelKind,
    pub n_points: usize,
    pub seed: u64,
    pub cloud: PointSet,
    pub diameter: f64,
    /// Revolution axis through the model origin, if any.
    pub symmetry: Option<Vec3>,
    index: NeighborIndex,
    centroid: Vec3,
}

impl ObjectModel {
    /// Mean of the model points.
    pub fn centroid(&self) -> Vec3 {
        self.centroid
    }

    /// Nearest-neighbour index over the model-frame cloud.
    pub fn index(&self) -> &NeighborIndex {
        &self.index
    }
}

/// Builds a deterministic procedural model.
///
/// The cup is a closed cylinder (r 28 mm, h 70 mm) with a handle arc and a
/// revolution axis along z; the bunny is the outer surface of three
/// overlapping ellipsoids and has no symmetry.
pub fn make_model(kind: ModelKind, n_points: usize, seed: u64) -> Result<ObjectModel> {
    if n_points < 50 {
        return Err(invalid(format!("model needs at least 50 points, got {n_points}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (points, normals, symmetry) = match kind {
        ModelKind::Cup => {
            let (p, n) = sample_cup(&mut rng, n_points);
            (p, n, Some(Vec3::z()))
        }
        ModelKind::Bunny => {
            let (mut p, n) = sample_bunny(&mut rng, n_points);
            let c = p.iter().sum::<Vec3>() / p.len() as f64;
            p.iter_mut().for_each(|x| *x -= c);
            (p, n, None)
        }
    };
    let cloud = PointSet::new(points, normals)?;
    let diameter = max_pairwise_distance(&cloud.points);
    Ok(ObjectModel {
        kind,
        n_points,
        seed,
        index: NeighborIndex::build(cloud.clone()),
        centroid: cloud.centroid(),
        cloud,
        diameter,
        symmetry,
    })
}

fn max_pairwise_distance(points: &[Vec3]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}

const CUP_RADIUS: f64 = 28.0;
const CUP_HALF_HEIGHT: f64 = 35.0;
const HANDLE_RADIUS: f64 = 16.0;
const HANDLE_TUBE: f64 = 4.0;

fn sample_cup(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Vec3>, Vec<Vec3>) {
    let side = TAU * CUP_RADIUS * 2.0 * CUP_HALF_HEIGHT;
    let disk = PI * CUP_RADIUS * CUP_RADIUS;
    let handle = PI * HANDLE_RADIUS * TAU * HANDLE_TUBE;
    let total = side + 2.0 * disk + handle;
    let mut pts = Vec::with_capacity(n);
    let mut nrm = Vec::with_capacity(n);
    while pts.len() < n {
        let pick = rng.gen::<f64>() * total;
        if pick < side {
            let a = rng.gen::<f64>() * TAU;
            let z = rng.gen_range(-CUP_HALF_HEIGHT..CUP_HALF_HEIGHT);
            let (s, c) = a.sin_cos();
            pts.push(Vec3::new(CUP_RADIUS * c, CUP_RADIUS * s, z));
            nrm.push(Vec3::new(c, s, 0.0));
        } else if pick < side + 2.0 * disk {
            let top = pick >= side + disk;
            let r = CUP_RADIUS * rng.gen::<f64>().sqrt();
            let a = rng.gen::<f64>() * TAU;
            let z = if top { CUP_HALF_HEIGHT } else { -CUP_HALF_HEIGHT };
            pts.push(Vec3::new(r * a.cos(), r * a.sin(), z));
            nrm.push(Vec3::new(0.0, 0.0, z.signum()));
        } else {
            let phi = rng.gen_range(-FRAC_PI_2..FRAC_PI_2);
            let psi = rng.gen::<f64>() * TAU;
            let radial = Vec3::new(phi.cos(), 0.0, phi.sin());
            let centre = Vec3::new(CUP_RADIUS, 0.0, 0.0) + HANDLE_RADIUS * radial;
            let normal = psi.cos() * radial + psi.sin() * Vec3::y();
            let p = centre + HANDLE_TUBE * normal;
            if p.x * p.x + p.y * p.y < CUP_RADIUS * CUP_RADIUS {
                continue;
            }
            pts.push(p);
            nrm.push(normal);
        }
    }
    (pts, nrm)
}

struct Ellipsoid {
    centre: Vec3,
    radii: Vec3,
}

impl Ellipsoid {
    fn contains(&self, p: &Vec3) -> bool {
        let d = (p - self.centre).component_div(&self.radii);
        d.norm_squared() < 1.0 - 1e-9
    }

    fn approx_area(&self) -> f64 {
        let r = self.radii;
        4.0 * PI * ((r.x * r.y + r.y * r.z + r.z * r.x) / 3.0)
    }
}

fn sample_bunny(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Vec3>, Vec<Vec3>) {
    let parts = [
        Ellipsoid { centre: Vec3::new(0.0, 0.0, 0.0), radii: Vec3::new(32.0, 22.0, 24.0) },
        Ellipsoid { centre: Vec3::new(27.0, 3.0, 20.0), radii: Vec3::new(14.0, 11.0, 12.0) },
        Ellipsoid { centre: Vec3::new(24.0, -6.0, 38.0), radii: Vec3::new(4.0, 5.0, 14.0) },
    ];
    let areas: Vec<f64> = parts.iter().map(Ellipsoid::approx_area).collect();
    let total: f64 = areas.iter().sum();
    let mut pts = Vec::with_capacity(n);
    let mut nrm = Vec::with_capacity(n);
    while pts.len() < n {
        let mut pick = rng.gen::<f64>() * total;
        let mut k = 0;
        while k + 1 < parts.len() && pick >= areas[k] {
            pick -= areas[k];
            k += 1;
        }
        let e = &parts[k];
        let u = crate::geom::random_unit_vector(rng);
        let p = e.centre + u.component_mul(&e.radii);
        if parts.iter().enumerate().any(|(j, o)| j != k && o.contains(&p)) {
            continue;
        }
        pts.push(p);
        nrm.push(u.component_div(&e.radii).normalize());
    }
    (pts, nrm)
}

/// Ground truth for one bin of identical objects.
#[derive(Clone, Debug)]
pub struct Scene {
    pub model: Arc<ObjectModel>,
    pub gt_poses: Vec<Pose6D>,
    pub bin_extent: Vec3,
    pub seed: u64,
}

/// Default bin: 200 x 200 x 120 mm at cup scale, scaled by diameter.
pub fn default_bin(model: &ObjectModel) -> Vec3 {
    Vec3::new(200.0, 200.0, 120.0) * (model.diameter / 90.0)
}

/// Rejection-samples `n_objects` poses inside an origin-centred bin.
pub fn generate_scene(model: Arc<ObjectModel>, n_objects: usize, bin_extent: Vec3, seed: u64) -> Result<Scene> {
    if n_objects == 0 {
        return Err(invalid("scene needs at least one object"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_sep = MIN_SEPARATION_FACTOR * model.diameter;
    let half = bin_extent / 2.0;
    let mut poses: Vec<Pose6D> = Vec::with_capacity(n_objects);
    while poses.len() < n_objects {
        let mut failures = 0;
        loop {
            let centre = Vec3::new(
                rng.gen_range(-half.x..=half.x),
                rng.gen_range(-half.y..=half.y),
                rng.gen_range(-half.z..=half.z),
            );
            let rotation = random_rotation(&mut rng);
            if poses.iter().all(|p| (p.translation - centre).norm() >= min_sep) {
                poses.push(Pose6D::new(rotation, centre));
                break;
            }
            failures += 1;
            if failures >= MAX_REJECTIONS {
                return Err(AplError::CapacityExceeded(format!(
                    "could not place object {} of {n_objects} after {MAX_REJECTIONS} attempts",
                    poses.len() + 1
                )));
            }
        }
    }
    Ok(Scene {
        model,
        gt_poses: poses,
        bin_extent,
        seed,
    })
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    model_kind: ModelKind,
    model_points: usize,
    model_seed: u64,
    seed: u64,
    bin_extent: [f64; 3],
    poses: Vec<Pose6D>,
}

impl Scene {
    pub fn to_json(&self) -> Result<String> {
        let rec = SceneRecord {
            model_kind: self.model.kind,
            model_points: self.model.n_points,
            model_seed: self.model.seed,
            seed: self.seed,
            bin_extent: [self.bin_extent.x, self.bin_extent.y, self.bin_extent.z],
            poses: self.gt_poses.clone(),
        };
        Ok(serde_json::to_string_pretty(&rec)?)
    }

    pub fn from_json(s: &str) -> Result<Scene> {
        let rec: SceneRecord = serde_json::from_str(s)?;
        let model = make_model(rec.model_kind, rec.model_points, rec.model_seed)?;
        Ok(Scene {
            model: Arc::new(model),
            gt_poses: rec.poses,
            bin_extent: Vec3::from(rec.bin_extent),
            seed: rec.seed,
        })
    }

    pub fn len(&self) -> usize {
        self.gt_poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt_poses.is_empty()
    }
}

/// Pinhole intrinsics; pixel `u` covers `[u, u+1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Intrinsics {
            width: 128,
            height: 128,
            focal: 140.0,
            cx: 64.0,
            cy: 64.0,
        }
    }
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) {
            return Err(invalid("intrinsics need positive width, height and focal length"));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Normalized 2D box, `0 <= x0 < x1 <= 1`, `0 <= y0 < y1 <= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn to_array(self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    /// Whether pixel `(u, v)` of a `w x h` image falls inside.
    pub fn contains_pixel(&self, u: usize, v: usize, w: usize, h: usize) -> bool {
        let (x, y) = ((u as f64 + 0.5) / w as f64, (v as f64 + 0.5) / h as f64);
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// Where scene-cloud normals come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalSource {
    /// Normal of the winning model point.
    #[default]
    Model,
    /// Cross product of depth-map gradients, falling back to the model
    /// normal at object borders.
    DepthGradient,
}

const NO_POINT: u32 = u32::MAX;

/// One rendered view. Pixel index is `v * width + u`.
#[derive(Clone, Debug)]
pub struct Rendering {
    pub view_index: usize,
    pub width: usize,
    pub height: usize,
    /// mm; 0 marks an empty pixel.
    pub depth: Vec<f64>,
    pub instance_ids: Vec<Option<u32>>,
    /// Visible pixels per object, ascending.
    pub masks: Vec<Vec<u32>>,
    pub bboxes: Vec<Option<BBox>>,
    pub visibility: Vec<f64>,
    /// Pixel count of each object if it were rendered alone.
    pub unoccluded_pixels: Vec<usize>,
    /// Camera-frame points of the non-empty pixels, in pixel order.
    pub scene_cloud: PointSet,
    cloud_index: Vec<u32>,
}

impl Rendering {
    pub fn object_count(&self) -> usize {
        self.masks.len()
    }

    /// Scene-cloud point and normal behind a pixel, if any.
    pub fn pixel_point(&self, pixel: u32) -> Option<(Vec3, Vec3)> {
        match self.cloud_index.get(pixel as usize) {
            Some(&i) if i != NO_POINT => {
                let i = i as usize;
                Some((self.scene_cloud.points[i], self.scene_cloud.normals[i]))
            }
            _ => None,
        }
    }

    /// Mean depth over a pixel set (0 when empty).
    pub fn mean_depth(&self, pixels: &[u32]) -> f64 {
        if pixels.is_empty() {
            return 0.0;
        }
        pixels.iter().map(|&p| self.depth[p as usize]).sum::<f64>() / pixels.len() as f64
    }

    /// 16-bit binary PGM of the depth map in whole mm.
    pub fn write_depth_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P5\n{} {}\n65535\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.depth.len() * 2);
        for d in &self.depth {
            let v = d.round().clamp(0.0, 65535.0) as u16;
            buf.extend_from_slice(&v.to_be_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn masks_summary(&self) -> serde_json::Value {
        let objects: Vec<_> = (0..self.object_count())
            .map(|i| {
                serde_json::json!({
                    "index": i,
                    "pixels": self.masks[i].len(),
                    "unoccluded_pixels": self.unoccluded_pixels[i],
                    "visibility": self.visibility[i],
                    "bbox": self.bboxes[i].map(BBox::to_array),
                })
            })
            .collect();
        serde_json::json!({
            "view_index": self.view_index,
            "width": self.width,
            "height": self.height,
            "objects": objects,
        })
    }

    /// Writes `<stem>.pgm` and `<stem>.json` into `dir`.
    pub fn write_debug(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let pgm = std::fs::File::create(dir.join(format!("{stem}.pgm")))?;
        self.write_depth_pgm(std::io::BufWriter::new(pgm))?;
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&self.masks_summary())?,
        )?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RenderOptions {
    pub normals: NormalSource,
}

pub fn render(scene: &Scene, grid: &ViewGrid, view_index: usize, intr: &Intrinsics) -> Result<Rendering> {
    render_with(scene, grid, view_index, intr, &RenderOptions::default())
}

/// Point-splat z-buffer render (3x3 splat per model point, back faces culled).
pub fn render_with(
    scene: &Scene,
    grid: &ViewGrid,
    view_index: usize,
    intr: &Intrinsics,
    opts: &RenderOptions,
) -> Result<Rendering> {
    intr.validate()?;
    if view_index >= grid.len() {
        return Err(invalid(format!("view index {view_index} out of range ({} views)", grid.len())));
    }
    let (w, h) = (intr.width, intr.height);
    let npix = w * h;
    let n_obj = scene.gt_poses.len();
    let model = &scene.model;
    let cam_from_world = grid.view(view_index).camera_from_world;

    let mut zbuf = vec![f64::INFINITY; npix];
    let mut winner: Vec<(u32, u32)> = vec![(NO_POINT, NO_POINT); npix];
    let mut stamp = vec![NO_POINT; npix];
    let mut unoccluded = vec![0usize; n_obj];
    let mut transforms: Vec<(Matrix3<f64>, Vec3)> = Vec::with_capacity(n_obj);

    for (obj, gt) in scene.gt_poses.iter().enumerate() {
        let t = cam_from_world.compose(gt);
        let rot = t.rotation_matrix();
        transforms.push((rot, t.translation));
        for (pi, (p, n)) in model.cloud.points.iter().zip(&model.cloud.normals).enumerate() {
            let pc = rot * p + t.translation;
            if pc.z <= 1.0 {
                continue;
            }
            let nc = rot * n;
            if nc.dot(&pc) >= 0.0 {
                continue;
            }
            let u = intr.focal * pc.x / pc.z + intr.cx;
            let v = intr.focal * pc.y / pc.z + intr.cy;
            if !u.is_finite() || !v.is_finite() {
                continue;
            }
            let (ui, vi) = (u.floor() as i64, v.floor() as i64);
            for dv in -1..=1 {
                let y = vi + dv;
                if y < 0 || y >= h as i64 {
                    continue;
                }
                for du in -1..=1 {
                    let x = ui + du;
                    if x < 0 || x >= w as i64 {
                        continue;
                    }
                    let pix = y as usize * w + x as usize;
                    if stamp[pix] != obj as u32 {
                        stamp[pix] = obj as u32;
                        unoccluded[obj] += 1;
                    }
                    if pc.z < zbuf[pix] {
                        zbuf[pix] = pc.z;
                        winner[pix] = (obj as u32, pi as u32);
                    }
                }
            }
        }
    }

    let mut depth = vec![0.0; npix];
    let mut instance_ids = vec![None; npix];
    let mut masks: Vec<Vec<u32>> = vec![Vec::new(); n_obj];
    let mut cloud_index = vec![NO_POINT; npix];
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut bounds: Vec<Option<(usize, usize, usize, usize)>> = vec![None; n_obj];
    for pix in 0..npix {
        let (obj, pi) = winner[pix];
        if obj == NO_POINT {
            continue;
        }
        let (rot, tr) = &transforms[obj as usize];
        let p = rot * model.cloud.points[pi as usize] + tr;
        let n = rot * model.cloud.normals[pi as usize];
        depth[pix] = zbuf[pix];
        instance_ids[pix] = Some(obj);
        masks[obj as usize].push(pix as u32);
        cloud_index[pix] = points.len() as u32;
        points.push(p);
        normals.push(n);
        let (u, v) = (pix % w, pix / w);
        bounds[obj as usize] = Some(match bounds[obj as usize] {
            None => (u, v, u, v),
            Some((u0, v0, u1, v1)) => (u0.min(u), v0.min(v), u1.max(u), v1.max(v)),
        });
    }

    if opts.normals == NormalSource::DepthGradient {
        let grad = depth_gradient_normals(&depth, &instance_ids, intr);
        for pix in 0..npix {
            if let (Some(n), i) = (grad[pix], cloud_index[pix]) {
                if i != NO_POINT {
                    normals[i as usize] = n;
                }
            }
        }
    }

    let bboxes = bounds
        .iter()
        .map(|b| {
            b.map(|(u0, v0, u1, v1)| BBox {
                x0: u0 as f64 / w as f64,
                y0: v0 as f64 / h as f64,
                x1: (u1 + 1) as f64 / w as f64,
                y1: (v1 + 1) as f64 / h as f64,
            })
        })
        .collect();
    let visibility = masks
        .iter()
        .zip(&unoccluded)
        .map(|(m, &a)| if a == 0 { 0.0 } else { (m.len() as f64 / a as f64).min(1.0) })
        .collect();

    Ok(Rendering {
        view_index,
        width: w,
        height: h,
        depth,
        instance_ids,
        masks,
        bboxes,
        visibility,
        unoccluded_pixels: unoccluded,
        scene_cloud: PointSet { points, normals },
        cloud_index,
    })
}

fn depth_gradient_normals(depth: &[f64], ids: &[Option<u32>], intr: &Intrinsics) -> Vec<Option<Vec3>> {
    let (w, h) = (intr.width, intr.height);
    let back = |pix: usize| {
        let (u, v) = ((pix % w) as f64 + 0.5, (pix / w) as f64 + 0.5);
        let z = depth[pix];
        Vec3::new((u - intr.cx) * z / intr.focal, (v - intr.cy) * z / intr.focal, z)
    };
    let mut out = vec![None; w * h];
    for v in 1..h.saturating_sub(1) {
        for u in 1..w.saturating_sub(1) {
            let pix = v * w + u;
            let Some(id) = ids[pix] else { continue };
            let nb = [pix - 1, pix + 1, pix - w, pix + w];
            if nb.iter().any(|&q| ids[q] != Some(id)) {
                continue;
            }
            let du = back(pix + 1) - back(pix - 1);
            let dv = back(pix + w) - back(pix - w);
            let mut n = du.cross(&dv);
            let len = n.norm();
            if len < 1e-12 {
                continue;
            }
            n /= len;
            if n.dot(&back(pix)) > 0.0 {
                n = -n;
            }
            out[pix] = Some(n);
        }
    }
    out
}

/// Per-view, per-object visibility plus the detectable object set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VisibilityTable {
    pub per_view: Vec<Vec<f64>>,
    /// Objects whose best visibility reaches [`DETECTABILITY_THRESHOLD`].
    pub detectable: Vec<usize>,
}

impl VisibilityTable {
    pub fn max_visibility(&self, object: usize) -> f64 {
        self.per_view.iter().map(|row| row[object]).fold(0.0, f64::max)
    }
}

pub fn visibility_profile(scene: &Scene, grid: &ViewGrid, intr: &Intrinsics) -> Result<VisibilityTable> {
    if scene.is_empty() {
        return Ok(VisibilityTable::default());
    }
    let rows = parallel::map_range(grid.len(), |v| render(scene, grid, v, intr).map(|r| r.visibility));
    let per_view = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let mut table = VisibilityTable {
        per_view,
        detectable: Vec::new(),
    };
    table.detectable = (0..scene.len())
        .filter(|&i| table.max_visibility(i) >= DETECTABILITY_THRESHOLD)
        .collect();
    Ok(table)
}
