//! Rigid-body math, the hemisphere view grid, and nearest-neighbour search.

use std::f64::consts::{FRAC_PI_2, TAU};
use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, AplError, Result};

pub type Vec3 = Vector3<f64>;

/// Rigid transform: unit-quaternion rotation plus translation in mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRecord", into = "PoseRecord")]
pub struct Pose6D {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

/// Public on-disk form: position + quaternion (w, x, y, z).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PoseRecord {
    pub position: [f64; 3],
    pub quaternion: [f64; 4],
}

impl From<Pose6D> for PoseRecord {
    fn from(p: Pose6D) -> Self {
        let q = p.rotation.quaternion();
        PoseRecord {
            position: [p.translation.x, p.translation.y, p.translation.z],
            quaternion: [q.w, q.i, q.j, q.k],
        }
    }
}

impl TryFrom<PoseRecord> for Pose6D {
    type Error = AplError;

    fn try_from(r: PoseRecord) -> Result<Self> {
        let [w, x, y, z] = r.quaternion;
        let q = nalgebra::Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(invalid("pose quaternion has zero or non-finite norm"));
        }
        Ok(Pose6D {
            rotation: UnitQuaternion::new_normalize(q),
            translation: Vec3::new(r.position[0], r.position[1], r.position[2]),
        })
    }
}

impl Default for Pose6D {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose6D {
    pub fn identity() -> Self {
        Pose6D {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Pose6D {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let rotation = match Unit::try_new(axis, 1e-12) {
            Some(axis) => UnitQuaternion::from_axis_angle(&axis, angle),
            None => UnitQuaternion::identity(),
        };
        Self::new(rotation, Vec3::zeros())
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose6D) -> Pose6D {
        let q = self.rotation.quaternion() * other.rotation.quaternion();
        Pose6D {
            rotation: UnitQuaternion::new_normalize(q),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose6D {
        let inv = self.rotation.inverse();
        Pose6D {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    /// `1 - |<q1, q2>|`; zero iff the rotations are equal.
    pub fn rotation_distance(&self, other: &Pose6D) -> f64 {
        1.0 - self.rotation.coords.dot(&other.rotation.coords).abs()
    }
}

/// `pose ∘ ps`: points rotated and translated, normals rotated.
pub fn transform_points(pose: &Pose6D, ps: &PointSet) -> PointSet {
    PointSet {
        points: ps.points.iter().map(|p| pose.transform_point(p)).collect(),
        normals: ps.normals.iter().map(|n| pose.rotate(n)).collect(),
    }
}

/// Points with parallel unit normals, in mm.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointSet {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
}

impl PointSet {
    pub fn new(points: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self> {
        if points.len() != normals.len() {
            return Err(invalid(format!(
                "{} points but {} normals",
                points.len(),
                normals.len()
            )));
        }
        if let Some(n) = normals.iter().find(|n| (n.norm() - 1.0).abs() > 1e-6) {
            return Err(invalid(format!("normal {n:?} is not unit length")));
        }
        Ok(PointSet { points, normals })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        if self.points.is_empty() {
            return Vec3::zeros();
        }
        self.points.iter().sum::<Vec3>() / self.points.len() as f64
    }

    /// Writes `x y z nx ny nz` rows.
    pub fn write_xyz<W: Write>(&self, mut w: W) -> Result<()> {
        for (p, n) in self.points.iter().zip(&self.normals) {
            writeln!(w, "{} {} {} {} {} {}", p.x, p.y, p.z, n.x, n.y, n.z)?;
        }
        Ok(())
    }

    pub fn read_xyz<R: BufRead>(r: R) -> Result<Self> {
        let mut points = Vec::new();
        let mut normals = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| AplError::Format(format!("line {}: {e}", lineno + 1)))?;
            if vals.len() != 6 {
                return Err(AplError::Format(format!(
                    "line {}: expected 6 values, got {}",
                    lineno + 1,
                    vals.len()
                )));
            }
            points.push(Vec3::new(vals[0], vals[1], vals[2]));
            normals.push(Vec3::new(vals[3], vals[4], vals[5]));
        }
        PointSet::new(points, normals)
    }
}

/// One camera placement on the view hemisphere.
#[derive(Clone, Debug)]
pub struct Viewpoint {
    pub azimuth: f64,
    pub elevation: f64,
    pub position: Vec3,
    pub camera_from_world: Pose6D,
    pub world_from_camera: Pose6D,
}

/// Hemisphere of look-at cameras: `elevation_levels` rings of
/// `azimuth_levels` cameras. Index = ring * azimuth_levels + azimuth step,
/// so index 0 is the lowest ring at azimuth 0.
#[derive(Clone, Debug)]
pub struct ViewGrid {
    pub radius: f64,
    pub azimuth_levels: usize,
    pub elevation_levels: usize,
    pub center: Vec3,
    pub viewpoints: Vec<Viewpoint>,
}

impl ViewGrid {
    pub fn build(radius: f64, az_levels: usize, el_levels: usize, center: Vec3) -> Result<Self> {
        if az_levels == 0 || el_levels == 0 {
            return Err(invalid("view grid needs at least one azimuth and elevation level"));
        }
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(invalid(format!("view grid radius must be positive, got {radius}")));
        }
        let mut viewpoints = Vec::with_capacity(az_levels * el_levels);
        for k in 0..el_levels {
            let elevation = (k + 1) as f64 * FRAC_PI_2 / (el_levels + 1) as f64;
            for j in 0..az_levels {
                let azimuth = TAU * j as f64 / az_levels as f64;
                let position = center + radius * direction(azimuth, elevation);
                let world_from_camera = look_at(&position, &center);
                viewpoints.push(Viewpoint {
                    azimuth,
                    elevation,
                    position,
                    camera_from_world: world_from_camera.inverse(),
                    world_from_camera,
                });
            }
        }
        Ok(ViewGrid {
            radius,
            azimuth_levels: az_levels,
            elevation_levels: el_levels,
            center,
            viewpoints,
        })
    }

    /// 800 mm radius, 20 azimuths x 5 elevations, centred at the origin.
    pub fn standard() -> Self {
        Self::build(800.0, 20, 5, Vec3::zeros()).expect("valid standard grid")
    }

    pub fn len(&self) -> usize {
        self.viewpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.viewpoints.is_empty()
    }

    pub fn view(&self, i: usize) -> &Viewpoint {
        &self.viewpoints[i]
    }

    /// Lowest and highest ring elevation.
    pub fn elevation_band(&self) -> (f64, f64) {
        let step = FRAC_PI_2 / (self.elevation_levels + 1) as f64;
        (step, self.elevation_levels as f64 * step)
    }

    /// Unit vector from the centre to camera `i`.
    pub fn unit_direction(&self, i: usize) -> Vec3 {
        (self.viewpoints[i].position - self.center) / self.radius
    }

    /// Grid index whose direction makes the smallest central angle with
    /// the requested one. Azimuth wraps; elevation is clamped to the band.
    pub fn closest_viewpoint(&self, azimuth: f64, elevation: f64) -> usize {
        let (lo, hi) = self.elevation_band();
        let az = wrap_angle(azimuth);
        let el = if elevation.is_nan() { lo } else { elevation.clamp(lo, hi) };
        let az = if az.is_nan() { 0.0 } else { az };
        let d = direction(az, el);
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for i in 0..self.viewpoints.len() {
            let dot = d.dot(&self.unit_direction(i));
            if dot > best_dot {
                best_dot = dot;
                best = i;
            }
        }
        best
    }

    /// Great-circle distance between two cameras, in mm.
    pub fn geodesic_distance(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let a = self.unit_direction(i);
        let b = self.unit_direction(j);
        self.radius * a.cross(&b).norm().atan2(a.dot(&b))
    }

    /// Largest possible geodesic distance on the sphere, used for scaling.
    pub fn diameter(&self) -> f64 {
        2.0 * self.radius
    }
}

/// Unit direction for an (azimuth, elevation) pair.
pub fn direction(azimuth: f64, elevation: f64) -> Vec3 {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    Vec3::new(ce * ca, ce * sa, se)
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// World-from-camera pose of a camera at `eye` looking at `target`.
/// Camera axes: z forward, y down in the image, x right. "Up" is world z
/// projected into the image plane, or world x when looking straight along z.
pub fn look_at(eye: &Vec3, target: &Vec3) -> Pose6D {
    let forward = (target - eye).normalize();
    let mut up = Vec3::z();
    if forward.dot(&up).abs() > 1.0 - 1e-6 {
        up = Vec3::x();
    }
    let up_proj = (up - forward * up.dot(&forward)).normalize();
    let y = -up_proj;
    let x = y.cross(&forward);
    let m = Matrix3::from_columns(&[x, y, forward]);
    let rot = Rotation3::from_matrix_unchecked(m);
    Pose6D::new(UnitQuaternion::from_rotation_matrix(&rot), *eye)
}

/// A uniformly random rotation.
pub fn random_rotation<R: rand::Rng + ?Sized>(rng: &mut R) -> UnitQuaternion<f64> {
    use rand_distr::StandardNormal;
    loop {
        let w: f64 = rng.sample(StandardNormal);
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        let q = nalgebra::Quaternion::new(w, x, y, z);
        if q.norm() > 1e-9 {
            return UnitQuaternion::new_normalize(q);
        }
    }
}

/// A uniformly random unit vector.
pub fn random_unit_vector<R: rand::Rng + ?Sized>(rng: &mut R) -> Vec3 {
    use rand_distr::StandardNormal;
    loop {
        let v = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Result of a nearest-neighbour lookup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub point: Vec3,
    pub normal: Vec3,
    pub distance: f64,
}

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static kd-tree over a [`PointSet`]. Ties resolve to the lowest point
/// index, so results match a linear scan exactly.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    cloud: PointSet,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl NeighborIndex {
    pub fn build(cloud: PointSet) -> Self {
        let mut order: Vec<usize> = (0..cloud.len()).collect();
        let mut nodes = Vec::new();
        if !order.is_empty() {
            let n = order.len();
            build_node(&cloud.points, &mut order, 0, n, &mut nodes);
        }
        NeighborIndex { cloud, order, nodes }
    }

    pub fn cloud(&self) -> &PointSet {
        &self.cloud
    }

    /// Nearest stored point regardless of distance.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        Some((best.0, best.1.sqrt()))
    }

    /// Nearest stored point if it lies strictly closer than `eps`.
    pub fn nn_query(&self, q: &Vec3, eps: f64) -> Option<Neighbor> {
        if self.nodes.is_empty() || !(eps > 0.0) {
            return None;
        }
        // Seeding the bound with eps^2 prunes everything farther away.
        let mut best = (usize::MAX, eps * eps);
        self.search(0, q, &mut best);
        let (index, distance) = (best.0, best.1.sqrt());
        (index != usize::MAX && distance < eps).then(|| Neighbor {
            index,
            point: self.cloud.points[index],
            normal: self.cloud.normals[index],
            distance,
        })
    }

    fn search(&self, node: usize, q: &Vec3, best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = (self.cloud.points[i] - q).norm_squared();
                    if d2 < best.1 || (d2 == best.1 && i < best.0) {
                        *best = (i, d2);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

fn build_node(points: &[Vec3], order: &mut [usize], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let slice = &mut order[start..end];
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for &i in slice.iter() {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let axis = (hi - lo).imax();
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let value = points[slice[mid]][axis];
    nodes.push(Node::Leaf { start, end });
    // Everything left of `mid` is <= value, everything from `mid` on is >= value.
    let left = build_node(points, order, start, start + mid, nodes);
    let right = build_node(points, order, start + mid, end, nodes);
    nodes[id] = Node::Split { axis, value, left, right };
    id
}

/// Smallest absolute angular difference between two azimuths.
pub fn azimuth_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rz(deg: f64) -> Pose6D {
        Pose6D::from_axis_angle(Vec3::z(), deg.to_radians())
    }

    #[test]
    fn identity_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Pose6D::new(random_rotation(&mut rng), Vec3::new(3.0, -2.0, 7.0));
        let c = Pose6D::identity().compose(&p);
        assert!(c.rotation_distance(&p) < 1e-12);
        assert_abs_diff_eq!(c.translation, p.translation, epsilon = 1e-12);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let p = Pose6D::new(
                random_rotation(&mut rng),
                Vec3::new(rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0)),
            );
            let id = p.compose(&p.inverse());
            assert!(id.translation.norm() < 1e-6);
            assert!(id.rotation_distance(&Pose6D::identity()) < 1e-9);
        }
    }

    #[test]
    fn quarter_turns_add() {
        let r = rz(90.0).compose(&rz(90.0));
        assert!(r.rotation_distance(&rz(180.0)) < 1e-12);
    }

    #[test]
    fn transform_points_cases() {
        let ps = PointSet::new(vec![Vec3::zeros(), Vec3::x()], vec![Vec3::z(), Vec3::x()]).unwrap();
        assert_eq!(transform_points(&Pose6D::identity(), &ps), ps);

        let moved = transform_points(&Pose6D::from_translation(Vec3::x()), &ps);
        assert_abs_diff_eq!(moved.points[0], Vec3::x(), epsilon = 1e-12);
        assert_abs_diff_eq!(moved.normals[0], Vec3::z(), epsilon = 1e-12);

        let turned = transform_points(&rz(180.0), &ps);
        assert_abs_diff_eq!(turned.points[1], -Vec3::x(), epsilon = 1e-12);
    }

    #[test]
    fn composition_drift_stays_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut acc = Pose6D::identity();
        for _ in 0..1_000_000 {
            let step = Pose6D::from_axis_angle(random_unit_vector(&mut rng), rng.gen_range(-PI..PI));
            acc = acc.compose(&step);
        }
        assert!((acc.rotation.quaternion().norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn composition_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let mk = |rng: &mut ChaCha8Rng| {
                Pose6D::new(random_rotation(rng), Vec3::new(rng.gen(), rng.gen(), rng.gen()) * 100.0)
            };
            let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            assert!(l.rotation_distance(&r) < 1e-12);
            assert_abs_diff_eq!(l.translation, r.translation, epsilon = 1e-9);
        }
    }

    #[test]
    fn grid_shape_and_hemisphere() {
        let g = ViewGrid::standard();
        assert_eq!(g.len(), 100);
        for v in &g.viewpoints {
            assert!((v.position.norm() - 800.0).abs() < 1e-6);
            assert!(v.position.z > 0.0);
            // optical axis passes through the centre
            let axis = v.world_from_camera.rotate(&Vec3::z());
            let to_center = (g.center - v.position).normalize();
            assert!((axis - to_center).norm() < 1e-9);
            // centre projects onto the principal point
            let c = v.camera_from_world.transform_point(&g.center);
            assert!(c.x.abs() < 1e-6 && c.y.abs() < 1e-6 && (c.z - 800.0).abs() < 1e-6);
        }
        let single = ViewGrid::build(800.0, 1, 1, Vec3::zeros()).unwrap();
        assert_eq!(single.len(), 1);
        assert!(ViewGrid::build(800.0, 0, 5, Vec3::zeros()).is_err());
        assert!(ViewGrid::build(800.0, 20, 0, Vec3::zeros()).is_err());
        assert!(ViewGrid::build(-1.0, 20, 5, Vec3::zeros()).is_err());
    }

    #[test]
    fn camera_up_points_up_in_image() {
        let g = ViewGrid::standard();
        for v in &g.viewpoints {
            // world z appears "up" = negative image y
            let up_cam = v.camera_from_world.rotate(&Vec3::z());
            assert!(up_cam.y < 0.0);
            assert!(up_cam.x.abs() < 1e-9);
        }
        // straight down: falls back to world x
        let p = look_at(&Vec3::new(0.0, 0.0, 800.0), &Vec3::zeros());
        assert!((p.rotate(&Vec3::z()) + Vec3::z()).norm() < 1e-9);
    }

    #[test]
    fn closest_viewpoint_exact_and_wrapped() {
        let g = ViewGrid::standard();
        for (i, v) in g.viewpoints.iter().enumerate() {
            assert_eq!(g.closest_viewpoint(v.azimuth, v.elevation), i);
            assert_eq!(g.closest_viewpoint(v.azimuth + TAU, v.elevation), i);
            assert_eq!(g.closest_viewpoint(v.azimuth - 3.0 * TAU, v.elevation), i);
        }
        // clamped below the lowest ring
        assert_eq!(g.closest_viewpoint(0.0, -1.0), 0);
        assert_eq!(g.closest_viewpoint(0.0, 10.0), 80);
    }

    fn linear_closest(g: &ViewGrid, az: f64, el: f64) -> usize {
        let (lo, hi) = g.elevation_band();
        let d = direction(az, el.clamp(lo, hi));
        let mut best = (0, f64::INFINITY);
        for i in 0..g.len() {
            let p = g.viewpoints[i].position / g.radius;
            let ang = d.dot(&p).clamp(-1.0, 1.0).acos();
            if ang < best.1 {
                best = (i, ang);
            }
        }
        best.0
    }

    #[test]
    fn closest_viewpoint_matches_linear_scan() {
        let g = ViewGrid::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let az = rng.gen_range(-10.0..10.0);
            let el = rng.gen_range(-0.5..2.0);
            let got = g.closest_viewpoint(az, el);
            let want = linear_closest(&g, az, el);
            if got != want {
                // only acceptable as an exact angular tie
                let d = direction(wrap_angle(az), el.clamp(g.elevation_band().0, g.elevation_band().1));
                let a = d.dot(&g.unit_direction(got));
                let b = d.dot(&g.unit_direction(want));
                assert!((a - b).abs() < 1e-12, "{got} vs {want}");
            }
        }
    }

    fn polyline_geodesic(g: &ViewGrid, i: usize, j: usize) -> f64 {
        // slerp the path and sum chord lengths
        let a = g.unit_direction(i);
        let b = g.unit_direction(j);
        let omega = a.dot(&b).clamp(-1.0, 1.0).acos();
        if omega < 1e-15 {
            return 0.0;
        }
        let n = 200_000;
        let mut prev = a;
        let mut total = 0.0;
        for s in 1..=n {
            let t = s as f64 / n as f64;
            let p = (a * ((1.0 - t) * omega).sin() + b * (t * omega).sin()) / omega.sin();
            total += (p - prev).norm();
            prev = p;
        }
        total * g.radius
    }

    #[test]
    fn geodesic_cases() {
        let g = ViewGrid::standard();
        assert_eq!(g.geodesic_distance(7, 7), 0.0);
        let eq = ViewGrid::build(800.0, 2, 1, Vec3::zeros()).unwrap();
        // both cameras on the same ring, opposite azimuths
        let e = eq.viewpoints[0].elevation;
        let chord_angle = PI - 2.0 * e;
        assert!((eq.geodesic_distance(0, 1) - 800.0 * chord_angle).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let i = rng.gen_range(0..100);
            let j = rng.gen_range(0..100);
            let want = polyline_geodesic(&g, i, j);
            assert!((g.geodesic_distance(i, j) - want).abs() < 1e-6, "{i} {j}");
            assert_eq!(g.geodesic_distance(i, j), g.geodesic_distance(j, i));
        }
    }

    #[test]
    fn geodesic_great_circle_half_turn() {
        // Build a single pair at elevation 0 by hand: positions ±x.
        let r = 800.0;
        let a = Vec3::x();
        let b = -Vec3::x();
        let d = r * a.cross(&b).norm().atan2(a.dot(&b));
        assert!((d - PI * r).abs() < 1e-9);
    }

    #[test]
    fn geodesic_triangle_inequality() {
        let g = ViewGrid::standard();
        for i in 0..g.len() {
            for j in 0..g.len() {
                let dij = g.geodesic_distance(i, j);
                if i != j {
                    assert!(dij > 0.0);
                }
                for k in (0..g.len()).step_by(7) {
                    assert!(dij <= g.geodesic_distance(i, k) + g.geodesic_distance(k, j) + 1e-9);
                }
            }
        }
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointSet {
        let pts: Vec<Vec3> = (0..n)
            .map(|_| Vec3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)))
            .collect();
        let nrm = (0..n).map(|_| random_unit_vector(rng)).collect();
        PointSet::new(pts, nrm).unwrap()
    }

    fn linear_nn(ps: &PointSet, q: &Vec3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in ps.points.iter().enumerate() {
            let d = (p - q).norm();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    #[test]
    fn nn_query_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ps = random_cloud(&mut rng, 500);
        let idx = NeighborIndex::build(ps.clone());
        let hit = idx.nn_query(&ps.points[42], 1.0).unwrap();
        assert_eq!(hit.index, 42);
        assert_eq!(hit.distance, 0.0);
        assert!(idx.nn_query(&Vec3::new(1000.0, 0.0, 0.0), 5.0).is_none());
        for _ in 0..1000 {
            let q = Vec3::new(rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0));
            let (i, d) = linear_nn(&ps, &q);
            let (gi, gd) = idx.nearest(&q).unwrap();
            assert_eq!(gi, i);
            assert!((gd - d).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_index() {
        let idx = NeighborIndex::build(PointSet::default());
        assert!(idx.nearest(&Vec3::zeros()).is_none());
    }

    #[test]
    fn xyz_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ps = random_cloud(&mut rng, 20);
        let mut buf = Vec::new();
        ps.write_xyz(&mut buf).unwrap();
        let back = PointSet::read_xyz(&buf[..]).unwrap();
        assert_eq!(back, ps);
        assert!(PointSet::read_xyz(&b"1 2 3\n"[..]).is_err());
    }

    #[test]
    fn pose_json_round_trip() {
        let p = Pose6D::new(UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3), Vec3::new(1.0, 2.0, 3.0));
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("position") && s.contains("quaternion"));
        let back: Pose6D = serde_json::from_str(&s).unwrap();
        assert!(back.rotation_distance(&p) < 1e-15);
        assert_eq!(back.translation, p.translation);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn nn_matches_linear_scan(seed in 0u64..10_000, n in 1usize..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ps = random_cloud(&mut rng, n);
            let idx = NeighborIndex::build(ps.clone());
            for _ in 0..20 {
                let q = Vec3::new(rng.gen_range(-70.0..70.0), rng.gen_range(-70.0..70.0), rng.gen_range(-70.0..70.0));
                let (i, d) = linear_nn(&ps, &q);
                let (gi, gd) = idx.nearest(&q).unwrap();
                prop_assert_eq!(gi, i);
                prop_assert!((gd - d).abs() < 1e-12);
            }
        }

        #[test]
        fn closest_viewpoint_wrap_invariant(az in -20.0f64..20.0, el in -1.0f64..2.5, k in -5i32..5) {
            let g = ViewGrid::standard();
            prop_assert_eq!(g.closest_viewpoint(az, el), g.closest_viewpoint(az + k as f64 * TAU, el));
        }
    }
}
