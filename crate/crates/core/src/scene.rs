//! Multi-agent scene model: point clouds, poses, oriented boxes.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix3, Point2, Point3, Rotation3, Unit, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;

/// A LiDAR point cloud stored column-wise.
///
/// Semantic indicators and beam indices are optional columns, so a cloud is
/// either uniformly 4-tuple `(x, y, z, r)` or uniformly painted 5-tuple
/// `(x, y, z, r, s)`; beams ride along as metadata in both cases.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    positions: Vec<Point3<f64>>,
    reflectance: Vec<f64>,
    semantic: Option<Vec<bool>>,
    beams: Option<Vec<u16>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Point3<f64>>, reflectance: Vec<f64>) -> Result<Self> {
        if positions.len() != reflectance.len() {
            return Err(Error::InvalidCloud(format!(
                "{} positions but {} reflectance values",
                positions.len(),
                reflectance.len()
            )));
        }
        if let Some(i) = positions
            .iter()
            .position(|p| !p.coords.iter().all(|c| c.is_finite()))
        {
            return Err(Error::InvalidCloud(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(i) = reflectance.iter().position(|r| !r.is_finite()) {
            return Err(Error::InvalidCloud(format!("point {i} has non-finite reflectance")));
        }
        Ok(Self {
            positions,
            reflectance,
            semantic: None,
            beams: None,
        })
    }

    /// An empty cloud with the same columns as `self`.
    pub fn empty_like(&self) -> Self {
        Self {
            positions: Vec::new(),
            reflectance: Vec::new(),
            semantic: self.semantic.as_ref().map(|_| Vec::new()),
            beams: self.beams.as_ref().map(|_| Vec::new()),
        }
    }

    pub fn with_semantic(mut self, semantic: Vec<bool>) -> Result<Self> {
        if semantic.len() != self.len() {
            return Err(Error::InvalidCloud(format!(
                "{} semantic flags for {} points",
                semantic.len(),
                self.len()
            )));
        }
        self.semantic = Some(semantic);
        Ok(self)
    }

    pub fn with_beams(mut self, beams: Vec<u16>) -> Result<Self> {
        if beams.len() != self.len() {
            return Err(Error::InvalidCloud(format!(
                "{} beam indices for {} points",
                beams.len(),
                self.len()
            )));
        }
        self.beams = Some(beams);
        Ok(self)
    }

    pub fn without_semantic(mut self) -> Self {
        self.semantic = None;
        self
    }

    pub fn without_beams(mut self) -> Self {
        self.beams = None;
        self
    }

    /// Replaces coordinates, keeping every other column.
    pub(crate) fn with_positions(mut self, positions: Vec<Point3<f64>>) -> Self {
        debug_assert_eq!(positions.len(), self.positions.len());
        self.positions = positions;
        self
    }

    pub(crate) fn with_reflectance(mut self, reflectance: Vec<f64>) -> Self {
        debug_assert_eq!(reflectance.len(), self.reflectance.len());
        self.reflectance = reflectance;
        self
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point3<f64>] {
        &self.positions
    }

    pub fn reflectance(&self) -> &[f64] {
        &self.reflectance
    }

    pub fn semantic(&self) -> Option<&[bool]> {
        self.semantic.as_deref()
    }

    pub fn beams(&self) -> Option<&[u16]> {
        self.beams.as_deref()
    }

    pub fn is_painted(&self) -> bool {
        self.semantic.is_some()
    }

    /// 4 for raw clouds, 5 for painted ones.
    pub fn arity(&self) -> u8 {
        if self.is_painted() {
            5
        } else {
            4
        }
    }

    /// Keeps the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            reflectance: indices.iter().map(|&i| self.reflectance[i]).collect(),
            semantic: self
                .semantic
                .as_ref()
                .map(|s| indices.iter().map(|&i| s[i]).collect()),
            beams: self
                .beams
                .as_ref()
                .map(|b| indices.iter().map(|&i| b[i]).collect()),
        }
    }

    /// Keeps the points whose mask entry is true, preserving order.
    pub fn filter(&self, keep: &[bool]) -> Self {
        let idx: Vec<usize> = keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect();
        self.select(&idx)
    }

    fn extend_from(&mut self, other: &PointCloud) {
        self.positions.extend_from_slice(&other.positions);
        self.reflectance.extend_from_slice(&other.reflectance);
        if let (Some(dst), Some(src)) = (self.semantic.as_mut(), other.semantic.as_ref()) {
            dst.extend_from_slice(src);
        }
        match (self.beams.as_mut(), other.beams.as_ref()) {
            (Some(dst), Some(src)) => dst.extend_from_slice(src),
            _ => self.beams = None,
        }
    }
}

/// Rigid transform from an agent's local frame into the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    /// Rotation about +z by `yaw`, then translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix(),
            translation,
        }
    }

    /// Builds a pose from a `(w, x, y, z)` quaternion, which must be unit-norm
    /// within 1e-6.
    pub fn from_quaternion(wxyz: [f64; 4], translation: Vector3<f64>) -> Result<Self> {
        let [w, x, y, z] = wxyz;
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidPose(format!(
                "quaternion norm {norm} is not 1 within 1e-6"
            )));
        }
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
        Self::new(*q.to_rotation_matrix().matrix(), translation)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entry".into()));
        }
        let gram = self.rotation.transpose() * self.rotation;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > ORTHONORMAL_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation is not orthonormal (|RᵀR − I| = {dev:e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidPose(format!("rotation determinant is {det}")));
        }
        Ok(())
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// The transform taking coordinates in `src`'s frame to `dst`'s frame.
    pub fn relative(src: &Pose, dst: &Pose) -> Self {
        dst.inverse().compose(src)
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Heading of the rotated x axis in the xy-plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }
}

/// Maps `yaw` into (−π, π].
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut a = yaw.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    // rem_euclid maps −π to π already; this catches a == −π after rounding
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// An oriented box with yaw about +z.
///
/// `size = (w, l, h)` are the extents along the box's local x, y and z axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox3D {
    pub center: Point3<f64>,
    pub size: Vector3<f64>,
    pub yaw: f64,
    pub class_id: u32,
    pub score: Option<f64>,
}

impl BBox3D {
    pub fn new(center: Point3<f64>, size: Vector3<f64>, yaw: f64) -> Result<Self> {
        if !center.coords.iter().chain(size.iter()).all(|v| v.is_finite()) || !yaw.is_finite() {
            return Err(Error::InvalidBox("non-finite field".into()));
        }
        if size.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidBox(format!(
                "size components must be positive, got ({}, {}, {})",
                size.x, size.y, size.z
            )));
        }
        Ok(Self {
            center,
            size,
            yaw: normalize_yaw(yaw),
            class_id: 0,
            score: None,
        })
    }

    pub fn with_class(mut self, class_id: u32) -> Self {
        self.class_id = class_id;
        self
    }

    pub fn with_score(mut self, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidBox(format!("score {score} outside [0, 1]")));
        }
        self.score = Some(score);
        Ok(self)
    }

    /// Closed-interval containment in the box frame.
    pub fn contains(&self, p: &Point3<f64>) -> bool {
        let d = p - self.center;
        let (s, c) = self.yaw.sin_cos();
        let x = c * d.x + s * d.y;
        let y = -s * d.x + c * d.y;
        x.abs() <= 0.5 * self.size.x && y.abs() <= 0.5 * self.size.y && d.z.abs() <= 0.5 * self.size.z
    }

    /// Closed containment of an xy location in the BEV footprint.
    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let dx = x - self.center.x;
        let dy = y - self.center.y;
        let (s, c) = self.yaw.sin_cos();
        (c * dx + s * dy).abs() <= 0.5 * self.size.x && (-s * dx + c * dy).abs() <= 0.5 * self.size.y
    }

    /// BEV footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [Point2<f64>; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hw = 0.5 * self.size.x;
        let hl = 0.5 * self.size.y;
        [(hw, hl), (-hw, hl), (-hw, -hl), (hw, -hl)].map(|(lx, ly)| {
            Point2::new(
                self.center.x + c * lx - s * ly,
                self.center.y + s * lx + c * ly,
            )
        })
    }

    pub fn bev_area(&self) -> f64 {
        self.size.x * self.size.y
    }

    /// The same physical box expressed through the rigid transform `t`.
    pub fn transformed(&self, t: &Pose) -> Self {
        Self {
            center: t.apply(&self.center),
            yaw: normalize_yaw(self.yaw + t.yaw()),
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub pose: Pose,
    pub cloud: PointCloud,
}

/// One collaborative frame. Ground-truth boxes are in the ego frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    ego_id: AgentId,
    agents: BTreeMap<AgentId, Agent>,
    gt_boxes: Vec<BBox3D>,
}

impl Scene {
    pub fn new(
        ego_id: AgentId,
        agents: BTreeMap<AgentId, Agent>,
        gt_boxes: Vec<BBox3D>,
    ) -> Result<Self> {
        if !agents.contains_key(&ego_id) {
            return Err(Error::Manifest(format!("ego agent {ego_id} is not in the scene")));
        }
        for (id, agent) in &agents {
            agent
                .pose
                .validate()
                .map_err(|e| Error::InvalidPose(format!("agent {id}: {e}")))?;
        }
        Ok(Self {
            ego_id,
            agents,
            gt_boxes,
        })
    }

    pub fn ego_id(&self) -> AgentId {
        self.ego_id
    }

    pub fn ego(&self) -> &Agent {
        &self.agents[&self.ego_id]
    }

    pub fn agents(&self) -> &BTreeMap<AgentId, Agent> {
        &self.agents
    }

    pub fn gt_boxes(&self) -> &[BBox3D] {
        &self.gt_boxes
    }

    /// Collaborators, in id order, excluding the ego.
    pub fn neighbors(&self) -> impl Iterator<Item = (&AgentId, &Agent)> {
        let ego = self.ego_id;
        self.agents.iter().filter(move |(id, _)| **id != ego)
    }

    /// Replaces every agent's cloud through `f`, keeping poses and boxes.
    pub fn map_clouds<F>(&self, mut f: F) -> Result<Scene>
    where
        F: FnMut(AgentId, &Agent) -> Result<PointCloud>,
    {
        let agents = self
            .agents
            .iter()
            .map(|(&id, a)| {
                Ok((
                    id,
                    Agent {
                        pose: a.pose,
                        cloud: f(id, a)?,
                    },
                ))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Scene { agents, ..self.clone() })
    }

    /// Keeps the ego plus agents within `radius` meters (3D distance
    /// between pose translations).
    pub fn gate_by_range(&self, radius: f64) -> Scene {
        let ego_t = self.ego().pose.translation;
        let agents = self
            .agents
            .iter()
            .filter(|(id, a)| **id == self.ego_id || (a.pose.translation - ego_t).norm() <= radius)
            .map(|(id, a)| (*id, a.clone()))
            .collect();
        Scene {
            ego_id: self.ego_id,
            agents,
            gt_boxes: self.gt_boxes.clone(),
        }
    }
}

/// Maps `cloud` from `src`'s frame into `dst`'s frame.
pub fn transform_points(cloud: &PointCloud, src: &Pose, dst: &Pose) -> Result<PointCloud> {
    src.validate()?;
    dst.validate()?;
    let rel = Pose::relative(src, dst);
    let positions = cloud.positions().iter().map(|p| rel.apply(p)).collect();
    Ok(cloud.clone().with_positions(positions))
}

/// Concatenates clouds in order. Mixed painted/unpainted inputs are rejected;
/// beam indices survive only if every input carries them.
pub fn aggregate<'a, I>(clouds: I) -> Result<PointCloud>
where
    I: IntoIterator<Item = &'a PointCloud>,
{
    let mut iter = clouds.into_iter();
    let Some(first) = iter.next() else {
        return Ok(PointCloud::default());
    };
    let mut out = first.clone();
    for c in iter {
        if c.is_painted() != out.is_painted() {
            return Err(Error::ArityMismatch(format!(
                "cannot aggregate {}-tuple and {}-tuple clouds",
                out.arity(),
                c.arity()
            )));
        }
        out.extend_from(c);
    }
    Ok(out)
}

pub fn points_in_box(cloud: &PointCloud, bbox: &BBox3D) -> Vec<bool> {
    cloud.positions().iter().map(|p| bbox.contains(p)).collect()
}

/// True for points inside at least one of `boxes`.
pub fn points_in_any_box(cloud: &PointCloud, boxes: &[BBox3D]) -> Vec<bool> {
    cloud
        .positions()
        .iter()
        .map(|p| boxes.iter().any(|b| b.contains(p)))
        .collect()
}

/// Unit rotation about an arbitrary axis; handy for tests and fixtures.
pub fn rotation_about(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).matrix()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(
            pts.iter().map(|p| Point3::from(*p)).collect(),
            vec![0.5; pts.len()],
        )
        .unwrap()
    }

    #[test]
    fn transform_identity_and_translation() {
        let c = cloud(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]);
        let p = Pose::from_yaw(0.3, Vector3::new(4.0, 5.0, 6.0));
        assert_eq!(transform_points(&c, &p, &p).unwrap().positions(), c.positions());

        let dst = Pose::from_yaw(0.0, Vector3::new(1.0, 2.0, 3.0));
        let out = transform_points(&c, &Pose::identity(), &dst).unwrap();
        assert_eq!(out.positions()[1], Point3::new(-1.0, -2.0, -3.0));
    }

    #[test]
    fn transform_rotation() {
        let c = cloud(&[[1.0, 0.0, 0.0]]);
        let src = Pose::from_yaw(FRAC_PI_2, Vector3::zeros());
        let out = transform_points(&c, &src, &Pose::identity()).unwrap();
        assert_abs_diff_eq!(out.positions()[0].x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.positions()[0].y, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn transform_preserves_metadata() {
        let c = cloud(&[[1.0, 0.0, 0.0], [2.0, 0.0, 1.0]])
            .with_semantic(vec![true, false])
            .unwrap()
            .with_beams(vec![3, 7])
            .unwrap();
        let out = transform_points(&c, &Pose::from_yaw(1.0, Vector3::x()), &Pose::identity()).unwrap();
        assert_eq!(out.semantic(), c.semantic());
        assert_eq!(out.beams(), c.beams());
        assert_eq!(out.reflectance(), c.reflectance());
    }

    #[test]
    fn invalid_pose_rejected() {
        let bad = Pose {
            rotation: Matrix3::identity() * 2.0,
            translation: Vector3::zeros(),
        };
        let c = cloud(&[[0.0, 0.0, 0.0]]);
        assert!(matches!(
            transform_points(&c, &bad, &Pose::identity()),
            Err(Error::InvalidPose(_))
        ));
        let reflection = Pose {
            rotation: Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)),
            translation: Vector3::zeros(),
        };
        assert!(reflection.validate().is_err());
        assert!(Pose::from_quaternion([1.0, 0.1, 0.0, 0.0], Vector3::zeros()).is_err());
    }

    #[test]
    fn aggregate_counts_and_order() {
        let a = cloud(&[[0.0; 3], [1.0; 3], [2.0; 3]]);
        let b = cloud(&[[3.0; 3], [4.0; 3], [5.0; 3], [6.0; 3], [7.0; 3]]);
        let out = aggregate([&a, &b]).unwrap();
        assert_eq!(out.len(), 8);
        assert_eq!(out.positions()[3], Point3::new(3.0, 3.0, 3.0));

        let empty = PointCloud::default();
        assert_eq!(aggregate([&empty, &b]).unwrap(), b);
    }

    #[test]
    fn aggregate_disjoint_ranges_keep_input_order() {
        let make = |x0: f64| {
            let pts: Vec<[f64; 3]> = (0..100).map(|i| [x0 + i as f64 * 0.01, 0.0, 0.0]).collect();
            cloud(&pts)
        };
        let clouds = [make(20.0), make(0.0), make(10.0)];
        let out = aggregate(&clouds).unwrap();
        assert_eq!(out.len(), 300);
        for (k, c) in clouds.iter().enumerate() {
            assert_eq!(&out.positions()[k * 100..(k + 1) * 100], c.positions());
        }
    }

    #[test]
    fn aggregate_rejects_mixed_arity() {
        let a = cloud(&[[0.0; 3]]);
        let b = cloud(&[[1.0; 3]]).with_semantic(vec![true]).unwrap();
        assert!(matches!(aggregate([&a, &b]), Err(Error::ArityMismatch(_))));
    }

    #[test]
    fn gate_boundaries() {
        let mut agents = BTreeMap::new();
        let c = cloud(&[[0.0; 3]]);
        agents.insert(AgentId(0), Agent { pose: Pose::identity(), cloud: c.clone() });
        let ego_only = Scene::new(AgentId(0), agents.clone(), vec![]).unwrap();
        assert_eq!(ego_only.gate_by_range(70.0), ego_only);

        agents.insert(
            AgentId(1),
            Agent { pose: Pose::from_yaw(0.0, Vector3::new(69.9, 0.0, 0.0)), cloud: c.clone() },
        );
        agents.insert(
            AgentId(2),
            Agent { pose: Pose::from_yaw(0.0, Vector3::new(0.0, 70.1, 0.0)), cloud: c.clone() },
        );
        let scene = Scene::new(AgentId(0), agents, vec![]).unwrap();
        let gated = scene.gate_by_range(70.0);
        let ids: Vec<u32> = gated.agents().keys().map(|a| a.0).collect();
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn box_containment_rules() {
        let b = BBox3D::new(Point3::new(1.0, 2.0, 0.5), Vector3::new(4.0, 2.0, 1.0), 0.7).unwrap();
        assert!(b.contains(&b.center));
        // corner on the +x' face, expressed in world coordinates; land it
        // just inside to absorb rounding in the rotation
        let (s, c) = b.yaw.sin_cos();
        let face = b.center + Vector3::new(c, s, 0.0) * (2.0 - 1e-12);
        assert!(b.contains(&face));

        let unit = BBox3D::new(Point3::origin(), Vector3::new(1.0, 1.0, 1.0), 0.0).unwrap();
        assert!(!unit.contains(&Point3::new(0.6, 0.0, 0.0)));
        assert!(unit.contains(&Point3::new(0.5, 0.0, 0.0)));
        assert!(unit.contains(&Point3::new(0.5, -0.5, 0.5)));
    }

    #[test]
    fn box_validation_and_yaw() {
        assert!(BBox3D::new(Point3::origin(), Vector3::new(0.0, 1.0, 1.0), 0.0).is_err());
        let b = BBox3D::new(Point3::origin(), Vector3::new(1.0, 1.0, 1.0), -PI).unwrap();
        assert_eq!(b.yaw, PI);
        assert_abs_diff_eq!(normalize_yaw(3.0 * PI + 0.1), -PI + 0.1, epsilon = 1e-12);
        assert!(b.with_score(1.2).is_err());
    }
}
