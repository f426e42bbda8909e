//! Ray-cast synthetic collaborative scenes.
//!
//! The world has a ground plane at z = 0 and car-sized boxes resting on it.
//! Agents sit on a circle around the origin with their sensor
//! `sensor_height` above the ground; each agent's cloud is expressed in its
//! own sensor frame. Every ray returns its nearest hit (ground or box), so
//! boxes occlude what lies behind them. Box hits are pushed a millimetre
//! into the box so that object points are strictly contained.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Point3, Vector3};
use rand::Rng;

use super::manifest::Frame;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, stage};
use crate::scene::{Agent, AgentId, BBox3D, PointCloud, Pose, Scene};

pub const CAR_SIZE: [f64; 3] = [4.5, 1.9, 1.6];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_agents: usize,
    pub n_objects: usize,
    pub points_per_beam: usize,
    pub n_beams: usize,
    pub seed: u64,
    /// Agents are placed at this distance from the origin (± 2.5 m).
    pub agent_radius: f64,
    /// Objects are placed within this distance from the origin.
    pub object_radius: f64,
    pub sensor_height: f64,
    pub max_range: f64,
    /// Elevation of the lowest and highest beam, in degrees.
    pub elevation_deg: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_agents: 3,
            n_objects: 16,
            points_per_beam: 360,
            n_beams: 32,
            seed: 0,
            agent_radius: 17.5,
            object_radius: 55.0,
            sensor_height: 1.8,
            max_range: 100.0,
            elevation_deg: (-25.0, 3.0),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::Parameter("at least one agent is required".into()));
        }
        if self.n_beams == 0 || self.n_beams > u16::MAX as usize || self.points_per_beam == 0 {
            return Err(Error::Parameter("beam and azimuth counts must be positive".into()));
        }
        let positive = [self.object_radius, self.sensor_height, self.max_range];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || !(self.agent_radius >= 0.0) {
            return Err(Error::Parameter("radii, sensor height and range must be positive".into()));
        }
        let (lo, hi) = self.elevation_deg;
        if !(lo < hi && lo > -90.0 && hi < 90.0) {
            return Err(Error::Parameter(format!("bad elevation span {lo}..{hi}")));
        }
        Ok(())
    }
}

/// Entry and exit ray parameters of `o + t·d` through a box, if any.
fn ray_box(o: &Point3<f64>, d: &Vector3<f64>, b: &BBox3D) -> Option<(f64, f64)> {
    let (s, c) = b.yaw.sin_cos();
    let rel = o - b.center;
    let lo = Vector3::new(c * rel.x + s * rel.y, -s * rel.x + c * rel.y, rel.z);
    let ld = Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z);
    let half = b.size / 2.0;
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if ld[k].abs() < 1e-12 {
            if lo[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let a = (-half[k] - lo[k]) / ld[k];
        let bb = (half[k] - lo[k]) / ld[k];
        t0 = t0.max(a.min(bb));
        t1 = t1.min(a.max(bb));
    }
    (t0 <= t1 && t1 > 0.0).then_some((t0.max(0.0), t1))
}

fn place_agents(spec: &SynthSpec, rng: &mut impl Rng) -> Vec<Pose> {
    let phase = rng.random_range(0.0..2.0 * PI);
    (0..spec.n_agents)
        .map(|k| {
            let theta = phase + 2.0 * PI * k as f64 / spec.n_agents as f64 + rng.random_range(-0.2..0.2);
            let r = (spec.agent_radius + rng.random_range(-2.5..2.5)).max(0.0);
            let yaw = rng.random_range(-PI..PI);
            Pose::from_yaw(yaw, Vector3::new(r * theta.cos(), r * theta.sin(), spec.sensor_height))
        })
        .collect()
}

fn place_objects(spec: &SynthSpec, agents: &[Pose], rng: &mut impl Rng) -> Result<Vec<BBox3D>> {
    let size = Vector3::from(CAR_SIZE);
    let clearance = size.x.hypot(size.y) + 0.5;
    let mut boxes: Vec<BBox3D> = Vec::with_capacity(spec.n_objects);
    let mut attempts = 0;
    while boxes.len() < spec.n_objects {
        attempts += 1;
        if attempts > 1000 * spec.n_objects.max(1) {
            return Err(Error::Parameter(format!(
                "could not place {} non-overlapping objects within {} m",
                spec.n_objects, spec.object_radius
            )));
        }
        let r = spec.object_radius * rng.random::<f64>().sqrt();
        let theta = rng.random_range(0.0..2.0 * PI);
        let yaw = rng.random_range(-PI..PI);
        let (x, y) = (r * theta.cos(), r * theta.sin());
        let far_from_boxes = boxes
            .iter()
            .all(|b| (b.center.x - x).hypot(b.center.y - y) > clearance);
        let far_from_agents = agents
            .iter()
            .all(|a| (a.translation.x - x).hypot(a.translation.y - y) > clearance);
        if far_from_boxes && far_from_agents {
            boxes.push(BBox3D::new(Point3::new(x, y, size.z / 2.0), size, yaw)?);
        }
    }
    Ok(boxes)
}

/// Scans the world from `pose`; points are returned in the sensor frame
/// with the generating ring as beam index.
fn scan(spec: &SynthSpec, pose: &Pose, world_boxes: &[BBox3D], rng: &mut impl Rng) -> Result<PointCloud> {
    let (lo, hi) = spec.elevation_deg;
    let az_phase = rng.random_range(0.0..2.0 * PI / spec.points_per_beam as f64);
    let o = Point3::from(pose.translation);
    let to_sensor = pose.inverse();
    let mut positions = Vec::new();
    let mut reflectance = Vec::new();
    let mut beams = Vec::new();
    for ring in 0..spec.n_beams {
        let elev = if spec.n_beams == 1 {
            lo.to_radians()
        } else {
            (lo + (hi - lo) * ring as f64 / (spec.n_beams - 1) as f64).to_radians()
        };
        for k in 0..spec.points_per_beam {
            let az = az_phase + 2.0 * PI * k as f64 / spec.points_per_beam as f64;
            let local = Vector3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin());
            let d = pose.rotation * local;
            let mut best: Option<(f64, bool)> = None;
            if d.z < 0.0 {
                best = Some((-o.z / d.z, false));
            }
            for b in world_boxes {
                if let Some((t0, t1)) = ray_box(&o, &d, b) {
                    let t = (t0 + 1e-3).min(0.5 * (t0 + t1));
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, true));
                    }
                }
            }
            let Some((t, on_box)) = best else { continue };
            if t > spec.max_range {
                continue;
            }
            positions.push(to_sensor.apply(&(o + d * t)));
            reflectance.push(if on_box {
                rng.random_range(0.5..0.9)
            } else {
                rng.random_range(0.15..0.25)
            });
            beams.push(ring as u16);
        }
    }
    PointCloud::new(positions, reflectance)?.with_beams(beams)
}

/// One deterministic frame. Agent 0 is the ego; ground-truth boxes are in
/// the ego frame.
pub fn generate_frame(spec: &SynthSpec, frame_id: u64) -> Result<Frame> {
    spec.validate()?;
    let mut layout = rng_from_seed(derive_seed(spec.seed, &[stage::SCENE_LAYOUT, frame_id]));
    let poses = place_agents(spec, &mut layout);
    let world_boxes = place_objects(spec, &poses, &mut layout)?;

    let mut agents = BTreeMap::new();
    let mut n_beams = BTreeMap::new();
    for (k, pose) in poses.iter().enumerate() {
        let mut rng = rng_from_seed(derive_seed(spec.seed, &[stage::SCENE_SCAN, frame_id, k as u64]));
        let cloud = scan(spec, pose, &world_boxes, &mut rng)?;
        agents.insert(AgentId(k as u32), Agent { pose: *pose, cloud });
        n_beams.insert(AgentId(k as u32), spec.n_beams);
    }
    let to_ego = poses[0].inverse();
    let gt = world_boxes.iter().map(|b| b.transformed(&to_ego)).collect();
    Ok(Frame {
        frame_id,
        scene: Scene::new(AgentId(0), agents, gt)?,
        n_beams,
    })
}

/// Frames `0..n_frames`.
pub fn generate_dataset(spec: &SynthSpec, n_frames: usize) -> Result<Vec<Frame>> {
    (0..n_frames as u64).map(|f| generate_frame(spec, f)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::points_in_any_box;

    fn small() -> SynthSpec {
        SynthSpec {
            n_objects: 4,
            points_per_beam: 90,
            n_beams: 16,
            seed: 5,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn empty_world_is_ground_only() {
        let spec = SynthSpec { n_objects: 0, ..small() };
        let f = generate_frame(&spec, 0).unwrap();
        for agent in f.scene.agents().values() {
            assert!(!agent.cloud.is_empty());
            for p in agent.cloud.positions() {
                let w = agent.pose.apply(p);
                assert!(w.z.abs() < 1e-9, "z = {}", w.z);
            }
        }
    }

    #[test]
    fn object_points_lie_in_boxes() {
        let f = generate_frame(&small(), 3).unwrap();
        let ego = f.scene.ego().pose;
        let mut inside = 0;
        for agent in f.scene.agents().values() {
            let boxes = crate::teacher::boxes_in_agent_frame(f.scene.gt_boxes(), &ego, &agent.pose);
            let flags = points_in_any_box(&agent.cloud, &boxes);
            for (i, &fl) in flags.iter().enumerate() {
                // reflectance ranges separate ground and car returns
                assert_eq!(fl, agent.cloud.reflectance()[i] >= 0.5);
            }
            inside += flags.iter().filter(|&&b| b).count();
        }
        assert!(inside > 0);
    }

    #[test]
    fn deterministic() {
        let a = generate_frame(&small(), 1).unwrap();
        let b = generate_frame(&small(), 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_frame(&small(), 2).unwrap());
        assert_eq!(a.scene.gt_boxes().len(), 4);
        assert_eq!(a.scene.agents().len(), 3);
    }

    #[test]
    fn ray_box_hits() {
        let b = BBox3D::new(Point3::new(10.0, 0.0, 0.0), Vector3::new(2.0, 2.0, 2.0), 0.0).unwrap();
        let (t0, t1) = ray_box(&Point3::origin(), &Vector3::x(), &b).unwrap();
        assert!((t0 - 9.0).abs() < 1e-12 && (t1 - 11.0).abs() < 1e-12);
        assert!(ray_box(&Point3::origin(), &-Vector3::x(), &b).is_none());
        assert!(ray_box(&Point3::origin(), &Vector3::y(), &b).is_none());
    }

    #[test]
    fn impossible_layout_is_an_error() {
        let spec = SynthSpec { n_objects: 200, object_radius: 5.0, ..small() };
        assert!(generate_frame(&spec, 0).is_err());
    }
}
