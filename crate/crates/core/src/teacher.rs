//! Teacher point clouds: multi-view aggregation, object-region
//! densification and ground-truth painting.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scene::{aggregate, points_in_any_box, transform_points, AgentId, BBox3D, PointCloud, Pose, Scene};

/// Every collaborator's cloud mapped into `anchor`'s frame, followed by the
/// anchor's own cloud.
fn multiview_in_frame(scene: &Scene, anchor: AgentId) -> Result<PointCloud> {
    let target = &scene.agents()[&anchor];
    let mut clouds = Vec::with_capacity(scene.agents().len());
    for (id, agent) in scene.agents() {
        if *id != anchor {
            clouds.push(transform_points(&agent.cloud, &agent.pose, &target.pose)?);
        }
    }
    clouds.push(target.cloud.clone());
    aggregate(&clouds)
}

/// Dense multi-view scene in the ego frame: collaborators (in id order)
/// transformed to the ego, then the ego cloud.
pub fn build_multiview(scene: &Scene) -> Result<PointCloud> {
    multiview_in_frame(scene, scene.ego_id())
}

/// Background of `sparse` plus the object points of `dense`.
pub fn replace_object_regions(
    sparse: &PointCloud,
    dense: &PointCloud,
    boxes: &[BBox3D],
) -> Result<PointCloud> {
    if boxes.is_empty() {
        return Ok(sparse.clone());
    }
    let background: Vec<bool> = points_in_any_box(sparse, boxes).iter().map(|&b| !b).collect();
    let objects = dense.filter(&points_in_any_box(dense, boxes));
    aggregate([&sparse.filter(&background), &objects])
}

/// Adds the semantic indicator: 1 inside any box, 0 elsewhere.
pub fn paint(cloud: &PointCloud, boxes: &[BBox3D]) -> Result<PointCloud> {
    if cloud.is_painted() {
        return Err(Error::ArityMismatch("cloud is already painted".into()));
    }
    cloud.clone().with_semantic(points_in_any_box(cloud, boxes))
}

/// Ground-truth boxes (ego frame) expressed in `agent_pose`'s frame.
pub fn boxes_in_agent_frame(boxes: &[BBox3D], ego_pose: &Pose, agent_pose: &Pose) -> Vec<BBox3D> {
    let rel = Pose::relative(ego_pose, agent_pose);
    boxes.iter().map(|b| b.transformed(&rel)).collect()
}

/// One painted teacher cloud per agent, each in its own agent's frame.
pub fn make_teacher(scene: &Scene) -> Result<BTreeMap<AgentId, PointCloud>> {
    let ego_pose = scene.ego().pose;
    scene
        .agents()
        .iter()
        .map(|(&id, agent)| {
            let dense = multiview_in_frame(scene, id)?;
            let boxes = boxes_in_agent_frame(scene.gt_boxes(), &ego_pose, &agent.pose);
            let raw = agent.cloud.clone().without_semantic();
            let replaced = replace_object_regions(&raw, &dense.without_semantic(), &boxes)?;
            Ok((id, paint(&replaced, &boxes)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{points_in_box, Agent};
    use nalgebra::{Point3, Vector3};

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| Point3::from(*p)).collect(), vec![0.2; pts.len()]).unwrap()
    }

    fn unit_box() -> BBox3D {
        BBox3D::new(Point3::new(10.0, 0.0, 0.0), Vector3::new(2.0, 2.0, 2.0), 0.0).unwrap()
    }

    #[test]
    fn single_agent_multiview_is_ego_cloud() {
        let c = cloud(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let mut agents = BTreeMap::new();
        agents.insert(AgentId(3), Agent { pose: Pose::from_yaw(0.4, Vector3::x()), cloud: c.clone() });
        let scene = Scene::new(AgentId(3), agents, vec![]).unwrap();
        assert_eq!(build_multiview(&scene).unwrap(), c);
    }

    #[test]
    fn translated_neighbor_is_shifted_then_concatenated() {
        let ego = cloud(&[[0.0, 0.0, 0.0]]);
        let other = cloud(&[[1.0, 1.0, 1.0], [2.0, 0.0, 0.0]]);
        let mut agents = BTreeMap::new();
        agents.insert(AgentId(0), Agent { pose: Pose::from_yaw(0.0, Vector3::new(5.0, 0.0, 0.0)), cloud: ego.clone() });
        agents.insert(AgentId(1), Agent { pose: Pose::identity(), cloud: other });
        let scene = Scene::new(AgentId(0), agents, vec![]).unwrap();
        let out = build_multiview(&scene).unwrap();
        assert_eq!(out.positions(), &[
            Point3::new(-4.0, 1.0, 1.0),
            Point3::new(-3.0, 0.0, 0.0),
            Point3::new(0.0, 0.0, 0.0),
        ]);
    }

    #[test]
    fn replacement_counts() {
        let b = unit_box();
        let mut sparse_pts: Vec<[f64; 3]> = (0..100).map(|i| [-(i as f64) - 1.0, 0.0, 0.0]).collect();
        sparse_pts.extend((0..5).map(|i| [10.0 + 0.1 * i as f64, 0.0, 0.0]));
        let mut dense_pts: Vec<[f64; 3]> = (0..40).map(|i| [9.5 + 0.02 * i as f64, 0.5, 0.0]).collect();
        dense_pts.extend((0..30).map(|i| [30.0 + i as f64, 0.0, 0.0]));
        let sparse = cloud(&sparse_pts);
        let dense = cloud(&dense_pts);

        let in_sparse = points_in_box(&sparse, &b).iter().filter(|&&x| x).count();
        let in_dense = points_in_box(&dense, &b).iter().filter(|&&x| x).count();
        assert_eq!((in_sparse, in_dense), (5, 40));

        let out = replace_object_regions(&sparse, &dense, &[b]).unwrap();
        assert_eq!(out.len(), 140);
        assert_eq!(replace_object_regions(&sparse, &dense, &[]).unwrap(), sparse);
    }

    #[test]
    fn replacement_with_itself_is_a_permutation() {
        let c = cloud(&[[10.0, 0.0, 0.0], [0.0, 0.0, 0.0], [10.5, 0.5, 0.5], [-3.0, 1.0, 0.0]]);
        let out = replace_object_regions(&c, &c, &[unit_box()]).unwrap();
        let key = |p: &Point3<f64>| (p.x.to_bits(), p.y.to_bits(), p.z.to_bits());
        let mut a: Vec<_> = out.positions().iter().map(key).collect();
        let mut b: Vec<_> = c.positions().iter().map(key).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn paint_flags() {
        let c = cloud(&[[10.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert_eq!(paint(&c, &[]).unwrap().semantic().unwrap(), &[false, false]);
        let painted = paint(&c, &[unit_box()]).unwrap();
        assert_eq!(painted.semantic().unwrap(), &[true, false]);
        assert_eq!(painted.clone().without_semantic(), c);
        assert!(matches!(paint(&painted, &[]), Err(Error::ArityMismatch(_))));
    }

    #[test]
    fn single_agent_no_boxes_teacher_is_painted_raw() {
        let c = cloud(&[[1.0, 0.0, 0.0], [2.0, 3.0, 0.0]]);
        let mut agents = BTreeMap::new();
        agents.insert(AgentId(0), Agent { pose: Pose::identity(), cloud: c.clone() });
        let scene = Scene::new(AgentId(0), agents, vec![]).unwrap();
        let t = make_teacher(&scene).unwrap();
        assert_eq!(t[&AgentId(0)], c.with_semantic(vec![false, false]).unwrap());
    }
}
