//! TOML dataset manifests.
//!
//! ```toml
//! [[frames]]
//! frame_id = 0
//! ego_id = 0
//!
//! [[frames.agents]]
//! agent_id = 0
//! cloud = "clouds/f000000_a0.dspc"   # relative to the manifest
//! n_beams = 32
//! translation = [0.0, 0.0, 1.8]
//! quaternion = [1.0, 0.0, 0.0, 0.0]  # w, x, y, z; or `rotation` as 3 rows
//!
//! [[frames.gt_boxes]]                 # ego frame
//! center = [10.0, 2.0, -1.0]
//! size = [4.5, 1.9, 1.6]
//! yaw = 0.3
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::format::{read_cloud, write_cloud};
use crate::error::{Error, Result};
use crate::scene::{Agent, AgentId, BBox3D, Pose, Scene};

/// A loaded frame: the scene plus each agent's beam count.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_id: u64,
    pub scene: Scene,
    pub n_beams: BTreeMap<AgentId, usize>,
}

/// Serialized box, shared by manifests and prediction files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    #[serde(default)]
    pub class_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BoxRecord {
    pub fn to_box(&self) -> Result<BBox3D> {
        let b = BBox3D::new(Point3::from(self.center), Vector3::from(self.size), self.yaw)?
            .with_class(self.class_id);
        match self.score {
            Some(s) => b.with_score(s),
            None => Ok(b),
        }
    }
}

impl From<&BBox3D> for BoxRecord {
    fn from(b: &BBox3D) -> Self {
        Self {
            center: b.center.coords.into(),
            size: b.size.into(),
            yaw: b.yaw,
            class_id: b.class_id,
            score: b.score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentEntry {
    pub agent_id: u32,
    pub cloud: PathBuf,
    pub n_beams: usize,
    pub translation: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quaternion: Option<[f64; 4]>,
    /// Row-major rotation matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[[f64; 3]; 3]>,
}

impl AgentEntry {
    pub fn pose(&self) -> Result<Pose> {
        let t = Vector3::from(self.translation);
        match (self.quaternion, self.rotation) {
            (Some(q), None) => Pose::from_quaternion(q, t),
            (None, Some(m)) => Pose::new(
                Matrix3::from_row_slice(&m.iter().flatten().copied().collect::<Vec<_>>()),
                t,
            ),
            _ => Err(Error::Manifest(format!(
                "agent {} needs exactly one of `quaternion` or `rotation`",
                self.agent_id
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameManifest {
    pub frame_id: u64,
    pub ego_id: u32,
    pub agents: Vec<AgentEntry>,
    #[serde(default)]
    pub gt_boxes: Vec<BoxRecord>,
}

impl FrameManifest {
    fn validate(&self) -> Result<()> {
        let ids: BTreeSet<u32> = self.agents.iter().map(|a| a.agent_id).collect();
        if ids.len() != self.agents.len() {
            return Err(Error::Manifest(format!("frame {}: duplicate agent ids", self.frame_id)));
        }
        if !ids.contains(&self.ego_id) {
            return Err(Error::Manifest(format!(
                "frame {}: ego {} has no agent entry",
                self.frame_id, self.ego_id
            )));
        }
        Ok(())
    }

    /// Reads the clouds (relative to `base`) and builds the scene.
    pub fn load(&self, base: &Path) -> Result<Frame> {
        let wrap = |e: Error| e.in_frame(self.frame_id);
        self.validate().map_err(wrap)?;
        let mut agents = BTreeMap::new();
        let mut n_beams = BTreeMap::new();
        for a in &self.agents {
            let pose = a.pose().map_err(wrap)?;
            let cloud = read_cloud(&base.join(&a.cloud)).map_err(wrap)?;
            agents.insert(AgentId(a.agent_id), Agent { pose, cloud });
            n_beams.insert(AgentId(a.agent_id), a.n_beams);
        }
        let gt = self
            .gt_boxes
            .iter()
            .map(BoxRecord::to_box)
            .collect::<Result<Vec<_>>>()
            .map_err(wrap)?;
        let scene = Scene::new(AgentId(self.ego_id), agents, gt).map_err(wrap)?;
        Ok(Frame {
            frame_id: self.frame_id,
            scene,
            n_beams,
        })
    }
}

/// A list of frames plus the directory their cloud paths are relative to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default)]
    pub frames: Vec<FrameManifest>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m: DatasetManifest =
            toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.base_dir = base_dir.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    /// Parses and validates a manifest, checking that every cloud exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let m = Self::from_toml_str(&text, &base).map_err(|e| match e {
            Error::Manifest(msg) => Error::Manifest(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        for f in &m.frames {
            for a in &f.agents {
                let p = m.base_dir.join(&a.cloud);
                if !p.is_file() {
                    return Err(Error::Manifest(format!(
                        "frame {}: agent {} cloud {} does not exist",
                        f.frame_id,
                        a.agent_id,
                        p.display()
                    )));
                }
            }
        }
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for f in &self.frames {
            if !seen.insert(f.frame_id) {
                return Err(Error::Manifest(format!("duplicate frame id {}", f.frame_id)));
            }
            f.validate()?;
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn load_frame(&self, index: usize) -> Result<Frame> {
        self.frames[index].load(&self.base_dir)
    }

    pub fn load_all(&self) -> Result<Vec<Frame>> {
        (0..self.frames.len()).map(|i| self.load_frame(i)).collect()
    }

    /// Writes every agent cloud under `dir/clouds/` and the manifest to
    /// `dir/manifest.toml`. Rotations are stored as matrices so poses
    /// round-trip exactly.
    pub fn write(dir: &Path, frames: &[Frame]) -> Result<Self> {
        let mut entries = Vec::with_capacity(frames.len());
        for fr in frames {
            let mut agents = Vec::new();
            for (id, agent) in fr.scene.agents() {
                let rel = PathBuf::from("clouds").join(format!("f{:06}_a{}.dspc", fr.frame_id, id.0));
                write_cloud(&agent.cloud, &dir.join(&rel))?;
                let r = &agent.pose.rotation;
                agents.push(AgentEntry {
                    agent_id: id.0,
                    cloud: rel,
                    n_beams: fr.n_beams.get(id).copied().unwrap_or(0),
                    translation: agent.pose.translation.into(),
                    quaternion: None,
                    rotation: Some(std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)]))),
                });
            }
            entries.push(FrameManifest {
                frame_id: fr.frame_id,
                ego_id: fr.scene.ego_id().0,
                agents,
                gt_boxes: fr.scene.gt_boxes().iter().map(BoxRecord::from).collect(),
            });
        }
        let m = DatasetManifest {
            frames: entries,
            base_dir: dir.to_path_buf(),
        };
        let path = dir.join("manifest.toml");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        fs::write(&path, m.to_toml_string()).map_err(|e| Error::io(&path, e))?;
        Ok(m)
    }
}
