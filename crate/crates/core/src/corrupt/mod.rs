//! Seeded LiDAR corruption simulators.
//!
//! Six operators cover sensor failures (beam missing, crosstalk, cross
//! sensor), ego motion (motion blur) and adverse weather (fog, snow). Each is
//! a pure function of `(cloud, params, seed)`. Operators that work per beam
//! require beam indices; [`CorruptionConfig::apply`] fills them in by
//! elevation binning when the input lacks them.

mod beams;
mod fog;
mod noise;
mod snow;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stage};
use crate::scene::PointCloud;

pub use beams::{assign_beams, beam_missing, cross_sensor, occupied_beams};
pub use fog::{fog, fog_hard_intensity, fog_soft_intensity, FogParams};
pub use noise::{crosstalk, motion_blur};
pub use snow::{sample_snow_particles, snow, snow_with_particles, Aabb, SnowParams};

/// Tolerance applied before flooring/ceiling a fractional point count, so
/// that e.g. `0.29 * 100` counts as 29 rather than 28.
const COUNT_EPS: f64 = 1e-9;

pub(crate) fn floor_count(x: f64) -> usize {
    (x + COUNT_EPS).floor().max(0.0) as usize
}

pub(crate) fn ceil_count(x: f64) -> usize {
    (x - COUNT_EPS).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    BeamMissing,
    MotionBlur,
    Fog,
    Snow,
    Crosstalk,
    CrossSensor,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::BeamMissing,
        CorruptionKind::MotionBlur,
        CorruptionKind::Fog,
        CorruptionKind::Snow,
        CorruptionKind::Crosstalk,
        CorruptionKind::CrossSensor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::BeamMissing => "beam_missing",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::Fog => "fog",
            CorruptionKind::Snow => "snow",
            CorruptionKind::Crosstalk => "crosstalk",
            CorruptionKind::CrossSensor => "cross_sensor",
        }
    }

    fn label(self) -> u64 {
        self as u64 + 1
    }

    /// Weather corruptions, reported separately in robustness summaries.
    pub fn is_weather(self) -> bool {
        matches!(self, CorruptionKind::Fog | CorruptionKind::Snow)
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_n_drop() -> usize {
    16
}
fn default_blur_sigma() -> f64 {
    0.2
}
fn default_crosstalk_fraction() -> f64 {
    0.01
}
fn default_crosstalk_sigma() -> f64 {
    3.0
}
fn default_keep_every() -> usize {
    2
}
fn default_subsample() -> f64 {
    0.5
}

/// Per-kind parameters; the `kind` key selects the variant in suite files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Corruption {
    BeamMissing {
        #[serde(default = "default_n_drop")]
        n_drop: usize,
    },
    MotionBlur {
        #[serde(default = "default_blur_sigma")]
        sigma: f64,
    },
    Fog(FogParams),
    Snow(SnowParams),
    Crosstalk {
        #[serde(default = "default_crosstalk_fraction")]
        fraction: f64,
        #[serde(default = "default_crosstalk_sigma")]
        sigma: f64,
    },
    CrossSensor {
        #[serde(default = "default_keep_every")]
        keep_every_kth_beam: usize,
        #[serde(default = "default_subsample")]
        point_subsample_ratio: f64,
    },
}

impl Corruption {
    pub fn kind(&self) -> CorruptionKind {
        match self {
            Corruption::BeamMissing { .. } => CorruptionKind::BeamMissing,
            Corruption::MotionBlur { .. } => CorruptionKind::MotionBlur,
            Corruption::Fog(_) => CorruptionKind::Fog,
            Corruption::Snow(_) => CorruptionKind::Snow,
            Corruption::Crosstalk { .. } => CorruptionKind::Crosstalk,
            Corruption::CrossSensor { .. } => CorruptionKind::CrossSensor,
        }
    }

    /// The benchmark setting for each kind.
    pub fn standard(kind: CorruptionKind) -> Self {
        match kind {
            CorruptionKind::BeamMissing => Corruption::BeamMissing { n_drop: 16 },
            CorruptionKind::MotionBlur => Corruption::MotionBlur { sigma: 0.2 },
            CorruptionKind::Fog => Corruption::Fog(FogParams::default()),
            CorruptionKind::Snow => Corruption::Snow(SnowParams::default()),
            CorruptionKind::Crosstalk => Corruption::Crosstalk {
                fraction: 0.01,
                sigma: 3.0,
            },
            CorruptionKind::CrossSensor => Corruption::CrossSensor {
                keep_every_kth_beam: 2,
                point_subsample_ratio: 0.5,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Parameter(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Parameter(format!("{name} = {v} must be finite and >= 0")))
            }
        };
        match self {
            Corruption::BeamMissing { .. } => Ok(()),
            Corruption::MotionBlur { sigma } => nonneg("sigma", *sigma),
            Corruption::Fog(p) => p.validate(),
            Corruption::Snow(p) => p.validate(),
            Corruption::Crosstalk { fraction, sigma } => {
                prob("fraction", *fraction)?;
                nonneg("sigma", *sigma)
            }
            Corruption::CrossSensor {
                keep_every_kth_beam,
                point_subsample_ratio,
            } => {
                if *keep_every_kth_beam < 1 {
                    return Err(Error::Parameter("keep_every_kth_beam must be >= 1".into()));
                }
                if !(*point_subsample_ratio > 0.0 && *point_subsample_ratio <= 1.0) {
                    return Err(Error::Parameter(format!(
                        "point_subsample_ratio = {point_subsample_ratio} must lie in (0, 1]"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Applies the operator with an explicit seed. Per-beam operators need
    /// beam indices on `cloud`.
    pub fn apply_with_seed(&self, cloud: &PointCloud, seed: u64) -> Result<PointCloud> {
        match self {
            Corruption::BeamMissing { n_drop } => beam_missing(cloud, *n_drop, seed),
            Corruption::MotionBlur { sigma } => motion_blur(cloud, *sigma, seed),
            Corruption::Fog(p) => fog(cloud, p, seed),
            Corruption::Snow(p) => snow(cloud, p, seed),
            Corruption::Crosstalk { fraction, sigma } => crosstalk(cloud, *fraction, *sigma, seed),
            Corruption::CrossSensor {
                keep_every_kth_beam,
                point_subsample_ratio,
            } => cross_sensor(cloud, *keep_every_kth_beam, *point_subsample_ratio, seed),
        }
    }
}

/// One entry of a corruption suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    /// Report label; defaults to the kind name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(flatten)]
    pub corruption: Corruption,
}

impl CorruptionConfig {
    pub fn new(corruption: Corruption, seed: u64) -> Self {
        Self {
            name: None,
            seed,
            corruption,
        }
    }

    pub fn kind(&self) -> CorruptionKind {
        self.corruption.kind()
    }

    pub fn label(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| self.kind().as_str().to_string())
    }

    /// Seed for one agent in one frame: the config seed is split by
    /// `(frame, agent, kind)` so every invocation draws from its own stream.
    pub fn stream_seed(&self, frame_id: u64, agent_id: u32) -> u64 {
        derive_seed(
            self.seed,
            &[stage::CORRUPTION, frame_id, agent_id as u64, self.kind().label()],
        )
    }

    /// Corrupts one agent's cloud. Beam indices are assigned from
    /// `n_beams` elevation bins when missing; an empty cloud stays empty.
    pub fn apply(
        &self,
        cloud: &PointCloud,
        n_beams: usize,
        frame_id: u64,
        agent_id: u32,
    ) -> Result<PointCloud> {
        self.corruption.validate()?;
        if cloud.is_empty() {
            return Ok(cloud.clone());
        }
        let needs_beams = matches!(
            self.corruption,
            Corruption::BeamMissing { .. } | Corruption::CrossSensor { .. }
        );
        let with_beams;
        let input = if needs_beams && cloud.beams().is_none() {
            with_beams = assign_beams(cloud, n_beams)?;
            &with_beams
        } else {
            cloud
        };
        self.corruption
            .apply_with_seed(input, self.stream_seed(frame_id, agent_id))
    }
}

/// An ordered list of corruption settings, read from a TOML document with
/// one `[[corruption]]` table per entry.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSuite {
    #[serde(default, rename = "corruption")]
    pub corruptions: Vec<CorruptionConfig>,
}

impl CorruptionSuite {
    /// All six kinds at their benchmark settings, sharing `seed`.
    pub fn standard(seed: u64) -> Self {
        Self {
            corruptions: CorruptionKind::ALL
                .iter()
                .map(|&k| CorruptionConfig::new(Corruption::standard(k), seed))
                .collect(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let suite: Self =
            toml::from_str(text).map_err(|e| Error::Manifest(format!("corruption suite: {e}")))?;
        suite.validate()?;
        Ok(suite)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Manifest(m) => Error::format(path, m),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("suite serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.corruptions {
            c.corruption.validate()?;
            if !seen.insert(c.label()) {
                return Err(Error::Manifest(format!(
                    "duplicate corruption label '{}'; set `name` to disambiguate",
                    c.label()
                )));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.corruptions.is_empty()
    }
}
