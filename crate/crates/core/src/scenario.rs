//! Scenario files: arena geometry, start pose, and every tunable of the pipeline.

use std::path::Path;

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{FrameId, MinimapTransform, RigidTransform};
use crate::mapping::GridGeometry;
use crate::sim::{Aabb, DepthSensorConfig, Scene, SimConfig};

type Vec3 = Vector3<f64>;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BoxSpec {
    fn to_aabb(self) -> Aabb {
        Aabb::new(self.min.into(), self.max.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartSpec {
    pub position: [f64; 3],
    #[serde(default)]
    pub yaw_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub center: [f64; 3],
    pub extent: [f64; 3],
    pub resolution: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        // Centered so that the 1 m flight altitude falls on a voxel center.
        Self { center: [0.0, 0.0, 0.1], extent: [20.0, 20.0, 20.0], resolution: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinimapConfig {
    /// World meters per minimap meter.
    pub scale: f64,
    /// Pose of the minimap origin in `W`.
    pub translation: [f64; 3],
    pub yaw_deg: f64,
}

impl Default for MinimapConfig {
    fn default() -> Self {
        Self { scale: 20.0, translation: [0.0; 3], yaw_deg: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanningConfig {
    pub inflation_radius: f64,
    pub nominal_speed: f64,
    pub flight_altitude: f64,
    /// Largest distance a drawn waypoint may be moved to reach free space.
    pub repair_radius: f64,
    /// Clearance checked around each trajectory sample before dispatch.
    pub safety_margin: f64,
    /// Midpoint insertions tried before falling back to a stop-and-go trajectory.
    pub max_refinements: usize,
    /// Seed the map with the ground-truth scene instead of starting unknown.
    pub prior_map: bool,
}

impl Default for PlanningConfig {
    fn default() -> Self {
        Self {
            inflation_radius: 0.3,
            nominal_speed: 1.0,
            flight_altitude: 1.0,
            repair_radius: 2.0,
            safety_margin: 0.05,
            max_refinements: 8,
            prior_map: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSpec {
    pub dt: f64,
    pub tau: f64,
    pub v_max: f64,
    pub kp: f64,
    pub sensor_rate_hz: f64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self { dt: 0.02, tau: 0.3, v_max: 1.5, kp: 1.0, sensor_rate_hz: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorSpec {
    pub hfov_deg: f64,
    pub vfov_deg: f64,
    pub max_range: f64,
    pub cols: usize,
    pub rows: usize,
    pub mount_offset: [f64; 3],
    /// Downward tilt of the camera, degrees.
    pub mount_pitch_deg: f64,
    pub range_noise: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        let d = DepthSensorConfig::default();
        Self {
            hfov_deg: d.hfov_deg,
            vfov_deg: d.vfov_deg,
            max_range: d.max_range,
            cols: d.cols,
            rows: d.rows,
            mount_offset: [0.0; 3],
            mount_pitch_deg: 0.0,
            range_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Forward speed of the scripted teleoperator, m/s.
    pub teleop_speed: f64,
    /// Obstacle distance that triggers the teleoperator's avoidance turn, m.
    pub reflex_distance: f64,
    pub turn_rate: f64,
    /// Mean time between random heading changes, s.
    pub mean_turn_interval: f64,
    /// Frontier goals closer than this are skipped, m.
    pub min_goal_distance: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { teleop_speed: 1.0, reflex_distance: 1.0, turn_rate: 1.0, mean_turn_interval: 3.0, min_goal_distance: 1.0 }
    }
}

/// On-disk scenario description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub arena: BoxSpec,
    #[serde(default)]
    pub boxes: Vec<BoxSpec>,
    pub start: StartSpec,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub minimap: MinimapConfig,
    #[serde(default)]
    pub planning: PlanningConfig,
    #[serde(default)]
    pub sim: SimSpec,
    #[serde(default)]
    pub sensor: SensorSpec,
    #[serde(default)]
    pub policy: PolicyConfig,
}

/// Validated scenario with derived runtime objects.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub scene: Scene,
    pub geometry: GridGeometry,
    pub minimap: MinimapTransform<f64>,
    pub sensor: DepthSensorConfig,
    pub sim: SimConfig,
    /// Stable fingerprint of the source text.
    pub digest: u64,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile = toml::from_str(text)?;
        Self::from_file(file, fnv1a(text.as_bytes()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn from_file(file: ScenarioFile, digest: u64) -> Result<Self, ScenarioError> {
        let invalid = |e: &dyn std::fmt::Display| ScenarioError::Invalid(e.to_string());
        let scene = Scene::new(file.arena.to_aabb(), file.boxes.iter().map(|b| b.to_aabb()).collect())
            .map_err(|e| invalid(&e))?;
        let g = &file.grid;
        let geometry = GridGeometry::centered(g.center.into(), g.extent, g.resolution).map_err(|e| invalid(&e))?;
        let m = &file.minimap;
        let rigid = RigidTransform::from_yaw(FrameId::Wv, FrameId::W, m.yaw_deg.to_radians(), m.translation.into());
        let minimap = MinimapTransform::new(m.scale, rigid).map_err(|e| invalid(&e))?;
        let s = &file.sensor;
        let sensor = DepthSensorConfig {
            hfov_deg: s.hfov_deg,
            vfov_deg: s.vfov_deg,
            max_range: s.max_range,
            cols: s.cols,
            rows: s.rows,
            mount: Isometry3::from_parts(
                Translation3::from(Vec3::from(s.mount_offset)),
                UnitQuaternion::from_axis_angle(&Vector3::y_axis(), s.mount_pitch_deg.to_radians()),
            ),
            range_noise: s.range_noise,
        };
        sensor.validate().map_err(|e| invalid(&e))?;
        let sp = &file.sim;
        if !(sp.dt > 0.0 && sp.dt <= 0.1) {
            return Err(ScenarioError::Invalid(format!("sim dt {} outside (0, 0.1]", sp.dt)));
        }
        if !(sp.sensor_rate_hz > 0.0) || !(sp.tau > 0.0) || !(sp.v_max > 0.0) {
            return Err(ScenarioError::Invalid("sim rates, tau and v_max must be positive".into()));
        }
        let p = &file.planning;
        if !(p.nominal_speed > 0.0) || p.inflation_radius < 0.0 || p.safety_margin < 0.0 {
            return Err(ScenarioError::Invalid("planning speeds and radii must be non-negative".into()));
        }
        let sim = SimConfig { tau: sp.tau, v_max: sp.v_max, kp: sp.kp, dt: sp.dt };
        Ok(Self { file, scene, geometry, minimap, sensor, sim, digest })
    }

    pub fn name(&self) -> &str {
        &self.file.name
    }

    pub fn planning(&self) -> &PlanningConfig {
        &self.file.planning
    }

    pub fn policy(&self) -> &PolicyConfig {
        &self.file.policy
    }

    pub fn start_position(&self) -> Vec3 {
        self.file.start.position.into()
    }

    pub fn start_yaw(&self) -> f64 {
        self.file.start.yaw_deg.to_radians()
    }

    /// Simulation steps between sensor frames.
    pub fn sensor_period_steps(&self) -> u64 {
        ((1.0 / self.file.sim.sensor_rate_hz) / self.file.sim.dt).round().max(1.0) as u64
    }

    /// Multi-room building used for exploration comparisons.
    pub fn reference() -> Self {
        Self::from_toml(REFERENCE).expect("bundled reference scenario is valid")
    }

    /// Open 85 m2 floor without walls.
    pub fn open_floor() -> Self {
        Self::from_toml(OPEN_FLOOR).expect("bundled floor scenario is valid")
    }
}

pub const REFERENCE: &str = include_str!("../../../scenarios/reference.toml");
pub const OPEN_FLOOR: &str = include_str!("../../../scenarios/floor85.toml");

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
