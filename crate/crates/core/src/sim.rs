//! Simulated drone with a first-order velocity lag, and a depth camera
//! raycasting against axis-aligned boxes.

use nalgebra::{Isometry3, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{DroneState, FrameId, RigidTransform};
use crate::mapping::{CloudSource, PointCloud};
use crate::trajectory::{feasible_time_scale, PolynomialTrajectory};

type Vec3 = Vector3<f64>;

/// Fraction of `v_max` that a tracked reference may ask for, lag feedforward included.
pub const FEEDFORWARD_MARGIN: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("box {0} lies outside the arena bounds")]
    BoxOutOfBounds(usize),
    #[error("box {0} has min corner above max corner")]
    InvalidBox(usize),
    #[error("time step must lie in (0, 0.1] s, got {0}")]
    InvalidStep(f64),
    #[error("velocity commands need Velocity mode, drone is in {0:?}")]
    ModeError(FlightMode),
    #[error("invalid sensor configuration: {0}")]
    InvalidSensor(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        self.contains(&other.min) && self.contains(&other.max)
    }

    /// Entry distance of the ray `o + t d` (slab method). `None` when the ray
    /// misses, starts inside, or the box lies behind the origin.
    pub fn ray_entry(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if d[a] == 0.0 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let (mut lo, mut hi) = ((self.min[a] - o[a]) * inv, (self.max[a] - o[a]) * inv);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }

    /// Distance from `p` to the box surface, zero on the boundary.
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        let outside = Vec3::from_fn(|a, _| (self.min[a] - p[a]).max(p[a] - self.max[a]).max(0.0));
        if outside.norm() > 0.0 {
            outside.norm()
        } else {
            (0..3)
                .map(|a| (p[a] - self.min[a]).min(self.max[a] - p[a]))
                .fold(f64::INFINITY, f64::min)
        }
    }
}

/// Ground-truth world: arena bounds and static obstacle boxes (walls and floor included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub bounds: Aabb,
    pub boxes: Vec<Aabb>,
}

impl Scene {
    pub fn new(bounds: Aabb, boxes: Vec<Aabb>) -> Result<Self, SimError> {
        for (i, b) in boxes.iter().enumerate() {
            if (0..3).any(|a| b.min[a] > b.max[a]) {
                return Err(SimError::InvalidBox(i));
            }
            if !bounds.contains_box(b) {
                return Err(SimError::BoxOutOfBounds(i));
            }
        }
        Ok(Self { bounds, boxes })
    }

    /// Nearest hit distance along a unit ray, within `max_range`.
    pub fn raycast(&self, o: &Vec3, d: &Vec3, max_range: f64) -> Option<f64> {
        self.boxes
            .iter()
            .filter_map(|b| b.ray_entry(o, d))
            .filter(|&t| t <= max_range)
            .fold(None, |best: Option<f64>, t| Some(best.map_or(t, |b| b.min(t))))
    }

    pub fn is_occupied(&self, p: &Vec3) -> bool {
        self.boxes.iter().any(|b| b.contains(p))
    }

    /// Smallest distance from `p` to any box surface.
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        self.boxes.iter().map(|b| b.surface_distance(p)).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthSensorConfig {
    pub hfov_deg: f64,
    pub vfov_deg: f64,
    pub max_range: f64,
    pub cols: usize,
    pub rows: usize,
    /// Sensor pose in `B`; the sensor looks along its +x axis with +z up.
    pub mount: Isometry3<f64>,
    /// Half-width of uniform range noise, meters.
    pub range_noise: f64,
}

impl Default for DepthSensorConfig {
    fn default() -> Self {
        Self {
            hfov_deg: 87.0,
            vfov_deg: 58.0,
            max_range: 5.0,
            cols: 32,
            rows: 24,
            mount: Isometry3::identity(),
            range_noise: 0.0,
        }
    }
}

impl DepthSensorConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let fov_ok = |f: f64| f > 0.0 && f < 180.0;
        if !fov_ok(self.hfov_deg) || !fov_ok(self.vfov_deg) {
            return Err(SimError::InvalidSensor("field of view must lie in (0, 180) degrees"));
        }
        if self.cols == 0 || self.rows == 0 {
            return Err(SimError::InvalidSensor("need at least one ray"));
        }
        if !(self.max_range > 0.0) {
            return Err(SimError::InvalidSensor("max range must be positive"));
        }
        Ok(())
    }

    /// Unnormalized pinhole ray directions in the sensor frame with unit forward component.
    pub fn ray_directions(&self) -> Vec<Vec3> {
        let th = (self.hfov_deg.to_radians() / 2.0).tan();
        let tv = (self.vfov_deg.to_radians() / 2.0).tan();
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            let v = 1.0 - 2.0 * (r as f64 + 0.5) / self.rows as f64;
            for c in 0..self.cols {
                let u = 1.0 - 2.0 * (c as f64 + 0.5) / self.cols as f64;
                out.push(Vec3::new(1.0, u * th, v * tv));
            }
        }
        out
    }
}

/// Distance hit points are pushed past the surface along the ray.
pub const SURFACE_BIAS: f64 = 1e-7;

/// Casts the sensor rays from `pose` (carrier frame to `W`) and returns hits in
/// the carrier frame. A headset pose (`H`) yields an operator cloud.
pub fn sense(scene: &Scene, pose: &RigidTransform<f64>, cfg: &DepthSensorConfig, stamp: f64) -> PointCloud {
    sense_impl(scene, pose, cfg, stamp, None::<&mut rand_chacha::ChaCha8Rng>)
}

/// As [`sense`], perturbing each range by uniform noise of half-width `cfg.range_noise`.
pub fn sense_noisy<R: Rng>(scene: &Scene, pose: &RigidTransform<f64>, cfg: &DepthSensorConfig, stamp: f64, rng: &mut R) -> PointCloud {
    sense_impl(scene, pose, cfg, stamp, Some(rng))
}

fn sense_impl<R: Rng>(
    scene: &Scene,
    pose: &RigidTransform<f64>,
    cfg: &DepthSensorConfig,
    stamp: f64,
    rng: Option<&mut R>,
) -> PointCloud {
    frame_impl(scene, pose, cfg, stamp, rng).hits
}

/// One depth image: surface hits, and the max-range endpoints of the rays that
/// returned nothing, both in the carrier frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub hits: PointCloud,
    pub misses: PointCloud,
}

/// As [`sense`], also reporting the rays without a return.
pub fn sense_frame(scene: &Scene, pose: &RigidTransform<f64>, cfg: &DepthSensorConfig, stamp: f64) -> DepthFrame {
    frame_impl(scene, pose, cfg, stamp, None::<&mut rand_chacha::ChaCha8Rng>)
}

fn frame_impl<R: Rng>(
    scene: &Scene,
    pose: &RigidTransform<f64>,
    cfg: &DepthSensorConfig,
    stamp: f64,
    mut rng: Option<&mut R>,
) -> DepthFrame {
    let body_to_world = Isometry3::from_parts((*pose.translation()).into(), *pose.rotation());
    let sensor_to_world = body_to_world * cfg.mount;
    let origin = sensor_to_world.translation.vector;
    let world_to_body = body_to_world.inverse();
    let mut points = Vec::new();
    let mut misses = Vec::new();
    for d in cfg.ray_directions() {
        let unit = sensor_to_world.rotation * d.normalize();
        if let Some(t) = scene.raycast(&origin, &unit, cfg.max_range) {
            // Hits on a face shared by two voxels land in the obstacle's voxel.
            let t = t + SURFACE_BIAS;
            let t = match rng.as_deref_mut() {
                Some(r) if cfg.range_noise > 0.0 => t + r.random_range(-cfg.range_noise..=cfg.range_noise),
                _ => t,
            };
            points.push((world_to_body * nalgebra::Point3::from(origin + unit * t)).coords);
        } else {
            misses.push((world_to_body * nalgebra::Point3::from(origin + unit * cfg.max_range)).coords);
        }
    }
    let frame = pose.from_frame();
    let source = if frame == FrameId::H { CloudSource::Operator } else { CloudSource::Robot };
    DepthFrame {
        hits: PointCloud { points, frame, source, stamp },
        misses: PointCloud { points: misses, frame, source, stamp },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlightMode {
    Idle,
    Hover,
    Tracking,
    Velocity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Velocity lag time constant, seconds.
    pub tau: f64,
    pub v_max: f64,
    /// Position feedback gain while tracking or holding, 1/s.
    pub kp: f64,
    pub dt: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { tau: 0.3, v_max: 1.5, kp: 1.0, dt: 0.02 }
    }
}

#[derive(Debug, Clone)]
pub struct SimDrone {
    state: DroneState<f64>,
    mode: FlightMode,
    trajectory: Option<PolynomialTrajectory<f64>>,
    track_clock: f64,
    velocity_command: Vec3,
    yaw_rate: f64,
    hold: Vec3,
    cfg: SimConfig,
}

impl SimDrone {
    pub fn new(state: DroneState<f64>, cfg: SimConfig) -> Self {
        Self {
            hold: state.position,
            state,
            mode: FlightMode::Idle,
            trajectory: None,
            track_clock: 0.0,
            velocity_command: Vec3::zeros(),
            yaw_rate: 0.0,
            cfg,
        }
    }

    pub fn state(&self) -> &DroneState<f64> {
        &self.state
    }

    pub fn mode(&self) -> FlightMode {
        self.mode
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn trajectory(&self) -> Option<&PolynomialTrajectory<f64>> {
        self.trajectory.as_ref()
    }

    pub fn track_clock(&self) -> f64 {
        self.track_clock
    }

    pub fn velocity_command(&self) -> (Vec3, f64) {
        (self.velocity_command, self.yaw_rate)
    }

    /// Starts tracking `traj` from its beginning; any latched velocity command is discarded.
    /// A trajectory whose lag-compensated velocity would exceed the speed limit is
    /// slowed down uniformly first, so the clamp never cuts into the reference.
    pub fn track(&mut self, traj: PolynomialTrajectory<f64>) {
        let k = feasible_time_scale(&traj, self.cfg.tau, FEEDFORWARD_MARGIN * self.cfg.v_max);
        self.mode = FlightMode::Tracking;
        self.trajectory = Some(if k > 1.0 { traj.time_scaled(k) } else { traj });
        self.track_clock = 0.0;
        self.velocity_command = Vec3::zeros();
        self.yaw_rate = 0.0;
    }

    /// Switches mode. Hover holds the point where the current motion would settle.
    pub fn set_mode(&mut self, mode: FlightMode) {
        if mode == FlightMode::Tracking && self.trajectory.is_none() {
            return;
        }
        if mode != FlightMode::Tracking {
            self.trajectory = None;
        }
        self.velocity_command = Vec3::zeros();
        self.yaw_rate = 0.0;
        self.hold = self.state.position + self.state.velocity * self.cfg.tau;
        self.mode = mode;
    }

    /// Latches a heading-frame velocity command, clamped to `v_max`.
    pub fn set_velocity_command(&mut self, v: Vec3, yaw_rate: f64) -> Result<(), SimError> {
        if self.mode != FlightMode::Velocity {
            return Err(SimError::ModeError(self.mode));
        }
        let n = v.norm();
        self.velocity_command = if n > self.cfg.v_max { v * (self.cfg.v_max / n) } else { v };
        self.yaw_rate = yaw_rate;
        Ok(())
    }

    fn velocity_reference(&self) -> Vec3 {
        let c = &self.cfg;
        match self.mode {
            FlightMode::Idle => Vec3::zeros(),
            FlightMode::Hover => (self.hold - self.state.position) * c.kp,
            FlightMode::Velocity => {
                let heading = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.state.yaw());
                heading * self.velocity_command
            }
            FlightMode::Tracking => {
                let traj = self.trajectory.as_ref().expect("tracking mode holds a trajectory");
                let s = traj.sample(self.track_clock);
                s.velocity + s.acceleration * c.tau + (s.position - self.state.position) * c.kp
            }
        }
    }

    /// Advances by `dt` with the exact discretization of the velocity lag.
    pub fn step(&mut self, dt: f64) -> Result<(), SimError> {
        if !(dt > 0.0 && dt <= 0.1) {
            return Err(SimError::InvalidStep(dt));
        }
        let c = self.cfg;
        let mut v_ref = self.velocity_reference();
        let n = v_ref.norm();
        if n > c.v_max {
            v_ref *= c.v_max / n;
        }
        let alpha = (-dt / c.tau).exp();
        let dv = self.state.velocity - v_ref;
        self.state.position += v_ref * dt + dv * (c.tau * (1.0 - alpha));
        self.state.velocity = v_ref + dv * alpha;

        let yaw = self.state.yaw();
        let new_yaw = match self.mode {
            FlightMode::Velocity => yaw + self.yaw_rate * dt,
            FlightMode::Tracking if v_ref.xy().norm() > 0.1 => v_ref.y.atan2(v_ref.x),
            _ => yaw,
        };
        self.state.attitude = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), new_yaw);
        self.state.angular_velocity = Vec3::new(0.0, 0.0, wrap_angle(new_yaw - yaw) / dt);
        self.state.stamp += dt;

        if self.mode == FlightMode::Tracking {
            self.track_clock += dt;
            let traj = self.trajectory.as_ref().expect("tracking mode holds a trajectory");
            if self.track_clock >= traj.total_duration() {
                self.hold = traj.end();
                self.trajectory = None;
                self.mode = FlightMode::Hover;
            }
        }
        Ok(())
    }

    /// Stops dead at `p` and hovers there, dropping any trajectory or command.
    pub fn halt_at(&mut self, p: Vec3) {
        self.state.position = p;
        self.state.velocity = Vec3::zeros();
        self.trajectory = None;
        self.velocity_command = Vec3::zeros();
        self.yaw_rate = 0.0;
        self.hold = p;
        self.mode = FlightMode::Hover;
    }

    /// Reference position while tracking.
    pub fn reference_position(&self) -> Option<Vec3> {
        self.trajectory.as_ref().map(|t| t.sample(self.track_clock).position)
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    } else if a < -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}
