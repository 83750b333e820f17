//! Mission orchestration: minimap drawings are scaled into `W`, repaired,
//! re-planned leg by leg on an inflated snapshot of the live map, smoothed into
//! a minimum-snap trajectory and handed to the simulated drone.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{FrameId, MinimapTransform, RigidTransform};
use crate::mapping::{inflation_kernel, InflatedGrid, MapError, OccupancyGrid, PointCloud};
use crate::planner::{self, nearest_free_pose, shortcut, PlanError, PlannedPath};
use crate::runlog::{LegError, LogRecord, MissionLog};
use crate::scenario::{PlanningConfig, Scenario};
use crate::sim::{self, FlightMode, Scene, SimConfig, SimDrone, SimError, FEEDFORWARD_MARGIN};
use crate::trajectory::{allocate_times, feasible_time_scale, fit_min_snap, fit_stop_and_go, PolynomialTrajectory};
use crate::geom::DroneState;

type Vec3 = Vector3<f64>;

/// Minimum time between accepted drawing samples, seconds.
pub const SAMPLE_PERIOD: f64 = 0.1;
/// Trajectory sampling used for safety checks, seconds.
pub const SAFETY_DT: f64 = 0.01;
/// Distance at which a plan target counts as reached, meters.
const REACHED: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MissionError {
    #[error("operation needs a {expected:?} drawing")]
    TaskMismatch { expected: TaskKind },
    #[error("nothing to publish")]
    NoTrajectory,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Map(#[from] MapError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleGoal,
    MultiWaypoint,
}

/// Operator input in minimap coordinates (`Wv`).
#[derive(Debug, Clone, PartialEq)]
pub struct DrawnTrajectory {
    task: TaskKind,
    samples: Vec<Vec3>,
    stamps: Vec<f64>,
}

impl DrawnTrajectory {
    pub fn new(task: TaskKind) -> Self {
        Self { task, samples: Vec::new(), stamps: Vec::new() }
    }

    pub fn single_goal(p_mini: Vec3, stamp: f64) -> Self {
        Self { task: TaskKind::SingleGoal, samples: vec![p_mini], stamps: vec![stamp] }
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn samples(&self) -> &[Vec3] {
        &self.samples
    }

    pub fn stamps(&self) -> &[f64] {
        &self.stamps
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Appends a pointer sample when it is the first one, when `SAMPLE_PERIOD`
    /// has elapsed, or when it moved at least `min_spacing` minimap meters.
    /// Returns whether the sample was kept.
    pub fn record_sample(&mut self, p_mini: Vec3, stamp: f64, min_spacing: f64) -> Result<bool, MissionError> {
        if self.task != TaskKind::MultiWaypoint {
            return Err(MissionError::TaskMismatch { expected: TaskKind::MultiWaypoint });
        }
        let accept = match (self.samples.last(), self.stamps.last()) {
            (Some(p), Some(&t)) => {
                stamp >= t && (stamp - t >= SAMPLE_PERIOD - 1e-12 || (p_mini - p).norm() >= min_spacing)
                    && !(stamp == t && p_mini == *p)
            }
            _ => true,
        };
        if accept {
            self.samples.push(p_mini);
            self.stamps.push(stamp);
        }
        Ok(accept)
    }
}

/// Minimap distance that maps to one voxel in `W`.
pub fn sample_spacing(resolution: f64, minimap: &MinimapTransform<f64>) -> f64 {
    resolution / minimap.scale()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Repair {
    /// Drawn sample index, or `None` for the drone's own start position.
    pub index: Option<usize>,
    pub from: Vec3,
    pub to: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LegOutcome {
    /// Index of the drawn sample this leg flies to.
    pub target: usize,
    pub result: Result<PlannedPath, PlanError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    /// Drawn samples in `W`.
    pub sigma_d: Vec<Vec3>,
    pub repairs: Vec<Repair>,
    pub legs: Vec<LegOutcome>,
    /// Re-planned polyline through every reachable target.
    pub sigma_r: Vec<Vec3>,
    /// Endpoints of the legs that found a path, in flight order.
    pub reached: Vec<Vec3>,
    pub trajectory: Option<PolynomialTrajectory<f64>>,
    pub refinements: usize,
    pub stop_and_go: bool,
}

impl PlanOutcome {
    pub fn errors(&self) -> Vec<(usize, PlanError)> {
        self.legs.iter().filter_map(|l| l.result.as_ref().err().map(|e| (l.target, *e))).collect()
    }

    /// Trajectory positions every `dt` seconds, as sent to displays.
    pub fn sampled(&self, dt: f64) -> Vec<Vec3> {
        self.trajectory.as_ref().map(|t| t.to_polyline(dt)).unwrap_or_default()
    }
}

/// Dynamics limits the smoothed trajectory must respect.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispatchLimits {
    pub tau: f64,
    pub v_max: f64,
}

impl From<&SimConfig> for DispatchLimits {
    fn from(c: &SimConfig) -> Self {
        Self { tau: c.tau, v_max: c.v_max }
    }
}

fn repair_point(grid: &InflatedGrid, p: Vec3, radius: f64) -> Result<Vec3, PlanError> {
    nearest_free_pose(grid, &p, radius)
}

fn push_distinct(out: &mut Vec<Vec3>, pts: &[Vec3]) {
    for p in pts {
        if out.last().is_none_or(|q| (q - p).norm() > 1e-9) {
            out.push(*p);
        }
    }
}

/// Minimap drawing to `W`, then [`plan_waypoints`].
pub fn plan_publish(
    drawn: &DrawnTrajectory,
    minimap: &MinimapTransform<f64>,
    grid: &InflatedGrid,
    start: Vec3,
    cfg: &PlanningConfig,
    limits: DispatchLimits,
) -> Result<PlanOutcome, MissionError> {
    let sigma_d: Vec<Vec3> = drawn.samples.iter().map(|p| minimap.minimap_to_world(p)).collect();
    plan_waypoints(&sigma_d, grid, start, cfg, limits)
}

/// Repairs every waypoint into free space, plans one leg per waypoint from the
/// previous reachable one, shortcuts each leg, and fits a safe trajectory.
/// Unreachable waypoints are reported and skipped; the other legs still fly.
pub fn plan_waypoints(
    sigma_d: &[Vec3],
    grid: &InflatedGrid,
    start: Vec3,
    cfg: &PlanningConfig,
    limits: DispatchLimits,
) -> Result<PlanOutcome, MissionError> {
    if sigma_d.is_empty() {
        return Err(MissionError::NoTrajectory);
    }
    let geom = grid.geometry();
    let mut repairs = Vec::new();
    let start = match repair_point(grid, start, cfg.repair_radius) {
        Ok(p) => {
            if p != start {
                repairs.push(Repair { index: None, from: start, to: p });
            }
            Some(p)
        }
        Err(_) => None,
    };
    let mut sigma_r = Vec::new();
    if let Some(s) = start {
        sigma_r.push(geom.center(geom.index_unchecked(&s)));
    }
    let mut legs = Vec::with_capacity(sigma_d.len());
    let mut reached = Vec::new();
    let mut cur = start;
    for (i, w) in sigma_d.iter().enumerate() {
        let target = repair_point(grid, *w, cfg.repair_radius);
        if let Ok(t) = target {
            if t != *w {
                repairs.push(Repair { index: Some(i), from: *w, to: t });
            }
        }
        let result = match (cur, target) {
            (None, _) => Err(PlanError::StartOccupied),
            (_, Err(e)) => Err(e),
            (Some(c), Ok(t)) => planner::plan(grid, &c, &t).map(|p| shortcut(&p, grid)),
        };
        if let Ok(path) = &result {
            push_distinct(&mut sigma_r, &path.waypoints);
            let end = *path.waypoints.last().expect("paths have at least one waypoint");
            reached.push(end);
            cur = Some(end);
        }
        legs.push(LegOutcome { target: i, result });
    }

    let mut out = PlanOutcome {
        sigma_d: sigma_d.to_vec(),
        repairs,
        legs,
        sigma_r,
        reached,
        trajectory: None,
        refinements: 0,
        stop_and_go: false,
    };
    if out.reached.is_empty() || out.sigma_r.is_empty() {
        return Ok(out);
    }
    let poly = if out.sigma_r.len() == 1 { vec![out.sigma_r[0]; 2] } else { out.sigma_r.clone() };
    let (traj, refinements, stop_and_go) = smooth_safely(&poly, grid, cfg, limits);
    out.trajectory = Some(traj);
    out.refinements = refinements;
    out.stop_and_go = stop_and_go;
    Ok(out)
}

/// Index of the first segment with a sample (or a point within `margin` of one)
/// outside free space.
pub fn first_unsafe_segment(traj: &PolynomialTrajectory<f64>, grid: &InflatedGrid, margin: f64) -> Option<usize> {
    let knots = traj.knot_times();
    let total = traj.total_duration();
    let mut t = 0.0;
    let mut seg = 0;
    loop {
        while seg + 1 < knots.len() - 1 && t >= knots[seg + 1] {
            seg += 1;
        }
        let p = traj.derivative(t, 0);
        let corners = [-1.0, 1.0];
        let mut ok = grid.is_free_at(&p);
        if ok && margin > 0.0 {
            'outer: for sx in corners {
                for sy in corners {
                    for sz in corners {
                        if !grid.is_free_at(&(p + Vec3::new(sx, sy, sz) * margin)) {
                            ok = false;
                            break 'outer;
                        }
                    }
                }
            }
        }
        if !ok {
            return Some(seg);
        }
        if t >= total {
            return None;
        }
        t = (t + SAFETY_DT).min(total);
    }
}

fn feasible(traj: PolynomialTrajectory<f64>, limits: DispatchLimits) -> PolynomialTrajectory<f64> {
    let k = feasible_time_scale(&traj, limits.tau, FEEDFORWARD_MARGIN * limits.v_max);
    if k > 1.0 {
        traj.time_scaled(k)
    } else {
        traj
    }
}

/// Fits a minimum-snap trajectory through `poly`, inserting segment midpoints
/// where samples leave free space. Falls back to stopping at every vertex, which
/// keeps the trajectory on the polyline itself.
fn smooth_safely(poly: &[Vec3], grid: &InflatedGrid, cfg: &PlanningConfig, limits: DispatchLimits) -> (PolynomialTrajectory<f64>, usize, bool) {
    let mut pts = poly.to_vec();
    for r in 0..=cfg.max_refinements {
        let durations = allocate_times(&pts, cfg.nominal_speed);
        let Ok(traj) = fit_min_snap(&pts, &durations) else { break };
        match first_unsafe_segment(&traj, grid, cfg.safety_margin) {
            None => return (feasible(traj, limits), r, false),
            Some(seg) => {
                let mid = (pts[seg] + pts[seg + 1]) * 0.5;
                pts.insert(seg + 1, mid);
            }
        }
    }
    let durations = allocate_times(poly, cfg.nominal_speed);
    let traj = fit_stop_and_go(poly, &durations).expect("durations are at least the 0.5 s floor");
    (feasible(traj, limits), cfg.max_refinements, true)
}

/// Marks every voxel overlapping a scene box occupied and every other voxel
/// inside the arena free.
pub fn rasterize_scene(scene: &Scene, grid: &mut OccupancyGrid) {
    let geom = *grid.geometry();
    let eps = 1e-6;
    for n in 0..geom.cell_count() {
        let idx = geom.unlinear(n);
        let lo = geom.cell_min(idx);
        let hi = lo + Vec3::repeat(geom.resolution);
        let overlaps = |min: &Vec3, max: &Vec3| (0..3).all(|a| lo[a] < max[a] - eps && hi[a] > min[a] + eps);
        if scene.boxes.iter().any(|b| overlaps(&b.min, &b.max)) {
            grid.set_known(idx, true);
        } else if overlaps(&scene.bounds.min, &scene.bounds.max) {
            grid.set_known(idx, false);
        }
    }
}

/// A planning job detached from the mission so it can run elsewhere.
#[derive(Debug, Clone)]
pub struct PlanRequest {
    pub id: u64,
    pub drawn: DrawnTrajectory,
    pub minimap: MinimapTransform<f64>,
    pub snapshot: Arc<InflatedGrid>,
    pub start: Vec3,
    pub cfg: PlanningConfig,
    pub limits: DispatchLimits,
}

impl PlanRequest {
    pub fn run(&self) -> Result<PlanOutcome, MissionError> {
        plan_publish(&self.drawn, &self.minimap, &self.snapshot, self.start, &self.cfg, self.limits)
    }
}

/// Commands arriving from the operator side.
#[derive(Debug, Clone, PartialEq)]
pub enum MissionCommand {
    /// Single goal in minimap coordinates; without `z` the goal flies at the configured altitude.
    Goal { xy: [f64; 2], z: Option<f64> },
    DrawSample { position: Vec3, stamp: f64 },
    Publish,
    ClearDrawing,
    SetMode(FlightMode),
    /// Heading-frame velocity, only accepted in velocity mode.
    Velocity { linear: Vec3, yaw_rate: f64 },
    /// Headset cloud in `H` with the headset pose `H -> W`.
    OperatorCloud { cloud: PointCloud, headset: RigidTransform<f64> },
}

#[derive(Debug)]
pub enum CommandEffect {
    Applied,
    /// The command needs planning; run the request and pass the result to [`Mission::apply_plan`].
    Plan(PlanRequest),
}

#[derive(Debug, Clone)]
struct ActivePlan {
    id: u64,
    snapshot: Arc<InflatedGrid>,
    targets: VecDeque<Vec3>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MissionStats {
    pub plans: u64,
    pub plan_errors: u64,
    pub replans: u64,
    pub collisions: u64,
}

/// Owns the simulator, the map and the log; advanced one fixed step at a time.
pub struct Mission {
    scenario: Scenario,
    drone: SimDrone,
    grid: OccupancyGrid,
    kernel: Vec<[i32; 3]>,
    log: MissionLog,
    run_id: String,
    steps: u64,
    drawing: Option<DrawnTrajectory>,
    active: Option<ActivePlan>,
    pending_replan: Option<Vec<Vec3>>,
    last_cloud: Option<PointCloud>,
    next_area_log: f64,
    last_logged_area: f64,
    next_plan_id: u64,
    stats: MissionStats,
}

impl Mission {
    pub fn new(scenario: Scenario, run_id: impl Into<String>) -> Self {
        let mut grid = OccupancyGrid::new(scenario.geometry);
        grid.track_inflation(scenario.planning().inflation_radius);
        if scenario.planning().prior_map {
            rasterize_scene(&scenario.scene, &mut grid);
        }
        let mut drone = SimDrone::new(DroneState::at_rest(scenario.start_position(), scenario.start_yaw()), scenario.sim);
        drone.set_mode(FlightMode::Hover);
        let kernel = inflation_kernel(scenario.geometry.resolution, scenario.planning().inflation_radius);
        let mut m = Self {
            scenario,
            drone,
            grid,
            kernel,
            log: MissionLog::default(),
            run_id: run_id.into(),
            steps: 0,
            drawing: None,
            active: None,
            pending_replan: None,
            last_cloud: None,
            next_area_log: 0.0,
            last_logged_area: 0.0,
            next_plan_id: 1,
            stats: MissionStats::default(),
        };
        m.scan();
        m.log_state();
        m.log_area_if_due();
        m
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn drone(&self) -> &SimDrone {
        &self.drone
    }

    pub fn grid(&self) -> &OccupancyGrid {
        &self.grid
    }

    pub fn grid_mut(&mut self) -> &mut OccupancyGrid {
        &mut self.grid
    }

    pub fn log(&self) -> &MissionLog {
        &self.log
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn stats(&self) -> MissionStats {
        self.stats
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * self.scenario.sim.dt
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn last_cloud(&self) -> Option<&PointCloud> {
        self.last_cloud.as_ref()
    }

    pub fn drawing(&self) -> Option<&DrawnTrajectory> {
        self.drawing.as_ref()
    }

    pub fn replan_pending(&self) -> bool {
        self.pending_replan.is_some()
    }

    /// Snapshot the active trajectory was planned against.
    pub fn active_snapshot(&self) -> Option<&Arc<InflatedGrid>> {
        self.active.as_ref().map(|a| &a.snapshot)
    }

    pub fn planning_grid(&self) -> InflatedGrid {
        self.grid.inflated_snapshot().unwrap_or_else(|| self.grid.inflate(self.scenario.planning().inflation_radius))
    }

    pub fn push_log(&mut self, record: LogRecord) {
        self.log.push(&self.run_id, record);
    }

    fn log_state(&mut self) {
        let s = *self.drone.state();
        let record = LogRecord::State {
            t: self.time(),
            position: s.position.into(),
            velocity: s.velocity.into(),
            yaw: s.yaw(),
            mode: self.drone.mode(),
        };
        self.push_log(record);
    }

    fn log_area_if_due(&mut self) {
        let t = self.time();
        if t + 1e-9 >= self.next_area_log {
            let area = self.grid.explored_area();
            self.push_log(LogRecord::Explored { t, area });
            self.last_logged_area = area;
            self.next_area_log += 1.0;
        }
    }

    /// Depth frame from the current pose, fused into the map.
    fn scan(&mut self) {
        let pose = self.drone.state().pose();
        let frame = sim::sense_frame(&self.scenario.scene, &pose, &self.scenario.sensor, self.time());
        let origin = pose.apply(&self.scenario.sensor.mount.translation.vector);
        let hits = frame.hits.transformed(&pose).expect("sensed clouds are in B");
        let misses = frame.misses.transformed(&pose).expect("sensed clouds are in B");
        self.grid.insert_scan(&hits, &misses, &origin).expect("clouds transformed to W");
        self.last_cloud = Some(frame.hits);
        self.check_active_plan();
    }

    /// Stops and schedules a re-plan of the remaining targets when the live map
    /// shows a new obstacle near the rest of the active trajectory.
    fn check_active_plan(&mut self) {
        let Some(active) = &self.active else { return };
        let Some(traj) = self.drone.trajectory() else { return };
        let geom = *self.grid.geometry();
        let mut t = self.drone.track_clock();
        let mut blocked = false;
        while t <= traj.total_duration() {
            let idx = geom.index_unchecked(&traj.derivative(t, 0));
            if self.grid.occupied_within(idx, &self.kernel) {
                blocked = true;
                break;
            }
            t += 0.05;
        }
        if blocked {
            let remaining: Vec<Vec3> = active.targets.iter().copied().collect();
            let plan = active.id;
            self.push_log(LogRecord::Replan { t: self.time(), plan, remaining: remaining.len() });
            self.stats.replans += 1;
            self.active = None;
            self.drone.set_mode(FlightMode::Hover);
            self.pending_replan = if remaining.is_empty() { None } else { Some(remaining) };
        }
    }

    /// Advances the simulation by one fixed step.
    pub fn step(&mut self) {
        if self.steps > 0 && self.steps.is_multiple_of(self.scenario.sensor_period_steps()) {
            self.scan();
        }
        self.log_area_if_due();
        let dt = self.scenario.sim.dt;
        let mode_before = self.drone.mode();
        let before = self.drone.state().position;
        self.drone.step(dt).expect("scenario dt validated");
        self.steps += 1;
        let p = self.drone.state().position;
        if self.scenario.scene.is_occupied(&p) {
            self.drone.halt_at(before);
            self.stats.collisions += 1;
            self.push_log(LogRecord::Collision { t: self.time(), position: p.into() });
        }
        if let Some(active) = &mut self.active {
            while active.targets.front().is_some_and(|t| (t - p).norm() < REACHED) {
                active.targets.pop_front();
            }
        }
        if self.drone.mode() != mode_before {
            if mode_before == FlightMode::Tracking {
                self.active = None;
            }
            self.push_log(LogRecord::ModeChange { t: self.time(), mode: self.drone.mode() });
        }
        self.log_state();
        if self.pending_replan.is_some() && self.drone.state().velocity.norm() < 0.05 {
            let targets = self.pending_replan.take().unwrap_or_default();
            self.replan(&targets);
        }
    }

    fn replan(&mut self, targets: &[Vec3]) {
        let snapshot = Arc::new(self.planning_grid());
        let start = self.drone.state().position;
        let limits = DispatchLimits::from(&self.scenario.sim);
        let id = self.take_plan_id();
        if let Ok(outcome) = plan_waypoints(targets, &snapshot, start, self.scenario.planning(), limits) {
            self.record_outcome(id, &outcome, TaskKind::MultiWaypoint);
            self.dispatch(id, snapshot, &outcome);
        }
    }

    fn take_plan_id(&mut self) -> u64 {
        let id = self.next_plan_id;
        self.next_plan_id += 1;
        id
    }

    /// Builds a planning job for `drawn` against a snapshot of the current map.
    pub fn plan_request(&mut self, drawn: DrawnTrajectory) -> Result<PlanRequest, MissionError> {
        let snapshot = Arc::new(self.planning_grid());
        self.plan_request_on(drawn, snapshot)
    }

    /// As [`Mission::plan_request`] with a caller-provided inflated snapshot.
    pub fn plan_request_on(&mut self, drawn: DrawnTrajectory, snapshot: Arc<InflatedGrid>) -> Result<PlanRequest, MissionError> {
        if drawn.is_empty() {
            return Err(MissionError::NoTrajectory);
        }
        Ok(PlanRequest {
            id: self.take_plan_id(),
            drawn,
            minimap: self.scenario.minimap,
            snapshot,
            start: self.drone.state().position,
            cfg: *self.scenario.planning(),
            limits: DispatchLimits::from(&self.scenario.sim),
        })
    }

    /// Logs a finished plan and dispatches its trajectory to the drone.
    pub fn apply_plan(&mut self, request: &PlanRequest, outcome: &PlanOutcome) {
        self.record_outcome(request.id, outcome, request.drawn.task());
        self.dispatch(request.id, request.snapshot.clone(), outcome);
    }

    fn record_outcome(&mut self, id: u64, outcome: &PlanOutcome, task: TaskKind) {
        let t = self.time();
        let arr = |v: &[Vec3]| v.iter().map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>();
        self.push_log(LogRecord::Published { t, plan: id, task, sigma_d: arr(&outcome.sigma_d) });
        for r in &outcome.repairs {
            self.push_log(LogRecord::Repair { t, plan: id, index: r.index, from: r.from.into(), to: r.to.into() });
        }
        let errors: Vec<LegError> =
            outcome.errors().into_iter().map(|(leg, e)| LegError { leg, error: e.to_string() }).collect();
        self.stats.plans += 1;
        self.stats.plan_errors += errors.len() as u64;
        self.push_log(LogRecord::PlanResult {
            t,
            plan: id,
            sigma_r: arr(&outcome.sigma_r),
            errors,
            duration: outcome.trajectory.as_ref().map(|tr| tr.total_duration()),
            stop_and_go: outcome.stop_and_go,
        });
    }

    fn dispatch(&mut self, id: u64, snapshot: Arc<InflatedGrid>, outcome: &PlanOutcome) {
        let Some(traj) = outcome.trajectory.clone() else { return };
        let before = self.drone.mode();
        self.pending_replan = None;
        self.drone.track(traj);
        self.active = Some(ActivePlan { id, snapshot, targets: outcome.reached.iter().copied().collect() });
        if before != FlightMode::Tracking {
            self.push_log(LogRecord::ModeChange { t: self.time(), mode: FlightMode::Tracking });
        }
    }

    /// Plans and dispatches `drawn` synchronously.
    pub fn publish(&mut self, drawn: DrawnTrajectory) -> Result<PlanOutcome, MissionError> {
        let request = self.plan_request(drawn)?;
        let outcome = request.run()?;
        self.apply_plan(&request, &outcome);
        Ok(outcome)
    }

    pub fn publish_on(&mut self, drawn: DrawnTrajectory, snapshot: Arc<InflatedGrid>) -> Result<PlanOutcome, MissionError> {
        let request = self.plan_request_on(drawn, snapshot)?;
        let outcome = request.run()?;
        self.apply_plan(&request, &outcome);
        Ok(outcome)
    }

    /// Minimap point for a world position, e.g. to publish an autonomously chosen goal.
    pub fn to_minimap(&self, p: &Vec3) -> Vec3 {
        self.scenario.minimap.world_to_minimap(p)
    }

    pub fn handle(&mut self, cmd: MissionCommand) -> Result<CommandEffect, MissionError> {
        match cmd {
            MissionCommand::Goal { xy, z } => {
                let p = match z {
                    Some(z) => Vec3::new(xy[0], xy[1], z),
                    None => {
                        let mut w = self.scenario.minimap.minimap_to_world(&Vec3::new(xy[0], xy[1], 0.0));
                        w.z = self.scenario.planning().flight_altitude;
                        self.to_minimap(&w)
                    }
                };
                let drawn = DrawnTrajectory::single_goal(p, self.time());
                Ok(CommandEffect::Plan(self.plan_request(drawn)?))
            }
            MissionCommand::DrawSample { position, stamp } => {
                let spacing = sample_spacing(self.scenario.geometry.resolution, &self.scenario.minimap);
                let drawing = self.drawing.get_or_insert_with(|| DrawnTrajectory::new(TaskKind::MultiWaypoint));
                drawing.record_sample(position, stamp, spacing)?;
                Ok(CommandEffect::Applied)
            }
            MissionCommand::Publish => {
                let drawn = self.drawing.take().ok_or(MissionError::NoTrajectory)?;
                Ok(CommandEffect::Plan(self.plan_request(drawn)?))
            }
            MissionCommand::ClearDrawing => {
                self.drawing = None;
                Ok(CommandEffect::Applied)
            }
            MissionCommand::SetMode(mode) => {
                let before = self.drone.mode();
                self.drone.set_mode(mode);
                if mode != FlightMode::Tracking {
                    self.active = None;
                    self.pending_replan = None;
                }
                if self.drone.mode() != before {
                    self.push_log(LogRecord::ModeChange { t: self.time(), mode: self.drone.mode() });
                }
                Ok(CommandEffect::Applied)
            }
            MissionCommand::Velocity { linear, yaw_rate } => {
                self.drone.set_velocity_command(linear, yaw_rate)?;
                Ok(CommandEffect::Applied)
            }
            MissionCommand::OperatorCloud { cloud, headset } => {
                self.grid.merge_operator_cloud(&cloud, &headset)?;
                Ok(CommandEffect::Applied)
            }
        }
    }

    /// Scans the scene from a headset pose and fuses the result, as the
    /// operator's device would.
    pub fn operator_scan(&mut self, headset: &RigidTransform<f64>) -> Result<usize, MissionError> {
        let cloud = sim::sense(&self.scenario.scene, headset, &self.scenario.sensor, self.time());
        let n = cloud.len();
        self.handle(MissionCommand::OperatorCloud { cloud, headset: *headset })?;
        Ok(n)
    }

    /// Closes the log with the final explored area and the exported grid.
    pub fn finish(mut self) -> MissionLog {
        let area = self.grid.explored_area();
        let t = self.time();
        if area != self.last_logged_area {
            self.push_log(LogRecord::Explored { t, area });
        }
        let grid = self.grid.export_rle();
        self.push_log(LogRecord::FinalGrid { t, area, grid });
        self.log
    }
}

/// Convenience: headset pose from a position and yaw.
pub fn headset_pose(position: Vec3, yaw: f64) -> RigidTransform<f64> {
    RigidTransform::from_yaw(FrameId::H, FrameId::W, yaw, position)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping::{CellState, GridGeometry};
    use crate::sim::Aabb;

    fn open_grid() -> InflatedGrid {
        let g = GridGeometry::centered(Vec3::new(0.0, 0.0, 0.1), [10.0, 10.0, 4.0], 0.2).unwrap();
        InflatedGrid::from_states(g, vec![CellState::Free; g.cell_count()])
    }

    fn walled_grid() -> (OccupancyGrid, Scene) {
        let g = GridGeometry::centered(Vec3::new(0.0, 0.0, 0.1), [10.0, 10.0, 4.0], 0.2).unwrap();
        let scene = Scene::new(
            Aabb::new(Vec3::new(-5.0, -5.0, -1.9), Vec3::new(5.0, 5.0, 2.1)),
            vec![Aabb::new(Vec3::new(-0.2, -3.0, -1.9), Vec3::new(0.2, 3.0, 2.1))],
        )
        .unwrap();
        let mut grid = OccupancyGrid::new(g);
        rasterize_scene(&scene, &mut grid);
        (grid, scene)
    }

    fn minimap() -> MinimapTransform<f64> {
        MinimapTransform::with_scale(20.0).unwrap()
    }

    fn limits() -> DispatchLimits {
        DispatchLimits { tau: 0.3, v_max: 1.5 }
    }

    #[test]
    fn record_sample_thresholds() {
        let spacing = sample_spacing(0.2, &minimap());
        assert!((spacing - 0.01).abs() < 1e-15);
        let mut d = DrawnTrajectory::new(TaskKind::MultiWaypoint);
        assert!(d.record_sample(Vec3::zeros(), 0.0, spacing).unwrap());
        assert!(!d.record_sample(Vec3::new(0.001, 0.0, 0.0), 0.05, spacing).unwrap());
        assert!(!d.record_sample(Vec3::zeros(), 0.05, spacing).unwrap());
        assert!(d.record_sample(Vec3::new(0.01, 0.0, 0.0), 0.06, spacing).unwrap());
        assert!(d.record_sample(Vec3::new(0.01, 0.0, 0.0), 0.16, spacing).unwrap());
        assert_eq!(d.samples().len(), 3);
        let mut single = DrawnTrajectory::single_goal(Vec3::zeros(), 0.0);
        assert_eq!(
            single.record_sample(Vec3::x(), 1.0, spacing),
            Err(MissionError::TaskMismatch { expected: TaskKind::MultiWaypoint })
        );
    }

    #[test]
    fn empty_publish_is_rejected() {
        let g = open_grid();
        let d = DrawnTrajectory::new(TaskKind::MultiWaypoint);
        assert_eq!(
            plan_publish(&d, &minimap(), &g, Vec3::new(0.0, 0.0, 1.0), &PlanningConfig::default(), limits()),
            Err(MissionError::NoTrajectory)
        );
    }

    #[test]
    fn free_space_drawing_is_followed() {
        let g = open_grid();
        let mut d = DrawnTrajectory::new(TaskKind::MultiWaypoint);
        let pts = [Vec3::new(-3.0, -3.0, 1.0), Vec3::new(-1.0, -3.0, 1.0), Vec3::new(1.0, 0.0, 1.0), Vec3::new(3.0, 2.0, 1.0)];
        for (i, p) in pts.iter().enumerate() {
            d.record_sample(p / 20.0, i as f64, 0.01).unwrap();
        }
        let out = plan_publish(&d, &minimap(), &g, pts[0], &PlanningConfig::default(), limits()).unwrap();
        assert!(out.errors().is_empty());
        assert!(out.repairs.is_empty());
        // Every re-planned vertex lies within a voxel of the drawn polyline and vice versa.
        let dist_to_poly = |q: &Vec3, poly: &[Vec3]| {
            poly.windows(2)
                .map(|w| {
                    let d = w[1] - w[0];
                    let s = ((q - w[0]).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
                    (w[0] + d * s - q).norm()
                })
                .fold(f64::INFINITY, f64::min)
        };
        let voxel_diag = 0.2 * 3f64.sqrt();
        for q in &out.sigma_r {
            assert!(dist_to_poly(q, &out.sigma_d) <= voxel_diag, "{q:?}");
        }
        let traj = out.trajectory.as_ref().unwrap();
        if out.refinements == 0 {
            for (t, q) in traj.knot_times().iter().zip(&out.sigma_r) {
                assert!((traj.derivative(*t, 0) - q).norm() < 1e-6);
            }
        }
        for q in &out.sigma_d {
            assert!(dist_to_poly(q, &out.sigma_r) <= voxel_diag);
        }
    }

    #[test]
    fn wall_crossing_is_replanned_around() {
        let (grid, _) = walled_grid();
        let inflated = grid.inflate(0.3);
        let d = DrawnTrajectory::single_goal(Vec3::new(2.0, 0.0, 1.0) / 20.0, 0.0);
        let start = Vec3::new(-2.0, 0.0, 1.0);
        let out = plan_publish(&d, &minimap(), &inflated, start, &PlanningConfig::default(), limits()).unwrap();
        assert!(out.errors().is_empty());
        let traj = out.trajectory.as_ref().unwrap();
        assert!(first_unsafe_segment(traj, &inflated, 0.0).is_none());
        assert!(out.sigma_r.iter().any(|p| p.y.abs() > 3.0), "path goes around the wall end");
        assert!(!inflated.segment_is_free(&out.sigma_d[0], &start));
    }

    #[test]
    fn goal_inside_obstacle_is_repaired() {
        let (grid, _) = walled_grid();
        let inflated = grid.inflate(0.3);
        let inside = Vec3::new(0.05, 1.0, 1.0);
        let d = DrawnTrajectory::single_goal(inside / 20.0, 0.0);
        let out = plan_publish(&d, &minimap(), &inflated, Vec3::new(-2.0, 1.0, 1.0), &PlanningConfig::default(), limits()).unwrap();
        assert_eq!(out.repairs.len(), 1);
        let r = &out.repairs[0];
        assert_eq!(r.index, Some(0));
        // Breadth-first oracle over voxel shells: the closest free center by Euclidean distance.
        let geom = inflated.geometry();
        let best = (0..geom.cell_count())
            .map(|n| geom.unlinear(n))
            .filter(|&c| inflated.is_free(c))
            .map(|c| ((geom.center(c) - inside).norm(), c))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .unwrap();
        assert_eq!(r.to, geom.center(best.1));
        assert!(out.trajectory.is_some());
        assert!((out.trajectory.unwrap().end() - r.to).norm() < 1e-9);
    }

    #[test]
    fn unreachable_middle_leg_keeps_others() {
        let (grid, _) = walled_grid();
        let mut inflated_states = grid.inflate(0.3).states().to_vec();
        let geom = *grid.geometry();
        // Seal a box around the second target.
        let target = Vec3::new(-3.0, 3.5, 1.0);
        let c = geom.index_unchecked(&target);
        for di in -3..=3i32 {
            for dj in -3..=3i32 {
                for dk in -3..=3i32 {
                    if di.abs().max(dj.abs()).max(dk.abs()) == 3 {
                        let q = c.offset([di, dj, dk]);
                        if geom.contains(q) {
                            inflated_states[geom.linear(q)] = CellState::Occupied;
                        }
                    }
                }
            }
        }
        let inflated = InflatedGrid::from_states(geom, inflated_states);
        let targets = [Vec3::new(-3.0, -3.0, 1.0), geom.center(c), Vec3::new(-1.0, 4.0, 1.0)];
        let out = plan_waypoints(&targets, &inflated, Vec3::new(-2.0, 0.0, 1.0), &PlanningConfig::default(), limits()).unwrap();
        assert_eq!(out.errors(), vec![(1, PlanError::NoPath)]);
        assert_eq!(out.reached.len(), 2);
        assert!(out.trajectory.is_some());
    }

    #[test]
    fn publish_is_idempotent() {
        let (grid, _) = walled_grid();
        let inflated = grid.inflate(0.3);
        let mut d = DrawnTrajectory::new(TaskKind::MultiWaypoint);
        for (i, p) in [Vec3::new(-3.0, 0.0, 1.0), Vec3::new(3.0, 1.0, 1.0), Vec3::new(3.0, -4.0, 1.5)].iter().enumerate() {
            d.record_sample(p / 20.0, i as f64, 0.01).unwrap();
        }
        let cfg = PlanningConfig::default();
        let a = plan_publish(&d, &minimap(), &inflated, Vec3::new(-4.0, 0.0, 1.0), &cfg, limits()).unwrap();
        let b = plan_publish(&d, &minimap(), &inflated, Vec3::new(-4.0, 0.0, 1.0), &cfg, limits()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mission_flies_published_goal() {
        let mut scenario = Scenario::reference();
        scenario.file.planning.prior_map = true;
        let mut m = Mission::new(scenario, "t");
        let goal = Vec3::new(0.0, 3.0, 1.0);
        let drawn = DrawnTrajectory::single_goal(m.to_minimap(&goal), 0.0);
        let out = m.publish(drawn).unwrap();
        assert!(out.errors().is_empty());
        assert_eq!(m.drone().mode(), FlightMode::Tracking);
        let snapshot = m.active_snapshot().unwrap().clone();
        while m.drone().mode() == FlightMode::Tracking {
            m.step();
            assert!(snapshot.is_free_at(&m.drone().state().position));
        }
        assert!((m.drone().state().position - out.reached[0]).norm() < 0.05);
        assert_eq!(m.stats().collisions, 0);
        let log = m.finish();
        let kinds: Vec<&str> = log
            .records()
            .map(|r| match r {
                LogRecord::Published { .. } => "published",
                LogRecord::PlanResult { .. } => "plan",
                _ => "",
            })
            .filter(|s| !s.is_empty())
            .collect();
        assert_eq!(kinds, vec!["published", "plan"]);
    }

    #[test]
    fn goal_without_altitude_flies_at_default() {
        let mut scenario = Scenario::reference();
        scenario.file.planning.prior_map = true;
        let mut m = Mission::new(scenario, "t");
        let w = Vec3::new(-5.0, 0.0, 0.0);
        let mini = m.to_minimap(&w);
        match m.handle(MissionCommand::Goal { xy: [mini.x, mini.y], z: None }).unwrap() {
            CommandEffect::Plan(req) => {
                let world = req.minimap.minimap_to_world(&req.drawn.samples()[0]);
                assert!((world - Vec3::new(-5.0, 0.0, 1.0)).norm() < 1e-9);
            }
            CommandEffect::Applied => panic!("goal needs planning"),
        }
    }

    #[test]
    fn velocity_command_needs_velocity_mode() {
        let mut m = Mission::new(Scenario::reference(), "t");
        let err = m.handle(MissionCommand::Velocity { linear: Vec3::x(), yaw_rate: 0.0 }).unwrap_err();
        assert!(matches!(err, MissionError::Sim(SimError::ModeError(FlightMode::Hover))));
        m.handle(MissionCommand::SetMode(FlightMode::Velocity)).unwrap();
        m.handle(MissionCommand::Velocity { linear: Vec3::x(), yaw_rate: 0.0 }).unwrap();
        for _ in 0..50 {
            m.step();
        }
        assert!(m.drone().state().position.x > -7.0 + 0.3);
    }

    #[test]
    fn publish_without_drawing_errors() {
        let mut m = Mission::new(Scenario::reference(), "t");
        assert!(matches!(m.handle(MissionCommand::Publish), Err(MissionError::NoTrajectory)));
    }

    #[test]
    fn operator_cloud_adds_known_cells() {
        let mut m = Mission::new(Scenario::reference(), "t");
        let before = m.grid().known_count();
        let n = m.operator_scan(&headset_pose(Vec3::new(5.0, 3.0, 1.6), std::f64::consts::PI)).unwrap();
        assert!(n > 0);
        assert!(m.grid().known_count() > before);
    }
}
