//! The mission loop thread and its planning worker.
//!
//! The loop owns the [`Mission`]. Sessions talk to it only through
//! [`LoopInput`] messages and read its output from their [`Outbox`].

use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use mrnav_core::geom::{FrameId, RigidTransform};
use mrnav_core::mapping::{CellState, CloudSource, PointCloud};
use mrnav_core::mission::{CommandEffect, Mission, MissionCommand, MissionError, PlanOutcome, PlanRequest};
use mrnav_core::runlog::{LegError, MissionLog};
use mrnav_core::scenario::Scenario;
use nalgebra::Vector3;

use crate::codec::{
    Ack, ErrorCode, ErrorReply, MapDelta, MeshUpdate, Message, MetricsUpdate, Payload, PlanResult, RepairEvent,
    SessionConfig, StateUpdate,
};
use crate::outbox::Outbox;

pub const STATE_PERIOD: f64 = 0.05;
pub const MAP_PERIOD: f64 = 0.1;
pub const SLOW_PERIOD: f64 = 1.0;
/// Display sampling of dispatched trajectories, seconds.
pub const TRAJECTORY_DT: f64 = 0.1;

pub type SessionId = u64;

pub enum LoopInput {
    Attach { session: SessionId, outbox: Arc<Outbox> },
    Detach { session: SessionId },
    /// A decoded inbound message.
    Inbound { session: SessionId, message: Message },
    /// A reply produced before the loop saw the message, such as a decode error.
    Reply { session: SessionId, payload: Payload },
    Shutdown,
}

struct PlanJob {
    session: SessionId,
    trigger: u64,
    request: PlanRequest,
}

struct PlanDone {
    job: PlanJob,
    outcome: Result<PlanOutcome, MissionError>,
}

struct Session {
    id: SessionId,
    outbox: Arc<Outbox>,
    last_inbound: Option<u64>,
}

/// Loop pacing: `speed` simulated seconds per wall-clock second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopConfig {
    pub speed: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self { speed: 1.0 }
    }
}

pub struct MissionService {
    input: Sender<LoopInput>,
    handle: Option<JoinHandle<MissionLog>>,
}

impl MissionService {
    pub fn spawn(mission: Mission, cfg: LoopConfig) -> Self {
        let (tx, rx) = mpsc::channel();
        let handle = thread::Builder::new()
            .name("mission-loop".into())
            .spawn(move || run_loop(mission, cfg, rx))
            .expect("spawning the mission loop");
        Self { input: tx, handle: Some(handle) }
    }

    pub fn sender(&self) -> Sender<LoopInput> {
        self.input.clone()
    }

    /// Stops the loop and returns the finished mission log.
    pub fn stop(mut self) -> MissionLog {
        let _ = self.input.send(LoopInput::Shutdown);
        self.handle.take().expect("joined once").join().expect("mission loop panicked")
    }
}

impl Drop for MissionService {
    fn drop(&mut self) {
        if let Some(h) = self.handle.take() {
            let _ = self.input.send(LoopInput::Shutdown);
            let _ = h.join();
        }
    }
}

fn spawn_planner(done: Sender<PlanDone>) -> (Sender<PlanJob>, JoinHandle<()>) {
    let (tx, rx) = mpsc::channel::<PlanJob>();
    let handle = thread::Builder::new()
        .name("planner".into())
        .spawn(move || {
            for job in rx {
                let outcome = job.request.run();
                if done.send(PlanDone { job, outcome }).is_err() {
                    break;
                }
            }
        })
        .expect("spawning the planner");
    (tx, handle)
}

struct Loop {
    mission: Mission,
    session: Option<Session>,
    planner: Sender<PlanJob>,
    next_state: f64,
    next_map: f64,
    next_slow: f64,
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl Loop {
    fn send(&self, payload: Payload) {
        if let Some(s) = &self.session {
            s.outbox.push(self.mission.time(), payload);
        }
    }

    fn snapshot(&mut self) -> MapDelta {
        let grid = self.mission.grid();
        let g = *grid.geometry();
        let cells = grid
            .states()
            .iter()
            .enumerate()
            .filter(|(_, s)| **s != CellState::Unknown)
            .map(|(n, s)| MapDelta::cell(g.unlinear(n), *s))
            .collect();
        let scenario = self.mission.scenario();
        MapDelta {
            full: true,
            cells,
            config: Some(SessionConfig {
                origin: arr(&g.origin),
                resolution: g.resolution,
                dims: g.dims,
                minimap_scale: scenario.minimap.scale(),
                flight_altitude: scenario.planning().flight_altitude,
                state_rate_hz: 1.0 / STATE_PERIOD,
            }),
        }
    }

    fn attach(&mut self, id: SessionId, outbox: Arc<Outbox>) {
        if let Some(old) = self.session.take() {
            old.outbox.close();
        }
        self.mission.grid_mut().take_changes();
        self.session = Some(Session { id, outbox, last_inbound: None });
        let snap = self.snapshot();
        self.send(Payload::MapDelta(snap));
        self.mission.grid_mut().take_mesh_dirty();
        self.send_mesh();
    }

    fn send_mesh(&self) {
        let mesh = self.mission.grid().extract_mesh();
        if mesh.triangles.is_empty() {
            return;
        }
        self.send(Payload::MeshUpdate(MeshUpdate { vertices: mesh.vertices.iter().map(arr).collect(), triangles: mesh.triangles }));
    }

    fn reply_to(&self, session: SessionId, payload: Payload) {
        if let Some(s) = self.session.as_ref().filter(|s| s.id == session) {
            s.outbox.push(self.mission.time(), payload);
        }
    }

    fn error(code: ErrorCode, seq: Option<u64>, message: impl Into<String>) -> Payload {
        Payload::Error(ErrorReply { ack: seq, code, message: message.into() })
    }

    fn inbound(&mut self, session: SessionId, m: Message) {
        let Some(s) = self.session.as_mut().filter(|s| s.id == session) else { return };
        if s.last_inbound.is_some_and(|last| m.seq <= last) {
            let last = s.last_inbound.unwrap_or_default();
            self.reply_to(session, Self::error(ErrorCode::OutOfOrder, Some(m.seq), format!("seq {} after {last}", m.seq)));
            return;
        }
        s.last_inbound = Some(m.seq);
        if !m.kind().is_command() {
            let text = format!("{} is not accepted from clients", m.kind().name());
            self.reply_to(session, Self::error(ErrorCode::NotACommand, Some(m.seq), text));
            return;
        }
        let needs_plan = matches!(m.payload, Payload::GoalCmd(_) | Payload::PublishCmd);
        let cmd = match m.payload {
            Payload::GoalCmd(g) => MissionCommand::Goal { xy: g.position, z: g.z },
            Payload::DrawSample(d) => MissionCommand::DrawSample { position: v3(d.position), stamp: m.stamp },
            Payload::PublishCmd => MissionCommand::Publish,
            Payload::ModeCmd(c) => MissionCommand::SetMode(c.mode),
            Payload::VelocityCmd(c) => MissionCommand::Velocity { linear: v3(c.linear), yaw_rate: c.yaw_rate },
            Payload::PointCloudIn(c) => {
                let cloud = PointCloud::new(c.points.iter().map(|p| v3(*p)).collect(), FrameId::H, CloudSource::Operator, m.stamp);
                match cloud {
                    Ok(cloud) => MissionCommand::OperatorCloud {
                        cloud,
                        headset: RigidTransform::from_array(FrameId::H, FrameId::W, c.headset_pose),
                    },
                    Err(e) => {
                        self.reply_to(session, Self::error(ErrorCode::Rejected, Some(m.seq), e.to_string()));
                        return;
                    }
                }
            }
            _ => unreachable!("non-commands were rejected above"),
        };
        // Planning commands are acknowledged before the snapshot is taken so the
        // reply does not wait for any map work.
        if needs_plan {
            if matches!(cmd, MissionCommand::Publish) && self.mission.drawing().is_none() {
                self.reply_to(session, Self::error(ErrorCode::Rejected, Some(m.seq), MissionError::NoTrajectory.to_string()));
                return;
            }
            self.reply_to(session, Payload::Ack(Ack { ack: m.seq }));
        }
        match self.mission.handle(cmd) {
            Ok(CommandEffect::Applied) => self.reply_to(session, Payload::Ack(Ack { ack: m.seq })),
            Ok(CommandEffect::Plan(request)) => {
                let _ = self.planner.send(PlanJob { session, trigger: m.seq, request });
            }
            Err(e) if needs_plan => self.send_plan_failure(session, m.seq, &e),
            Err(e) => self.reply_to(session, Self::error(ErrorCode::Rejected, Some(m.seq), e.to_string())),
        }
    }

    fn send_plan_failure(&self, session: SessionId, trigger: u64, e: &MissionError) {
        let result = PlanResult {
            plan: 0,
            request: trigger,
            sigma_d: Vec::new(),
            sigma_r: Vec::new(),
            trajectory: Vec::new(),
            repairs: Vec::new(),
            errors: vec![LegError { leg: 0, error: e.to_string() }],
            stop_and_go: false,
        };
        self.reply_to(session, Payload::PlanResult(result));
    }

    fn plan_done(&mut self, done: PlanDone) {
        let PlanDone { job, outcome } = done;
        match outcome {
            Ok(outcome) => {
                self.mission.apply_plan(&job.request, &outcome);
                let result = PlanResult {
                    plan: job.request.id,
                    request: job.trigger,
                    sigma_d: outcome.sigma_d.iter().map(arr).collect(),
                    sigma_r: outcome.sigma_r.iter().map(arr).collect(),
                    trajectory: outcome.sampled(TRAJECTORY_DT).iter().map(arr).collect(),
                    repairs: outcome
                        .repairs
                        .iter()
                        .map(|r| RepairEvent { index: r.index, from: arr(&r.from), to: arr(&r.to) })
                        .collect(),
                    errors: outcome.errors().into_iter().map(|(leg, e)| LegError { leg, error: e.to_string() }).collect(),
                    stop_and_go: outcome.stop_and_go,
                };
                self.reply_to(job.session, Payload::PlanResult(result));
            }
            Err(e) => self.send_plan_failure(job.session, job.trigger, &e),
        }
    }

    fn telemetry(&mut self) {
        let t = self.mission.time();
        let eps = 1e-9;
        if t + eps >= self.next_state {
            self.next_state += STATE_PERIOD;
            let s = *self.mission.drone().state();
            self.send(Payload::StateUpdate(StateUpdate {
                pose: s.pose().to_array(),
                velocity: arr(&s.velocity),
                mode: self.mission.drone().mode(),
            }));
        }
        if t + eps >= self.next_map {
            self.next_map += MAP_PERIOD;
            let changes = self.mission.grid_mut().take_changes();
            if !changes.is_empty() {
                let mut cells: Vec<_> = changes.into_iter().map(|c| MapDelta::cell(c.index, c.state)).collect();
                cells.sort_unstable_by_key(|c| c.0);
                self.send(Payload::MapDelta(MapDelta { full: false, cells, config: None }));
            }
        }
        if t + eps >= self.next_slow {
            self.next_slow += SLOW_PERIOD;
            if self.mission.grid_mut().take_mesh_dirty() && self.session.is_some() {
                self.send_mesh();
            }
            let stats = self.mission.stats();
            self.send(Payload::MetricsUpdate(MetricsUpdate {
                explored_area: self.mission.grid().explored_area(),
                known_cells: self.mission.grid().known_count() as u64,
                plans: stats.plans,
                replans: stats.replans,
                collisions: stats.collisions,
            }));
        }
    }
}

fn run_loop(mission: Mission, cfg: LoopConfig, rx: Receiver<LoopInput>) -> MissionLog {
    let (done_tx, done_rx) = mpsc::channel();
    let (planner, planner_handle) = spawn_planner(done_tx);
    let dt = mission.scenario().sim.dt;
    let mut lp = Loop { mission, session: None, planner, next_state: 0.0, next_map: 0.0, next_slow: 0.0 };
    let start = Instant::now();
    let tick = Duration::from_secs_f64(dt / cfg.speed.max(1e-6));
    'outer: loop {
        let deadline = start + tick * (lp.mission.steps() as u32 + 1);
        loop {
            while let Ok(done) = done_rx.try_recv() {
                lp.plan_done(done);
            }
            let now = Instant::now();
            if now >= deadline {
                break;
            }
            // Short waits keep finished plans flowing while idle.
            let wait = (deadline - now).min(Duration::from_millis(5));
            match rx.recv_timeout(wait) {
                Ok(LoopInput::Attach { session, outbox }) => lp.attach(session, outbox),
                Ok(LoopInput::Detach { session }) => {
                    if lp.session.as_ref().is_some_and(|s| s.id == session) {
                        if let Some(s) = lp.session.take() {
                            s.outbox.close();
                        }
                    }
                }
                Ok(LoopInput::Inbound { session, message }) => lp.inbound(session, message),
                Ok(LoopInput::Reply { session, payload }) => lp.reply_to(session, payload),
                Ok(LoopInput::Shutdown) | Err(RecvTimeoutError::Disconnected) => break 'outer,
                Err(RecvTimeoutError::Timeout) => {}
            }
        }
        lp.mission.step();
        lp.telemetry();
    }
    if let Some(s) = lp.session.take() {
        s.outbox.close();
    }
    // Plans still in flight are discarded.
    drop(lp.planner);
    let _ = planner_handle.join();
    lp.mission.finish()
}

/// Run identifier for interactive sessions.
pub fn serve_run_id(scenario: &Scenario) -> String {
    format!("{}-serve-{:016x}", scenario.name(), scenario.digest)
}
