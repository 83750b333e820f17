//! Scripted operators: a frontier explorer that publishes single goals, and a
//! first-person teleoperator doing a seeded random walk with avoidance reflexes.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mapping::{CellState, GridIndex, InflatedGrid, OccupancyGrid};
use crate::mission::{DrawnTrajectory, Mission, MissionCommand};
use crate::runlog::{LogEntry, LogRecord, MissionLog};
use crate::scenario::Scenario;
use crate::sim::FlightMode;

type Vec3 = Vector3<f64>;

/// Candidates tried per decision before giving up until the next check.
const MAX_CANDIDATES: usize = 8;
/// Delay before looking again when no frontier is reachable, seconds.
const RECHECK: f64 = 2.0;
/// Half-width and half-height of the teleoperator's collision corridor, meters.
const REFLEX_HALF_WIDTH: f64 = 0.6;
const REFLEX_HALF_HEIGHT: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    AutonomousFrontier,
    TeleopRandomWalk,
}

impl Policy {
    pub const ALL: [Policy; 2] = [Policy::AutonomousFrontier, Policy::TeleopRandomWalk];

    pub fn short_name(self) -> &'static str {
        match self {
            Policy::AutonomousFrontier => "frontier",
            Policy::TeleopRandomWalk => "teleop",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown policy {0:?} (expected frontier or teleop)")]
pub struct UnknownPolicy(pub String);

impl FromStr for Policy {
    type Err = UnknownPolicy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "frontier" | "autonomous-frontier" | "autonomousfrontier" => Ok(Policy::AutonomousFrontier),
            "teleop" | "teleop-random-walk" | "teleoprandomwalk" => Ok(Policy::TeleopRandomWalk),
            _ => Err(UnknownPolicy(s.to_string())),
        }
    }
}

/// Known-free voxels in the altitude layer of `from` that border an unexplored
/// column, ordered by 4-connected distance through inflated free space.
pub fn frontier_cells(grid: &OccupancyGrid, inflated: &InflatedGrid, from: &Vec3, min_distance: f64) -> Vec<GridIndex> {
    let geom = *grid.geometry();
    let seed = geom.index_unchecked(from);
    if !geom.contains(seed) {
        return Vec::new();
    }
    let nj = geom.dims[1];
    let mut seen = vec![false; geom.dims[0] * nj];
    let mut queue = VecDeque::from([seed]);
    seen[seed.i as usize * nj + seed.j as usize] = true;
    let mut out = Vec::new();
    const N4: [[i32; 3]; 4] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0]];
    while let Some(c) = queue.pop_front() {
        let borders_unknown = N4.iter().any(|o| {
            let q = c.offset(*o);
            geom.contains(q) && !grid.column_explored(q.i, q.j)
        });
        if borders_unknown && grid.state(c) == CellState::Free && (geom.center(c) - from).norm() >= min_distance {
            out.push(c);
        }
        for o in N4 {
            let q = c.offset(o);
            if !geom.contains(q) {
                continue;
            }
            let slot = q.i as usize * nj + q.j as usize;
            if !seen[slot] && inflated.is_free(q) {
                seen[slot] = true;
                queue.push_back(q);
            }
        }
    }
    out
}

enum FrontierPhase {
    Spin { until: f64 },
    Decide,
    Flying { goal: GridIndex },
    Wait { until: f64 },
}

/// Flies to the nearest reachable frontier, one published goal at a time.
pub struct FrontierDriver {
    phase: FrontierPhase,
    blacklist: HashSet<GridIndex>,
    goals: usize,
}

impl Default for FrontierDriver {
    fn default() -> Self {
        Self::new()
    }
}

impl FrontierDriver {
    pub fn new() -> Self {
        Self { phase: FrontierPhase::Decide, blacklist: HashSet::new(), goals: 0 }
    }

    /// Dispatched goal count.
    pub fn goals(&self) -> usize {
        self.goals
    }

    pub fn start(&mut self, mission: &mut Mission) {
        let turn = mission.scenario().policy().turn_rate;
        let _ = mission.handle(MissionCommand::SetMode(FlightMode::Velocity));
        let _ = mission.handle(MissionCommand::Velocity { linear: Vec3::zeros(), yaw_rate: turn });
        self.phase = FrontierPhase::Spin { until: mission.time() + std::f64::consts::TAU / turn };
    }

    pub fn tick(&mut self, mission: &mut Mission) {
        let now = mission.time();
        match self.phase {
            FrontierPhase::Spin { until } => {
                let alt = mission.scenario().planning().flight_altitude;
                let vz = alt - mission.drone().state().position.z;
                let turn = mission.scenario().policy().turn_rate;
                let _ = mission.handle(MissionCommand::Velocity { linear: Vector3::new(0.0, 0.0, vz), yaw_rate: turn });
                if now + 1e-9 >= until {
                    let _ = mission.handle(MissionCommand::SetMode(FlightMode::Hover));
                    self.phase = FrontierPhase::Decide;
                }
            }
            FrontierPhase::Wait { until } => {
                if now + 1e-9 >= until {
                    self.phase = FrontierPhase::Decide;
                }
            }
            FrontierPhase::Flying { goal } => {
                if mission.drone().mode() != FlightMode::Tracking && !mission.replan_pending() {
                    self.blacklist.insert(goal);
                    self.phase = FrontierPhase::Decide;
                }
            }
            FrontierPhase::Decide => self.decide(mission),
        }
    }

    fn decide(&mut self, mission: &mut Mission) {
        let inflated = Arc::new(mission.planning_grid());
        let mut from = mission.drone().state().position;
        from.z = mission.scenario().planning().flight_altitude;
        let min_distance = mission.scenario().policy().min_goal_distance;
        let candidates: Vec<GridIndex> = frontier_cells(mission.grid(), &inflated, &from, min_distance)
            .into_iter()
            .filter(|c| !self.blacklist.contains(c))
            .take(MAX_CANDIDATES)
            .collect();
        let geom = *mission.grid().geometry();
        for c in candidates {
            let goal = mission.to_minimap(&geom.center(c));
            let drawn = DrawnTrajectory::single_goal(goal, mission.time());
            match mission.publish_on(drawn, inflated.clone()) {
                Ok(out) if out.errors().is_empty() && out.trajectory.is_some() => {
                    self.goals += 1;
                    self.phase = FrontierPhase::Flying { goal: c };
                    return;
                }
                _ => {
                    self.blacklist.insert(c);
                }
            }
        }
        self.phase = FrontierPhase::Wait { until: mission.time() + RECHECK };
    }
}

/// Holds altitude and flies forward, turning at random and away from obstacles
/// seen in the latest depth frame.
pub struct TeleopDriver {
    rng: ChaCha8Rng,
    yaw_rate: f64,
    next_change: f64,
    avoiding: Option<f64>,
}

impl TeleopDriver {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), yaw_rate: 0.0, next_change: 0.0, avoiding: None }
    }

    fn exponential(&mut self, mean: f64) -> f64 {
        let u: f64 = self.rng.random();
        -mean * (1.0 - u).ln()
    }

    pub fn start(&mut self, mission: &mut Mission) {
        let _ = mission.handle(MissionCommand::SetMode(FlightMode::Velocity));
        let mean = mission.scenario().policy().mean_turn_interval;
        self.next_change = mission.time() + self.exponential(mean);
    }

    fn obstacle_ahead(mission: &Mission) -> bool {
        let reach = mission.scenario().policy().reflex_distance;
        mission.last_cloud().is_some_and(|cloud| {
            cloud.points.iter().any(|p| {
                p.x > 0.0 && p.x < reach && p.y.abs() < REFLEX_HALF_WIDTH && p.z.abs() < REFLEX_HALF_HEIGHT
            })
        })
    }

    pub fn tick(&mut self, mission: &mut Mission) {
        let cfg = *mission.scenario().policy();
        let now = mission.time();
        let blocked = Self::obstacle_ahead(mission);
        match (self.avoiding, blocked) {
            (None, true) => {
                let dir = if self.rng.random::<bool>() { 1.0 } else { -1.0 };
                self.avoiding = Some(dir * cfg.turn_rate);
            }
            (Some(_), false) => {
                self.avoiding = None;
                self.next_change = now + self.exponential(cfg.mean_turn_interval);
            }
            _ => {}
        }
        if self.avoiding.is_none() && now >= self.next_change {
            self.yaw_rate = self.rng.random_range(-cfg.turn_rate..=cfg.turn_rate);
            self.next_change = now + self.exponential(cfg.mean_turn_interval);
        }
        let state = mission.drone().state();
        let vz = mission.scenario().planning().flight_altitude - state.position.z;
        let (forward, yaw_rate) = match self.avoiding {
            Some(rate) => (0.0, rate),
            None => (cfg.teleop_speed, self.yaw_rate),
        };
        let linear = Vector3::new(forward, 0.0, vz);
        let _ = mission.handle(MissionCommand::Velocity { linear, yaw_rate });
    }
}

enum Driver {
    Frontier(FrontierDriver),
    Teleop(TeleopDriver),
}

/// Run identifier shared by every line of a policy run's log.
pub fn run_id(scenario: &Scenario, policy: Policy, seed: u64) -> String {
    format!("{}-{}-{}-{:016x}", scenario.name(), policy, seed, scenario.digest)
}

/// Flies `policy` for `budget` simulated seconds and returns the run's log.
pub fn run_policy(scenario: &Scenario, policy: Policy, budget: f64, seed: u64) -> MissionLog {
    let id = run_id(scenario, policy, seed);
    let steps = (budget / scenario.sim.dt).round().max(0.0) as u64;
    let mut mission = Mission::new(scenario.clone(), id.clone());
    let mut driver = match policy {
        Policy::AutonomousFrontier => Driver::Frontier(FrontierDriver::new()),
        Policy::TeleopRandomWalk => Driver::Teleop(TeleopDriver::new(seed)),
    };
    match &mut driver {
        Driver::Frontier(d) => d.start(&mut mission),
        Driver::Teleop(d) => d.start(&mut mission),
    }
    for _ in 0..steps {
        match &mut driver {
            Driver::Frontier(d) => d.tick(&mut mission),
            Driver::Teleop(d) => d.tick(&mut mission),
        }
        mission.step();
    }
    let mut log = mission.finish();
    let header = LogRecord::Header {
        scenario: scenario.name().to_string(),
        policy: Some(policy.to_string()),
        seed: Some(seed),
        budget: Some(budget),
    };
    log.entries.insert(0, LogEntry { run: id, record: header });
    log
}
