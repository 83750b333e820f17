use std::collections::BTreeSet;

use mrnav_core::mapping::{CellState, GridExport};
use mrnav_core::mission::{CommandEffect, DrawnTrajectory, Mission, MissionCommand, TaskKind};
use mrnav_core::policy::{run_policy, Policy};
use mrnav_core::runlog::{explored_series, LogRecord, MissionLog};
use mrnav_core::scenario::Scenario;
use mrnav_core::sim::FlightMode;
use mrnav_core::trajectory::{allocate_times, fit_min_snap};
use mrnav_core::{MinimapTransform, MinimapTransformF32, TrajectoryF32, Vec3, Vec3F32};

fn final_grid(log: &MissionLog) -> GridExport {
    let text = log
        .records()
        .find_map(|r| match r {
            LogRecord::FinalGrid { grid, .. } => Some(grid.clone()),
            _ => None,
        })
        .expect("finished logs carry the final grid");
    GridExport::parse(&text).unwrap()
}

/// Post-hoc checks every finished run must satisfy.
fn check_log(log: &MissionLog, scenario: &Scenario) {
    let grid = final_grid(log);
    let mut last_t = f64::NEG_INFINITY;
    let (mut published, mut answered) = (BTreeSet::new(), BTreeSet::new());
    for r in log.records() {
        if let Some(t) = r.time() {
            assert!(t >= last_t, "time went back from {last_t} to {t}");
            last_t = t;
        }
        match r {
            LogRecord::State { position, mode, .. } => {
                let p = Vec3::from(*position);
                assert!(!scenario.scene.is_occupied(&p), "state inside an obstacle at {p:?}");
                if *mode == FlightMode::Tracking {
                    let idx = grid.geometry.index_of(&p).expect("tracked states stay in the grid");
                    assert_ne!(grid.states[grid.geometry.linear(idx)], CellState::Occupied, "{p:?}");
                }
            }
            LogRecord::Published { plan, .. } => {
                published.insert(*plan);
            }
            LogRecord::PlanResult { plan, .. } => {
                answered.insert(*plan);
            }
            LogRecord::Collision { position, .. } => panic!("collision at {position:?}"),
            _ => {}
        }
    }
    assert_eq!(published, answered, "every published trajectory has a result");
    let series = explored_series(log).unwrap();
    assert!(series.windows(2).all(|w| w[0].1 <= w[1].1));
    let last = series.last().unwrap().1;
    assert!((last - grid.explored_area()).abs() < 1e-9);
}

#[test]
fn frontier_run_is_safe_and_consistent() {
    let scenario = Scenario::reference();
    let log = run_policy(&scenario, Policy::AutonomousFrontier, 150.0, 4);
    check_log(&log, &scenario);
    let plans = log.records().filter(|r| matches!(r, LogRecord::PlanResult { .. })).count();
    assert!(plans >= 3, "{plans}");
    assert!(explored_series(&log).unwrap().last().unwrap().1 > 100.0);
}

#[test]
fn teleop_run_is_safe_and_consistent() {
    let scenario = Scenario::reference();
    let log = run_policy(&scenario, Policy::TeleopRandomWalk, 150.0, 4);
    check_log(&log, &scenario);
    assert!(log.records().any(|r| matches!(r, LogRecord::ModeChange { mode: FlightMode::Velocity, .. })));
}

#[test]
fn open_floor_frontier_approaches_floor_area() {
    // Without walls the forward camera also clears air beyond the floor edges,
    // so the explored area reaches at least the floor itself.
    let scenario = Scenario::open_floor();
    let log = run_policy(&scenario, Policy::AutonomousFrontier, 360.0, 0);
    check_log(&log, &scenario);
    let area = explored_series(&log).unwrap().last().unwrap().1;
    assert!(area >= 85.0 * 0.98, "{area}");
}

#[test]
fn bundled_scenarios_match_files() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let reference = Scenario::load(dir.join("reference.toml")).unwrap();
    assert_eq!(reference.digest, Scenario::reference().digest);
    assert_eq!(reference.geometry.dims, [100, 100, 100]);
    let floor = Scenario::load(dir.join("floor85.toml")).unwrap();
    assert_eq!(floor.digest, Scenario::open_floor().digest);
    assert!(Scenario::from_toml("name = 1").is_err());
}

#[test]
fn commands_drive_a_mission_like_an_operator() {
    let mut scenario = Scenario::reference();
    scenario.file.planning.prior_map = true;
    let mut m = Mission::new(scenario, "operator");
    for _ in 0..10 {
        m.step();
    }
    let pts = [Vec3::new(-6.0, 0.0, 1.0), Vec3::new(-5.2, 2.0, 1.0), Vec3::new(-5.2, 3.0, 1.0)];
    for (i, p) in pts.iter().enumerate() {
        let cmd = MissionCommand::DrawSample { position: m.to_minimap(p), stamp: m.time() + 0.2 * i as f64 };
        assert!(matches!(m.handle(cmd).unwrap(), CommandEffect::Applied));
    }
    assert_eq!(m.drawing().unwrap().samples().len(), 3);
    let CommandEffect::Plan(request) = m.handle(MissionCommand::Publish).unwrap() else { panic!("publish plans") };
    // Same drawing, same snapshot: same plan.
    let a = request.run().unwrap();
    let b = request.run().unwrap();
    assert_eq!(a, b);
    assert!(a.errors().is_empty());
    m.apply_plan(&request, &a);
    assert!(m.drawing().is_none());
    let mut t = 0;
    while m.drone().mode() == FlightMode::Tracking && t < 5000 {
        m.step();
        t += 1;
    }
    assert!((m.drone().state().position - a.reached[2]).norm() < 0.1);
    assert_eq!(m.stats().collisions, 0);
}

#[test]
fn single_goal_drawings_need_one_sample() {
    let d = DrawnTrajectory::single_goal(Vec3::zeros(), 0.0);
    assert_eq!(d.task(), TaskKind::SingleGoal);
    assert_eq!(d.samples().len(), 1);
}

#[test]
fn f32_and_f64_cores_agree() {
    let m64 = MinimapTransform::with_scale(20.0).unwrap();
    let m32 = MinimapTransformF32::with_scale(20.0).unwrap();
    let p = m64.minimap_to_world(&Vec3::new(0.1, -0.05, 0.05));
    let q = m32.minimap_to_world(&Vec3F32::new(0.1, -0.05, 0.05));
    assert!((p.cast::<f32>() - q).norm() < 1e-5);

    let w64 = vec![Vec3::zeros(), Vec3::new(2.0, 1.0, 0.5), Vec3::new(3.0, -1.0, 1.0)];
    let w32: Vec<Vec3F32> = w64.iter().map(|v| v.cast()).collect();
    let t64 = fit_min_snap(&w64, &allocate_times(&w64, 1.0)).unwrap();
    let t32: TrajectoryF32 = fit_min_snap(&w32, &allocate_times(&w32, 1.0)).unwrap();
    for k in 0..=20 {
        let s = k as f64 / 20.0;
        let a = t64.sample(s * t64.total_duration()).position;
        let b = t32.sample(s as f32 * t32.total_duration()).position;
        assert!((a.cast::<f32>() - b).norm() < 1e-3, "{a:?} {b:?}");
    }
}
