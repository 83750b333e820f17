//! Log summary and consistency checks for `replay`.

use std::collections::BTreeSet;
use std::fmt;

use anyhow::Result;
use mrnav_core::runlog::{LogRecord, MissionLog};

#[derive(Debug, Default)]
pub struct Summary {
    pub run: String,
    pub scenario: Option<String>,
    pub policy: Option<String>,
    pub seed: Option<u64>,
    pub duration: f64,
    pub final_area: f64,
    pub published: usize,
    pub plan_results: usize,
    pub failed_legs: usize,
    pub repairs: usize,
    pub replans: usize,
    pub collisions: usize,
    pub problems: Vec<String>,
}

pub fn summarize(log: &MissionLog) -> Result<Summary> {
    let run = log.single_run()?.unwrap_or_default().to_string();
    let mut s = Summary { run, ..Summary::default() };
    let mut last_t = f64::NEG_INFINITY;
    let mut last_area = 0.0;
    let mut published = BTreeSet::new();
    let mut answered = BTreeSet::new();
    for (line, r) in log.records().enumerate() {
        if let Some(t) = r.time() {
            if t < last_t {
                s.problems.push(format!("record {}: time {t} after {last_t}", line + 1));
            }
            last_t = last_t.max(t);
            s.duration = last_t;
        }
        match r {
            LogRecord::Header { scenario, policy, seed, .. } => {
                s.scenario = Some(scenario.clone());
                s.policy = policy.clone();
                s.seed = *seed;
            }
            LogRecord::Explored { area, .. } => {
                if *area < last_area {
                    s.problems.push(format!("record {}: explored area fell to {area}", line + 1));
                }
                last_area = *area;
                s.final_area = *area;
            }
            LogRecord::Published { plan, .. } => {
                s.published += 1;
                published.insert(*plan);
            }
            LogRecord::PlanResult { plan, errors, .. } => {
                s.plan_results += 1;
                s.failed_legs += errors.len();
                answered.insert(*plan);
            }
            LogRecord::Repair { .. } => s.repairs += 1,
            LogRecord::Replan { .. } => s.replans += 1,
            LogRecord::Collision { .. } => s.collisions += 1,
            LogRecord::FinalGrid { area, .. } => s.final_area = *area,
            LogRecord::State { .. } | LogRecord::ModeChange { .. } => {}
        }
    }
    for plan in published.difference(&answered) {
        s.problems.push(format!("plan {plan} was published without a result"));
    }
    Ok(s)
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "run          {}", self.run)?;
        if let Some(sc) = &self.scenario {
            writeln!(f, "scenario     {sc}")?;
        }
        if let Some(p) = &self.policy {
            writeln!(f, "policy       {p}")?;
        }
        if let Some(seed) = self.seed {
            writeln!(f, "seed         {seed}")?;
        }
        writeln!(f, "duration     {:.2} s", self.duration)?;
        writeln!(f, "explored     {:.2} m2", self.final_area)?;
        writeln!(f, "plans        {} published, {} results, {} failed legs", self.published, self.plan_results, self.failed_legs)?;
        writeln!(f, "repairs      {}", self.repairs)?;
        writeln!(f, "replans      {}", self.replans)?;
        writeln!(f, "collisions   {}", self.collisions)?;
        for p in &self.problems {
            writeln!(f, "problem      {p}")?;
        }
        Ok(())
    }
}
