//! Mission log: one JSON object per line, every line tagged with its run id.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mission::TaskKind;
use crate::sim::FlightMode;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log mixes runs {0} and {1}")]
    MixedRuns(String, String),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegError {
    pub leg: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Header {
        scenario: String,
        policy: Option<String>,
        seed: Option<u64>,
        budget: Option<f64>,
    },
    State {
        t: f64,
        position: [f64; 3],
        velocity: [f64; 3],
        yaw: f64,
        mode: FlightMode,
    },
    Explored {
        t: f64,
        area: f64,
    },
    /// Operator trajectory converted to `W`.
    Published {
        t: f64,
        plan: u64,
        task: TaskKind,
        sigma_d: Vec<[f64; 3]>,
    },
    Repair {
        t: f64,
        plan: u64,
        index: Option<usize>,
        from: [f64; 3],
        to: [f64; 3],
    },
    /// Re-planned polyline and the dispatched trajectory's duration.
    PlanResult {
        t: f64,
        plan: u64,
        sigma_r: Vec<[f64; 3]>,
        errors: Vec<LegError>,
        duration: Option<f64>,
        stop_and_go: bool,
    },
    Replan {
        t: f64,
        plan: u64,
        remaining: usize,
    },
    ModeChange {
        t: f64,
        mode: FlightMode,
    },
    Collision {
        t: f64,
        position: [f64; 3],
    },
    FinalGrid {
        t: f64,
        area: f64,
        grid: String,
    },
}

impl LogRecord {
    pub fn time(&self) -> Option<f64> {
        match self {
            LogRecord::Header { .. } => None,
            LogRecord::State { t, .. }
            | LogRecord::Explored { t, .. }
            | LogRecord::Published { t, .. }
            | LogRecord::Repair { t, .. }
            | LogRecord::PlanResult { t, .. }
            | LogRecord::Replan { t, .. }
            | LogRecord::ModeChange { t, .. }
            | LogRecord::Collision { t, .. }
            | LogRecord::FinalGrid { t, .. } => Some(*t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub run: String,
    #[serde(flatten)]
    pub record: LogRecord,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MissionLog {
    pub entries: Vec<LogEntry>,
}

impl MissionLog {
    pub fn push(&mut self, run: &str, record: LogRecord) {
        self.entries.push(LogEntry { run: run.to_string(), record });
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn records(&self) -> impl Iterator<Item = &LogRecord> {
        self.entries.iter().map(|e| &e.record)
    }

    pub fn run_id(&self) -> Option<&str> {
        self.entries.first().map(|e| e.run.as_str())
    }

    /// Appends all entries of `other`, as when concatenating log files.
    pub fn extend(&mut self, other: MissionLog) {
        self.entries.extend(other.entries);
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LogError> {
        Self::read_from(text.as_bytes())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self, LogError> {
        let mut entries = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry = serde_json::from_str(&line).map_err(|source| LogError::Parse { line: i + 1, source })?;
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LogError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LogError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }

    /// Checks that every entry belongs to the same run.
    pub fn single_run(&self) -> Result<Option<&str>, LogError> {
        let Some(first) = self.run_id() else { return Ok(None) };
        match self.entries.iter().find(|e| e.run != first) {
            Some(other) => Err(LogError::MixedRuns(first.to_string(), other.run.clone())),
            None => Ok(Some(first)),
        }
    }
}

/// `(seconds, m^2)` explored-area samples of a single run.
pub fn explored_series(log: &MissionLog) -> Result<Vec<(f64, f64)>, LogError> {
    log.single_run()?;
    Ok(log
        .records()
        .filter_map(|r| match r {
            LogRecord::Explored { t, area } => Some((*t, *area)),
            _ => None,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_log(run: &str) -> MissionLog {
        let mut log = MissionLog::default();
        log.push(run, LogRecord::Header { scenario: "s".into(), policy: None, seed: Some(3), budget: Some(1.5) });
        log.push(run, LogRecord::Explored { t: 0.0, area: 0.0 });
        log.push(
            run,
            LogRecord::State { t: 0.02, position: [0.1, 0.2, 1.0], velocity: [0.0; 3], yaw: 0.5, mode: FlightMode::Hover },
        );
        log.push(run, LogRecord::Explored { t: 1.0, area: 2.56 });
        log.push(
            run,
            LogRecord::PlanResult {
                t: 1.0,
                plan: 1,
                sigma_r: vec![[0.0, 0.0, 1.0], [1.0, 0.0, 1.0]],
                errors: vec![LegError { leg: 1, error: "goal unreachable".into() }],
                duration: Some(2.0),
                stop_and_go: false,
            },
        );
        log
    }

    #[test]
    fn jsonl_round_trip() {
        let log = sample_log("r1");
        let text = log.to_jsonl();
        assert_eq!(text.lines().count(), log.len());
        assert!(text.lines().all(|l| l.starts_with("{\"run\":\"r1\"")));
        let back = MissionLog::from_jsonl(&text).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn series_examples() {
        assert!(explored_series(&MissionLog::default()).unwrap().is_empty());
        assert_eq!(explored_series(&sample_log("a")).unwrap(), vec![(0.0, 0.0), (1.0, 2.56)]);
        let mut mixed = sample_log("a");
        mixed.extend(sample_log("b"));
        assert!(matches!(explored_series(&mixed), Err(LogError::MixedRuns(a, b)) if a == "a" && b == "b"));
    }

    #[test]
    fn parse_errors_name_the_line() {
        let text = format!("{}not json\n", sample_log("a").to_jsonl());
        match MissionLog::from_jsonl(&text) {
            Err(LogError::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("{other:?}"),
        }
    }
}
