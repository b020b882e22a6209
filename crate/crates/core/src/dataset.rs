//! Dataset records and on-disk formats.
//!
//! A dataset is a JSONL file (one record per line) next to a manifest JSON.
//! A CSV mirror with fixed column order
//! `time, q_1..n, dq_1..n, ddq_1..n, tau_1..n, tau_res_1..n, env_id`
//! is exported for external tooling.

use crate::dynamics::EnvironmentSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error on line {0}: {1}")]
    Parse(usize, serde_json::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("record at line {0} has a non-finite value")]
    NonFinite(usize),
}

/// One sample of a recorded trajectory at the control rate.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrajectoryRecord {
    pub time: f64,
    pub q: Vec<f64>,
    pub dq: Vec<f64>,
    /// finite-difference acceleration estimate
    pub ddq_fd: Vec<f64>,
    pub tau_applied: Vec<f64>,
    pub tau_residual: Vec<f64>,
    pub env_id: String,
    #[serde(default)]
    pub traj_id: u32,
    /// true when the acceleration used a one-sided difference
    #[serde(default)]
    pub fd_boundary: bool,
}

impl TrajectoryRecord {
    pub fn n_joints(&self) -> usize {
        self.q.len()
    }

    pub fn is_finite(&self) -> bool {
        self.q
            .iter()
            .chain(&self.dq)
            .chain(&self.ddq_fd)
            .chain(&self.tau_applied)
            .chain(&self.tau_residual)
            .all(|v| v.is_finite())
            && self.time.is_finite()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub environments: Vec<EnvironmentSpec>,
    pub seed: u64,
    pub config_hash: String,
    pub trajectories_per_env: usize,
    pub control_hz: f64,
    pub discarded: usize,
    pub rows: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<TrajectoryRecord>,
    pub manifest: DatasetManifest,
}

/// SHA-256 of a value's canonical JSON, hex-encoded. Used to stamp configs
/// into manifests and reports.
pub fn hash_config<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config must serialize");
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

impl Dataset {
    /// Writes `dataset.jsonl` and `manifest.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(fs::File::create(dir.join("dataset.jsonl"))?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let manifest: DatasetManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let file = fs::File::open(dir.join("dataset.jsonl"))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TrajectoryRecord =
                serde_json::from_str(&line).map_err(|e| DatasetError::Parse(i + 1, e))?;
            if !rec.is_finite() {
                return Err(DatasetError::NonFinite(i + 1));
            }
            records.push(rec);
        }
        Ok(Dataset { records, manifest })
    }

    /// CSV mirror with the fixed column order.
    pub fn export_csv(&self, path: &Path) -> Result<(), DatasetError> {
        let n = self.records.first().map(|r| r.n_joints()).unwrap_or(0);
        let mut w = BufWriter::new(fs::File::create(path)?);
        let mut header = vec!["time".to_string()];
        for (prefix, _) in [("q", 0), ("dq", 0), ("ddq", 0), ("tau", 0), ("tau_res", 0)] {
            for j in 1..=n {
                header.push(format!("{prefix}_{j}"));
            }
        }
        header.push("env_id".into());
        writeln!(w, "{}", header.join(","))?;
        for r in &self.records {
            let mut cols = vec![format!("{}", r.time)];
            for arr in [&r.q, &r.dq, &r.ddq_fd, &r.tau_applied, &r.tau_residual] {
                for v in arr.iter() {
                    cols.push(format!("{v}"));
                }
            }
            cols.push(r.env_id.clone());
            writeln!(w, "{}", cols.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Groups records into trajectories keyed by (env_id, traj_id),
    /// preserving file order.
    pub fn trajectories(&self) -> Vec<(&str, u32, Vec<&TrajectoryRecord>)> {
        let mut out: Vec<(&str, u32, Vec<&TrajectoryRecord>)> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some((env, traj, rows))
                    if *env == r.env_id.as_str() && *traj == r.traj_id =>
                {
                    rows.push(r);
                }
                _ => out.push((r.env_id.as_str(), r.traj_id, vec![r])),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(env: &str, traj: u32, t: f64) -> TrajectoryRecord {
        TrajectoryRecord {
            time: t,
            q: vec![0.1, 0.2, 0.3],
            dq: vec![1.0, -1.0, 0.5],
            ddq_fd: vec![0.0; 3],
            tau_applied: vec![5.0, 4.0, 3.0],
            tau_residual: vec![0.1, 0.0, -0.1],
            env_id: env.into(),
            traj_id: traj,
            fd_boundary: false,
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            records: vec![record("a", 0, 0.0), record("a", 1, 0.0), record("b", 0, 0.0)],
            manifest: DatasetManifest {
                environments: vec![],
                seed: 7,
                config_hash: "x".into(),
                trajectories_per_env: 2,
                control_hz: 50.0,
                discarded: 0,
                rows: 3,
            },
        };
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.records, ds.records);
        assert_eq!(back.manifest, ds.manifest);
        assert_eq!(back.trajectories().len(), 3);
    }

    #[test]
    fn csv_mirror_has_fixed_columns() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            records: vec![record("a", 0, 0.02)],
            manifest: DatasetManifest {
                environments: vec![],
                seed: 0,
                config_hash: String::new(),
                trajectories_per_env: 1,
                control_hz: 50.0,
                discarded: 0,
                rows: 1,
            },
        };
        let path = dir.path().join("out.csv");
        ds.export_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "time,q_1,q_2,q_3,dq_1,dq_2,dq_3,ddq_1,ddq_2,ddq_3,tau_1,tau_2,tau_3,tau_res_1,tau_res_2,tau_res_3,env_id"
        );
        assert!(lines.next().unwrap().ends_with(",a"));
    }

    #[test]
    fn config_hash_is_stable() {
        #[derive(Serialize)]
        struct C {
            a: u32,
        }
        assert_eq!(hash_config(&C { a: 1 }), hash_config(&C { a: 1 }));
        assert_ne!(hash_config(&C { a: 1 }), hash_config(&C { a: 2 }));
    }
}
