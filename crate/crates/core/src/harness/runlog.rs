//! Run logs: one CSV row per evaluation checkpoint.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Version of the column layout below; stored in each run's `meta.json`.
pub const RUNLOG_VERSION: u32 = 1;

pub const RUNLOG_HEADER: [&str; 15] = [
    "env_step",
    "wall_ms",
    "eval_return_mean",
    "eval_return_std",
    "success_rate",
    "loss_q_pi",
    "loss_q_mu",
    "loss_v_mu",
    "loss_actor",
    "alpha",
    "gate_fraction",
    "v_pi_mean",
    "v_mu_mean",
    "seed",
    "run_id",
];

/// Diagnostics are averages over the gradient steps since the previous row;
/// they are empty before the first gradient step. `success_rate` is present
/// for sparse-reward environments only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub env_step: u64,
    pub wall_ms: u64,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub success_rate: Option<f64>,
    pub loss_q_pi: Option<f64>,
    pub loss_q_mu: Option<f64>,
    pub loss_v_mu: Option<f64>,
    pub loss_actor: Option<f64>,
    pub alpha: f64,
    pub gate_fraction: Option<f64>,
    pub v_pi_mean: Option<f64>,
    pub v_mu_mean: Option<f64>,
    pub seed: u64,
    pub run_id: String,
}

/// Rows of one run, in increasing `env_step` order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub rows: Vec<RunRow>,
}

impl RunLog {
    pub fn push(&mut self, row: RunRow) -> Result<(), HarnessError> {
        if let Some(last) = self.rows.last() {
            if row.env_step <= last.env_step {
                return Err(HarnessError::Log(format!(
                    "env_step {} does not follow {}",
                    row.env_step, last.env_step
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn last(&self) -> Option<&RunRow> {
        self.rows.last()
    }

    /// Writes the CSV. With `zero_wall_time`, `wall_ms` is written as 0 so
    /// that repeated runs produce identical bytes.
    pub fn write_csv<W: Write>(&self, w: W, zero_wall_time: bool) -> Result<(), HarnessError> {
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        out.write_record(RUNLOG_HEADER)?;
        for row in &self.rows {
            if zero_wall_time {
                out.serialize(RunRow { wall_ms: 0, ..row.clone() })?;
            } else {
                out.serialize(row)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path, zero_wall_time: bool) -> Result<(), HarnessError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file), zero_wall_time)
    }

    /// Parses a CSV with exactly the current header.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, HarnessError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header != RUNLOG_HEADER {
            return Err(HarnessError::Log(format!("unexpected header {header:?}")));
        }
        let mut log = RunLog::default();
        for row in reader.deserialize() {
            log.push(row?)?;
        }
        Ok(log)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let file = std::fs::File::open(path).map_err(|e| HarnessError::Missing(format!("{}: {e}", path.display())))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64) -> RunRow {
        RunRow {
            env_step: step,
            wall_ms: 17,
            eval_return_mean: -123.456789012345,
            eval_return_std: 0.1,
            success_rate: None,
            loss_q_pi: Some(1e-7),
            loss_q_mu: None,
            loss_v_mu: Some(0.3),
            loss_actor: Some(-2.5),
            alpha: 0.2,
            gate_fraction: Some(0.25),
            v_pi_mean: Some(1.0 / 3.0),
            v_mu_mean: Some(-0.0),
            seed: 4,
            run_id: "abc".into(),
        }
    }

    #[test]
    fn golden_header() {
        let mut bytes = Vec::new();
        RunLog::default().write_csv(&mut bytes, false).unwrap();
        assert_eq!(
            String::from_utf8(bytes).unwrap(),
            "env_step,wall_ms,eval_return_mean,eval_return_std,success_rate,loss_q_pi,loss_q_mu,loss_v_mu,loss_actor,alpha,gate_fraction,v_pi_mean,v_mu_mean,seed,run_id\n"
        );
    }

    #[test]
    fn round_trip_is_exact() {
        let mut log = RunLog::default();
        log.push(row(1000)).unwrap();
        log.push(row(2000)).unwrap();
        let mut bytes = Vec::new();
        log.write_csv(&mut bytes, false).unwrap();
        let back = RunLog::read_csv(bytes.as_slice()).unwrap();
        assert_eq!(back, log);
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("1000,17,-123.456789012345,0.1,,1e-7,,"), "{text}");
    }

    #[test]
    fn steps_must_increase() {
        let mut log = RunLog::default();
        log.push(row(5)).unwrap();
        assert!(log.push(row(5)).is_err());
    }
}
