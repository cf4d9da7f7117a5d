use std::path::Path;

use super::{mean_ci, HarnessError, RunLog, RunRow, Summary};

/// Quantity plotted against `env_step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveMetric {
    Return,
    SuccessRate,
    GateFraction,
    VPi,
    VMu,
}

impl CurveMetric {
    pub fn name(self) -> &'static str {
        match self {
            CurveMetric::Return => "eval_return",
            CurveMetric::SuccessRate => "success_rate",
            CurveMetric::GateFraction => "gate_fraction",
            CurveMetric::VPi => "v_pi",
            CurveMetric::VMu => "v_mu",
        }
    }

    fn value(self, r: &RunRow) -> Option<f64> {
        match self {
            CurveMetric::Return => Some(r.eval_return_mean),
            CurveMetric::SuccessRate => r.success_rate,
            CurveMetric::GateFraction => r.gate_fraction,
            CurveMetric::VPi => r.v_pi_mean,
            CurveMetric::VMu => r.v_mu_mean,
        }
    }
}

impl std::str::FromStr for CurveMetric {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [CurveMetric::Return, CurveMetric::SuccessRate, CurveMetric::GateFraction, CurveMetric::VPi, CurveMetric::VMu]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| HarnessError::Plan(format!("unknown curve metric {s:?}")))
    }
}

/// Reads every `<mode>/summary.json` under an experiment directory and writes
/// tidy `series,x,y,y_lo,y_hi` rows to `out`: one series per mode, the mean
/// over completed seeds with a `1.96·s/√n` band. Returns the number of series.
pub fn emit_learning_curves(experiment_dir: &Path, metric: CurveMetric, out: &Path) -> Result<usize, HarnessError> {
    let mut modes: Vec<_> = std::fs::read_dir(experiment_dir)
        .map_err(|e| HarnessError::Missing(format!("{}: {e}", experiment_dir.display())))?
        .filter_map(Result::ok)
        .filter(|e| e.path().join("summary.json").is_file())
        .map(|e| e.path())
        .collect();
    modes.sort();
    if modes.is_empty() {
        return Err(HarnessError::Missing(format!("no runs under {}", experiment_dir.display())));
    }
    let mut absent = Vec::new();
    let mut series = Vec::new();
    for mode_dir in &modes {
        let summary = Summary::load(&mode_dir.join("summary.json"))?;
        let mut logs = Vec::new();
        for seed in &summary.completed {
            let path = mode_dir.join(seed.to_string()).join("log.csv");
            if path.is_file() {
                logs.push(RunLog::load(&path)?);
            } else {
                absent.push(path.display().to_string());
            }
        }
        series.push((summary.mode.as_str().to_string(), logs));
    }
    if !absent.is_empty() {
        return Err(HarnessError::Missing(absent.join(", ")));
    }
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["series", "x", "y", "y_lo", "y_hi"])?;
    for (name, logs) in &series {
        let Some(first) = logs.first() else { continue };
        for (i, row) in first.rows.iter().enumerate() {
            let values: Option<Vec<f64>> = logs
                .iter()
                .map(|l| l.rows.get(i).filter(|r| r.env_step == row.env_step).and_then(|r| metric.value(r)))
                .collect();
            let Some(values) = values else { continue };
            let (m, ci) = mean_ci(&values);
            w.write_record([
                name.clone(),
                row.env_step.to_string(),
                m.to_string(),
                (m - ci).to_string(),
                (m + ci).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(series.len())
}
