//! Experiment plumbing end to end on a tiny plan.

use obac_core::actor::GateMode;
use obac_core::harness::{
    emit_learning_curves, run_ablation_suite, run_experiment, CurveMetric, ExperimentPlan, RunLog, Summary, RUNLOG_HEADER,
    RUNLOG_VERSION,
};

const FIXTURE: &str = include_str!("fixtures/tiny.toml");

fn plan(out: &std::path::Path) -> ExperimentPlan {
    let mut p = ExperimentPlan::from_toml_str(FIXTURE).unwrap();
    p.out = out.to_path_buf();
    p
}

#[test]
fn golden_header() {
    assert_eq!(RUNLOG_VERSION, 1);
    assert_eq!(
        RUNLOG_HEADER.join(","),
        "env_step,wall_ms,eval_return_mean,eval_return_std,success_rate,loss_q_pi,loss_q_mu,loss_v_mu,loss_actor,alpha,\
         gate_fraction,v_pi_mean,v_mu_mean,seed,run_id"
    );
}

#[test]
fn experiment_fans_out_over_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let p = plan(tmp.path());
    let outcome = run_experiment(&p).unwrap();
    assert_eq!(outcome.summary.completed, vec![0, 1]);
    assert!(outcome.summary.failures.is_empty());

    let mut finals = Vec::new();
    for seed in [0u64, 1] {
        let dir = outcome.dir.join(seed.to_string());
        let log = RunLog::load(&dir.join("log.csv")).unwrap();
        assert_eq!(log.rows.iter().map(|r| r.env_step).collect::<Vec<_>>(), vec![100, 200]);
        assert!(log.rows.iter().all(|r| r.wall_ms == 0 && r.seed == seed));
        finals.push(log.rows[1].eval_return_mean);
        let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json")).unwrap()).unwrap();
        assert_eq!(meta["status"], "completed");
        // the plan is stored losslessly next to the run
        assert_eq!(serde_json::from_value::<ExperimentPlan>(meta["plan"].clone()).unwrap(), p);
    }
    let summary = Summary::load(&outcome.dir.join("summary.json")).unwrap();
    assert_eq!(summary, outcome.summary);
    assert_eq!(summary.last().unwrap().return_mean, (finals[0] + finals[1]) / 2.0);
}

#[test]
fn ablation_and_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let mut p = plan(tmp.path());
    p.seeds = vec![5];
    let report = run_ablation_suite(&p).unwrap();
    assert_eq!(report.modes.iter().map(|(m, _)| *m).collect::<Vec<_>>(), GateMode::ALL.to_vec());
    let table = std::fs::read_to_string(&report.table).unwrap();
    assert_eq!(table.lines().count(), 1 + 3 * 2);

    let out = tmp.path().join("gate.csv");
    assert_eq!(emit_learning_curves(&p.experiment_dir(), CurveMetric::GateFraction, &out).unwrap(), 3);
    let rows: Vec<String> = std::fs::read_to_string(&out).unwrap().lines().map(String::from).collect();
    assert_eq!(rows[0], "series,x,y,y_lo,y_hi");
    assert!(rows.contains(&"fixed_on,200,1,1,1".to_string()));
    assert!(rows.contains(&"off,200,0,0,0".to_string()));

    std::fs::remove_file(p.experiment_dir().join("off/5/log.csv")).unwrap();
    assert!(emit_learning_curves(&p.experiment_dir(), CurveMetric::Return, &out).is_err());
}
