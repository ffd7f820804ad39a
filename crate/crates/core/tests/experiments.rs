use boussinesq_core::experiment::{run, ExperimentConfig, ExperimentKind};
use boussinesq_core::par::Execution;

fn small(kind: ExperimentKind) -> ExperimentConfig {
    let mut c = ExperimentConfig { kind, n: 16, dt: 1e-2, horizon: 0.5, ensemble: 2, seed: 3, ..Default::default() };
    c.simulate.record_every = 10;
    c.lyapunov.record_every = 10;
    c.lyapunov.qr_every = 5;
    c.lyapunov.det_window = 0.5;
    c.control.plans = 2;
    c.control.dt = 1e-3;
    c.bracket.j_max = 2.0;
    c.bracket.samples = 2;
    c.bracket.n = 16;
    c.malliavin.n = 16;
    c.malliavin.dt = 1e-2;
    c.malliavin.horizon = 0.2;
    c.malliavin.trials = 50;
    c.malliavin.node_every = 4;
    c.malliavin.probe_directions = 2;
    c.span.horizon = 0.1;
    c.span.points = 2;
    c.energy.ou_horizon = 0.2;
    c
}

fn files(dir: &std::path::Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

#[test]
fn every_kind_runs_and_writes_its_files() {
    let expected = [
        (ExperimentKind::Simulate, "simulate.csv"),
        (ExperimentKind::Lyapunov, "lyapunov.csv"),
        (ExperimentKind::ControlDemo, "control.csv"),
        (ExperimentKind::BracketCheck, "brackets.csv"),
        (ExperimentKind::MalliavinProbe, "malliavin.csv"),
        (ExperimentKind::SpanCheck, "span.csv"),
        (ExperimentKind::EnergyAudit, "energy.csv"),
    ];
    for (kind, csv) in expected {
        let dir = tempfile::tempdir().unwrap();
        let rec = run(&small(kind), dir.path()).unwrap_or_else(|e| panic!("{}: {e}", kind.name()));
        assert_eq!(rec.status, "ok", "{}", kind.name());
        let names = files(dir.path());
        for f in [csv, "run.json", "config.toml"] {
            assert!(names.iter().any(|n| n == f), "{} missing {f}: {names:?}", kind.name());
        }
        let run_json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("run.json")).unwrap()).unwrap();
        assert_eq!(run_json["config_hash"], rec.config_hash);
    }
}

#[test]
fn outputs_are_reproducible_and_execution_independent() {
    for kind in [ExperimentKind::Simulate, ExperimentKind::Lyapunov, ExperimentKind::SpanCheck] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut cfg = small(kind);
        run(&cfg, a.path()).unwrap();
        cfg.execution = Execution::Sequential;
        run(&cfg, b.path()).unwrap();
        for f in files(a.path()) {
            if f == "run.json" || f == "config.toml" {
                continue;
            }
            assert_eq!(std::fs::read(a.path().join(&f)).unwrap(), std::fs::read(b.path().join(&f)).unwrap(), "{f} differs");
        }
    }
}

#[test]
fn simulate_checkpoint_replays_to_the_same_state() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(ExperimentKind::Simulate);
    cfg.ensemble = 1;
    cfg.horizon = 0.3;
    run(&cfg, dir.path()).unwrap();
    let short = dir.path().join("checkpoint_seed0.bqck");

    cfg.horizon = 0.6;
    let full = tempfile::tempdir().unwrap();
    run(&cfg, full.path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    boussinesq_core::experiment::replay_checkpoint(&cfg, &short, out.path()).unwrap();
    assert_eq!(
        std::fs::read(out.path().join("replay_final.bqck")).unwrap(),
        std::fs::read(full.path().join("checkpoint_seed0.bqck")).unwrap()
    );
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { n: 15, ..small(ExperimentKind::Simulate) };
    assert!(run(&cfg, dir.path()).is_err());
    assert!(files(dir.path()).is_empty());
}
