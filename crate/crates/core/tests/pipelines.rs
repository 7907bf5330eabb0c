use std::path::Path;

use metagen::harness::{emit_report, read_json_report, run_campaign, ExperimentConfig, ReportFormat};
use metagen::meta_rl::{env_kl, MDPEnvironment};
use metagen::offline::{offline_kl, OfflineEnvironment};
use metagen::supervised::{dataset_kl, TaskEnvironment};

fn data(rel: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(rel)).unwrap()
}

#[test]
fn bundled_environments_parse_and_round_trip() {
    let t = TaskEnvironment::from_json_str(&data("tasks_train.json")).unwrap();
    assert_eq!(TaskEnvironment::from_json_str(&t.to_json_string()).unwrap(), t);
    let m = MDPEnvironment::from_json_str(&data("mdps_train.json")).unwrap();
    assert_eq!(MDPEnvironment::from_json_str(&m.to_json_string()).unwrap(), m);
    let o = OfflineEnvironment::from_json_str(&data("offline_train.json")).unwrap();
    assert_eq!(OfflineEnvironment::from_json_str(&o.to_json_string()).unwrap(), o);
}

#[test]
fn shifts_have_finite_positive_divergence() {
    let a = TaskEnvironment::from_json_str(&data("tasks_train.json")).unwrap();
    let b = TaskEnvironment::from_json_str(&data("tasks_test.json")).unwrap();
    assert!(dataset_kl(&a, &b, 2, 2).unwrap() > 0.0);
    assert_eq!(dataset_kl(&a, &a, 2, 2).unwrap(), 0.0);

    let a = MDPEnvironment::from_json_str(&data("mdps_train.json")).unwrap();
    let b = MDPEnvironment::from_json_str(&data("mdps_test.json")).unwrap();
    let kl = env_kl(&a, &b, 4);
    assert!(kl.is_finite() && kl > 0.0);

    let a = OfflineEnvironment::from_json_str(&data("offline_train.json")).unwrap();
    let b = OfflineEnvironment::from_json_str(&data("offline_test.json")).unwrap();
    assert!(offline_kl(&a, &b, 4) > 0.0);
}

#[test]
fn every_bundled_config_runs_and_holds() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/configs");
    let out = tempfile::tempdir().unwrap();
    for name in ["lemmas", "supervised", "subtask", "metarl", "subtask-rl", "offline", "regret"] {
        let config = ExperimentConfig::load(&dir.join(format!("{name}.toml")), None).unwrap();
        let report = run_campaign(&config).unwrap();
        assert_eq!(report.rows.len(), config.expected_rows(), "{name}");
        assert!(report.verdict, "{name}: {:?}", report.failures().collect::<Vec<_>>());
        let path = emit_report(&report, ReportFormat::Json, out.path()).unwrap();
        assert_eq!(read_json_report(&path).unwrap(), report, "{name}");
    }
}
