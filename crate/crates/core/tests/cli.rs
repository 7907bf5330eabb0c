use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metagen"))
}

fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(rel)
}

#[test]
fn supervised_campaign_writes_csv_and_passes_check() {
    let out = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["supervised", "--check", "--config"])
        .arg(data("configs/supervised.toml"))
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let csv = std::fs::read_to_string(out.path().join("supervised.csv")).unwrap();
    assert!(csv.starts_with("campaign,n,m,gamma,noise_scale,trial,seed,gap,se,kl,mi_or_e1,e2,bound,holds\n"));
    assert_eq!(csv.lines().count(), 1 + 12);
}

#[test]
fn json_output_and_seed_override() {
    let out = tempfile::tempdir().unwrap();
    let run = |seed: &str| {
        let o = bin()
            .args(["lemmas", "--format", "json", "--seed", seed, "--config"])
            .arg(data("configs/lemmas.toml"))
            .arg("--out")
            .arg(out.path())
            .output()
            .unwrap();
        assert!(o.status.success());
        metagen::harness::read_json_report(&out.path().join("lemmas.json")).unwrap()
    };
    let a = run("5");
    let b = run("6");
    assert_eq!(a.config.master_seed, 5);
    assert_ne!(a.rows[0].seed, b.rows[0].seed);
    assert_eq!(a.rows, run("5").rows);
}

#[test]
fn campaign_mismatch_and_bad_config_exit_with_two() {
    let o = bin().args(["offline", "--config"]).arg(data("configs/supervised.toml")).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("campaign"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "master_seed = 1\ntrials = 1\n[sweep]\nn = []\nm = [1]\ngamma = [0.5]\nnoise_scale = [1.0]\n").unwrap();
    let o = bin().args(["lemmas", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sweep.n"));
}

#[test]
fn missing_environment_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "train_env = \"nowhere.json\"\nmaster_seed = 1\ntrials = 1\n[sweep]\nn = [1]\nm = [1]\ngamma = [0.5]\nnoise_scale = [1.0]\n",
    )
    .unwrap();
    let o = bin().args(["metarl", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));
}
