use std::path::Path;
use std::process::Command;

use kpomdp::{Pendulum, Regularizers};
use kpomdp_harness::config::{ControllerKind, EnvConfig, ExperimentConfig, Preset};
use kpomdp_harness::experiment::{dataset_file, read_dataset, run_sweep};
use kpomdp_harness::results::RESULT_HEADER;

fn kpomdp(args: &[&str], data_dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_kpomdp"))
        .args(args)
        .env("KPOMDP_DATA_DIR", data_dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn defaults_parse_back() {
    let tmp = tempfile::tempdir().unwrap();
    for env in ["grid", "pendulum", "oracle"] {
        let out = kpomdp(&["defaults", "--env", env], tmp.path());
        assert!(out.status.success());
        ExperimentConfig::parse(&String::from_utf8(out.stdout).unwrap()).unwrap();
    }
}

#[test]
fn collect_writes_one_line_per_sample_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::preset(Preset::Grid);
    cfg.data.sizes = vec![100];
    let config = write_config(tmp.path(), &cfg);
    let data = tmp.path().join("data");
    let out = kpomdp(&["collect", "--config", &config], &data);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("n=100 "));
    let file = data.join(dataset_file(&cfg, 100));
    let first = std::fs::read(&file).unwrap();
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 101);
    assert!(kpomdp(&["collect", "--config", &config], &data).status.success());
    assert_eq!(std::fs::read(&file).unwrap(), first);
}

#[test]
fn restart_samples_stay_in_the_training_box() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::preset(Preset::Pendulum);
    cfg.data.sizes = vec![500];
    let config = write_config(tmp.path(), &cfg);
    assert!(kpomdp(&["collect", "--config", &config], tmp.path()).status.success());
    let env = Pendulum::default();
    let data = read_dataset(&env, &tmp.path().join(dataset_file(&cfg, 500))).unwrap();
    assert_eq!(data.len(), 500);
    let bound = std::f64::consts::FRAC_PI_3;
    for p in data.states() {
        let theta = p.coords().unwrap()[0];
        assert!((-bound..=bound).contains(&theta), "{theta}");
    }
}

#[test]
fn tiny_oracle_run_writes_one_row_per_controller() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::preset(Preset::Oracle);
    cfg.data.sizes = vec![10];
    cfg.eval.episodes = 1;
    cfg.eval.horizon = 1;
    cfg.output.dir = tmp.path().join("out");
    cfg.output.plot = true;
    let config = write_config(tmp.path(), &cfg);
    let out = kpomdp(&["run", "--config", &config], &tmp.path().join("data"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let results = std::fs::read_to_string(cfg.output.dir.join("results.csv")).unwrap();
    let lines: Vec<&str> = results.lines().collect();
    assert_eq!(lines[0], RESULT_HEADER);
    assert_eq!(lines.len(), 4);
    for (line, kind) in lines[1..].iter().zip(["kernel", "histogram", "exact"]) {
        assert!(line.starts_with(&format!("{},oracle,10,{kind},", cfg.fingerprint())), "{line}");
    }
    assert!(cfg.output.dir.join("timing.csv").exists());
    assert!(cfg.output.dir.join("plot.svg").exists());
}

#[test]
fn rerun_gives_identical_results() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::preset(Preset::Oracle);
    cfg.data.sizes = vec![16, 32];
    cfg.eval.episodes = 4;
    cfg.eval.horizon = 10;
    cfg.output.dir = tmp.path().join("out");
    let config = write_config(tmp.path(), &cfg);
    let mut tables = Vec::new();
    for data in ["a", "b"] {
        assert!(kpomdp(&["run", "--config", &config], &tmp.path().join(data)).status.success());
        tables.push(std::fs::read(cfg.output.dir.join("results.csv")).unwrap());
    }
    assert_eq!(tables[0], tables[1]);
}

#[test]
fn kernel_controller_matches_exact_controller_on_the_oracle() {
    let mut cfg = ExperimentConfig::preset(Preset::Oracle);
    cfg.data.sizes = vec![1024];
    cfg.eval.episodes = 10;
    cfg.eval.horizon = 20;
    cfg.eval.controllers = vec![ControllerKind::Kernel, ControllerKind::Exact];
    cfg.model.regularizers = Some(Regularizers::uniform(1e-8));
    let runs = run_sweep(&cfg, None).unwrap();
    let (k, e) = (&runs[0].row, &runs[1].row);
    assert_eq!((k.controller, e.controller), (ControllerKind::Kernel, ControllerKind::Exact));
    assert!((k.mean - e.mean).abs() <= 0.05 * e.mean.abs().max(1.0), "{} vs {}", k.mean, e.mean);
}

#[test]
fn config_errors_exit_with_two_and_name_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::preset(Preset::Oracle);
    cfg.eval.episodes = 0;
    let config = write_config(tmp.path(), &cfg);
    let out = kpomdp(&["run", "--config", &config], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("line"), "{stderr}");

    std::fs::write(tmp.path().join("bad.toml"), "version = 1\nnot_a_key = 3\n").unwrap();
    let out = kpomdp(&["run", "--config", tmp.path().join("bad.toml").to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = kpomdp(&["run", "--config", tmp.path().join("absent.toml").to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn exact_controller_is_rejected_on_continuous_envs() {
    let mut cfg = ExperimentConfig::preset(Preset::Pendulum);
    assert!(matches!(cfg.env, EnvConfig::Pendulum(_)));
    cfg.eval.controllers.push(ControllerKind::Exact);
    assert!(cfg.validate().is_err());
}
