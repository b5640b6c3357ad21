use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 17

[population]
total_size = 20000
strata = 20
domains = 4
seed = 5

[targets]
national = 0.05
domain = 0.15

[hb]
burn_in = 200
draws = 400

[reduction]
alpha_grid = [0.0, 0.2, 0.4, 0.6, 0.8]
nu_grid = [3.0, 10.0]
s2_points = 3

[mc]
replications = 3
"#;

fn surveyopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_surveyopt")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path.to_string_lossy().into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn pipeline_runs_end_to_end_and_strict_checks_gate_the_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_string_lossy().into_owned();
    let cfg = write_config(dir.path(), "");
    let o = surveyopt(&["pipeline", "--config", &cfg, "--out", &out_s]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("bethel_feasible"), "{stdout}");
    for t in ["t1_sample_sizes.csv", "t8_cv_pass.csv", "report.md", "manifest.json"] {
        assert!(out.join(t).exists(), "{t}");
    }
    let header = fs::read_to_string(out.join("t1_sample_sizes.csv")).unwrap();
    assert!(header.starts_with("Variable,Neyman,NSO Max,Bethel,HB Combined"));

    // An unreachable check turns the strict report into exit status 4.
    let strict_cfg = write_config(dir.path(), "\n[checks]\nmin_alpha = 0.99\n");
    let o = surveyopt(&["report", "--strict", "--config", &strict_cfg, "--out", &out_s]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL reduction_alpha"));
}

#[test]
fn missing_upstream_artifact_is_a_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("empty").to_string_lossy().into_owned();
    let o = surveyopt(&["pipeline", "--stage", "allocate", "--config", &cfg, "--out", &out]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("population.csv"));
}

#[test]
fn configuration_errors_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_string_lossy().into_owned();
    let bad = write_config(dir.path(), "\nbaseline_fraction = 2.0\n");
    assert_eq!(code(&surveyopt(&["synth", "--config", &bad, "--out", &out])), 2);
    let absent = dir.path().join("absent.toml").to_string_lossy().into_owned();
    assert_eq!(code(&surveyopt(&["synth", "--config", &absent, "--out", &out])), 2);
    assert_eq!(code(&surveyopt(&["pipeline", "--stage", "nowhere"])), 2);
}

#[test]
fn report_on_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nothing").to_string_lossy().into_owned();
    let o = surveyopt(&["report", "--out", &out]);
    assert_eq!(code(&o), 3);
}

#[test]
fn allocate_solves_a_dumped_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let run = dir.path().join("run").to_string_lossy().into_owned();
    for stage in ["synth", "baseline", "allocate"] {
        assert_eq!(code(&surveyopt(&[stage, "--config", &cfg, "--out", &run])), 0, "{stage}");
    }
    let problem = dir.path().join("run/allocation_problem.json").to_string_lossy().into_owned();
    for method in ["neyman", "nso-max", "bethel"] {
        let csv = dir.path().join(format!("{method}.csv"));
        let o = surveyopt(&["allocate", "--method", method, "--inputs", &problem, "--out", &csv.to_string_lossy()]);
        assert_eq!(code(&o), 0, "{method}: {}", String::from_utf8_lossy(&o.stderr));
        let text = fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("stratum,n_h"));
        assert_eq!(text.lines().count(), 21);
    }
    let bethel = fs::read_to_string(dir.path().join("bethel.csv")).unwrap();
    let staged = fs::read_to_string(dir.path().join("run/bethel_allocation.csv")).unwrap();
    assert_eq!(bethel, staged);
}
