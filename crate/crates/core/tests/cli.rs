use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "\
lambda1 = 0.9
lambda0 = 0.6
q = 0.1
k = 5
rate_r = 3.0
beta = 0.98
b_max = 5
grid_intervals = 40
horizon = 5000
warmup = 100
replications = 2
verify_random_sets = 3
oracle_instances = 5
contraction_pairs = 5
";

fn eh_sense(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eh-sense"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn data_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(str::to_owned)
        .collect()
}

#[test]
fn solve_then_verify_exported_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    let run = eh_sense(&["solve", "--config", &config, "--out", out_s]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(String::from_utf8_lossy(&run.stdout).contains("iterations"));
    assert_eq!(data_rows(&out.join("thresholds.csv")).len(), 26);

    let table = out.join("value_table.csv");
    let run = eh_sense(&[
        "verify",
        "--config",
        &config,
        "--out",
        out_s,
        "--table",
        table.to_str().unwrap(),
    ]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stdout)
    );
    assert!(data_rows(&out.join("verify.csv"))
        .iter()
        .all(|r| r.contains(",true,")));
}

#[test]
fn verify_rejects_adversarial_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let table = dir.path().join("bad.csv");
    // not convex in p at u = 0, and decreasing in u
    std::fs::write(
        &table,
        "# adversarial\nu,b,p,v\n0,0,0,1\n0,0,0.5,3\n0,0,1,2\n1,0.2,0,0\n1,0.2,0.5,0\n1,0.2,1,0\n",
    )
    .unwrap();
    let run = eh_sense(&[
        "verify",
        "--config",
        &config,
        "--out",
        dir.path().to_str().unwrap(),
        "--table",
        table.to_str().unwrap(),
    ]);
    assert!(!run.status.success());
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(
        stdout.contains("FAIL convexity") && stdout.contains("FAIL monotonicity"),
        "{stdout}"
    );
}

#[test]
fn full_verification_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let run = eh_sense(&[
        "verify",
        "--config",
        &config,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(run.status.success(), "{stdout}");
    assert!(stdout.contains("oracle agreement"), "{stdout}");
}

#[test]
fn simulate_each_policy_with_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    for policy in ["optimal", "single", "greedy"] {
        let out = dir.path().join(policy);
        let run = eh_sense(&[
            "simulate",
            "--config",
            &config,
            "--out",
            out.to_str().unwrap(),
            "--policy",
            policy,
            "--seed",
            "17",
            "--trace",
        ]);
        assert!(
            run.status.success(),
            "{}",
            String::from_utf8_lossy(&run.stderr)
        );
        let runs = data_rows(&out.join("simulate.csv"));
        assert_eq!(runs.len(), 2);
        assert!(runs.iter().all(|r| r.contains(policy)));
        assert_eq!(data_rows(&out.join("trace.csv")).len(), 5000);
        let header = std::fs::read_to_string(out.join("simulate.csv")).unwrap();
        assert!(header.contains("# seed = 17\n"));
    }
}

#[test]
fn sweep_writes_one_row_per_policy_and_rate() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &format!("{CONFIG}q_values = [0.2, 0.6]\n"));
    let run = eh_sense(&[
        "sweep",
        "--config",
        &config,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let rows = data_rows(&dir.path().join("sweep.csv"));
    assert_eq!(rows.len(), 6);
}

#[test]
fn bad_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &CONFIG.replace("beta = 0.98", "beta = 1.5"));
    let run = eh_sense(&["solve", "--config", &config]);
    assert!(!run.status.success());
    let stderr = String::from_utf8_lossy(&run.stderr);
    assert!(
        stderr.contains("line 6") && stderr.contains("beta"),
        "{stderr}"
    );
}
