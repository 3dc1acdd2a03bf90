//! Batch front-end: configuration files and the `solve`, `sweep`,
//! `simulate` and `verify` commands.
//!
//! A configuration is a flat TOML file of typed keys; unknown keys are
//! rejected. The effective configuration (defaults filled in) is written as a
//! comment block at the top of every output file.
//!
//! All randomness derives from the single `seed` key:
//! * `sweep`: replication `r` at the `i`-th q uses `derive_seed(seed, [i, r])`;
//! * `simulate`: replication `r` uses `derive_seed(seed, [0, r])`, matching the
//!   first sweep point;
//! * `verify`: stream `derive_seed(seed, [VERIFY_STREAM, j])` for check `j`.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bellman::{
    value_iteration, ActionSet, BeliefGrid, SolverSettings, DEFAULT_GRID_INTERVALS,
    DEFAULT_MAX_ITERATIONS,
};
use crate::error::{Error, Result};
use crate::io;
use crate::model::ModelParams;
use crate::policy::{
    detect_thresholds, evaluate_greedy, extract_policy, solve_single_threshold_baseline,
};
use crate::sim::{
    derive_seed, run_policy, sweep_throughput, ArgmaxController, Controller, GreedyController,
    PolicyKind, RunSettings, SimReport, SweepSettings,
};
use crate::verify::{
    check_contraction, check_convexity, check_monotonicity, check_oracle_agreement,
    check_threshold_structure, lemma_checks, lemma_tolerance, negative_controls,
    randomized_lemma_checks, CheckReport,
};

/// Tag of the seed stream used by `verify`.
pub const VERIFY_STREAM: u64 = 0x7665_7269_6679;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub lambda1: f64,
    pub lambda0: f64,
    pub q: f64,
    pub k: u32,
    pub rate_r: f64,
    pub beta: f64,
    pub b_max: u32,

    #[serde(default = "defaults::grid_intervals")]
    pub grid_intervals: usize,
    /// Optimality target; defaults to `1e-6 * rate_r`.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default = "defaults::max_iterations")]
    pub max_iterations: usize,

    #[serde(default = "defaults::horizon")]
    pub horizon: u64,
    #[serde(default = "defaults::warmup")]
    pub warmup: u64,
    #[serde(default = "defaults::replications")]
    pub replications: usize,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    /// Harvesting rates for `sweep`; defaults to `[q]`.
    #[serde(default)]
    pub q_values: Option<Vec<f64>>,

    #[serde(default = "defaults::verify_random_sets")]
    pub verify_random_sets: usize,
    #[serde(default = "defaults::oracle_instances")]
    pub oracle_instances: usize,
    #[serde(default = "defaults::oracle_max_horizon")]
    pub oracle_max_horizon: usize,
    #[serde(default = "defaults::contraction_pairs")]
    pub contraction_pairs: usize,

    #[serde(default = "defaults::out_dir")]
    pub out_dir: PathBuf,
}

mod defaults {
    use std::path::PathBuf;

    pub fn grid_intervals() -> usize {
        super::DEFAULT_GRID_INTERVALS
    }
    pub fn max_iterations() -> usize {
        super::DEFAULT_MAX_ITERATIONS
    }
    pub fn horizon() -> u64 {
        1_000_000
    }
    pub fn warmup() -> u64 {
        10_000
    }
    pub fn replications() -> usize {
        20
    }
    pub fn seed() -> u64 {
        1
    }
    pub fn verify_random_sets() -> usize {
        50
    }
    pub fn oracle_instances() -> usize {
        50
    }
    pub fn oracle_max_horizon() -> usize {
        4
    }
    pub fn contraction_pairs() -> usize {
        100
    }
    pub fn out_dir() -> PathBuf {
        PathBuf::from("out")
    }
}

/// 1-based line of `key = ...` in `source`, if present.
fn key_line(source: &str, key: &str) -> Option<usize> {
    source
        .lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}

impl RunConfig {
    /// Config with the given model parameters and every other key at its default.
    pub fn from_params(params: &ModelParams) -> Self {
        RunConfig {
            lambda1: params.lambda1,
            lambda0: params.lambda0,
            q: params.q,
            k: params.k,
            rate_r: params.rate_r,
            beta: params.beta,
            b_max: params.b_max,
            grid_intervals: defaults::grid_intervals(),
            epsilon: None,
            max_iterations: defaults::max_iterations(),
            horizon: defaults::horizon(),
            warmup: defaults::warmup(),
            replications: defaults::replications(),
            seed: defaults::seed(),
            q_values: None,
            verify_random_sets: defaults::verify_random_sets(),
            oracle_instances: defaults::oracle_instances(),
            oracle_max_horizon: defaults::oracle_max_horizon(),
            contraction_pairs: defaults::contraction_pairs(),
            out_dir: defaults::out_dir(),
        }
    }

    /// Parse and validate. Errors name the offending line where possible.
    pub fn parse(source: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(source).map_err(|e| Error::Config(e.to_string()))?;
        config
            .validate()
            .map_err(|(key, msg)| match key_line(source, key) {
                Some(line) => Error::Config(format!("line {line}: `{key}`: {msg}")),
                None => Error::Config(format!("`{key}`: {msg}")),
            })?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let source = std::fs::read_to_string(path)?;
        Self::parse(&source).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        self.params().validate().map_err(|e| match e {
            Error::InvalidParam { name, reason } => (name, reason),
            other => ("k", other.to_string()),
        })?;
        if self.grid_intervals == 0 {
            return Err(("grid_intervals", "must be positive".into()));
        }
        if let Some(eps) = self.epsilon {
            if eps.is_nan() || eps <= 0.0 {
                return Err(("epsilon", format!("{eps} must be positive")));
            }
        }
        if self.max_iterations == 0 {
            return Err(("max_iterations", "must be positive".into()));
        }
        if self.warmup >= self.horizon {
            return Err((
                "warmup",
                format!(
                    "{} must be smaller than horizon {}",
                    self.warmup, self.horizon
                ),
            ));
        }
        if self.replications < 2 {
            return Err((
                "replications",
                "need at least 2 for a confidence interval".into(),
            ));
        }
        if let Some(qs) = &self.q_values {
            if qs.is_empty() {
                return Err(("q_values", "must not be empty".into()));
            }
            if let Some(bad) = qs.iter().find(|q| !(0.0..=1.0).contains(*q)) {
                return Err(("q_values", format!("{bad} is not in [0, 1]")));
            }
        }
        if self.oracle_max_horizon == 0
            || self.oracle_max_horizon > crate::verify::MAX_ORACLE_HORIZON
        {
            return Err((
                "oracle_max_horizon",
                format!("must be in 1..={}", crate::verify::MAX_ORACLE_HORIZON),
            ));
        }
        Ok(())
    }

    pub fn params(&self) -> ModelParams {
        ModelParams {
            lambda1: self.lambda1,
            lambda0: self.lambda0,
            q: self.q,
            k: self.k,
            rate_r: self.rate_r,
            beta: self.beta,
            b_max: self.b_max,
        }
    }

    pub fn solver_settings(&self) -> SolverSettings {
        let base = SolverSettings::for_params(&self.params());
        SolverSettings {
            epsilon: self.epsilon.unwrap_or(base.epsilon),
            max_iterations: self.max_iterations,
        }
    }

    pub fn q_values(&self) -> Vec<f64> {
        self.q_values.clone().unwrap_or_else(|| vec![self.q])
    }

    /// The configuration with every default made explicit.
    pub fn effective(&self) -> Self {
        RunConfig {
            epsilon: Some(self.solver_settings().epsilon),
            q_values: Some(self.q_values()),
            ..self.clone()
        }
    }

    /// Effective configuration as TOML. Parsing this text yields the same
    /// effective configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.effective()).expect("config serializes")
    }

    fn provenance(&self, extra: &[(&str, String)]) -> String {
        let mut text = self.to_toml();
        text.push_str(&format!(
            "params_fingerprint = \"{}\"\n",
            crate::policy::params_fingerprint(&self.params())
        ));
        for (k, v) in extra {
            text.push_str(&format!("{k} = {v}\n"));
        }
        text
    }
}

fn create(dir: &Path, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let file = File::create(&path)?;
    Ok((path, BufWriter::new(file)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveSummary {
    pub iterations: usize,
    pub final_delta: f64,
    pub sense_cells: usize,
    pub files: Vec<PathBuf>,
}

/// Solve the model and write `value_table.csv`, `policy_map.csv` and
/// `thresholds.csv`. A threshold-structure violation is returned as an
/// error after the value table and policy map are written.
pub fn cmd_solve(config: &RunConfig, out: &Path) -> Result<SolveSummary> {
    let params = config.params();
    let grid = BeliefGrid::new(&params, config.grid_intervals)?;
    let table = value_iteration(&params, &grid, &config.solver_settings())?;
    let policy = extract_policy(&params, &grid, &table);
    let provenance = config.provenance(&[
        ("iterations", table.iterations().to_string()),
        ("final_delta", format!("{:e}", table.final_delta())),
    ]);
    let mut files = Vec::new();

    let (path, w) = create(out, "value_table.csv")?;
    io::write_value_table(w, &provenance, &params, &grid, &table)?;
    files.push(path);
    let (path, w) = create(out, "policy_map.csv")?;
    io::write_policy_map(w, &provenance, &policy)?;
    files.push(path);

    let profile = detect_thresholds(&policy)?;
    let (path, w) = create(out, "thresholds.csv")?;
    io::write_thresholds(w, &provenance, &profile)?;
    files.push(path);

    Ok(SolveSummary {
        iterations: table.iterations(),
        final_delta: table.final_delta(),
        sense_cells: policy.count(crate::bellman::Action::Sense),
        files,
    })
}

/// Throughput of all three policies at every configured q; writes `sweep.csv`.
pub fn cmd_sweep(config: &RunConfig, out: &Path) -> Result<PathBuf> {
    let settings = SweepSettings {
        grid_intervals: config.grid_intervals,
        solver: Some(config.solver_settings()),
        horizon: config.horizon,
        warmup: config.warmup,
        replications: config.replications,
        seed: config.seed,
    };
    let rows = sweep_throughput(&config.params(), &config.q_values(), &settings)?;
    let (path, w) = create(out, "sweep.csv")?;
    io::write_sweep(w, &config.provenance(&[]), &rows)?;
    Ok(path)
}

/// Simulate one policy over `replications` runs; writes `simulate.csv` and,
/// with `trace`, `trace.csv` for replication 0.
pub fn cmd_simulate(
    config: &RunConfig,
    out: &Path,
    policy: PolicyKind,
    trace: bool,
) -> Result<(Vec<SimReport>, Vec<PathBuf>)> {
    let params = config.params();
    let grid = BeliefGrid::new(&params, config.grid_intervals)?;
    let settings = config.solver_settings();
    let table = match policy {
        PolicyKind::Optimal => Some(value_iteration(&params, &grid, &settings)?),
        PolicyKind::SingleThreshold => {
            Some(solve_single_threshold_baseline(&params, &grid, &settings)?.table)
        }
        PolicyKind::Greedy => None,
    };
    let greedy = GreedyController { params: &params };
    let argmax;
    let controller: &dyn Controller = match (&table, policy) {
        (Some(t), PolicyKind::SingleThreshold) => {
            argmax = ArgmaxController::new(&params, &grid, t, ActionSet::DeferTransmit);
            &argmax
        }
        (Some(t), _) => {
            argmax = ArgmaxController::new(&params, &grid, t, ActionSet::Full);
            &argmax
        }
        (None, _) => &greedy,
    };
    let runs = (0..config.replications)
        .into_par_iter()
        .map(|r| {
            let run = RunSettings {
                record_trace: trace && r == 0,
                ..RunSettings::new(
                    config.horizon,
                    config.warmup,
                    derive_seed(config.seed, &[0, r as u64]),
                )
            };
            run_policy(&params, controller, &run)
        })
        .collect::<Result<Vec<_>>>()?;
    let provenance = config.provenance(&[("policy", format!("\"{}\"", policy.name()))]);
    let mut files = Vec::new();
    let (path, w) = create(out, "simulate.csv")?;
    io::write_runs(w, &provenance, policy.name(), &runs)?;
    files.push(path);
    if let Some(rows) = runs.first().and_then(|r| r.trace.as_ref()) {
        let (path, w) = create(out, "trace.csv")?;
        io::write_trace(w, &provenance, rows)?;
        files.push(path);
    }
    Ok((runs, files))
}

/// Run the verification suite, or with `table` check an exported value
/// table. Writes `verify.csv`; returns the reports and whether all passed.
pub fn cmd_verify(
    config: &RunConfig,
    out: &Path,
    table: Option<&Path>,
) -> Result<(bool, Vec<CheckReport>)> {
    let params = config.params();
    let reports = match table {
        Some(path) => {
            let (grid, table) = io::read_value_table(File::open(path)?)?;
            let tol = lemma_tolerance(&params);
            vec![
                check_convexity(&table, &grid, tol),
                check_monotonicity(&table, &grid, tol),
            ]
        }
        None => verification_suite(config)?,
    };
    let passed = reports.iter().all(|r| r.passed);
    let (_, w) = create(out, "verify.csv")?;
    io::write_verification(w, &config.provenance(&[]), &reports)?;
    Ok((passed, reports))
}

/// Every check the `verify` command runs without an input table.
pub fn verification_suite(config: &RunConfig) -> Result<Vec<CheckReport>> {
    let params = config.params();
    let settings = config.solver_settings();
    let seed = |j: u64| derive_seed(config.seed, &[VERIFY_STREAM, j]);
    let grid = BeliefGrid::new(&params, config.grid_intervals)?;

    let mut reports = lemma_checks(&params, config.grid_intervals, &settings)?;

    let full = value_iteration(&params, &grid, &settings)?;
    let single = solve_single_threshold_baseline(&params, &grid, &settings);
    match single {
        Ok(single) => {
            reports.push(check_threshold_structure(
                &single.policy,
                ActionSet::DeferTransmit,
            ));
            let greedy = evaluate_greedy(&params, &grid, &settings)?;
            reports.push(dominance(&full, &single.table, &greedy, settings.epsilon));
        }
        Err(Error::StructureViolation { rows }) => reports.push(CheckReport {
            name: "threshold structure D*T*".into(),
            passed: false,
            worst: rows.len() as f64,
            location: rows.first().map(|r| (r.quanta, f64::NAN)),
            detail: format!("{} violating rows", rows.len()),
        }),
        Err(e) => return Err(e),
    }
    reports.push(check_contraction(
        &params,
        &grid,
        config.contraction_pairs,
        seed(0),
    ));
    if config.verify_random_sets > 0 {
        reports.extend(randomized_lemma_checks(
            config.verify_random_sets,
            config.grid_intervals,
            seed(1),
        )?);
    }
    if config.oracle_instances > 0 {
        reports.push(check_oracle_agreement(
            config.oracle_instances,
            config.oracle_max_horizon,
            config.grid_intervals,
            seed(2),
        )?);
    }
    reports.extend(negative_controls());
    Ok(reports)
}

/// `V_full >= V_single >= V_greedy` pointwise, up to the solvers' optimality gap.
pub fn dominance(
    full: &crate::bellman::ValueTable,
    single: &crate::bellman::ValueTable,
    greedy: &crate::bellman::ValueTable,
    epsilon: f64,
) -> CheckReport {
    let tol = 2.0 * epsilon;
    let worst = full
        .values()
        .iter()
        .zip(single.values())
        .zip(greedy.values())
        .map(|((f, s), g)| (s - f).max(g - s))
        .fold(0.0, f64::max);
    CheckReport {
        name: "dominance optimal >= single-threshold >= greedy".into(),
        passed: worst <= tol,
        worst,
        location: None,
        detail: format!("tol {tol:e}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;

    const SAMPLE: &str = r#"
lambda1 = 0.9
lambda0 = 0.6
q = 0.1
k = 5
rate_r = 3.0
beta = 0.98
b_max = 5
"#;

    #[test]
    fn parse_applies_defaults() {
        let c = RunConfig::parse(SAMPLE).unwrap();
        assert_eq!(c.params(), presets::scarce_energy());
        assert_eq!(c.grid_intervals, 200);
        assert_eq!(c.solver_settings().epsilon, 3e-6);
        assert_eq!(c.q_values(), vec![0.1]);
        assert_eq!(c, RunConfig::from_params(&presets::scarce_energy()));
    }

    #[test]
    fn effective_config_round_trips() {
        let c = RunConfig::parse(&format!("{SAMPLE}q_values = [0.2, 0.5]\nseed = 9\n")).unwrap();
        let text = c.to_toml();
        let again = RunConfig::parse(&text).unwrap();
        assert_eq!(again, c.effective());
        assert_eq!(again.to_toml(), text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse(&format!("{SAMPLE}tau = 0.2\n"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("tau"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn validation_errors_name_the_line() {
        let src = SAMPLE.replace("k = 5", "k = 1");
        let err = RunConfig::parse(&src).unwrap_err().to_string();
        assert!(err.contains("line 5") && err.contains("`k`"), "{err}");
        let err = RunConfig::parse(&format!("{SAMPLE}q_values = [0.5, 1.5]\n"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 9") && err.contains("1.5"), "{err}");
        let err = RunConfig::parse(&format!("{SAMPLE}warmup = 100\nhorizon = 100\n"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("warmup"), "{err}");
        let err = RunConfig::parse("lambda1 = \"high\"")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn zero_rate_solve_defers_everywhere() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::parse(SAMPLE).unwrap();
        c.rate_r = 0.0;
        c.grid_intervals = 20;
        cmd_solve(&c, dir.path()).unwrap();
        let map = std::fs::read_to_string(dir.path().join("policy_map.csv")).unwrap();
        let rows: Vec<_> = map
            .lines()
            .filter(|l| !l.starts_with('#'))
            .skip(1)
            .collect();
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|l| l.ends_with(",D")));
    }

    #[test]
    fn verify_flags_adversarial_table() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig::parse(SAMPLE).unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "u,b,p,v\n0,0,0,0\n0,0,0.5,5\n0,0,1,1\n").unwrap();
        let (passed, reports) = cmd_verify(&c, dir.path(), Some(&path)).unwrap();
        assert!(!passed);
        assert!(!reports[0].passed && !reports[1].passed);
    }
}
