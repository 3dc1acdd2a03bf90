//! Optimal policy extraction, threshold detection and the baseline policies.

use std::fmt;

use sha2::{Digest, Sha256};

use crate::bellman::{
    choose_action, tie_tolerance, Action, ActionSet, BeliefGrid, BellmanOperator, SolverSettings,
    ValueTable,
};
use crate::error::{Error, Result, ViolatingRow};
use crate::model::{BatteryQuanta, ModelParams};

/// Where a policy table came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    /// Short SHA-256 digest of the parameter set.
    pub params_fingerprint: String,
    pub grid_nodes: usize,
    pub grid_max_spacing: f64,
    pub epsilon: Option<f64>,
    pub action_set: ActionSet,
}

/// Stable digest of a parameter set, for provenance headers.
pub fn params_fingerprint(params: &ModelParams) -> String {
    let canonical = format!(
        "{:016x} {:016x} {:016x} {} {:016x} {:016x} {}",
        params.lambda1.to_bits(),
        params.lambda0.to_bits(),
        params.q.to_bits(),
        params.k,
        params.rate_r.to_bits(),
        params.beta.to_bits(),
        params.b_max
    );
    let digest = Sha256::digest(canonical.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Chosen action at every (battery quanta, belief node) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    k: u32,
    nodes: Vec<f64>,
    actions: Vec<Action>,
    provenance: Provenance,
}

impl PolicyTable {
    /// Policy from explicit row-major actions (e.g. read back from CSV).
    pub fn from_actions(
        params: &ModelParams,
        nodes: Vec<f64>,
        actions: Vec<Action>,
    ) -> Result<Self> {
        if nodes.is_empty() || actions.len() != params.battery_levels() * nodes.len() {
            return Err(Error::Table(format!(
                "{} actions do not fill {} battery levels x {} nodes",
                actions.len(),
                params.battery_levels(),
                nodes.len()
            )));
        }
        for (i, &a) in actions.iter().enumerate() {
            let u = BatteryQuanta((i / nodes.len()) as u32);
            if !a.is_feasible(params, u) {
                return Err(Error::InfeasibleAction {
                    action: a,
                    quanta: u.get(),
                    k: params.k,
                });
            }
        }
        let grid_nodes = nodes.len();
        let grid_max_spacing = nodes.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        Ok(PolicyTable {
            k: params.k,
            nodes,
            actions,
            provenance: Provenance {
                params_fingerprint: params_fingerprint(params),
                grid_nodes,
                grid_max_spacing,
                epsilon: None,
                action_set: ActionSet::Full,
            },
        })
    }

    pub fn levels(&self) -> usize {
        self.actions.len() / self.nodes.len()
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn action(&self, u: usize, node: usize) -> Action {
        self.actions[u * self.nodes.len() + node]
    }

    pub fn row(&self, u: usize) -> &[Action] {
        let w = self.nodes.len();
        &self.actions[u * w..(u + 1) * w]
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Number of cells assigned action `a`.
    pub fn count(&self, a: Action) -> usize {
        self.actions.iter().filter(|&&x| x == a).count()
    }
}

/// Argmax of the action values behind `table`, ties resolved D, then O, then T.
///
/// When `table` came out of a sweep its recorded action values are used, so
/// the stored value equals the chosen action's value. A hand-built table is
/// run through one application of the operator instead.
pub fn extract_policy(params: &ModelParams, grid: &BeliefGrid, table: &ValueTable) -> PolicyTable {
    extract_policy_with(params, grid, table, ActionSet::Full)
}

pub fn extract_policy_with(
    params: &ModelParams,
    grid: &BeliefGrid,
    table: &ValueTable,
    set: ActionSet,
) -> PolicyTable {
    let tol = tie_tolerance(params);
    let op = BellmanOperator::new(params, grid, set);
    let mut actions = Vec::with_capacity(table.levels() * grid.len());
    for u in 0..table.levels() {
        for (node, &p) in grid.nodes().iter().enumerate() {
            let mut qs = if table.has_action_values() {
                table.action_values_raw(u, node)
            } else {
                op.action_values(table, BatteryQuanta(u as u32), p)
            };
            for a in Action::ALL {
                if !set.allows(a) {
                    qs[a.index()] = f64::NEG_INFINITY;
                }
            }
            actions.push(choose_action(qs, tol));
        }
    }
    PolicyTable {
        k: params.k,
        nodes: grid.nodes().to_vec(),
        actions,
        provenance: Provenance {
            params_fingerprint: params_fingerprint(params),
            grid_nodes: grid.len(),
            grid_max_spacing: grid.max_spacing(),
            epsilon: table.epsilon(),
            action_set: set,
        },
    }
}

/// Shape of one battery row of a threshold policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    AllDefer,
    OneThreshold,
    TwoThreshold,
    ThreeThreshold,
    /// Below one energy unit: a band of sensing-only between deferral regions.
    SenseOnlyBand,
}

impl Pattern {
    pub fn name(self) -> &'static str {
        match self {
            Pattern::AllDefer => "all-D",
            Pattern::OneThreshold => "one-threshold",
            Pattern::TwoThreshold => "two-threshold",
            Pattern::ThreeThreshold => "three-threshold",
            Pattern::SenseOnlyBand => "sense-only-band",
        }
    }

    pub fn from_name(s: &str) -> Option<Pattern> {
        [
            Pattern::AllDefer,
            Pattern::OneThreshold,
            Pattern::TwoThreshold,
            Pattern::ThreeThreshold,
            Pattern::SenseOnlyBand,
        ]
        .into_iter()
        .find(|p| p.name() == s)
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdRow {
    pub quanta: u32,
    /// Battery level in energy units.
    pub level: f64,
    pub pattern: Pattern,
    /// Action-change beliefs in increasing order; `rho[i]` is `None` past the
    /// number of changes in this row.
    pub rho: [Option<f64>; 3],
    /// Largest node gap around any reported threshold (0 when there are none).
    pub resolution: f64,
    /// Run-length encoded action sequence, e.g. `D120 O31 D10 T40`.
    pub sequence: String,
}

impl ThresholdRow {
    pub fn thresholds(&self) -> Vec<f64> {
        self.rho.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdProfile {
    pub k: u32,
    pub rows: Vec<ThresholdRow>,
}

impl ThresholdProfile {
    /// Row for battery level `b` energy units (rounded to the nearest quantum).
    pub fn at_level(&self, b: f64) -> Option<&ThresholdRow> {
        let u = (b * f64::from(self.k)).round();
        if u < 0.0 {
            return None;
        }
        self.rows.get(u as usize)
    }
}

fn run_lengths(row: &[Action]) -> Vec<(Action, usize, usize)> {
    let mut runs: Vec<(Action, usize, usize)> = Vec::new();
    for (i, &a) in row.iter().enumerate() {
        match runs.last_mut() {
            Some((last, _, end)) if *last == a => *end = i,
            _ => runs.push((a, i, i)),
        }
    }
    runs
}

fn encode_runs(runs: &[(Action, usize, usize)]) -> String {
    runs.iter()
        .map(|(a, s, e)| format!("{}{}", a.letter(), e - s + 1))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whether the run letters follow `template` in order, each slot used at most once.
fn matches_template(runs: &[(Action, usize, usize)], template: &[Action]) -> bool {
    let mut slot = 0;
    for (a, _, _) in runs {
        while slot < template.len() && template[slot] != *a {
            slot += 1;
        }
        if slot == template.len() {
            return false;
        }
        slot += 1;
    }
    true
}

/// Admissible run templates for a battery row.
fn template(set: ActionSet, quanta: u32, k: u32) -> &'static [Action] {
    use Action::*;
    match (set, quanta) {
        (_, 0) => &[Defer],
        (ActionSet::Full, u) if u >= k => &[Defer, Sense, Defer, Transmit],
        (ActionSet::Full, _) => &[Defer, Sense, Defer],
        (ActionSet::DeferTransmit, u) if u >= k => &[Defer, Transmit],
        (ActionSet::DeferTransmit, _) => &[Defer],
    }
}

/// Check every battery row against the threshold structure and locate the
/// action changes. Rows that do not fit are reported, never repaired.
pub fn detect_thresholds(policy: &PolicyTable) -> Result<ThresholdProfile> {
    detect_thresholds_with(policy, ActionSet::Full)
}

/// As [`detect_thresholds`]; with [`ActionSet::DeferTransmit`] rows must be `D* T*`.
pub fn detect_thresholds_with(policy: &PolicyTable, set: ActionSet) -> Result<ThresholdProfile> {
    let k = policy.k;
    let nodes = policy.nodes();
    let mut rows = Vec::with_capacity(policy.levels());
    let mut violations = Vec::new();
    for u in 0..policy.levels() {
        let quanta = u as u32;
        let runs = run_lengths(policy.row(u));
        let sequence = encode_runs(&runs);
        if !matches_template(&runs, template(set, quanta, k)) {
            violations.push(ViolatingRow { quanta, sequence });
            continue;
        }
        let mut rho = [None; 3];
        let mut resolution: f64 = 0.0;
        for (i, pair) in runs.windows(2).enumerate() {
            let (last, first) = (pair[0].2, pair[1].1);
            rho[i] = Some(0.5 * (nodes[last] + nodes[first]));
            resolution = resolution.max(nodes[first] - nodes[last]);
        }
        let changes = runs.len() - 1;
        let pattern = if quanta >= 1 && quanta < k && runs.iter().any(|r| r.0 == Action::Sense) {
            Pattern::SenseOnlyBand
        } else {
            match changes {
                0 if runs[0].0 == Action::Defer => Pattern::AllDefer,
                0 => Pattern::OneThreshold,
                1 => Pattern::OneThreshold,
                2 => Pattern::TwoThreshold,
                _ => Pattern::ThreeThreshold,
            }
        };
        // A row without any deferral region starts at belief 0.
        if changes == 0 && pattern == Pattern::OneThreshold {
            rho[0] = Some(0.0);
        }
        rows.push(ThresholdRow {
            quanta,
            level: BatteryQuanta(quanta).level(k),
            pattern,
            rho,
            resolution,
            sequence,
        });
    }
    if violations.is_empty() {
        Ok(ThresholdProfile { k, rows })
    } else {
        Err(Error::StructureViolation { rows: violations })
    }
}

/// The two comparison policies.
#[derive(Debug, Clone, PartialEq)]
pub enum BaselinePolicy {
    /// Transmit whenever at least one energy unit is stored.
    Greedy,
    /// Defer below a per-battery belief threshold, transmit above it.
    /// `None` where the row never transmits.
    SingleThreshold { thresholds: Vec<Option<f64>> },
}

impl BaselinePolicy {
    /// Action on grid data. For the single-threshold policy this is the
    /// threshold rule; the simulator uses the action-value argmax instead.
    pub fn action(&self, params: &ModelParams, u: BatteryQuanta, p: f64) -> Action {
        match self {
            BaselinePolicy::Greedy => greedy_action(params, u),
            BaselinePolicy::SingleThreshold { thresholds } => {
                match thresholds.get(u.index()).copied().flatten() {
                    Some(rho) if p >= rho && params.can_transmit(u) => Action::Transmit,
                    _ => Action::Defer,
                }
            }
        }
    }
}

pub fn greedy_action(params: &ModelParams, u: BatteryQuanta) -> Action {
    if params.can_transmit(u) {
        Action::Transmit
    } else {
        Action::Defer
    }
}

/// Solution of the problem restricted to `{D, T}`.
#[derive(Debug, Clone)]
pub struct SingleThresholdSolution {
    pub table: ValueTable,
    pub policy: PolicyTable,
    pub profile: ThresholdProfile,
    pub baseline: BaselinePolicy,
}

/// Optimize the per-battery transmit threshold by value iteration over `{D, T}`.
pub fn solve_single_threshold_baseline(
    params: &ModelParams,
    grid: &BeliefGrid,
    settings: &SolverSettings,
) -> Result<SingleThresholdSolution> {
    let op = BellmanOperator::new(params, grid, ActionSet::DeferTransmit);
    let table = op.value_iteration(settings)?;
    let policy = extract_policy_with(params, grid, &table, ActionSet::DeferTransmit);
    let profile = detect_thresholds_with(&policy, ActionSet::DeferTransmit)?;
    let thresholds = profile
        .rows
        .iter()
        .map(|row| match row.pattern {
            Pattern::OneThreshold => row.rho[0],
            _ => None,
        })
        .collect();
    Ok(SingleThresholdSolution {
        table,
        policy,
        profile,
        baseline: BaselinePolicy::SingleThreshold { thresholds },
    })
}

/// Value of the greedy policy under the full model, on the grid.
pub fn evaluate_greedy(
    params: &ModelParams,
    grid: &BeliefGrid,
    settings: &SolverSettings,
) -> Result<ValueTable> {
    BellmanOperator::new(params, grid, ActionSet::Full)
        .evaluate_policy(settings, |u, _| greedy_action(params, u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bellman::value_iteration;
    use crate::model::presets;

    fn policy_from_rows(k: u32, nodes: Vec<f64>, rows: &[&str]) -> PolicyTable {
        let actions = rows
            .iter()
            .flat_map(|r| r.chars().map(|c| Action::from_letter(c).unwrap()))
            .collect();
        PolicyTable {
            k,
            nodes,
            actions,
            provenance: Provenance {
                params_fingerprint: String::new(),
                grid_nodes: 0,
                grid_max_spacing: 0.0,
                epsilon: None,
                action_set: ActionSet::Full,
            },
        }
    }

    fn nodes(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn greedy_examples() {
        let p = presets::scarce_energy();
        assert_eq!(greedy_action(&p, BatteryQuanta(p.k)), Action::Transmit);
        assert_eq!(greedy_action(&p, BatteryQuanta(p.k - 1)), Action::Defer);
        assert_eq!(greedy_action(&p, BatteryQuanta(0)), Action::Defer);
    }

    #[test]
    fn patterns_from_hand_built_rows() {
        // k = 2: rows u = 0, 1 (sensing only), 2, 3, 4
        let policy = policy_from_rows(2, nodes(5), &["DDDDD", "DOODD", "DDDTT", "DOTTT", "DODTT"]);
        let profile = detect_thresholds(&policy).unwrap();
        let pats: Vec<_> = profile.rows.iter().map(|r| r.pattern).collect();
        assert_eq!(
            pats,
            [
                Pattern::AllDefer,
                Pattern::SenseOnlyBand,
                Pattern::OneThreshold,
                Pattern::TwoThreshold,
                Pattern::ThreeThreshold
            ]
        );
        assert!(profile.rows[0].thresholds().is_empty());
        assert_eq!(profile.rows[2].thresholds(), vec![0.625]);
        assert_eq!(profile.rows[4].thresholds(), vec![0.125, 0.375, 0.625]);
        assert_eq!(profile.rows[4].resolution, 0.25);
        assert_eq!(profile.rows[4].sequence, "D1 O1 D1 T2");
        assert_eq!(profile.at_level(2.0).unwrap().quanta, 4);
    }

    #[test]
    fn violations_are_reported_with_location() {
        let policy = policy_from_rows(2, nodes(5), &["DDDDD", "DODOD", "DDDTT", "DTDTT", "DDDTT"]);
        match detect_thresholds(&policy) {
            Err(Error::StructureViolation { rows }) => {
                assert_eq!(rows.len(), 2);
                assert_eq!(
                    rows[0],
                    ViolatingRow {
                        quanta: 1,
                        sequence: "D1 O1 D1 O1 D1".into()
                    }
                );
                assert_eq!(rows[1].quanta, 3);
            }
            other => panic!("expected violation, got {other:?}"),
        }
        // two-action mode rejects any sensing
        let policy = policy_from_rows(2, nodes(3), &["DDD", "DDD", "DOT", "DDT", "DTT"]);
        assert!(detect_thresholds(&policy).is_ok());
        assert!(detect_thresholds_with(&policy, ActionSet::DeferTransmit).is_err());
    }

    #[test]
    fn myopic_policy_transmits_with_energy() {
        let p = ModelParams {
            beta: 0.0,
            ..presets::scarce_energy()
        };
        let grid = BeliefGrid::new(&p, 40).unwrap();
        let table = value_iteration(&p, &grid, &SolverSettings::for_params(&p)).unwrap();
        let policy = extract_policy(&p, &grid, &table);
        for u in 0..p.battery_levels() {
            for (j, &x) in grid.nodes().iter().enumerate() {
                let expect = if u >= p.k as usize && x > 0.0 {
                    Action::Transmit
                } else {
                    Action::Defer
                };
                assert_eq!(policy.action(u, j), expect, "u={u} p={x}");
            }
        }
    }

    #[test]
    fn empty_battery_always_defers() {
        let p = presets::scarce_energy();
        let grid = BeliefGrid::new(&p, 50).unwrap();
        let table = value_iteration(&p, &grid, &SolverSettings::for_params(&p)).unwrap();
        let policy = extract_policy(&p, &grid, &table);
        assert!(policy.row(0).iter().all(|&a| a == Action::Defer));
        assert_eq!(
            policy.provenance().params_fingerprint,
            params_fingerprint(&p)
        );
        assert_eq!(policy.provenance().epsilon, Some(3e-6));
    }

    #[test]
    fn zero_rate_single_threshold_defers() {
        let p = ModelParams {
            rate_r: 0.0,
            ..presets::scarce_energy()
        };
        let grid = BeliefGrid::new(&p, 40).unwrap();
        let sol =
            solve_single_threshold_baseline(&p, &grid, &SolverSettings::for_params(&p)).unwrap();
        assert_eq!(
            sol.policy.count(Action::Defer),
            p.battery_levels() * grid.len()
        );
        assert!(sol
            .profile
            .rows
            .iter()
            .all(|r| r.pattern == Pattern::AllDefer));
    }

    #[test]
    fn myopic_single_threshold() {
        let p = ModelParams {
            beta: 0.0,
            ..presets::scarce_energy()
        };
        let grid = BeliefGrid::new(&p, 40).unwrap();
        let sol =
            solve_single_threshold_baseline(&p, &grid, &SolverSettings::for_params(&p)).unwrap();
        for u in 0..p.battery_levels() {
            for (j, &x) in grid.nodes().iter().enumerate() {
                let expect = if u >= p.k as usize && x > 0.0 {
                    Action::Transmit
                } else {
                    Action::Defer
                };
                assert_eq!(sol.policy.action(u, j), expect);
            }
        }
        let BaselinePolicy::SingleThreshold { thresholds } = &sol.baseline else {
            unreachable!()
        };
        assert_eq!(thresholds[0], None);
        assert_eq!(thresholds[p.k as usize], Some(0.0125));
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let a = presets::scarce_energy();
        assert_eq!(params_fingerprint(&a), params_fingerprint(&a));
        assert_ne!(
            params_fingerprint(&a),
            params_fingerprint(&presets::costly_sensing())
        );
        assert_eq!(params_fingerprint(&a).len(), 16);
    }
}
