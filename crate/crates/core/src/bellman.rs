//! Belief discretization, action values and value iteration.
//!
//! The value function `V(u, p)` is stored on a battery-quanta x belief-node
//! grid. The only continuation point that can fall off the grid is the
//! no-observation update `J(p)`; the post-observation beliefs `lambda0` and
//! `lambda1` are grid nodes by construction. Off-grid values are linear
//! interpolants of the two bracketing nodes.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{BatteryQuanta, ModelParams};

pub const DEFAULT_GRID_INTERVALS: usize = 200;
pub const DEFAULT_MAX_ITERATIONS: usize = 200_000;

/// Nodes closer than this are merged when building a grid.
const NODE_DEDUP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    /// Stay silent and keep the energy.
    Defer,
    /// Sense, then transmit for the rest of the slot only if the channel is good.
    Sense,
    /// Transmit for the whole slot without sensing.
    Transmit,
}

impl Action {
    /// Tie-break preference order: lowest energy expenditure first.
    pub const ALL: [Action; 3] = [Action::Defer, Action::Sense, Action::Transmit];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        match self {
            Action::Defer => 'D',
            Action::Sense => 'O',
            Action::Transmit => 'T',
        }
    }

    pub fn from_letter(c: char) -> Option<Action> {
        match c {
            'D' => Some(Action::Defer),
            'O' => Some(Action::Sense),
            'T' => Some(Action::Transmit),
            _ => None,
        }
    }

    pub fn is_feasible(self, params: &ModelParams, u: BatteryQuanta) -> bool {
        match self {
            Action::Defer => true,
            Action::Sense => params.can_sense(u),
            Action::Transmit => params.can_transmit(u),
        }
    }

    fn check_feasible(self, params: &ModelParams, u: BatteryQuanta) -> Result<()> {
        if self.is_feasible(params, u) {
            Ok(())
        } else {
            Err(Error::InfeasibleAction {
                action: self,
                quanta: u.get(),
                k: params.k,
            })
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Which actions the optimizer may choose from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActionSet {
    #[default]
    Full,
    /// Defer or blind transmit only; the single-threshold baseline.
    DeferTransmit,
}

impl ActionSet {
    pub fn allows(self, a: Action) -> bool {
        match self {
            ActionSet::Full => true,
            ActionSet::DeferTransmit => a != Action::Sense,
        }
    }
}

/// Sorted belief nodes on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefGrid {
    nodes: Vec<f64>,
}

/// Position of a belief between two adjacent nodes: `value = (1-w) V[i] + w V[i+1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracket {
    pub lower: usize,
    pub weight: f64,
}

impl BeliefGrid {
    /// Uniform grid with `intervals` equal steps, augmented with exact
    /// `lambda0` and `lambda1` nodes.
    pub fn new(params: &ModelParams, intervals: usize) -> Result<Self> {
        if intervals == 0 {
            return Err(Error::InvalidParam {
                name: "grid_intervals",
                reason: "must be positive".into(),
            });
        }
        let mut nodes = vec![params.lambda0, params.lambda1];
        for i in 0..=intervals {
            let x = i as f64 / intervals as f64;
            if nodes.iter().all(|&n| (n - x).abs() > NODE_DEDUP_TOL) {
                nodes.push(x);
            }
        }
        nodes.sort_by(f64::total_cmp);
        nodes.dedup();
        Self::from_nodes(nodes)
    }

    /// Grid from explicit nodes; they must be strictly increasing from 0 to 1.
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 || nodes[0] != 0.0 || nodes[nodes.len() - 1] != 1.0 {
            return Err(Error::Table(
                "belief nodes must start at 0 and end at 1".into(),
            ));
        }
        if nodes
            .windows(2)
            .any(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater))
        {
            return Err(Error::Table(
                "belief nodes must be strictly increasing".into(),
            ));
        }
        Ok(BeliefGrid { nodes })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Largest gap between adjacent nodes.
    pub fn max_spacing(&self) -> f64 {
        self.nodes
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    /// Index of a node equal to `p` within the merge tolerance.
    pub fn find_node(&self, p: f64) -> Option<usize> {
        let b = self.bracket(p);
        [b.lower, b.lower + 1]
            .into_iter()
            .find(|&i| (self.nodes[i] - p).abs() <= NODE_DEDUP_TOL)
    }

    /// Bracketing nodes of `p` (clamped to `[0, 1]`). Exact nodes get weight 0,
    /// except the last node which is reached with weight 1.
    pub fn bracket(&self, p: f64) -> Bracket {
        let p = p.clamp(0.0, 1.0);
        let last = self.nodes.len() - 2;
        let lower = self
            .nodes
            .partition_point(|&x| x <= p)
            .saturating_sub(1)
            .min(last);
        let (lo, hi) = (self.nodes[lower], self.nodes[lower + 1]);
        let weight = if p <= lo {
            0.0
        } else if p >= hi {
            1.0
        } else {
            (p - lo) / (hi - lo)
        };
        Bracket { lower, weight }
    }
}

/// `V(u, p)` on the grid, plus the action values it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    levels: usize,
    width: usize,
    values: Vec<f64>,
    /// Indexed by [`Action::index`]; `-inf` marks an infeasible or excluded action.
    action_values: Vec<[f64; 3]>,
    iterations: usize,
    final_delta: f64,
    epsilon: Option<f64>,
}

impl ValueTable {
    pub fn zeros(params: &ModelParams, grid: &BeliefGrid) -> Self {
        Self::from_fn(params.battery_levels(), grid.len(), |_, _| 0.0)
    }

    /// Table with the given values and no recorded action values.
    pub fn from_fn(levels: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(levels * width);
        for u in 0..levels {
            for j in 0..width {
                values.push(f(u, j));
            }
        }
        ValueTable {
            levels,
            width,
            values,
            action_values: vec![[f64::NEG_INFINITY; 3]; levels * width],
            iterations: 0,
            final_delta: f64::NAN,
            epsilon: None,
        }
    }

    /// Number of battery levels (rows).
    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Number of belief nodes (columns).
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn value(&self, u: usize, node: usize) -> f64 {
        self.values[u * self.width + node]
    }

    pub fn row(&self, u: usize) -> &[f64] {
        &self.values[u * self.width..(u + 1) * self.width]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Action value recorded by the sweep that produced this table, if the
    /// action was feasible and allowed there.
    pub fn action_value(&self, u: usize, node: usize, a: Action) -> Option<f64> {
        let v = self.action_values[u * self.width + node][a.index()];
        v.is_finite().then_some(v)
    }

    pub(crate) fn action_values_raw(&self, u: usize, node: usize) -> [f64; 3] {
        self.action_values[u * self.width + node]
    }

    /// Sweeps performed by value iteration (0 for a hand-built table).
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Optimality target the table was solved to, if it came from value iteration.
    pub fn epsilon(&self) -> Option<f64> {
        self.epsilon
    }

    /// Whether the table carries action values from a sweep.
    pub fn has_action_values(&self) -> bool {
        self.iterations > 0
    }

    /// Sup-norm change of the last sweep.
    pub fn final_delta(&self) -> f64 {
        self.final_delta
    }

    pub fn sup_distance(&self, other: &ValueTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn interpolate_at(&self, u: usize, b: Bracket) -> f64 {
        let row = self.row(u);
        if b.weight == 0.0 {
            row[b.lower]
        } else if b.weight == 1.0 {
            row[b.lower + 1]
        } else {
            (1.0 - b.weight) * row[b.lower] + b.weight * row[b.lower + 1]
        }
    }

    fn check_shape(&self, params: &ModelParams, grid: &BeliefGrid) {
        assert_eq!(
            self.levels,
            params.battery_levels(),
            "value table battery levels do not match params"
        );
        assert_eq!(
            self.width,
            grid.len(),
            "value table width does not match grid"
        );
    }
}

/// Stopping and budget settings for value iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Target optimality gap of the returned value function.
    pub epsilon: f64,
    pub max_iterations: usize,
}

impl SolverSettings {
    /// `epsilon = 1e-6 R` (or `1e-6` when `R = 0`), cap of 200 000 sweeps.
    pub fn for_params(params: &ModelParams) -> Self {
        SolverSettings {
            epsilon: default_epsilon(params),
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }

    /// Sup-norm delta below which iteration stops: `epsilon (1 - beta) / (2 beta)`.
    pub fn stopping_delta(&self, beta: f64) -> f64 {
        if beta == 0.0 {
            f64::INFINITY
        } else {
            self.epsilon * (1.0 - beta) / (2.0 * beta)
        }
    }
}

pub fn default_epsilon(params: &ModelParams) -> f64 {
    if params.rate_r > 0.0 {
        1e-6 * params.rate_r
    } else {
        1e-6
    }
}

/// Absolute tolerance within which action values count as tied.
pub fn tie_tolerance(params: &ModelParams) -> f64 {
    1e-10 * params.rate_r
}

/// Expected immediate reward in bits.
pub fn expected_reward(params: &ModelParams, u: BatteryQuanta, p: f64, a: Action) -> Result<f64> {
    a.check_feasible(params, u)?;
    Ok(immediate_reward(params, u, p, a))
}

fn immediate_reward(params: &ModelParams, u: BatteryQuanta, p: f64, a: Action) -> f64 {
    match a {
        Action::Transmit if params.can_transmit(u) => p * params.rate_r,
        Action::Sense if params.can_transmit(u) => (1.0 - params.tau()) * p * params.rate_r,
        _ => 0.0,
    }
}

/// Piecewise-linear `V(u, p)`; exact at grid nodes.
pub fn interpolate_value(table: &ValueTable, grid: &BeliefGrid, u: BatteryQuanta, p: f64) -> f64 {
    table.interpolate_at(u.index(), grid.bracket(p))
}

/// Continuation lookups for one belief: at `J(p)`, `lambda1` and `lambda0`.
struct Continuation<'t> {
    table: &'t ValueTable,
    deferred: Bracket,
    after_good: Bracket,
    after_bad: Bracket,
}

impl Continuation<'_> {
    fn deferred(&self, u: u32) -> f64 {
        self.table.interpolate_at(u as usize, self.deferred)
    }

    fn good(&self, u: u32) -> f64 {
        self.table.interpolate_at(u as usize, self.after_good)
    }

    fn bad(&self, u: u32) -> f64 {
        self.table.interpolate_at(u as usize, self.after_bad)
    }
}

fn defer_value(params: &ModelParams, c: &Continuation<'_>, u: u32) -> f64 {
    let full = params.max_quanta();
    let harvested = (u + params.k).min(full);
    params.beta * (params.q * c.deferred(harvested) + (1.0 - params.q) * c.deferred(u))
}

fn sense_value(params: &ModelParams, c: &Continuation<'_>, u: u32, p: f64) -> f64 {
    let (k, q, beta) = (params.k, params.q, params.beta);
    let full = params.max_quanta();
    if u >= k {
        let good = (1.0 - params.tau()) * params.rate_r
            + beta * (q * c.good(u) + (1.0 - q) * c.good(u - k));
        let bad = beta * (q * c.bad((u - 1 + k).min(full)) + (1.0 - q) * c.bad(u - 1));
        p * good + (1.0 - p) * bad
    } else {
        let charged = (u - 1 + k).min(full);
        beta * (q * p * c.good(charged)
            + q * (1.0 - p) * c.bad(charged)
            + (1.0 - q) * p * c.good(u - 1)
            + (1.0 - q) * (1.0 - p) * c.bad(u - 1))
    }
}

fn transmit_value(params: &ModelParams, c: &Continuation<'_>, u: u32, p: f64) -> f64 {
    let (k, q, beta) = (params.k, params.q, params.beta);
    p * (params.rate_r + beta * (q * c.good(u) + (1.0 - q) * c.good(u - k)))
        + (1.0 - p) * beta * (q * c.bad(u) + (1.0 - q) * c.bad(u - k))
}

fn continuation_at<'t>(
    params: &ModelParams,
    grid: &BeliefGrid,
    table: &'t ValueTable,
    p: f64,
) -> Continuation<'t> {
    Continuation {
        table,
        deferred: grid.bracket(params.belief_defer(p)),
        after_good: grid.bracket(params.lambda1),
        after_bad: grid.bracket(params.lambda0),
    }
}

/// `V_D(u, p)`: no reward, belief moves to `J(p)`, battery may gain one unit.
pub fn action_value_defer(
    params: &ModelParams,
    table: &ValueTable,
    grid: &BeliefGrid,
    u: BatteryQuanta,
    p: f64,
) -> f64 {
    defer_value(params, &continuation_at(params, grid, table, p), u.get())
}

/// `V_O(u, p)`. With less than one energy unit this is sensing without transmission.
pub fn action_value_sense(
    params: &ModelParams,
    table: &ValueTable,
    grid: &BeliefGrid,
    u: BatteryQuanta,
    p: f64,
) -> Result<f64> {
    Action::Sense.check_feasible(params, u)?;
    Ok(sense_value(
        params,
        &continuation_at(params, grid, table, p),
        u.get(),
        p,
    ))
}

/// `V_T(u, p)`.
pub fn action_value_transmit(
    params: &ModelParams,
    table: &ValueTable,
    grid: &BeliefGrid,
    u: BatteryQuanta,
    p: f64,
) -> Result<f64> {
    Action::Transmit.check_feasible(params, u)?;
    Ok(transmit_value(
        params,
        &continuation_at(params, grid, table, p),
        u.get(),
        p,
    ))
}

/// Pick the best action with ties (within `tol`) resolved as D, then O, then T.
/// Entries equal to `-inf` are never chosen.
pub fn choose_action(action_values: [f64; 3], tol: f64) -> Action {
    let best = action_values
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    Action::ALL
        .into_iter()
        .find(|a| action_values[a.index()] >= best - tol)
        .unwrap_or(Action::Defer)
}

/// The Bellman operator for one parameter set, grid and action set.
///
/// Bracket positions of `J(p)` at every node and of `lambda0`, `lambda1`
/// are computed once and reused by every sweep.
#[derive(Debug, Clone)]
pub struct BellmanOperator<'a> {
    params: &'a ModelParams,
    grid: &'a BeliefGrid,
    actions: ActionSet,
    deferred: Vec<Bracket>,
    after_good: Bracket,
    after_bad: Bracket,
}

impl<'a> BellmanOperator<'a> {
    pub fn new(params: &'a ModelParams, grid: &'a BeliefGrid, actions: ActionSet) -> Self {
        let deferred = grid
            .nodes()
            .iter()
            .map(|&p| grid.bracket(params.belief_defer(p)))
            .collect();
        BellmanOperator {
            params,
            grid,
            actions,
            deferred,
            after_good: grid.bracket(params.lambda1),
            after_bad: grid.bracket(params.lambda0),
        }
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    pub fn grid(&self) -> &BeliefGrid {
        self.grid
    }

    pub fn action_set(&self) -> ActionSet {
        self.actions
    }

    fn values_with(&self, c: &Continuation<'_>, u: u32, p: f64) -> [f64; 3] {
        let params = self.params;
        let uq = BatteryQuanta(u);
        let mut out = [f64::NEG_INFINITY; 3];
        out[Action::Defer.index()] = defer_value(params, c, u);
        if self.actions.allows(Action::Sense) && params.can_sense(uq) {
            out[Action::Sense.index()] = sense_value(params, c, u, p);
        }
        if params.can_transmit(uq) {
            out[Action::Transmit.index()] = transmit_value(params, c, u, p);
        }
        out
    }

    /// Action values at an arbitrary belief, continuing with `table`.
    /// Disallowed or infeasible actions are `-inf`.
    pub fn action_values(&self, table: &ValueTable, u: BatteryQuanta, p: f64) -> [f64; 3] {
        let c = Continuation {
            table,
            deferred: self.grid.bracket(self.params.belief_defer(p)),
            after_good: self.after_good,
            after_bad: self.after_bad,
        };
        self.values_with(&c, u.get(), p)
    }

    fn node_action_values(&self, table: &ValueTable, u: usize, node: usize) -> [f64; 3] {
        let c = Continuation {
            table,
            deferred: self.deferred[node],
            after_good: self.after_good,
            after_bad: self.after_bad,
        };
        self.values_with(&c, u as u32, self.grid.nodes()[node])
    }

    /// Best action at an arbitrary belief under the D, O, T tie-break.
    pub fn best_action(&self, table: &ValueTable, u: BatteryQuanta, p: f64) -> Action {
        choose_action(self.action_values(table, u, p), tie_tolerance(self.params))
    }

    /// One synchronous sweep. Each output cell picks its value through `pick`
    /// from the action values computed against `table_in`.
    fn sweep_by(
        &self,
        table_in: &ValueTable,
        pick: impl Fn(usize, usize, &[f64; 3]) -> f64 + Sync,
    ) -> (ValueTable, f64) {
        table_in.check_shape(self.params, self.grid);
        let width = table_in.width;
        let mut values = vec![0.0; table_in.values.len()];
        let mut action_values = vec![[0.0; 3]; table_in.values.len()];
        values
            .par_chunks_mut(width)
            .zip(action_values.par_chunks_mut(width))
            .enumerate()
            .for_each(|(u, (vrow, qrow))| {
                for node in 0..width {
                    let qs = self.node_action_values(table_in, u, node);
                    vrow[node] = pick(u, node, &qs);
                    qrow[node] = qs;
                }
            });
        let out = ValueTable {
            levels: table_in.levels,
            width,
            values,
            action_values,
            iterations: table_in.iterations + 1,
            final_delta: f64::NAN,
            epsilon: None,
        };
        let delta = out.sup_distance(table_in);
        (
            ValueTable {
                final_delta: delta,
                ..out
            },
            delta,
        )
    }

    /// Apply the Bellman max-operator once.
    pub fn sweep(&self, table_in: &ValueTable) -> (ValueTable, f64) {
        self.sweep_by(table_in, |_, _, qs| {
            qs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
    }

    /// Iterate from `V = 0` until the sweep delta falls below the certified
    /// stopping threshold.
    pub fn value_iteration(&self, settings: &SolverSettings) -> Result<ValueTable> {
        self.iterate(settings, |table| self.sweep(table))
    }

    /// Value of a fixed stationary policy, by iterating its (linear) Bellman operator.
    pub fn evaluate_policy(
        &self,
        settings: &SolverSettings,
        policy: impl Fn(BatteryQuanta, f64) -> Action + Sync,
    ) -> Result<ValueTable> {
        let nodes = self.grid.nodes();
        let params = self.params;
        let actions: Vec<Action> = (0..params.battery_levels())
            .flat_map(|u| nodes.iter().map(move |&p| (u, p)))
            .map(|(u, p)| {
                let a = policy(BatteryQuanta(u as u32), p);
                assert!(
                    a.is_feasible(params, BatteryQuanta(u as u32)),
                    "policy chose infeasible {a} at u={u}"
                );
                a
            })
            .collect();
        let width = self.grid.len();
        self.iterate(settings, |table| {
            self.sweep_by(table, |u, node, qs| qs[actions[u * width + node].index()])
        })
    }

    fn iterate(
        &self,
        settings: &SolverSettings,
        mut step: impl FnMut(&ValueTable) -> (ValueTable, f64),
    ) -> Result<ValueTable> {
        if settings.epsilon.is_nan() || settings.epsilon <= 0.0 {
            return Err(Error::InvalidParam {
                name: "epsilon",
                reason: "must be positive".into(),
            });
        }
        let threshold = settings.stopping_delta(self.params.beta);
        let mut table = ValueTable::zeros(self.params, self.grid);
        let mut delta = f64::INFINITY;
        for _ in 0..settings.max_iterations {
            let (next, d) = step(&table);
            table = next;
            delta = d;
            if delta <= threshold {
                table.epsilon = Some(settings.epsilon);
                return Ok(table);
            }
        }
        Err(Error::IterationCap {
            cap: settings.max_iterations,
            delta,
        })
    }
}

/// One synchronous Bellman sweep over the full action set.
pub fn bellman_sweep(
    params: &ModelParams,
    grid: &BeliefGrid,
    table_in: &ValueTable,
) -> (ValueTable, f64) {
    BellmanOperator::new(params, grid, ActionSet::Full).sweep(table_in)
}

/// Optimal value function to within `settings.epsilon`.
pub fn value_iteration(
    params: &ModelParams,
    grid: &BeliefGrid,
    settings: &SolverSettings,
) -> Result<ValueTable> {
    BellmanOperator::new(params, grid, ActionSet::Full).value_iteration(settings)
}
