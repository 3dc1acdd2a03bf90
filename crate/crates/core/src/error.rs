use thiserror::Error;

use crate::bellman::Action;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    /// The channel chain has `1 - lambda1 + lambda0 == 0` and no unique stationary law.
    #[error("degenerate channel chain (lambda1 = 1, lambda0 = 0) has no unique stationary belief")]
    DegenerateChain,

    #[error("action {action} is infeasible with {quanta} battery quanta (k = {k})")]
    InfeasibleAction { action: Action, quanta: u32, k: u32 },

    #[error(
        "value iteration did not converge within {cap} sweeps (last sup-norm delta {delta:e})"
    )]
    IterationCap { cap: usize, delta: f64 },

    #[error("threshold structure violated in {} battery row(s): {}", .rows.len(), describe_rows(.rows))]
    StructureViolation { rows: Vec<ViolatingRow> },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed table: {0}")]
    Table(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A battery row whose node-wise action sequence fails the admissible pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct ViolatingRow {
    pub quanta: u32,
    /// Run-length encoded action sequence along increasing belief, e.g. `D12 O3 T40 D2`.
    pub sequence: String,
}

fn describe_rows(rows: &[ViolatingRow]) -> String {
    rows.iter()
        .map(|r| format!("u={} [{}]", r.quanta, r.sequence))
        .collect::<Vec<_>>()
        .join("; ")
}
