//! Monte Carlo simulation of the transmission protocol.
//!
//! Each slot consumes exactly two uniform draws, channel first and harvest
//! second, whatever action is taken. Policies run from the same seed
//! therefore see the same channel and harvest sample path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::bellman::{Action, ActionSet, BeliefGrid, BellmanOperator, SolverSettings, ValueTable};
use crate::error::{Error, Result};
use crate::model::{BatteryQuanta, ChannelState, ModelParams};
use crate::policy::{greedy_action, solve_single_threshold_baseline};

/// What the transmitter learns at the end of a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observation {
    None,
    Sensed(ChannelState),
    Ack,
    Nack,
}

/// The two uniform draws one slot consumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotDraws {
    pub channel: f64,
    pub harvest: f64,
}

impl SlotDraws {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let channel = rng.gen();
        let harvest = rng.gen();
        SlotDraws { channel, harvest }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimState {
    /// Channel state of the most recent slot. Hidden from the policy.
    pub channel: ChannelState,
    pub battery: BatteryQuanta,
    /// `P[channel good in the coming slot | observations]`.
    pub belief: f64,
    pub slot: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: SimState,
    pub reward: f64,
    pub observation: Observation,
    /// Quanta drawn from the battery by the action.
    pub spent: u32,
    /// Quanta actually stored from harvesting (after clipping at capacity).
    pub harvested: u32,
}

/// Advance one slot: the channel transitions, the action resolves against
/// the new channel state, then energy may arrive.
pub fn step(
    params: &ModelParams,
    state: &SimState,
    action: Action,
    draws: SlotDraws,
) -> Result<StepOutcome> {
    if !action.is_feasible(params, state.battery) {
        return Err(Error::InfeasibleAction {
            action,
            quanta: state.battery.get(),
            k: params.k,
        });
    }
    let channel = params.channel_step(state.channel, draws.channel);
    let u = state.battery.get();
    let k = params.k;
    let good = channel.is_good();
    let (spent, reward, observation, belief) = match action {
        Action::Defer => (0, 0.0, Observation::None, params.belief_defer(state.belief)),
        Action::Sense => {
            let belief = params.good_probability(channel);
            if u >= k && good {
                (
                    k,
                    (1.0 - params.tau()) * params.rate_r,
                    Observation::Sensed(channel),
                    belief,
                )
            } else {
                (1, 0.0, Observation::Sensed(channel), belief)
            }
        }
        Action::Transmit => {
            let belief = params.good_probability(channel);
            if good {
                (k, params.rate_r, Observation::Ack, belief)
            } else {
                (k, 0.0, Observation::Nack, belief)
            }
        }
    };
    let after = BatteryQuanta(u - spent);
    let battery = if draws.harvest < params.q {
        params.harvest(after)
    } else {
        after
    };
    Ok(StepOutcome {
        state: SimState {
            channel,
            battery,
            belief,
            slot: state.slot + 1,
        },
        reward,
        observation,
        spent,
        harvested: battery.get() - after.get(),
    })
}

/// Decides an action from the observable state.
pub trait Controller: Sync {
    fn act(&self, u: BatteryQuanta, p: f64) -> Action;
}

/// Transmit whenever a full energy unit is stored.
#[derive(Debug, Clone, Copy)]
pub struct GreedyController<'a> {
    pub params: &'a ModelParams,
}

impl Controller for GreedyController<'_> {
    fn act(&self, u: BatteryQuanta, _p: f64) -> Action {
        greedy_action(self.params, u)
    }
}

/// Argmax of action values at the exact current belief, continuing with a
/// solved value table. Serves both the optimal and the single-threshold policy.
#[derive(Debug, Clone)]
pub struct ArgmaxController<'a> {
    op: BellmanOperator<'a>,
    table: &'a ValueTable,
}

impl<'a> ArgmaxController<'a> {
    pub fn new(
        params: &'a ModelParams,
        grid: &'a BeliefGrid,
        table: &'a ValueTable,
        set: ActionSet,
    ) -> Self {
        ArgmaxController {
            op: BellmanOperator::new(params, grid, set),
            table,
        }
    }
}

impl Controller for ArgmaxController<'_> {
    fn act(&self, u: BatteryQuanta, p: f64) -> Action {
        self.op.best_action(self.table, u, p)
    }
}

/// The three policies compared in throughput studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    Optimal,
    SingleThreshold,
    Greedy,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [
        PolicyKind::Optimal,
        PolicyKind::SingleThreshold,
        PolicyKind::Greedy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Optimal => "optimal",
            PolicyKind::SingleThreshold => "single",
            PolicyKind::Greedy => "greedy",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Starting point of a run. `None` fields take the defaults: full battery
/// and the stationary belief.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InitialConditions {
    pub battery: Option<BatteryQuanta>,
    pub belief: Option<f64>,
}

impl InitialConditions {
    /// Resolve defaults. The hidden pre-run channel is good with probability
    /// `(p - lambda0) / (lambda1 - lambda0)`, so that the first slot is good
    /// with probability `p`; `p` must lie between the two lambdas.
    fn resolve(&self, params: &ModelParams) -> Result<(BatteryQuanta, f64, f64)> {
        let battery = self.battery.unwrap_or(BatteryQuanta(params.max_quanta()));
        if battery.get() > params.max_quanta() {
            return Err(Error::InvalidParam {
                name: "initial_battery",
                reason: "exceeds capacity".into(),
            });
        }
        let belief = match self.belief {
            Some(p) => p,
            None => params.stationary_belief()?,
        };
        let (lo, hi) = (
            params.lambda0.min(params.lambda1),
            params.lambda0.max(params.lambda1),
        );
        if !(lo - 1e-12..=hi + 1e-12).contains(&belief) {
            return Err(Error::InvalidParam {
                name: "initial_belief",
                reason: format!(
                    "{belief} is not reachable from any channel law (must lie in [{lo}, {hi}])"
                ),
            });
        }
        let spread = params.lambda1 - params.lambda0;
        let prior = if spread.abs() < 1e-15 {
            belief
        } else {
            ((belief - params.lambda0) / spread).clamp(0.0, 1.0)
        };
        Ok((battery, belief, prior))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub horizon: u64,
    /// Slots excluded from throughput statistics (still discounted).
    pub warmup: u64,
    pub seed: u64,
    pub initial: InitialConditions,
    pub record_trace: bool,
}

impl RunSettings {
    pub fn new(horizon: u64, warmup: u64, seed: u64) -> Self {
        RunSettings {
            horizon,
            warmup,
            seed,
            initial: InitialConditions::default(),
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub slot: u64,
    pub battery: BatteryQuanta,
    pub belief: f64,
    pub action: Action,
    pub channel: ChannelState,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub seed: u64,
    /// Bits delivered after warmup.
    pub total_bits: f64,
    /// Slots after warmup.
    pub slots: u64,
    /// Bits per slot after warmup.
    pub throughput: f64,
    /// `sum beta^t r_t` over the whole run, from slot 0.
    pub discounted_reward: f64,
    /// Per-action counts after warmup, indexed by [`Action::index`].
    pub action_counts: [u64; 3],
    /// Blind transmissions that got an ACK, after warmup.
    pub successful_transmits: u64,
    /// Sensing actions with a full energy unit that found a good channel, after warmup.
    pub good_channel_senses: u64,
    pub initial_quanta: u64,
    pub final_quanta: u64,
    pub spent_quanta: u64,
    pub harvested_quanta: u64,
    pub trace: Option<Vec<TraceRow>>,
}

/// Simulate one policy for `settings.horizon` slots.
pub fn run_policy(
    params: &ModelParams,
    controller: &dyn Controller,
    settings: &RunSettings,
) -> Result<SimReport> {
    if settings.warmup >= settings.horizon {
        return Err(Error::InvalidParam {
            name: "warmup",
            reason: "must be smaller than the horizon".into(),
        });
    }
    let (battery, belief, prior) = settings.initial.resolve(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let channel = ChannelState::from_good(rng.gen::<f64>() < prior);
    let mut state = SimState {
        channel,
        battery,
        belief,
        slot: 0,
    };

    let mut report = SimReport {
        seed: settings.seed,
        total_bits: 0.0,
        slots: settings.horizon - settings.warmup,
        throughput: 0.0,
        discounted_reward: 0.0,
        action_counts: [0; 3],
        successful_transmits: 0,
        good_channel_senses: 0,
        initial_quanta: u64::from(battery.get()),
        final_quanta: 0,
        spent_quanta: 0,
        harvested_quanta: 0,
        trace: settings.record_trace.then(Vec::new),
    };
    let mut discount = 1.0;
    for t in 0..settings.horizon {
        let action = controller.act(state.battery, state.belief);
        let out = step(params, &state, action, SlotDraws::sample(&mut rng))?;
        report.discounted_reward += discount * out.reward;
        discount *= params.beta;
        report.spent_quanta += u64::from(out.spent);
        report.harvested_quanta += u64::from(out.harvested);
        if t >= settings.warmup {
            report.total_bits += out.reward;
            report.action_counts[action.index()] += 1;
            match (action, out.observation) {
                (Action::Transmit, Observation::Ack) => report.successful_transmits += 1,
                (Action::Sense, Observation::Sensed(ChannelState::Good))
                    if params.can_transmit(state.battery) =>
                {
                    report.good_channel_senses += 1
                }
                _ => {}
            }
        }
        if let Some(trace) = report.trace.as_mut() {
            trace.push(TraceRow {
                slot: t,
                battery: state.battery,
                belief: state.belief,
                action,
                channel: out.state.channel,
                reward: out.reward,
            });
        }
        state = out.state;
    }
    report.final_quanta = u64::from(state.battery.get());
    report.throughput = report.total_bits / report.slots as f64;
    Ok(report)
}

/// Slots after which `beta^t < 1e-10`; rewards beyond are negligible.
pub fn episode_length(beta: f64) -> u64 {
    if beta == 0.0 {
        1
    } else {
        ((1e-10f64).ln() / beta.ln()).ceil().max(1.0) as u64
    }
}

/// Sample mean with a confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    /// Standard error of the mean.
    pub std_error: f64,
    /// Half-width of the two-sided 95% Student-t interval.
    pub ci_half_width: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Estimate {
                mean,
                std_error: f64::NAN,
                ci_half_width: f64::NAN,
                samples: n,
            };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std_error = (var / n as f64).sqrt();
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .expect("degrees of freedom are positive")
            .inverse_cdf(0.975);
        Estimate {
            mean,
            std_error,
            ci_half_width: t * std_error,
            samples: n,
        }
    }
}

/// Mean discounted reward over independent episodes truncated at
/// [`episode_length`]. Episode `i` uses seed `derive_seed(seed, &[i])`.
pub fn discounted_episodes(
    params: &ModelParams,
    controller: &dyn Controller,
    episodes: usize,
    seed: u64,
    initial: InitialConditions,
) -> Result<Estimate> {
    let horizon = episode_length(params.beta);
    let rewards = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let settings = RunSettings {
                initial,
                ..RunSettings::new(horizon, 0, derive_seed(seed, &[i as u64]))
            };
            run_policy(params, controller, &settings).map(|r| r.discounted_reward)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&rewards))
}

/// SplitMix64-style seed derivation: `base` mixed with each tag in turn.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    tags.iter().fold(mix(base), |acc, &t| mix(acc ^ mix(t)))
}

/// Settings for a throughput sweep over harvesting rates.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub grid_intervals: usize,
    /// `None` uses [`SolverSettings::for_params`] at every q.
    pub solver: Option<SolverSettings>,
    pub horizon: u64,
    pub warmup: u64,
    pub replications: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub q: f64,
    pub policy: PolicyKind,
    pub throughput: Estimate,
    pub horizon: u64,
}

/// Solve and simulate all three policies at each harvesting rate.
///
/// Replication `r` at the `i`-th q uses seed `derive_seed(seed, &[i, r])` for
/// every policy, so the policies are compared on common random numbers.
pub fn sweep_throughput(
    template: &ModelParams,
    q_values: &[f64],
    settings: &SweepSettings,
) -> Result<Vec<SweepRow>> {
    if settings.replications < 2 {
        return Err(Error::InvalidParam {
            name: "replications",
            reason: "need at least 2 for a confidence interval".into(),
        });
    }
    let mut rows = Vec::with_capacity(q_values.len() * 3);
    for (i, &q) in q_values.iter().enumerate() {
        let params = ModelParams { q, ..*template };
        params.validate()?;
        let grid = BeliefGrid::new(&params, settings.grid_intervals)?;
        let solver = settings
            .solver
            .unwrap_or_else(|| SolverSettings::for_params(&params));
        let optimal =
            BellmanOperator::new(&params, &grid, ActionSet::Full).value_iteration(&solver)?;
        let single = solve_single_threshold_baseline(&params, &grid, &solver)?;

        let optimal_ctl = ArgmaxController::new(&params, &grid, &optimal, ActionSet::Full);
        let single_ctl =
            ArgmaxController::new(&params, &grid, &single.table, ActionSet::DeferTransmit);
        let greedy_ctl = GreedyController { params: &params };
        for kind in PolicyKind::ALL {
            let controller: &dyn Controller = match kind {
                PolicyKind::Optimal => &optimal_ctl,
                PolicyKind::SingleThreshold => &single_ctl,
                PolicyKind::Greedy => &greedy_ctl,
            };
            let throughputs = (0..settings.replications)
                .into_par_iter()
                .map(|r| {
                    let seed = derive_seed(settings.seed, &[i as u64, r as u64]);
                    let run = RunSettings::new(settings.horizon, settings.warmup, seed);
                    run_policy(&params, controller, &run).map(|rep| rep.throughput)
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(SweepRow {
                q,
                policy: kind,
                throughput: Estimate::from_samples(&throughputs),
                horizon: settings.horizon,
            });
        }
    }
    Ok(rows)
}
