//! Problem parameters, battery bookkeeping and the channel/belief algebra.
//!
//! The battery is tracked in integer quanta of `tau = 1/k` energy units: a
//! blind or opportunistic transmission costs `k` quanta, sensing costs one.
//! No floating-point battery level is ever stored.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar parameters of the scheduling problem.
///
/// Construct with [`ModelParams::new`] or call [`ModelParams::validate`] after
/// building the struct literally; every other function assumes valid input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `P[good | previously good]`.
    pub lambda1: f64,
    /// `P[good | previously bad]`.
    pub lambda0: f64,
    /// Per-slot probability of harvesting one energy unit.
    pub q: f64,
    /// Sensing granularity; the sensing cost is `tau = 1/k`.
    pub k: u32,
    /// Bits delivered by a full-slot transmission on a good channel.
    pub rate_r: f64,
    pub beta: f64,
    /// Battery capacity in energy units.
    pub b_max: u32,
}

impl ModelParams {
    pub fn new(
        lambda1: f64,
        lambda0: f64,
        q: f64,
        k: u32,
        rate_r: f64,
        beta: f64,
        b_max: u32,
    ) -> Result<Self> {
        let params = ModelParams {
            lambda1,
            lambda0,
            q,
            k,
            rate_r,
            beta,
            b_max,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        fn prob(name: &'static str, v: f64) -> Result<()> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidParam {
                    name,
                    reason: format!("{v} is not in [0, 1]"),
                })
            }
        }
        prob("lambda1", self.lambda1)?;
        prob("lambda0", self.lambda0)?;
        prob("q", self.q)?;
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::InvalidParam {
                name: "beta",
                reason: format!("{} is not in [0, 1)", self.beta),
            });
        }
        if !(self.rate_r >= 0.0 && self.rate_r.is_finite()) {
            return Err(Error::InvalidParam {
                name: "rate_r",
                reason: format!("{} must be finite and non-negative", self.rate_r),
            });
        }
        if self.k < 2 {
            return Err(Error::InvalidParam {
                name: "k",
                reason: format!("{} must be at least 2 so that 0 < tau < 1", self.k),
            });
        }
        if self.b_max < 1 {
            return Err(Error::InvalidParam {
                name: "b_max",
                reason: "must be at least 1".into(),
            });
        }
        if self.k.checked_mul(self.b_max).is_none() {
            return Err(Error::InvalidParam {
                name: "b_max",
                reason: "k * b_max overflows".into(),
            });
        }
        Ok(())
    }

    /// Sensing cost as a fraction of an energy unit (and of a slot).
    pub fn tau(&self) -> f64 {
        1.0 / f64::from(self.k)
    }

    /// Full battery, in quanta.
    pub fn max_quanta(&self) -> u32 {
        self.k * self.b_max
    }

    /// Number of distinct battery levels `0, tau, ..., b_max`.
    pub fn battery_levels(&self) -> usize {
        self.max_quanta() as usize + 1
    }

    /// Belief one slot later when nothing was observed: `lambda0 (1 - p) + lambda1 p`.
    pub fn belief_defer(&self, p: f64) -> f64 {
        self.lambda0 * (1.0 - p) + self.lambda1 * p
    }

    /// Fixed point of [`belief_defer`](Self::belief_defer), the long-run
    /// probability of a good channel.
    pub fn stationary_belief(&self) -> Result<f64> {
        let denom = 1.0 - self.lambda1 + self.lambda0;
        if denom <= 0.0 {
            return Err(Error::DegenerateChain);
        }
        Ok(self.lambda0 / denom)
    }

    /// `P[good next slot | current state g]`.
    pub fn good_probability(&self, g: ChannelState) -> f64 {
        match g {
            ChannelState::Good => self.lambda1,
            ChannelState::Bad => self.lambda0,
        }
    }

    /// Advance the channel one slot. The next state is good iff `draw < lambda_g`.
    pub fn channel_step(&self, g: ChannelState, draw: f64) -> ChannelState {
        ChannelState::from_good(draw < self.good_probability(g))
    }

    /// Battery after harvesting one unit, clipped at capacity.
    pub fn harvest(&self, u: BatteryQuanta) -> BatteryQuanta {
        BatteryQuanta(u.0.saturating_add(self.k).min(self.max_quanta()))
    }

    pub fn can_transmit(&self, u: BatteryQuanta) -> bool {
        u.0 >= self.k
    }

    pub fn can_sense(&self, u: BatteryQuanta) -> bool {
        u.0 >= 1
    }
}

impl fmt::Display for ModelParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "lambda1={} lambda0={} q={} k={} rate_r={} beta={} b_max={}",
            self.lambda1, self.lambda0, self.q, self.k, self.rate_r, self.beta, self.b_max
        )
    }
}

/// Parameter sets used throughout the guide, tests and example configs.
pub mod presets {
    use super::ModelParams;

    /// Scarce energy (`q = 0.1`), cheap sensing (`tau = 0.2`), strongly
    /// correlated channel. All three threshold shapes appear.
    pub fn scarce_energy() -> ModelParams {
        ModelParams {
            lambda1: 0.9,
            lambda0: 0.6,
            q: 0.1,
            k: 5,
            rate_r: 3.0,
            beta: 0.98,
            b_max: 5,
        }
    }

    /// [`scarce_energy`] with sensing made expensive (`tau = 0.5`).
    pub fn costly_sensing() -> ModelParams {
        ModelParams {
            k: 2,
            ..scarce_energy()
        }
    }

    /// Throughput comparison setting, parametrized by the harvesting rate.
    pub fn throughput_study(q: f64) -> ModelParams {
        ModelParams {
            lambda1: 0.7,
            lambda0: 0.2,
            q,
            k: 10,
            rate_r: 2.0,
            beta: 0.999,
            b_max: 5,
        }
    }
}

/// Battery level in units of `tau = 1/k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BatteryQuanta(pub u32);

impl BatteryQuanta {
    pub fn get(self) -> u32 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Physical level in energy units. Display only.
    pub fn level(self, k: u32) -> f64 {
        f64::from(self.0) / f64::from(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelState {
    Bad,
    Good,
}

impl ChannelState {
    pub fn from_good(good: bool) -> Self {
        if good {
            ChannelState::Good
        } else {
            ChannelState::Bad
        }
    }

    pub fn is_good(self) -> bool {
        self == ChannelState::Good
    }

    pub fn as_bit(self) -> u8 {
        self.is_good() as u8
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn with_lambdas(lambda1: f64, lambda0: f64) -> ModelParams {
        ModelParams {
            lambda1,
            lambda0,
            ..presets::scarce_energy()
        }
    }

    #[test]
    fn defer_update_examples() {
        let p = with_lambdas(0.9, 0.6);
        assert_eq!(p.belief_defer(0.0), 0.6);
        assert_eq!(p.belief_defer(1.0), 0.9);
        assert!((p.belief_defer(0.5) - 0.75).abs() < 1e-15);
    }

    // Fixed point of J located by bisection on J(p) - p, which is monotone
    // decreasing whenever lambda1 - lambda0 < 1.
    fn bisect_fixed_point(params: &ModelParams) -> f64 {
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if params.belief_defer(mid) - mid > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn stationary_belief_examples() {
        let a = with_lambdas(0.9, 0.6);
        let oracle = bisect_fixed_point(&a);
        assert!((oracle - 0.857_142_857_142_857).abs() < 1e-12);
        assert!((a.stationary_belief().unwrap() - oracle).abs() < 1e-12);

        let iid = with_lambdas(0.35, 0.35);
        assert!((iid.stationary_belief().unwrap() - 0.35).abs() < 1e-15);

        let b = with_lambdas(0.7, 0.2);
        assert!((bisect_fixed_point(&b) - 0.4).abs() < 1e-12);
        assert!((b.stationary_belief().unwrap() - 0.4).abs() < 1e-12);
        assert!((b.belief_defer(0.4) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn degenerate_chain_is_rejected() {
        let p = with_lambdas(1.0, 0.0);
        assert!(matches!(p.stationary_belief(), Err(Error::DegenerateChain)));
    }

    #[test]
    fn channel_step_examples() {
        let absorbing_good = with_lambdas(1.0, 0.3);
        for draw in [0.0, 0.5, 0.999_999] {
            assert_eq!(
                absorbing_good.channel_step(ChannelState::Good, draw),
                ChannelState::Good
            );
        }
        let absorbing_bad = with_lambdas(0.8, 0.0);
        for draw in [0.0, 0.5, 0.999_999] {
            assert_eq!(
                absorbing_bad.channel_step(ChannelState::Bad, draw),
                ChannelState::Bad
            );
        }
        let p = with_lambdas(0.9, 0.6);
        assert_eq!(p.channel_step(ChannelState::Bad, 0.59), ChannelState::Good);
        assert_eq!(p.channel_step(ChannelState::Bad, 0.60), ChannelState::Bad);
    }

    #[test]
    fn channel_step_marginals() {
        let p = with_lambdas(0.9, 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = 200_000;
        let good = (0..m)
            .filter(|_| p.channel_step(ChannelState::Good, rng.gen()).is_good())
            .count();
        let emp = good as f64 / m as f64;
        assert!(
            (emp - 0.9).abs() < 4.0 / (m as f64).sqrt(),
            "empirical {emp}"
        );
    }

    #[test]
    fn validation_rejects_bad_values() {
        let base = presets::scarce_energy();
        assert!(ModelParams { k: 1, ..base }.validate().is_err());
        assert!(ModelParams { beta: 1.0, ..base }.validate().is_err());
        assert!(ModelParams { q: -0.1, ..base }.validate().is_err());
        assert!(ModelParams {
            lambda1: 1.5,
            ..base
        }
        .validate()
        .is_err());
        assert!(ModelParams { b_max: 0, ..base }.validate().is_err());
        assert!(ModelParams {
            rate_r: -1.0,
            ..base
        }
        .validate()
        .is_err());
        assert!(ModelParams {
            rate_r: f64::NAN,
            ..base
        }
        .validate()
        .is_err());
        assert!(base.validate().is_ok());
    }

    #[test]
    fn harvest_clips_at_capacity() {
        let p = presets::scarce_energy();
        assert_eq!(p.harvest(BatteryQuanta(0)), BatteryQuanta(5));
        assert_eq!(p.harvest(BatteryQuanta(23)), BatteryQuanta(25));
        assert_eq!(p.harvest(BatteryQuanta(25)), BatteryQuanta(25));
        assert_eq!(BatteryQuanta(14).level(5), 2.8);
    }

    proptest! {
        #[test]
        fn defer_update_stays_between_lambdas(l1 in 0.0..=1.0f64, l0 in 0.0..=1.0f64, p in 0.0..=1.0f64) {
            let params = with_lambdas(l1, l0);
            let j = params.belief_defer(p);
            prop_assert!(j >= l0.min(l1) - 1e-15 && j <= l0.max(l1) + 1e-15);
        }

        #[test]
        fn defer_iterates_contract_to_stationary(l1 in 0.0..=1.0f64, l0 in 0.0..=1.0f64, p in 0.0..=1.0f64) {
            let params = with_lambdas(l1, l0);
            prop_assume!(1.0 - l1 + l0 > 1e-9);
            let star = params.stationary_belief().unwrap();
            let rate = (l1 - l0).abs();
            let mut x = p;
            let mut err0 = (p - star).abs();
            for _ in 0..20 {
                x = params.belief_defer(x);
                let err = (x - star).abs();
                prop_assert!(err <= rate * err0 + 1e-12);
                err0 = err;
            }
        }
    }
}
