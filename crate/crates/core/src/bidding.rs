//! Iterative bidding between prosumers and the clearing platform.
//!
//! Each iteration every (non-skipping) prosumer answers the broadcast price
//! with a production/demand plan and a bid `b = d - p + a lambda`; the platform
//! then clears at `sum b / (a I)`. The asynchronous schedule lets prosumers
//! miss updates at random, keeping their previous bid, subject to a hard cap
//! on how stale any bid can become.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::equilibrium::{
    self, EquilibriumSolution, ExcessMode, MarketInstance, SolutionMode, RESPONSE_TOL,
};
use crate::error::{Result, SharingError};
use crate::prosumer::{marginal_response, solve_surrogate_best_response, Prosumer};

/// |lambda| beyond this multiple of the saturation bracket width counts as blow-up.
const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Behavior {
    /// Prosumers anticipate their own effect on the clearing price.
    Strategic,
    /// Prosumers treat the broadcast price as fixed.
    PriceTaker,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Synchronous,
    Asynchronous {
        miss_probability: f64,
        /// An update is never older than `max_delay` iterations; 1 is synchronous.
        max_delay: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiddingConfig {
    pub epsilon: f64,
    pub max_iterations: usize,
    pub behavior: Behavior,
    pub schedule: Schedule,
    pub initial_price: f64,
}

impl Default for BiddingConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            max_iterations: 500,
            behavior: Behavior::Strategic,
            schedule: Schedule::Synchronous,
            initial_price: 0.0,
        }
    }
}

impl BiddingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(SharingError::param(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if self.max_iterations == 0 {
            return Err(SharingError::param("max_iterations must be >= 1"));
        }
        if !self.initial_price.is_finite() {
            return Err(SharingError::param("initial price must be finite"));
        }
        if let Schedule::Asynchronous {
            miss_probability,
            max_delay,
            ..
        } = self.schedule
        {
            if !(0.0..1.0).contains(&miss_probability) {
                return Err(SharingError::param(format!(
                    "miss probability must lie in [0, 1), got {miss_probability}"
                )));
            }
            if max_delay == 0 {
                return Err(SharingError::param("max_delay must be >= 1"));
            }
        }
        Ok(())
    }

    fn window(&self) -> usize {
        match self.schedule {
            Schedule::Synchronous => 1,
            Schedule::Asynchronous { max_delay, .. } => max_delay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    Diverged,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxIterations => "max_iterations",
            Termination::Diverged => "diverged",
        }
    }
}

/// One prosumer-update phase followed by one platform update.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// 1-based iteration counter `k`.
    pub iteration: usize,
    /// Price `lambda^k` broadcast at the start of the iteration.
    pub price: f64,
    /// Plans and bids held by the platform after the prosumer phase.
    pub p: Vec<f64>,
    pub d: Vec<f64>,
    pub bids: Vec<f64>,
    pub updated: Vec<bool>,
    /// Clearing price `lambda^{k+1}` of `bids`.
    pub next_price: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiddingTrace {
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
    pub market_sensitivity: f64,
}

impl BiddingTrace {
    /// `lambda^1, lambda^2, ..., lambda^{K+1}`.
    pub fn prices(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.records.len() + 1);
        if let Some(first) = self.records.first() {
            out.push(first.price);
        }
        out.extend(self.records.iter().map(|r| r.next_price));
        out
    }

    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }

    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn final_price(&self) -> Option<f64> {
        self.records.last().map(|r| r.next_price)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BidUpdate {
    pub p: f64,
    pub d: f64,
    pub bid: f64,
}

/// A single smart-meter update against the broadcast price.
pub fn prosumer_bid_update(
    prosumer: &Prosumer,
    price: f64,
    a: f64,
    participants: usize,
    behavior: Behavior,
) -> Result<BidUpdate> {
    if !(a > 0.0) || participants < 2 {
        return Err(SharingError::param(format!(
            "need a > 0 and at least two prosumers (a = {a}, I = {participants})"
        )));
    }
    let r = match behavior {
        Behavior::Strategic => {
            solve_surrogate_best_response(prosumer, price, a, participants, RESPONSE_TOL)?
        }
        Behavior::PriceTaker => marginal_response(prosumer, price),
    };
    Ok(BidUpdate {
        p: r.p,
        d: r.d,
        bid: r.d - r.p + a * price,
    })
}

/// Clearing price `sum b / (a I)`.
pub fn platform_clear(bids: &[f64], a: f64) -> Result<f64> {
    if bids.is_empty() {
        return Err(SharingError::param("no bids to clear"));
    }
    if !(a > 0.0) {
        return Err(SharingError::param(format!(
            "market sensitivity must be > 0, got {a}"
        )));
    }
    Ok(bids.iter().sum::<f64>() / (a * bids.len() as f64))
}

/// Runs the bidding protocol until the price settles or the iteration cap.
///
/// Convergence requires `|lambda^{k+1} - lambda^k| <= epsilon` on each of the
/// last `D` iterations (`D = 1` when synchronous), so every prosumer has bid
/// against a settled price. Non-convergence is reported in the trace.
pub fn run_bidding(
    instance: &MarketInstance,
    config: &BiddingConfig,
) -> Result<(EquilibriumSolution, BiddingTrace)> {
    config.validate()?;
    let n = instance.len();
    let a = instance.market_sensitivity();
    if n < 2 {
        return Err(SharingError::param("bidding needs at least two prosumers"));
    }
    let (lo, hi) = instance.price_bracket(ExcessMode::Penalized);
    let blow_up = DIVERGENCE_FACTOR * (hi - lo);
    let window = config.window();
    let mut rng = match config.schedule {
        Schedule::Asynchronous { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Schedule::Synchronous => None,
    };
    let miss_probability = match config.schedule {
        Schedule::Asynchronous {
            miss_probability, ..
        } => miss_probability,
        Schedule::Synchronous => 0.0,
    };

    let mut price = config.initial_price;
    let mut p = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut bids = vec![0.0; n];
    let mut misses = vec![0usize; n];
    let mut gaps: VecDeque<f64> = VecDeque::with_capacity(window);
    let mut records = Vec::new();
    let mut termination = Termination::MaxIterations;

    for k in 1..=config.max_iterations {
        let mut updated = vec![true; n];
        for (i, pr) in instance.prosumers().iter().enumerate() {
            if k > 1 {
                if let Some(rng) = rng.as_mut() {
                    let wants_skip = rng.gen::<f64>() < miss_probability;
                    if wants_skip && misses[i] + 1 < window {
                        misses[i] += 1;
                        updated[i] = false;
                        continue;
                    }
                }
            }
            misses[i] = 0;
            let u = prosumer_bid_update(pr, price, a, n, config.behavior)?;
            p[i] = u.p;
            d[i] = u.d;
            bids[i] = u.bid;
        }
        let next_price = platform_clear(&bids, a)?;
        records.push(IterationRecord {
            iteration: k,
            price,
            p: p.clone(),
            d: d.clone(),
            bids: bids.clone(),
            updated,
            next_price,
        });
        if gaps.len() == window {
            gaps.pop_front();
        }
        gaps.push_back((next_price - price).abs());
        price = next_price;
        if !price.is_finite() || price.abs() > blow_up {
            termination = Termination::Diverged;
            break;
        }
        if gaps.len() == window && gaps.iter().all(|&g| g <= config.epsilon) {
            termination = Termination::Converged;
            break;
        }
    }

    // Final plans are read off the settled price; bids stay as submitted.
    let mut final_p = Vec::with_capacity(n);
    let mut final_d = Vec::with_capacity(n);
    for pr in instance.prosumers() {
        let u = prosumer_bid_update(pr, price, a, n, config.behavior)?;
        final_p.push(u.p);
        final_d.push(u.d);
    }
    let mode = match config.behavior {
        Behavior::Strategic => SolutionMode::Gne,
        Behavior::PriceTaker => SolutionMode::Social,
    };
    let mut solution = EquilibriumSolution {
        mode,
        p: final_p,
        d: final_d,
        bids: Some(bids),
        price: Some(price),
        dual: Some(price),
        dual_interval: None,
        kkt_residual: 0.0,
        iterations: records.len(),
    };
    solution.kkt_residual = equilibrium::kkt_residual(instance, &solution)?;
    let trace = BiddingTrace {
        records,
        termination,
        market_sensitivity: a,
    };
    Ok((solution, trace))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceDiagnostics {
    pub iterations: usize,
    pub final_gap: f64,
    /// `|lambda^k - lambda*|` never increases.
    pub distance_nonincreasing: bool,
    /// `|l^{k+1} - l*|^2 <= |l^k - l*|^2 - |l^k - l^{k+1}|^2` at every step.
    pub fejer_holds: bool,
    /// First iteration at which the Fejer inequality fails.
    pub first_fejer_violation: Option<usize>,
}

/// Checks the price sequence of a trace against a reference fixed point.
pub fn convergence_diagnostics(
    trace: &BiddingTrace,
    reference_price: f64,
) -> ConvergenceDiagnostics {
    let prices = trace.prices();
    let slack = |scale: f64| 1e-12 * scale.max(1e-6) + 1e-18;
    let mut distance_nonincreasing = true;
    let mut first_fejer_violation = None;
    for (k, w) in prices.windows(2).enumerate() {
        let before = w[0] - reference_price;
        let after = w[1] - reference_price;
        let step = w[1] - w[0];
        if after.abs() > before.abs() + slack(before.abs()) {
            distance_nonincreasing = false;
        }
        if first_fejer_violation.is_none()
            && after * after > before * before - step * step + slack(before * before)
        {
            first_fejer_violation = Some(k + 1);
        }
    }
    let final_gap = trace
        .records
        .last()
        .map(|r| (r.next_price - r.price).abs())
        .unwrap_or(0.0);
    ConvergenceDiagnostics {
        iterations: trace.records.len(),
        final_gap,
        distance_nonincreasing,
        fejer_holds: first_fejer_violation.is_none(),
        first_fejer_violation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{solve_gne_direct, solve_social_optimum};
    use crate::oracle::{grid_best_response, GridSpec};
    use crate::prosumer::{self, DEFAULT_TOL};
    use crate::scenarios::builtin_three_prosumer;
    use approx::assert_abs_diff_eq;

    #[test]
    fn platform_clear_examples() {
        assert_abs_diff_eq!(
            platform_clear(&[1.0, 2.0, 3.0], 100.0).unwrap(),
            0.02,
            epsilon = 1e-15
        );
        let lambda = platform_clear(&[7.0; 4], 50.0).unwrap();
        assert_abs_diff_eq!(lambda, 7.0 / 50.0, epsilon = 1e-15);
        for b in [7.0; 4] {
            assert_abs_diff_eq!(-50.0 * lambda + b, 0.0, epsilon = 1e-12);
        }
        assert!(platform_clear(&[], 1.0).is_err());
    }

    #[test]
    fn clearing_recovered_bids_returns_dual() {
        let inst = builtin_three_prosumer();
        let g = solve_gne_direct(&inst, DEFAULT_TOL).unwrap();
        let lambda = platform_clear(g.bids.as_ref().unwrap(), 100.0).unwrap();
        assert_abs_diff_eq!(lambda, g.dual.unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn balanced_prosumer_bids_market_neutral() {
        let pr = builtin_three_prosumer().prosumers()[1].clone();
        let (x, _) = prosumer::solve_self_sufficiency(&pr, DEFAULT_TOL).unwrap();
        let lambda = pr.marginal_cost(x);
        let u = prosumer_bid_update(&pr, lambda, 100.0, 3, Behavior::Strategic).unwrap();
        assert_abs_diff_eq!(u.bid, 100.0 * lambda, epsilon = 1e-8);
        assert_abs_diff_eq!(-100.0 * lambda + u.bid, 0.0, epsilon = 1e-8);
    }

    #[test]
    fn strategic_update_matches_grid() {
        let pr = builtin_three_prosumer().prosumers()[1].clone();
        let u = prosumer_bid_update(&pr, 0.0, 100.0, 3, Behavior::Strategic).unwrap();
        let g = grid_best_response(&pr, 0.0, 100.0, 3, &GridSpec::default()).unwrap();
        assert!((u.p - g.p).abs() <= 0.01 && (u.d - g.d).abs() <= 0.01);
    }

    #[test]
    fn behaviors_agree_for_huge_population() {
        let inst = builtin_three_prosumer();
        for pr in inst.prosumers() {
            let s = prosumer_bid_update(pr, 0.25, 100.0, 1_000_000, Behavior::Strategic).unwrap();
            let t = prosumer_bid_update(pr, 0.25, 100.0, 1_000_000, Behavior::PriceTaker).unwrap();
            assert!((s.p - t.p).abs() <= 1e-4 && (s.d - t.d).abs() <= 1e-4);
        }
    }

    #[test]
    fn synchronous_run_reaches_direct_equilibrium() {
        let inst = builtin_three_prosumer();
        let (sol, trace) = run_bidding(&inst, &BiddingConfig::default()).unwrap();
        assert!(trace.converged());
        assert!(
            trace.iterations() <= 20,
            "{} iterations",
            trace.iterations()
        );
        let g = solve_gne_direct(&inst, DEFAULT_TOL).unwrap();
        assert!((sol.price.unwrap() - g.dual.unwrap()).abs() <= 1e-3);
        for r in &trace.records {
            let lambda = r.bids.iter().sum::<f64>() / (100.0 * 3.0);
            assert_abs_diff_eq!(lambda, r.next_price, epsilon = 1e-12);
        }
        let diag = convergence_diagnostics(&trace, g.dual.unwrap());
        assert!(diag.fejer_holds, "{diag:?}");
        assert!(diag.distance_nonincreasing);
        assert!(diag.final_gap <= 1e-4);
    }

    #[test]
    fn price_taker_run_reaches_social_price() {
        let inst = builtin_three_prosumer();
        let config = BiddingConfig {
            behavior: Behavior::PriceTaker,
            epsilon: 1e-10,
            ..Default::default()
        };
        let (sol, trace) = run_bidding(&inst, &config).unwrap();
        assert!(trace.converged());
        assert_eq!(sol.mode, SolutionMode::Social);
        let s = solve_social_optimum(&inst, DEFAULT_TOL).unwrap();
        assert!((sol.price.unwrap() - s.dual.unwrap()).abs() <= 1e-6);
    }

    #[test]
    fn unit_delay_matches_synchronous() {
        let inst = builtin_three_prosumer();
        let (_, sync) = run_bidding(&inst, &BiddingConfig::default()).unwrap();
        let config = BiddingConfig {
            schedule: Schedule::Asynchronous {
                miss_probability: 0.8,
                max_delay: 1,
                seed: 11,
            },
            ..Default::default()
        };
        let (_, asynchronous) = run_bidding(&inst, &config).unwrap();
        assert_eq!(sync, asynchronous);
    }

    #[test]
    fn asynchronous_skips_respect_delay_cap() {
        let inst = builtin_three_prosumer();
        let config = BiddingConfig {
            schedule: Schedule::Asynchronous {
                miss_probability: 0.8,
                max_delay: 4,
                seed: 5,
            },
            ..Default::default()
        };
        let (_, trace) = run_bidding(&inst, &config).unwrap();
        assert!(trace.converged());
        let mut streak = [0usize; 3];
        let mut skipped_any = false;
        for r in &trace.records {
            for i in 0..3 {
                if r.updated[i] {
                    streak[i] = 0;
                } else {
                    skipped_any = true;
                    streak[i] += 1;
                    assert!(streak[i] < 4);
                }
            }
        }
        assert!(skipped_any);
        assert!(trace.records[0].updated.iter().all(|&u| u));
    }

    #[test]
    fn tighter_epsilon_extends_the_same_trace() {
        let inst = builtin_three_prosumer();
        let (_, loose) = run_bidding(&inst, &BiddingConfig::default()).unwrap();
        let (_, tight) = run_bidding(
            &inst,
            &BiddingConfig {
                epsilon: 1e-8,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(tight.records.len() >= loose.records.len());
        assert_eq!(&tight.records[..loose.records.len()], &loose.records[..]);
    }

    #[test]
    fn single_record_trace_is_trivially_fejer() {
        let inst = builtin_three_prosumer();
        let (_, trace) = run_bidding(
            &inst,
            &BiddingConfig {
                max_iterations: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(trace.termination, Termination::MaxIterations);
        let mut one = trace.clone();
        one.records.truncate(1);
        let d = convergence_diagnostics(&one, one.records[0].next_price);
        assert!(d.fejer_holds);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let inst = builtin_three_prosumer();
        for bad in [
            BiddingConfig {
                epsilon: 0.0,
                ..Default::default()
            },
            BiddingConfig {
                max_iterations: 0,
                ..Default::default()
            },
            BiddingConfig {
                schedule: Schedule::Asynchronous {
                    miss_probability: 1.0,
                    max_delay: 3,
                    seed: 0,
                },
                ..Default::default()
            },
            BiddingConfig {
                schedule: Schedule::Asynchronous {
                    miss_probability: 0.5,
                    max_delay: 0,
                    seed: 0,
                },
                ..Default::default()
            },
        ] {
            assert!(run_bidding(&inst, &bad).is_err());
        }
    }
}
