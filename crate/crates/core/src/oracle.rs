//! Brute-force validators for the solvers.
//!
//! Nothing here shares code paths with the bisection solvers: the grid search
//! never forms an effective price, and the perturbation check only evaluates
//! objectives at sampled feasible points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::equilibrium::{penalized_objective, EquilibriumSolution, MarketInstance, SolutionMode};
use crate::error::{Result, SharingError};
use crate::prosumer::{surrogate_objective, Prosumer};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub step: f64,
    pub max_points_per_axis: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            step: 0.01,
            max_points_per_axis: 4001,
        }
    }
}

impl GridSpec {
    fn axis(&self, lo: f64, hi: f64) -> Result<Vec<f64>> {
        if !(self.step > 0.0) {
            return Err(SharingError::param(format!(
                "grid step must be > 0, got {}",
                self.step
            )));
        }
        let count = ((hi - lo) / self.step - 1e-9).ceil().max(0.0) as usize + 1;
        if count > self.max_points_per_axis {
            return Err(SharingError::GridTooLarge {
                points: count,
                limit: self.max_points_per_axis,
            });
        }
        Ok((0..count)
            .map(|k| (lo + k as f64 * self.step).min(hi))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridOptimum {
    pub p: f64,
    pub d: f64,
    pub objective: f64,
}

/// Minimum of the price-anticipating objective over the discretized box.
///
/// Every production grid value is visited. For fixed production the objective
/// is convex in demand, so its sampled sequence is unimodal and the minimum
/// over the demand axis is located by bisection on forward differences; the
/// result equals the full-grid minimum.
pub fn grid_best_response(
    prosumer: &Prosumer,
    price: f64,
    a: f64,
    participants: usize,
    grid: &GridSpec,
) -> Result<GridOptimum> {
    check(a, participants)?;
    let ps = grid.axis(prosumer.p_min(), prosumer.p_max())?;
    let ds = grid.axis(prosumer.d_min(), prosumer.d_max())?;
    let objective = |p: f64, d: f64| surrogate_objective(prosumer, price, a, participants, p, d);
    let mut best = GridOptimum {
        p: f64::NAN,
        d: f64::NAN,
        objective: f64::INFINITY,
    };
    for &p in &ps {
        // Smallest index m with h(m+1) >= h(m).
        let (mut lo, mut hi) = (0usize, ds.len() - 1);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if objective(p, ds[mid + 1]) >= objective(p, ds[mid]) {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        let value = objective(p, ds[lo]);
        if value < best.objective {
            best = GridOptimum {
                p,
                d: ds[lo],
                objective: value,
            };
        }
    }
    Ok(best)
}

/// Plain double loop over the grid; quadratic in the number of points.
pub fn grid_best_response_exhaustive(
    prosumer: &Prosumer,
    price: f64,
    a: f64,
    participants: usize,
    grid: &GridSpec,
) -> Result<GridOptimum> {
    check(a, participants)?;
    let ps = grid.axis(prosumer.p_min(), prosumer.p_max())?;
    let ds = grid.axis(prosumer.d_min(), prosumer.d_max())?;
    let mut best = GridOptimum {
        p: f64::NAN,
        d: f64::NAN,
        objective: f64::INFINITY,
    };
    for &p in &ps {
        for &d in &ds {
            let value = surrogate_objective(prosumer, price, a, participants, p, d);
            if value < best.objective {
                best = GridOptimum {
                    p,
                    d,
                    objective: value,
                };
            }
        }
    }
    Ok(best)
}

/// Sum of the largest partial derivatives of the price-anticipating objective
/// over the box; the grid minimum is within `lipschitz * step / 2` of the
/// continuous minimum.
pub fn surrogate_lipschitz(prosumer: &Prosumer, price: f64, a: f64, participants: usize) -> f64 {
    let scale = a * (participants - 1) as f64;
    let corners = [
        (prosumer.p_min(), prosumer.d_min()),
        (prosumer.p_min(), prosumer.d_max()),
        (prosumer.p_max(), prosumer.d_min()),
        (prosumer.p_max(), prosumer.d_max()),
    ];
    let (mut gp, mut gd) = (0.0f64, 0.0f64);
    for (p, d) in corners {
        gp = gp.max((prosumer.marginal_cost(p) - (d - p) / scale - price).abs());
        gd = gd.max((-prosumer.marginal_utility(d) + (d - p) / scale + price).abs());
    }
    gp + gd
}

fn check(a: f64, participants: usize) -> Result<()> {
    if !(a > 0.0) || participants < 2 {
        return Err(SharingError::param(format!(
            "need a > 0 and at least two prosumers (a = {a}, I = {participants})"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationReport {
    pub passed: bool,
    /// Largest objective decrease found (<= 0 when nothing improved).
    pub worst_improvement: f64,
    pub evaluated: usize,
    /// Samples that could not be rebalanced inside the boxes.
    pub discarded: usize,
}

/// Feasible-direction sampling around a social or equilibrium solution.
///
/// Each sample perturbs all coordinates uniformly within `radius`, projects
/// the step onto the balance hyperplane, clips to the boxes and then restores
/// the original balance by spreading the residual over the remaining slack.
/// The check fails if any sample lowers the mode's objective by more than a
/// relative `1e-9`.
pub fn perturbation_optimality_check(
    instance: &MarketInstance,
    solution: &EquilibriumSolution,
    n_samples: usize,
    radius: f64,
    seed: u64,
) -> Result<PerturbationReport> {
    let objective = |p: &[f64], d: &[f64]| -> f64 {
        match solution.mode {
            SolutionMode::Gne => penalized_objective(instance, p, d),
            _ => instance
                .prosumers()
                .iter()
                .zip(p.iter().zip(d))
                .map(|(pr, (&p, &d))| pr.net_cost(p, d))
                .sum(),
        }
    };
    if solution.mode == SolutionMode::SelfSufficiency {
        return Err(SharingError::param(
            "perturbation check needs a social or equilibrium solution",
        ));
    }
    if !(radius >= 0.0) {
        return Err(SharingError::param(format!(
            "radius must be >= 0, got {radius}"
        )));
    }
    let n = instance.len();
    if solution.p.len() != n || solution.d.len() != n {
        return Err(SharingError::Inconsistent(
            "solution length differs from instance".into(),
        ));
    }
    for (i, pr) in instance.prosumers().iter().enumerate() {
        let slack = 1e-9;
        if solution.p[i] < pr.p_min() - slack
            || solution.p[i] > pr.p_max() + slack
            || solution.d[i] < pr.d_min() - slack
            || solution.d[i] > pr.d_max() + slack
        {
            return Err(SharingError::Inconsistent(format!(
                "solution violates the box of prosumer {i}"
            )));
        }
    }
    let target = solution.imbalance();
    if target.abs() > 1e-6 {
        return Err(SharingError::Inconsistent(format!(
            "solution imbalance {target} too large"
        )));
    }

    let base = objective(&solution.p, &solution.d);
    let tol = 1e-9 * base.abs().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    let mut evaluated = 0;
    let mut discarded = 0;
    let mut p = vec![0.0; n];
    let mut d = vec![0.0; n];
    for _ in 0..n_samples {
        let mut shift = 0.0;
        for i in 0..n {
            let (dp, dd) = if radius > 0.0 {
                (
                    rng.gen_range(-radius..=radius),
                    rng.gen_range(-radius..=radius),
                )
            } else {
                (0.0, 0.0)
            };
            p[i] = dp;
            d[i] = dd;
            shift += dp - dd;
        }
        let correction = shift / (2 * n) as f64;
        for (i, pr) in instance.prosumers().iter().enumerate() {
            p[i] = (solution.p[i] + p[i] - correction).clamp(pr.p_min(), pr.p_max());
            d[i] = (solution.d[i] + d[i] + correction).clamp(pr.d_min(), pr.d_max());
        }
        if !rebalance(instance, &mut p, &mut d, target) {
            discarded += 1;
            continue;
        }
        evaluated += 1;
        worst = worst.max(base - objective(&p, &d));
    }
    let worst_improvement = if evaluated == 0 { 0.0 } else { worst };
    Ok(PerturbationReport {
        passed: worst_improvement <= tol,
        worst_improvement,
        evaluated,
        discarded,
    })
}

/// Moves `sum p - sum d` back to `target` using slack proportional shifts.
fn rebalance(instance: &MarketInstance, p: &mut [f64], d: &mut [f64], target: f64) -> bool {
    let scale: f64 = p
        .iter()
        .chain(d.iter())
        .map(|x| x.abs())
        .sum::<f64>()
        .max(1.0);
    for _ in 0..8 {
        let residual = p.iter().sum::<f64>() - d.iter().sum::<f64>() - target;
        if residual.abs() <= 1e-13 * scale {
            return true;
        }
        let prosumers = instance.prosumers();
        // residual > 0: lower production toward p_min, raise demand toward d_max.
        let room: f64 = prosumers
            .iter()
            .enumerate()
            .map(|(i, pr)| {
                if residual > 0.0 {
                    (p[i] - pr.p_min()) + (pr.d_max() - d[i])
                } else {
                    (pr.p_max() - p[i]) + (d[i] - pr.d_min())
                }
            })
            .sum();
        if room < residual.abs() {
            return false;
        }
        let share = residual.abs() / room;
        for (i, pr) in prosumers.iter().enumerate() {
            if residual > 0.0 {
                p[i] = (p[i] - share * (p[i] - pr.p_min())).max(pr.p_min());
                d[i] = (d[i] + share * (pr.d_max() - d[i])).min(pr.d_max());
            } else {
                p[i] = (p[i] + share * (pr.p_max() - p[i])).min(pr.p_max());
                d[i] = (d[i] - share * (d[i] - pr.d_min())).max(pr.d_min());
            }
        }
    }
    let residual = p.iter().sum::<f64>() - d.iter().sum::<f64>() - target;
    residual.abs() <= 1e-11 * scale
}
