//! Costs, payoffs, efficiency and participation metrics.

use crate::equilibrium::{EquilibriumSolution, MarketInstance, SolutionMode};
use crate::error::{Result, SharingError};

/// Default money tolerance for participation checks.
pub const DEFAULT_PARETO_TOL: f64 = 1e-6;

/// Payoff `J_i + lambda q_i` of prosumer `index` in a sharing outcome.
pub fn sharing_payoff(
    instance: &MarketInstance,
    solution: &EquilibriumSolution,
    index: usize,
) -> Result<f64> {
    let pr = instance
        .prosumers()
        .get(index)
        .ok_or_else(|| SharingError::param(format!("no prosumer at index {index}")))?;
    let payment = payments(instance, solution)?[index];
    Ok(pr.net_cost(solution.p[index], solution.d[index]) + payment)
}

pub fn sharing_payoffs(
    instance: &MarketInstance,
    solution: &EquilibriumSolution,
) -> Result<Vec<f64>> {
    let pay = payments(instance, solution)?;
    Ok(net_costs(instance, solution)
        .into_iter()
        .zip(pay)
        .map(|(j, m)| j + m)
        .collect())
}

/// Per-prosumer net costs `f_i(p_i) - u_i(d_i)`.
pub fn net_costs(instance: &MarketInstance, solution: &EquilibriumSolution) -> Vec<f64> {
    instance
        .prosumers()
        .iter()
        .zip(solution.p.iter().zip(&solution.d))
        .map(|(pr, (&p, &d))| pr.net_cost(p, d))
        .collect()
}

/// Market payments `lambda q_i`; positive means the prosumer pays.
pub fn payments(instance: &MarketInstance, solution: &EquilibriumSolution) -> Result<Vec<f64>> {
    let price = solution.price.ok_or(SharingError::MissingField("price"))?;
    let q = solution.shared_quantities(instance.market_sensitivity())?;
    if q.len() != instance.len() {
        return Err(SharingError::Inconsistent(
            "bid count differs from instance".into(),
        ));
    }
    Ok(q.into_iter().map(|q| price * q).collect())
}

/// Net money flow through the platform, `sum lambda q_i`.
pub fn budget_imbalance(instance: &MarketInstance, solution: &EquilibriumSolution) -> Result<f64> {
    Ok(payments(instance, solution)?.iter().sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceOfAnarchy {
    /// `J(gne) / J(social)`.
    pub ratio: f64,
    /// `J(gne) - J(social)`, non-negative when the social solution is optimal.
    pub absolute_gap: f64,
    /// `1 - ratio`.
    pub relative_gap: f64,
}

pub fn price_of_anarchy(
    instance: &MarketInstance,
    gne: &EquilibriumSolution,
    social: &EquilibriumSolution,
) -> Result<PriceOfAnarchy> {
    let j_gne = gne.total_net_cost(instance);
    let j_social = social.total_net_cost(instance);
    if j_social == 0.0 || !j_social.is_finite() {
        return Err(SharingError::UndefinedPriceOfAnarchy);
    }
    let ratio = j_gne / j_social;
    Ok(PriceOfAnarchy {
        ratio,
        absolute_gap: j_gne - j_social,
        relative_gap: 1.0 - ratio,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParetoReport {
    pub passes: Vec<bool>,
    /// `J_i(self) - Gamma_i(gne)`; non-negative means prosumer i gains.
    pub margins: Vec<f64>,
    pub strict_improvement: bool,
    /// Sharing and self-sufficiency profiles agree coordinate-wise within tol.
    pub coincide: bool,
}

impl ParetoReport {
    pub fn all_pass(&self) -> bool {
        self.passes.iter().all(|&ok| ok)
    }
}

/// Compares every prosumer's sharing payoff with its stand-alone net cost.
pub fn pareto_check(
    instance: &MarketInstance,
    gne: &EquilibriumSolution,
    tol: f64,
) -> Result<ParetoReport> {
    let alone =
        crate::equilibrium::solve_self_sufficiency_profile(instance, crate::prosumer::DEFAULT_TOL)?;
    let gamma = sharing_payoffs(instance, gne)?;
    let alone_cost = net_costs(instance, &alone);
    let margins: Vec<f64> = alone_cost.iter().zip(&gamma).map(|(j, g)| j - g).collect();
    let coincide = gne
        .p
        .iter()
        .zip(&alone.p)
        .chain(gne.d.iter().zip(&alone.d))
        .all(|(x, y)| (x - y).abs() <= tol);
    Ok(ParetoReport {
        passes: margins.iter().map(|&m| m >= -tol).collect(),
        strict_improvement: margins.iter().any(|&m| m > tol),
        margins,
        coincide,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoaBound {
    pub c1: f64,
    pub c2: f64,
    pub c: f64,
    /// `1 - C / (I - 1)`.
    pub bound: f64,
}

/// Analytical lower bound on the price of anarchy.
///
/// Requires every stand-alone net cost to be strictly negative.
pub fn poa_lower_bound(
    instance: &MarketInstance,
    self_solution: &EquilibriumSolution,
) -> Result<PoaBound> {
    if self_solution.mode != SolutionMode::SelfSufficiency {
        return Err(SharingError::param(
            "poa_lower_bound expects a self-sufficiency profile",
        ));
    }
    if instance.len() < 2 {
        return Err(SharingError::param(
            "poa_lower_bound needs at least two prosumers",
        ));
    }
    let costs = net_costs(instance, self_solution);
    let offending: Vec<usize> = instance
        .prosumers()
        .iter()
        .zip(&costs)
        .filter(|(_, &j)| j >= 0.0)
        .map(|(pr, _)| pr.id())
        .collect();
    if !offending.is_empty() {
        return Err(SharingError::NonNegativeSelfCost { ids: offending });
    }
    let c1 = instance
        .prosumers()
        .iter()
        .map(|pr| {
            let low = (pr.p_min() - pr.d_max()).powi(2);
            let high = (pr.p_max() - pr.d_min()).powi(2);
            low.max(high)
        })
        .fold(0.0, f64::max);
    let c2 = costs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let c = c1 / (instance.market_sensitivity() * c2.abs());
    Ok(PoaBound {
        c1,
        c2,
        c,
        bound: 1.0 - c / (instance.len() - 1) as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyGapBound {
    pub gamma: f64,
    pub sigma: f64,
    /// `2 gamma sigma / (I - 1)`.
    pub bound: f64,
}

/// Bound on `|p_gne - p_social|` per coordinate from curvature and box data.
pub fn strategy_gap_bound(instance: &MarketInstance) -> Result<StrategyGapBound> {
    let n = instance.len();
    if n < 2 {
        return Err(SharingError::param(
            "strategy_gap_bound needs at least two prosumers",
        ));
    }
    let prosumers = instance.prosumers();
    let gamma = prosumers
        .iter()
        .map(|pr| {
            let (cost, utility) = pr.inverse_curvature_bounds();
            cost.max(utility)
        })
        .fold(0.0, f64::max);
    let p_hi = prosumers
        .iter()
        .map(|pr| pr.p_max())
        .fold(f64::NEG_INFINITY, f64::max);
    let p_lo = prosumers
        .iter()
        .map(|pr| pr.p_min())
        .fold(f64::INFINITY, f64::min);
    let d_hi = prosumers
        .iter()
        .map(|pr| pr.d_max())
        .fold(f64::NEG_INFINITY, f64::max);
    let d_lo = prosumers
        .iter()
        .map(|pr| pr.d_min())
        .fold(f64::INFINITY, f64::min);
    let sigma = (p_hi - d_lo).abs().max((p_lo - d_hi).abs()) / instance.market_sensitivity();
    Ok(StrategyGapBound {
        gamma,
        sigma,
        bound: 2.0 * gamma * sigma / (n - 1) as f64,
    })
}

/// Table of the three regimes side by side for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeReport {
    pub gne_cost: Vec<f64>,
    pub gne_payoff: Vec<f64>,
    pub gne_payment: Vec<f64>,
    pub social_cost: Vec<f64>,
    pub self_cost: Vec<f64>,
    pub total_gne_cost: f64,
    pub total_gne_payoff: f64,
    pub total_social_cost: f64,
    pub total_self_cost: f64,
    pub poa: PriceOfAnarchy,
    pub pareto: ParetoReport,
    pub social_price: f64,
    pub sharing_price: f64,
    pub price_gap: f64,
}

impl OutcomeReport {
    pub fn build(
        instance: &MarketInstance,
        gne: &EquilibriumSolution,
        social: &EquilibriumSolution,
        alone: &EquilibriumSolution,
    ) -> Result<Self> {
        let gne_cost = net_costs(instance, gne);
        let gne_payment = payments(instance, gne)?;
        let gne_payoff: Vec<f64> = gne_cost
            .iter()
            .zip(&gne_payment)
            .map(|(j, m)| j + m)
            .collect();
        let social_cost = net_costs(instance, social);
        let self_cost = net_costs(instance, alone);
        let social_price = social.dual.ok_or(SharingError::MissingField("dual"))?;
        let sharing_price = gne.price.ok_or(SharingError::MissingField("price"))?;
        Ok(Self {
            total_gne_cost: gne_cost.iter().sum(),
            total_gne_payoff: gne_payoff.iter().sum(),
            total_social_cost: social_cost.iter().sum(),
            total_self_cost: self_cost.iter().sum(),
            poa: price_of_anarchy(instance, gne, social)?,
            pareto: pareto_check(instance, gne, DEFAULT_PARETO_TOL)?,
            gne_cost,
            gne_payoff,
            gne_payment,
            social_cost,
            self_cost,
            social_price,
            sharing_price,
            price_gap: (sharing_price - social_price).abs(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{
        solve_gne_direct, solve_self_sufficiency_profile, solve_social_optimum,
    };
    use crate::prosumer::{Prosumer, DEFAULT_TOL};
    use crate::scenarios::{builtin_three_prosumer, random_instance_a3};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn solved(
        inst: &MarketInstance,
    ) -> (
        EquilibriumSolution,
        EquilibriumSolution,
        EquilibriumSolution,
    ) {
        (
            solve_gne_direct(inst, DEFAULT_TOL).unwrap(),
            solve_social_optimum(inst, DEFAULT_TOL).unwrap(),
            solve_self_sufficiency_profile(inst, DEFAULT_TOL).unwrap(),
        )
    }

    #[test]
    fn table_payoffs_and_totals() {
        let inst = builtin_three_prosumer();
        let (gne, social, alone) = solved(&inst);
        let r = OutcomeReport::build(&inst, &gne, &social, &alone).unwrap();
        for (got, want) in r.gne_payoff.iter().zip([-6.90, -2.59, -1.44]) {
            assert_abs_diff_eq!(*got, want, epsilon = 0.01);
        }
        assert_abs_diff_eq!(r.total_gne_payoff, -10.94, epsilon = 0.01);
        assert_abs_diff_eq!(r.total_social_cost, -10.98, epsilon = 0.01);
        assert_abs_diff_eq!(r.total_self_cost, -10.03, epsilon = 0.01);
        assert_abs_diff_eq!(r.poa.relative_gap, 0.0036, epsilon = 0.0005);
        assert!(r.poa.ratio < 1.0 && r.poa.absolute_gap > 0.0);
        assert_abs_diff_eq!(
            sharing_payoff(&inst, &gne, 0).unwrap(),
            -6.90,
            epsilon = 0.01
        );
    }

    #[test]
    fn table_pareto_flags() {
        let inst = builtin_three_prosumer();
        let gne = solve_gne_direct(&inst, DEFAULT_TOL).unwrap();
        let r = pareto_check(&inst, &gne, DEFAULT_PARETO_TOL).unwrap();
        assert!(r.all_pass());
        assert!(r.strict_improvement);
        assert!(!r.coincide);
    }

    #[test]
    fn payoff_needs_bids() {
        let inst = builtin_three_prosumer();
        let social = solve_social_optimum(&inst, DEFAULT_TOL).unwrap();
        assert_eq!(
            sharing_payoff(&inst, &social, 0),
            Err(SharingError::MissingField("price"))
        );
    }

    #[test]
    fn zero_payment_leaves_net_cost() {
        let inst = builtin_three_prosumer();
        let mut gne = solve_gne_direct(&inst, DEFAULT_TOL).unwrap();
        let a = inst.market_sensitivity();
        let price = gne.price.unwrap();
        gne.bids.as_mut().unwrap()[2] = a * price;
        let j = inst.prosumers()[2].net_cost(gne.p[2], gne.d[2]);
        assert_eq!(sharing_payoff(&inst, &gne, 2).unwrap(), j);
    }

    #[test]
    fn poa_bound_on_table_data() {
        let inst = builtin_three_prosumer();
        let (gne, social, alone) = solved(&inst);
        let b = poa_lower_bound(&inst, &alone).unwrap();
        // Widest |p - d| gap: prosumer 3, 0 - 25.
        assert_abs_diff_eq!(b.c1, 625.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.c, 625.0 / (100.0 * 1.44), epsilon = 0.02);
        assert_abs_diff_eq!(b.c2, alone_cost_max(&inst, &alone), epsilon = 1e-12);
        assert!(price_of_anarchy(&inst, &gne, &social).unwrap().ratio >= b.bound);
    }

    fn alone_cost_max(inst: &MarketInstance, alone: &EquilibriumSolution) -> f64 {
        net_costs(inst, alone)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn poa_bound_rejects_nonnegative_self_cost() {
        let pr =
            |id| Prosumer::quadratic(id, [0.02, 0.5, -0.01, 0.1], [0.0, 10.0, 2.0, 8.0]).unwrap();
        let inst = MarketInstance::new(vec![pr(0), pr(1)], 100.0).unwrap();
        let alone = solve_self_sufficiency_profile(&inst, DEFAULT_TOL).unwrap();
        assert!(matches!(
            poa_lower_bound(&inst, &alone),
            Err(SharingError::NonNegativeSelfCost { ids }) if ids == vec![0, 1]
        ));
    }

    #[test]
    fn poa_bound_tends_to_one() {
        let bound = |n: usize| 1.0 - 4.0 / (n - 1) as f64;
        assert!(bound(10_001) > 0.999);
    }

    #[test]
    fn identical_prosumers_have_unit_poa() {
        let pr = |id| {
            Prosumer::quadratic(id, [0.015, 0.038, -0.008, 0.8], [0.0, 20.0, 5.0, 15.0]).unwrap()
        };
        let inst = MarketInstance::new((0..4).map(pr).collect(), 100.0).unwrap();
        let (gne, social, _) = solved(&inst);
        assert!((price_of_anarchy(&inst, &gne, &social).unwrap().ratio - 1.0).abs() <= 1e-9);
        let r = pareto_check(&inst, &gne, DEFAULT_PARETO_TOL).unwrap();
        assert!(r.all_pass() && r.coincide && !r.strict_improvement);
    }

    #[test]
    fn zero_social_cost_is_undefined() {
        let pr =
            |id| Prosumer::quadratic(id, [0.01, 0.0, -0.01, 0.0], [0.0, 10.0, 0.0, 10.0]).unwrap();
        let inst = MarketInstance::new(vec![pr(0), pr(1)], 100.0).unwrap();
        let (gne, social, _) = solved(&inst);
        assert_eq!(
            price_of_anarchy(&inst, &gne, &social),
            Err(SharingError::UndefinedPriceOfAnarchy)
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn outcome_invariants(seed in 0u64..10_000, n in 2usize..12) {
            let (inst, _) = random_instance_a3(n, 100.0, seed).unwrap();
            let (gne, social, alone) = solved(&inst);
            prop_assert!(budget_imbalance(&inst, &gne).unwrap().abs() <= 1e-9);
            let gamma: f64 = sharing_payoffs(&inst, &gne).unwrap().iter().sum();
            prop_assert!((gamma - gne.total_net_cost(&inst)).abs() <= 1e-8);
            let pareto = pareto_check(&inst, &gne, DEFAULT_PARETO_TOL).unwrap();
            prop_assert!(pareto.all_pass(), "{:?}", pareto.margins);
            let poa = price_of_anarchy(&inst, &gne, &social).unwrap();
            prop_assert!(poa.ratio <= 1.0 + 1e-12);
            prop_assert!(poa.ratio >= poa_lower_bound(&inst, &alone).unwrap().bound - 1e-12);
        }
    }
}
