//! Whole-market solvers.
//!
//! Both the social optimum and the sharing equilibrium reduce to a single
//! scalar equation in the balance multiplier: every prosumer responds to a
//! candidate price, and the price is bisected until aggregate production
//! matches aggregate demand. The equilibrium variant adds the quadratic
//! penalty `sum (d - p)^2 / (2 a (I - 1))`, which each prosumer sees as a
//! shift of its effective price.

use crate::error::{Result, SharingError};
use crate::numeric::MAX_BISECTION_STEPS;
use crate::prosumer::{self, marginal_response, Prosumer, ResponsePoint};

/// Default tolerance on `|sum p - sum d|`.
pub const DEFAULT_BALANCE_TOL: f64 = 1e-10;

/// Inner tolerance for the per-prosumer effective-price bisection.
pub(crate) const RESPONSE_TOL: f64 = 1e-14;

/// Excess magnitude treated as exactly zero when detecting a flat segment.
const PLATEAU_TOL: f64 = 1e-12;

/// Relative distance under which a coordinate counts as sitting on a bound.
const ACTIVE_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct MarketInstance {
    prosumers: Vec<Prosumer>,
    a: f64,
}

impl MarketInstance {
    pub fn new(prosumers: Vec<Prosumer>, a: f64) -> Result<Self> {
        if prosumers.is_empty() {
            return Err(SharingError::param("market needs at least one prosumer"));
        }
        if !(a > 0.0 && a.is_finite()) {
            return Err(SharingError::param(format!(
                "market sensitivity must be > 0, got {a}"
            )));
        }
        Ok(Self { prosumers, a })
    }

    pub fn prosumers(&self) -> &[Prosumer] {
        &self.prosumers
    }

    pub fn market_sensitivity(&self) -> f64 {
        self.a
    }

    pub fn len(&self) -> usize {
        self.prosumers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prosumers.is_empty()
    }

    /// Same prosumers under a different market sensitivity.
    pub fn with_market_sensitivity(&self, a: f64) -> Result<Self> {
        Self::new(self.prosumers.clone(), a)
    }

    /// A1: some balanced allocation exists inside all capacity boxes.
    pub fn check_feasible(&self) -> Result<()> {
        let sum = |f: fn(&Prosumer) -> f64| self.prosumers.iter().map(f).sum::<f64>();
        let (sum_p_min, sum_p_max) = (sum(Prosumer::p_min), sum(Prosumer::p_max));
        let (sum_d_min, sum_d_max) = (sum(Prosumer::d_min), sum(Prosumer::d_max));
        if sum_p_min > sum_d_max || sum_d_min > sum_p_max {
            return Err(SharingError::MarketInfeasible {
                sum_p_min,
                sum_p_max,
                sum_d_min,
                sum_d_max,
            });
        }
        Ok(())
    }

    /// A2 for every prosumer.
    pub fn check_self_sufficiency_feasible(&self) -> Result<()> {
        for pr in &self.prosumers {
            if pr.self_sufficiency_box().is_none() {
                return Err(SharingError::SelfSufficiencyInfeasible {
                    id: pr.id(),
                    lower: pr.p_min().max(pr.d_min()),
                    upper: pr.p_max().min(pr.d_max()),
                });
            }
        }
        Ok(())
    }

    /// Smallest market sensitivity satisfying A4 for this population.
    pub fn min_market_sensitivity(&self) -> f64 {
        prosumer::min_market_sensitivity(&self.prosumers, self.len().max(2)).unwrap_or(0.0)
    }

    pub fn satisfies_a4(&self) -> bool {
        self.a >= self.min_market_sensitivity()
    }

    fn penalty_scale(&self) -> f64 {
        self.a * (self.len() - 1) as f64
    }

    fn require_game(&self) -> Result<()> {
        if self.len() < 2 {
            return Err(SharingError::param(format!(
                "the sharing game needs at least two prosumers, got {}",
                self.len()
            )));
        }
        Ok(())
    }

    /// Price interval outside which every response is saturated.
    pub(crate) fn price_bracket(&self, mode: ExcessMode) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for pr in &self.prosumers {
            lo = lo
                .min(pr.marginal_cost(pr.p_min()))
                .min(pr.marginal_utility(pr.d_max()));
            hi = hi
                .max(pr.marginal_cost(pr.p_max()))
                .max(pr.marginal_utility(pr.d_min()));
        }
        let mut widen = 1.0;
        if mode == ExcessMode::Penalized && self.len() >= 2 {
            let width = self
                .prosumers
                .iter()
                .map(|pr| (pr.d_max() - pr.p_min()).max(pr.p_max() - pr.d_min()))
                .fold(0.0, f64::max);
            widen += width / self.penalty_scale();
        }
        (lo - widen, hi + widen)
    }
}

/// Which response model prices are mapped through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExcessMode {
    /// Price-taking responses (centralized problem).
    Social,
    /// Price-anticipating responses (penalized problem).
    Penalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolutionMode {
    Social,
    Gne,
    SelfSufficiency,
}

impl SolutionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SolutionMode::Social => "social",
            SolutionMode::Gne => "gne",
            SolutionMode::SelfSufficiency => "self-sufficiency",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    pub mode: SolutionMode,
    pub p: Vec<f64>,
    pub d: Vec<f64>,
    /// Submitted bids; present for sharing-market outcomes only.
    pub bids: Option<Vec<f64>>,
    /// Clearing price `sum b / (a I)` when bids exist.
    pub price: Option<f64>,
    /// Multiplier of the balance constraint.
    pub dual: Option<f64>,
    /// Set when the balance multiplier is not unique (flat excess segment).
    pub dual_interval: Option<(f64, f64)>,
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl EquilibriumSolution {
    pub fn imbalance(&self) -> f64 {
        self.p.iter().sum::<f64>() - self.d.iter().sum::<f64>()
    }

    pub fn total_net_cost(&self, instance: &MarketInstance) -> f64 {
        instance
            .prosumers()
            .iter()
            .zip(self.p.iter().zip(&self.d))
            .map(|(pr, (&p, &d))| pr.net_cost(p, d))
            .sum()
    }

    /// Shared quantities `q_i = -a lambda + b_i`.
    pub fn shared_quantities(&self, a: f64) -> Result<Vec<f64>> {
        let bids = self
            .bids
            .as_ref()
            .ok_or(SharingError::MissingField("bids"))?;
        let price = self.price.ok_or(SharingError::MissingField("price"))?;
        Ok(bids.iter().map(|b| -a * price + b).collect())
    }
}

fn response(
    instance: &MarketInstance,
    pr: &Prosumer,
    price: f64,
    mode: ExcessMode,
) -> ResponsePoint {
    match mode {
        ExcessMode::Social => marginal_response(pr, price),
        ExcessMode::Penalized => prosumer::solve_surrogate_best_response(
            pr,
            price,
            instance.a,
            instance.len(),
            RESPONSE_TOL,
        )
        .expect("market parameters validated by caller"),
    }
}

fn responses(instance: &MarketInstance, price: f64, mode: ExcessMode) -> Vec<ResponsePoint> {
    instance
        .prosumers
        .iter()
        .map(|pr| response(instance, pr, price, mode))
        .collect()
}

/// Aggregate `sum (p_i - d_i)` of the responses to `price`; nondecreasing in price.
pub fn aggregate_excess(instance: &MarketInstance, price: f64, mode: ExcessMode) -> Result<f64> {
    if mode == ExcessMode::Penalized {
        instance.require_game()?;
    }
    Ok(excess_unchecked(instance, price, mode))
}

fn excess_unchecked(instance: &MarketInstance, price: f64, mode: ExcessMode) -> f64 {
    instance
        .prosumers
        .iter()
        .map(|pr| {
            let r = response(instance, pr, price, mode);
            r.p - r.d
        })
        .sum()
}

struct PriceRoot {
    price: f64,
    points: Vec<ResponsePoint>,
    flat: Option<(f64, f64)>,
    steps: usize,
}

/// Bisection on the balance multiplier.
///
/// Continues past `tol` until the imbalance is within `balance_tol` or the
/// bracket hits floating-point resolution.
fn solve_balance_price(
    instance: &MarketInstance,
    mode: ExcessMode,
    tol: f64,
    balance_tol: f64,
) -> Result<PriceRoot> {
    instance.check_feasible()?;
    let (lower, upper) = instance.price_bracket(mode);
    let excess = |x: f64| excess_unchecked(instance, x, mode);
    let (excess_lower, excess_upper) = (excess(lower), excess(upper));
    if excess_lower > balance_tol || excess_upper < -balance_tol {
        return Err(SharingError::Bracket {
            lower,
            upper,
            excess_lower,
            excess_upper,
        });
    }
    let (mut lo, mut hi) = (lower, upper);
    let mut steps = 0;
    let mut root = None;
    while steps < MAX_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        steps += 1;
        let value = excess(mid);
        if hi - lo <= tol && value.abs() <= balance_tol {
            root = Some(mid);
            break;
        }
        if value < 0.0 {
            lo = mid;
        } else if value > 0.0 {
            hi = mid;
        } else {
            root = Some(mid);
            break;
        }
    }
    let price = root.unwrap_or(0.5 * (lo + hi));
    let flat = flat_segment(&excess, lower, upper, price, PLATEAU_TOL).filter(|(l, r)| r - l > tol);
    Ok(PriceRoot {
        price,
        points: responses(instance, price, mode),
        flat,
        steps,
    })
}

/// Extent of the zero-excess plateau around `root`, if the excess vanishes there.
fn flat_segment<F: Fn(f64) -> f64>(
    excess: &F,
    lower: f64,
    upper: f64,
    root: f64,
    zero_tol: f64,
) -> Option<(f64, f64)> {
    if excess(root).abs() > zero_tol {
        return None;
    }
    let edge = |mut outside: f64, mut inside: f64, is_outside: &dyn Fn(f64) -> bool| {
        for _ in 0..MAX_BISECTION_STEPS {
            let mid = 0.5 * (outside + inside);
            if mid == outside || mid == inside {
                break;
            }
            if is_outside(mid) {
                outside = mid;
            } else {
                inside = mid;
            }
        }
        inside
    };
    let left = if excess(lower) < -zero_tol {
        edge(lower, root, &|x| excess(x) < -zero_tol)
    } else {
        lower
    };
    let right = if excess(upper) > zero_tol {
        edge(upper, root, &|x| excess(x) > zero_tol)
    } else {
        upper
    };
    Some((left, right))
}

/// Centralized social optimum of the balanced market.
pub fn solve_social_optimum(instance: &MarketInstance, tol: f64) -> Result<EquilibriumSolution> {
    solve_social_optimum_with(instance, tol, DEFAULT_BALANCE_TOL)
}

pub fn solve_social_optimum_with(
    instance: &MarketInstance,
    tol: f64,
    balance_tol: f64,
) -> Result<EquilibriumSolution> {
    let root = solve_balance_price(instance, ExcessMode::Social, tol, balance_tol)?;
    let mut solution = EquilibriumSolution {
        mode: SolutionMode::Social,
        p: root.points.iter().map(|r| r.p).collect(),
        d: root.points.iter().map(|r| r.d).collect(),
        bids: None,
        price: None,
        dual: Some(root.price),
        dual_interval: root.flat,
        kkt_residual: 0.0,
        iterations: root.steps,
    };
    solution.kkt_residual = kkt_residual(instance, &solution)?;
    Ok(solution)
}

/// Sharing-game equilibrium computed from its equivalent penalized program.
///
/// Production and demand are unique; the returned bids are the canonical
/// representative `b_i = d_i - p_i + a zeta`.
pub fn solve_gne_direct(instance: &MarketInstance, tol: f64) -> Result<EquilibriumSolution> {
    solve_gne_direct_with(instance, tol, DEFAULT_BALANCE_TOL)
}

pub fn solve_gne_direct_with(
    instance: &MarketInstance,
    tol: f64,
    balance_tol: f64,
) -> Result<EquilibriumSolution> {
    instance.require_game()?;
    let root = solve_balance_price(instance, ExcessMode::Penalized, tol, balance_tol)?;
    let p: Vec<f64> = root.points.iter().map(|r| r.p).collect();
    let d: Vec<f64> = root.points.iter().map(|r| r.d).collect();
    // The residual imbalance is the best the bisection reached, which can sit
    // slightly above `balance_tol` at float resolution for large markets.
    let bids: Vec<f64> = p
        .iter()
        .zip(&d)
        .map(|(p, d)| d - p + instance.a * root.price)
        .collect();
    // Clearing the canonical bids keeps the payments exactly zero-sum even
    // when the profile carries a residual imbalance.
    let price = bids.iter().sum::<f64>() / (instance.a * instance.len() as f64);
    let mut solution = EquilibriumSolution {
        mode: SolutionMode::Gne,
        p,
        d,
        bids: Some(bids),
        price: Some(price),
        dual: Some(root.price),
        dual_interval: root.flat,
        kkt_residual: 0.0,
        iterations: root.steps,
    };
    solution.kkt_residual = kkt_residual(instance, &solution)?;
    Ok(solution)
}

/// Each prosumer alone at its balanced optimum.
pub fn solve_self_sufficiency_profile(
    instance: &MarketInstance,
    tol: f64,
) -> Result<EquilibriumSolution> {
    let mut p = Vec::with_capacity(instance.len());
    for pr in &instance.prosumers {
        p.push(prosumer::solve_self_sufficiency(pr, tol)?.0);
    }
    Ok(EquilibriumSolution {
        mode: SolutionMode::SelfSufficiency,
        d: p.clone(),
        p,
        bids: None,
        price: None,
        dual: None,
        dual_interval: None,
        kkt_residual: 0.0,
        iterations: 0,
    })
}

/// Canonical bids `b_i = d_i - p_i + a zeta` supporting a balanced profile.
pub fn recover_bids(p: &[f64], d: &[f64], zeta: f64, a: f64, balance_tol: f64) -> Result<Vec<f64>> {
    if p.len() != d.len() {
        return Err(SharingError::Inconsistent(format!(
            "{} productions vs {} demands",
            p.len(),
            d.len()
        )));
    }
    let imbalance = p.iter().sum::<f64>() - d.iter().sum::<f64>();
    if imbalance.abs() > balance_tol {
        return Err(SharingError::Inconsistent(format!(
            "profile imbalance {imbalance} exceeds {balance_tol}"
        )));
    }
    Ok(p.iter().zip(d).map(|(p, d)| d - p + a * zeta).collect())
}

/// Worst KKT violation of a social or equilibrium solution.
///
/// Combines bound violations, stationarity at interior coordinates, sign
/// violations of the implied bound multipliers, and the balance residual.
pub fn kkt_residual(instance: &MarketInstance, solution: &EquilibriumSolution) -> Result<f64> {
    let dual = solution.dual.ok_or(SharingError::MissingField("dual"))?;
    if solution.p.len() != instance.len() || solution.d.len() != instance.len() {
        return Err(SharingError::Inconsistent(
            "solution length differs from instance".into(),
        ));
    }
    let penalized = match solution.mode {
        SolutionMode::Gne => {
            instance.require_game()?;
            true
        }
        SolutionMode::Social => false,
        SolutionMode::SelfSufficiency => {
            return Err(SharingError::Inconsistent(
                "KKT residual is defined for social and equilibrium solutions".into(),
            ))
        }
    };
    let mut worst = solution.imbalance().abs();
    for (pr, (&p, &d)) in instance
        .prosumers
        .iter()
        .zip(solution.p.iter().zip(&solution.d))
    {
        let mu = if penalized {
            dual + (d - p) / instance.penalty_scale()
        } else {
            dual
        };
        // Production: f'(p) - mu = delta_minus - delta_plus.
        worst = worst.max(coordinate_violation(
            p,
            pr.p_min(),
            pr.p_max(),
            pr.marginal_cost(p) - mu,
        ));
        // Demand: mu - u'(d) = kappa_minus - kappa_plus.
        worst = worst.max(coordinate_violation(
            d,
            pr.d_min(),
            pr.d_max(),
            mu - pr.marginal_utility(d),
        ));
    }
    Ok(worst)
}

/// `gradient` is the multiplier owed to the lower bound minus the one owed to the upper bound.
fn coordinate_violation(x: f64, lower: f64, upper: f64, gradient: f64) -> f64 {
    let outside = (lower - x).max(x - upper).max(0.0);
    let at_lower = (x - lower).abs() <= ACTIVE_TOL * lower.abs().max(1.0);
    let at_upper = (upper - x).abs() <= ACTIVE_TOL * upper.abs().max(1.0);
    let sign = match (at_lower, at_upper) {
        (true, true) => 0.0,
        (true, false) => (-gradient).max(0.0),
        (false, true) => gradient.max(0.0),
        (false, false) => gradient.abs(),
    };
    outside.max(sign)
}

/// Objective of the penalized program at `(p, d)`.
pub fn penalized_objective(instance: &MarketInstance, p: &[f64], d: &[f64]) -> f64 {
    let scale = 2.0 * instance.penalty_scale();
    instance
        .prosumers
        .iter()
        .zip(p.iter().zip(d))
        .map(|(pr, (&p, &d))| pr.net_cost(p, d) + (d - p) * (d - p) / scale)
        .sum()
}

/// Dense Hessian (row-major, `2I x 2I`, variables ordered `p_1, d_1, p_2, ...`) of
/// the potential `sum J_i + sum (d_i - p_i)^2/(2a(I-1)) - (sum d - sum p)^2/(2aI)`.
pub fn potential_hessian(instance: &MarketInstance, p: &[f64], d: &[f64]) -> Vec<f64> {
    let n = instance.len();
    let dim = 2 * n;
    let a = instance.a;
    let own = 1.0 / (a * (n as f64 - 1.0));
    let shared = 1.0 / (a * n as f64);
    let mut h = vec![0.0; dim * dim];
    let sign = |k: usize| if k.is_multiple_of(2) { 1.0 } else { -1.0 };
    for r in 0..dim {
        for c in 0..dim {
            h[r * dim + c] = -shared * sign(r) * sign(c);
        }
    }
    for (i, pr) in instance.prosumers.iter().enumerate() {
        let (rp, rd) = (2 * i, 2 * i + 1);
        h[rp * dim + rp] += curvature_cost(pr, p[i]) + own;
        h[rd * dim + rd] += -curvature_utility(pr, d[i]) + own;
        h[rp * dim + rd] -= own;
        h[rd * dim + rp] -= own;
    }
    h
}

/// `x' H x` for the potential Hessian, evaluated in `O(I)`.
pub fn potential_quadratic_form(instance: &MarketInstance, p: &[f64], d: &[f64], x: &[f64]) -> f64 {
    let n = instance.len() as f64;
    let a = instance.a;
    let mut diag = 0.0;
    let mut own = 0.0;
    let mut total = 0.0;
    for (i, pr) in instance.prosumers.iter().enumerate() {
        let (xp, xd) = (x[2 * i], x[2 * i + 1]);
        diag += curvature_cost(pr, p[i]) * xp * xp - curvature_utility(pr, d[i]) * xd * xd;
        own += (xp - xd) * (xp - xd);
        total += xp - xd;
    }
    diag + own / (a * (n - 1.0)) - total * total / (a * n)
}

fn curvature_cost(pr: &Prosumer, p: f64) -> f64 {
    match pr.curves() {
        prosumer::ConvexCurvePair::Quadratic(q) => 2.0 * q.cost_quadratic,
        prosumer::ConvexCurvePair::Custom(c) => c.cost_curvature(p),
    }
}

fn curvature_utility(pr: &Prosumer, d: f64) -> f64 {
    match pr.curves() {
        prosumer::ConvexCurvePair::Quadratic(q) => 2.0 * q.utility_quadratic,
        prosumer::ConvexCurvePair::Custom(c) => c.utility_curvature(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prosumer::DEFAULT_TOL;
    use crate::scenarios::{builtin_three_prosumer, random_instance};
    use approx::assert_abs_diff_eq;

    /// Piecewise-linear root of the social excess for the three-prosumer case,
    /// found by scanning breakpoints independently of the bisection path.
    fn social_price_by_breakpoints(instance: &MarketInstance) -> f64 {
        let mut knots = Vec::new();
        for pr in instance.prosumers() {
            knots.extend([
                pr.marginal_cost(pr.p_min()),
                pr.marginal_cost(pr.p_max()),
                pr.marginal_utility(pr.d_min()),
                pr.marginal_utility(pr.d_max()),
            ]);
        }
        knots.sort_by(f64::total_cmp);
        let excess = |x: f64| {
            instance
                .prosumers()
                .iter()
                .map(|pr| {
                    let q = pr.curves().as_quadratic().unwrap();
                    let p = ((x - q.cost_linear) / (2.0 * q.cost_quadratic))
                        .clamp(pr.p_min(), pr.p_max());
                    let d = ((x - q.utility_linear) / (2.0 * q.utility_quadratic))
                        .clamp(pr.d_min(), pr.d_max());
                    p - d
                })
                .sum::<f64>()
        };
        for w in knots.windows(2) {
            let (e0, e1) = (excess(w[0]), excess(w[1]));
            if e0 <= 0.0 && e1 >= 0.0 && e1 > e0 {
                // Linear between consecutive knots.
                return w[0] - e0 * (w[1] - w[0]) / (e1 - e0);
            }
        }
        panic!("no sign change");
    }

    #[test]
    fn social_excess_vanishes_at_reference_price() {
        let inst = builtin_three_prosumer();
        let root = social_price_by_breakpoints(&inst);
        assert!((root - 0.2803).abs() < 5e-5, "root {root}");
        assert_abs_diff_eq!(
            aggregate_excess(&inst, root, ExcessMode::Social).unwrap(),
            0.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn excess_saturates_below_all_marginals() {
        let inst = builtin_three_prosumer();
        let (lo, _) = inst.price_bracket(ExcessMode::Social);
        let sum_p_min: f64 = inst.prosumers().iter().map(|p| p.p_min()).sum();
        let sum_d_max: f64 = inst.prosumers().iter().map(|p| p.d_max()).sum();
        assert_eq!(
            aggregate_excess(&inst, lo, ExcessMode::Social).unwrap(),
            sum_p_min - sum_d_max
        );
    }

    #[test]
    fn identical_pair_balances_at_shared_marginal() {
        let pr = Prosumer::quadratic(0, [0.01, 0.05, -0.01, 0.6], [0.0, 40.0, 5.0, 30.0]).unwrap();
        let inst = MarketInstance::new(vec![pr.clone(), pr.clone()], 100.0).unwrap();
        let (x, _) = prosumer::solve_self_sufficiency(&pr, DEFAULT_TOL).unwrap();
        let price = pr.marginal_cost(x);
        assert_abs_diff_eq!(
            aggregate_excess(&inst, price, ExcessMode::Social).unwrap(),
            0.0,
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(
            aggregate_excess(&inst, price, ExcessMode::Penalized).unwrap(),
            0.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn social_optimum_of_three_prosumer_case() {
        let inst = builtin_three_prosumer();
        let s = solve_social_optimum(&inst, DEFAULT_TOL).unwrap();
        let expect = [(8.1, 15.0), (14.6, 7.8), (10.2, 10.0)];
        for (i, (p, d)) in expect.iter().enumerate() {
            assert!((s.p[i] - p).abs() < 0.05 && (s.d[i] - d).abs() < 0.05);
        }
        assert!((s.total_net_cost(&inst) - -10.98).abs() < 0.005);
        assert_abs_diff_eq!(
            s.dual.unwrap(),
            social_price_by_breakpoints(&inst),
            epsilon = 1e-9
        );
        assert!(s.kkt_residual <= 1e-6);
        assert!(s.imbalance().abs() <= DEFAULT_BALANCE_TOL);
        assert!(s.dual_interval.is_none());
    }

    #[test]
    fn identical_prosumers_sit_at_self_sufficiency() {
        let pr =
            Prosumer::quadratic(0, [0.012, 0.04, -0.007, 0.7], [0.0, 40.0, 5.0, 30.0]).unwrap();
        let (x, _) = prosumer::solve_self_sufficiency(&pr, DEFAULT_TOL).unwrap();
        let inst = MarketInstance::new(vec![pr; 4], 80.0).unwrap();
        for s in [
            solve_social_optimum(&inst, DEFAULT_TOL).unwrap(),
            solve_gne_direct(&inst, DEFAULT_TOL).unwrap(),
        ] {
            for i in 0..4 {
                assert_abs_diff_eq!(s.p[i], x, epsilon = 1e-6);
                assert_abs_diff_eq!(s.d[i], x, epsilon = 1e-6);
            }
        }
        let g = solve_gne_direct(&inst, DEFAULT_TOL).unwrap();
        for q in g.shared_quantities(80.0).unwrap() {
            assert!(q.abs() < 1e-6);
        }
    }

    #[test]
    fn gne_of_three_prosumer_case() {
        let inst = builtin_three_prosumer();
        let g = solve_gne_direct(&inst, DEFAULT_TOL).unwrap();
        let expect = [(9.3, 15.0), (13.6, 8.4), (10.5, 10.0)];
        for (i, (p, d)) in expect.iter().enumerate() {
            assert!(
                (g.p[i] - p).abs() < 0.05 && (g.d[i] - d).abs() < 0.05,
                "{i}: {} {}",
                g.p[i],
                g.d[i]
            );
        }
        assert!((g.total_net_cost(&inst) - -10.94).abs() < 0.005);
        assert!(g.kkt_residual <= 1e-6);
        let bids = g.bids.as_ref().unwrap();
        let zeta = g.dual.unwrap();
        assert_abs_diff_eq!(
            bids.iter().sum::<f64>() / (100.0 * 3.0),
            zeta,
            epsilon = 1e-9
        );
    }

    #[test]
    fn recover_bids_examples() {
        let b = recover_bids(&[3.0, 4.0], &[3.0, 4.0], 0.3, 100.0, 1e-9).unwrap();
        for bi in b {
            assert_abs_diff_eq!(bi, 30.0, epsilon = 1e-12);
        }
        let b = recover_bids(&[1.0, 3.0], &[2.0, 2.0], 0.0, 1.0, 1e-9).unwrap();
        assert_eq!(b, vec![1.0, -1.0]);
        assert!(matches!(
            recover_bids(&[1.0, 3.0], &[2.0, 3.0], 0.0, 1.0, 1e-9),
            Err(SharingError::Inconsistent(_))
        ));
    }

    #[test]
    fn kkt_flags_bound_violation() {
        let inst = builtin_three_prosumer();
        let mut s = solve_social_optimum(&inst, DEFAULT_TOL).unwrap();
        s.p[0] = inst.prosumers()[0].p_max() + 1.0;
        assert!(kkt_residual(&inst, &s).unwrap() >= 1.0);
        let own = solve_self_sufficiency_profile(&inst, DEFAULT_TOL).unwrap();
        assert!(kkt_residual(&inst, &own).is_err());
    }

    #[test]
    fn infeasible_market_is_reported() {
        let a = Prosumer::quadratic(0, [0.01, 0.0, -0.01, 1.0], [0.0, 5.0, 10.0, 12.0]).unwrap();
        let b = Prosumer::quadratic(1, [0.01, 0.0, -0.01, 1.0], [0.0, 5.0, 10.0, 12.0]).unwrap();
        let inst = MarketInstance::new(vec![a, b], 100.0).unwrap();
        assert!(matches!(
            solve_social_optimum(&inst, DEFAULT_TOL),
            Err(SharingError::MarketInfeasible { .. })
        ));
        assert!(matches!(
            solve_gne_direct(&inst, DEFAULT_TOL),
            Err(SharingError::MarketInfeasible { .. })
        ));
    }

    #[test]
    fn single_prosumer_social_degenerates_to_self_sufficiency() {
        let pr =
            Prosumer::quadratic(0, [0.015, 0.038, -0.008, 0.8], [0.0, 20.0, 5.0, 15.0]).unwrap();
        let inst = MarketInstance::new(vec![pr], 100.0).unwrap();
        let s = solve_social_optimum(&inst, DEFAULT_TOL).unwrap();
        assert_abs_diff_eq!(s.p[0], 15.0, epsilon = 1e-7);
        assert_abs_diff_eq!(s.d[0], 15.0, epsilon = 1e-7);
        assert!(solve_gne_direct(&inst, DEFAULT_TOL).is_err());
    }

    #[test]
    fn flat_excess_records_dual_interval() {
        // Both prosumers pinned: p fixed at 10, d fixed at 10 -> any price balances.
        let a = Prosumer::quadratic(0, [0.01, 0.0, -0.01, 1.0], [10.0, 10.0, 10.0, 10.0]).unwrap();
        let inst = MarketInstance::new(vec![a.clone(), a], 100.0).unwrap();
        let s = solve_social_optimum(&inst, DEFAULT_TOL).unwrap();
        let (l, r) = s.dual_interval.expect("flat segment");
        assert!(r - l > 0.1);
    }

    #[test]
    fn excess_is_monotone_in_both_modes() {
        for seed in 0..5 {
            let inst = random_instance(8, 60.0, seed).unwrap();
            for mode in [ExcessMode::Social, ExcessMode::Penalized] {
                let mut last = f64::NEG_INFINITY;
                for k in 0..100 {
                    let x = -0.5 + 2.0 * k as f64 / 99.0;
                    let e = aggregate_excess(&inst, x, mode).unwrap();
                    assert!(e >= last - 1e-9);
                    last = e;
                }
            }
        }
    }

    #[test]
    fn primal_is_unique_across_brackets() {
        for seed in 0..10 {
            let inst = random_instance(6, 80.0, seed).unwrap();
            let coarse = solve_gne_direct_with(&inst, 1e-3, DEFAULT_BALANCE_TOL).unwrap();
            let fine = solve_gne_direct_with(&inst, 1e-12, 1e-10).unwrap();
            for i in 0..6 {
                assert!((coarse.p[i] - fine.p[i]).abs() <= 1e-6);
                assert!((coarse.d[i] - fine.d[i]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn quadratic_form_matches_dense_hessian() {
        let inst = random_instance(5, 50.0, 3).unwrap();
        let p = vec![1.0; 5];
        let d = vec![2.0; 5];
        let h = potential_hessian(&inst, &p, &d);
        let x: Vec<f64> = (0..10).map(|k| (k as f64 * 0.7).sin()).collect();
        let dense: f64 = (0..10)
            .map(|r| (0..10).map(|c| x[r] * h[r * 10 + c] * x[c]).sum::<f64>())
            .sum();
        assert_abs_diff_eq!(
            dense,
            potential_quadratic_form(&inst, &p, &d, &x),
            epsilon = 1e-12
        );
    }
}
