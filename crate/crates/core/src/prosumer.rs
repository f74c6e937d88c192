//! Prosumer model and the single-prosumer subproblems.
//!
//! A prosumer owns a strictly convex production cost `f` and a strictly
//! concave consumption utility `u`, each acting on its own capacity interval.
//! Everything in this module is a pure function of one prosumer plus scalar
//! market parameters, so it can be evaluated in parallel across a population.

use std::fmt;
use std::sync::Arc;

use crate::error::{Result, SharingError};
use crate::numeric::{bisect_increasing, clip};

/// Default tolerance on price-like scalars.
pub const DEFAULT_TOL: f64 = 1e-9;

/// Samples per axis when checking curvature of user-supplied curves.
const CURVATURE_SAMPLES: usize = 101;

/// Cost/utility pair described by value, slope and curvature.
///
/// Implementations must keep `cost_curvature` and `-utility_curvature`
/// strictly positive over the capacity box; [`Prosumer::new`] rejects curves
/// that violate this on a sampled grid.
pub trait CurvePair: fmt::Debug + Send + Sync {
    fn cost(&self, p: f64) -> f64;
    fn marginal_cost(&self, p: f64) -> f64;
    fn cost_curvature(&self, p: f64) -> f64;
    fn utility(&self, d: f64) -> f64;
    fn marginal_utility(&self, d: f64) -> f64;
    fn utility_curvature(&self, d: f64) -> f64;
}

/// `f(p) = c2 p^2 + c1 p` and `u(d) = u2 d^2 + u1 d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticCurves {
    pub cost_quadratic: f64,
    pub cost_linear: f64,
    pub utility_quadratic: f64,
    pub utility_linear: f64,
}

impl QuadraticCurves {
    pub fn new(
        cost_quadratic: f64,
        cost_linear: f64,
        utility_quadratic: f64,
        utility_linear: f64,
    ) -> Self {
        Self {
            cost_quadratic,
            cost_linear,
            utility_quadratic,
            utility_linear,
        }
    }

    /// All four coefficients multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(
            self.cost_quadratic * factor,
            self.cost_linear * factor,
            self.utility_quadratic * factor,
            self.utility_linear * factor,
        )
    }
}

impl CurvePair for QuadraticCurves {
    fn cost(&self, p: f64) -> f64 {
        self.cost_quadratic * p * p + self.cost_linear * p
    }
    fn marginal_cost(&self, p: f64) -> f64 {
        2.0 * self.cost_quadratic * p + self.cost_linear
    }
    fn cost_curvature(&self, _p: f64) -> f64 {
        2.0 * self.cost_quadratic
    }
    fn utility(&self, d: f64) -> f64 {
        self.utility_quadratic * d * d + self.utility_linear * d
    }
    fn marginal_utility(&self, d: f64) -> f64 {
        2.0 * self.utility_quadratic * d + self.utility_linear
    }
    fn utility_curvature(&self, _d: f64) -> f64 {
        2.0 * self.utility_quadratic
    }
}

/// The built-in quadratic pair or an arbitrary user-supplied one.
#[derive(Debug, Clone)]
pub enum ConvexCurvePair {
    Quadratic(QuadraticCurves),
    Custom(Arc<dyn CurvePair>),
}

impl ConvexCurvePair {
    fn as_dyn(&self) -> &dyn CurvePair {
        match self {
            ConvexCurvePair::Quadratic(q) => q,
            ConvexCurvePair::Custom(c) => c.as_ref(),
        }
    }

    pub fn as_quadratic(&self) -> Option<&QuadraticCurves> {
        match self {
            ConvexCurvePair::Quadratic(q) => Some(q),
            ConvexCurvePair::Custom(_) => None,
        }
    }
}

/// Custom pairs compare equal only when they share the same allocation.
impl PartialEq for ConvexCurvePair {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ConvexCurvePair::Quadratic(a), ConvexCurvePair::Quadratic(b)) => a == b,
            (ConvexCurvePair::Custom(a), ConvexCurvePair::Custom(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

impl From<QuadraticCurves> for ConvexCurvePair {
    fn from(q: QuadraticCurves) -> Self {
        ConvexCurvePair::Quadratic(q)
    }
}

/// Which side of its capacity interval a variable sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundState {
    Lower,
    Interior,
    Upper,
    /// Degenerate interval, both bounds active.
    Fixed,
}

impl BoundState {
    pub fn at_lower(self) -> bool {
        matches!(self, BoundState::Lower | BoundState::Fixed)
    }
    pub fn at_upper(self) -> bool {
        matches!(self, BoundState::Upper | BoundState::Fixed)
    }
    pub fn is_interior(self) -> bool {
        self == BoundState::Interior
    }
}

/// A production/demand pair chosen in response to an (effective) price.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResponsePoint {
    pub p: f64,
    pub d: f64,
    pub effective_price: f64,
    pub p_state: BoundState,
    pub d_state: BoundState,
}

impl ResponsePoint {
    /// Largest first-order violation at interior coordinates.
    pub fn stationarity_residual(&self, prosumer: &Prosumer) -> f64 {
        let mut worst: f64 = 0.0;
        if self.p_state.is_interior() {
            worst = worst.max((prosumer.marginal_cost(self.p) - self.effective_price).abs());
        }
        if self.d_state.is_interior() {
            worst = worst.max((prosumer.marginal_utility(self.d) - self.effective_price).abs());
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prosumer {
    id: usize,
    curves: ConvexCurvePair,
    p_min: f64,
    p_max: f64,
    d_min: f64,
    d_max: f64,
}

impl Prosumer {
    pub fn new(
        id: usize,
        curves: impl Into<ConvexCurvePair>,
        (p_min, p_max): (f64, f64),
        (d_min, d_max): (f64, f64),
    ) -> Result<Self> {
        let curves = curves.into();
        for (name, v) in [
            ("p_min", p_min),
            ("p_max", p_max),
            ("d_min", d_min),
            ("d_max", d_max),
        ] {
            if !v.is_finite() {
                return Err(SharingError::InvalidBounds {
                    id,
                    reason: format!("{name} is not finite"),
                });
            }
        }
        if p_min > p_max {
            return Err(SharingError::InvalidBounds {
                id,
                reason: format!("p_min {p_min} > p_max {p_max}"),
            });
        }
        if d_min > d_max {
            return Err(SharingError::InvalidBounds {
                id,
                reason: format!("d_min {d_min} > d_max {d_max}"),
            });
        }
        let prosumer = Self {
            id,
            curves,
            p_min,
            p_max,
            d_min,
            d_max,
        };
        prosumer.check_curves()?;
        Ok(prosumer)
    }

    /// Quadratic prosumer from `[c2, c1, u2, u1]` and `[p_min, p_max, d_min, d_max]`.
    pub fn quadratic(id: usize, coefficients: [f64; 4], bounds: [f64; 4]) -> Result<Self> {
        let [c2, c1, u2, u1] = coefficients;
        Self::new(
            id,
            QuadraticCurves::new(c2, c1, u2, u1),
            (bounds[0], bounds[1]),
            (bounds[2], bounds[3]),
        )
    }

    fn check_curves(&self) -> Result<()> {
        let bad = |reason: String| SharingError::InvalidCurve {
            id: self.id,
            reason,
        };
        match &self.curves {
            ConvexCurvePair::Quadratic(q) => {
                let coefficients = [
                    q.cost_quadratic,
                    q.cost_linear,
                    q.utility_quadratic,
                    q.utility_linear,
                ];
                if coefficients.iter().any(|c| !c.is_finite()) {
                    return Err(bad("non-finite coefficient".into()));
                }
                if q.cost_quadratic <= 0.0 {
                    return Err(bad(format!(
                        "cost curvature {} must be > 0",
                        q.cost_quadratic
                    )));
                }
                if q.utility_quadratic >= 0.0 {
                    return Err(bad(format!(
                        "utility curvature {} must be < 0",
                        q.utility_quadratic
                    )));
                }
            }
            ConvexCurvePair::Custom(c) => {
                for p in sample_axis(self.p_min, self.p_max) {
                    let k = c.cost_curvature(p);
                    if !(k > 0.0 && k.is_finite()) {
                        return Err(bad(format!(
                            "cost not strictly convex at p = {p} (f'' = {k})"
                        )));
                    }
                }
                for d in sample_axis(self.d_min, self.d_max) {
                    let k = c.utility_curvature(d);
                    if !(k < 0.0 && k.is_finite()) {
                        return Err(bad(format!(
                            "utility not strictly concave at d = {d} (u'' = {k})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn id(&self) -> usize {
        self.id
    }
    pub fn curves(&self) -> &ConvexCurvePair {
        &self.curves
    }
    pub fn p_min(&self) -> f64 {
        self.p_min
    }
    pub fn p_max(&self) -> f64 {
        self.p_max
    }
    pub fn d_min(&self) -> f64 {
        self.d_min
    }
    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    /// Same bounds, different curves.
    pub fn with_curves(&self, curves: impl Into<ConvexCurvePair>) -> Result<Self> {
        Self::new(
            self.id,
            curves,
            (self.p_min, self.p_max),
            (self.d_min, self.d_max),
        )
    }

    pub fn cost(&self, p: f64) -> f64 {
        self.curves.as_dyn().cost(p)
    }
    pub fn utility(&self, d: f64) -> f64 {
        self.curves.as_dyn().utility(d)
    }
    pub fn marginal_cost(&self, p: f64) -> f64 {
        self.curves.as_dyn().marginal_cost(p)
    }
    pub fn marginal_utility(&self, d: f64) -> f64 {
        self.curves.as_dyn().marginal_utility(d)
    }

    /// Net cost `f(p) - u(d)`; negative values are net utility.
    pub fn net_cost(&self, p: f64, d: f64) -> f64 {
        self.cost(p) - self.utility(d)
    }

    /// Intersection of the production and demand intervals, if nonempty.
    pub fn self_sufficiency_box(&self) -> Option<(f64, f64)> {
        let lo = self.p_min.max(self.d_min);
        let hi = self.p_max.min(self.d_max);
        (lo <= hi).then_some((lo, hi))
    }

    /// Production that equates marginal cost with `price`, clipped to capacity.
    pub fn production_at(&self, price: f64) -> (f64, BoundState) {
        if self.p_min == self.p_max {
            return (self.p_min, BoundState::Fixed);
        }
        match &self.curves {
            ConvexCurvePair::Quadratic(q) => {
                let raw = (price - q.cost_linear) / (2.0 * q.cost_quadratic);
                classify(raw, self.p_min, self.p_max)
            }
            ConvexCurvePair::Custom(c) => {
                if price <= c.marginal_cost(self.p_min) {
                    (self.p_min, BoundState::Lower)
                } else if price >= c.marginal_cost(self.p_max) {
                    (self.p_max, BoundState::Upper)
                } else {
                    let (lo, hi, _) = bisect_increasing(
                        |x| c.marginal_cost(x) - price,
                        self.p_min,
                        self.p_max,
                        0.0,
                    );
                    (0.5 * (lo + hi), BoundState::Interior)
                }
            }
        }
    }

    /// Demand that equates marginal utility with `price`, clipped to capacity.
    pub fn demand_at(&self, price: f64) -> (f64, BoundState) {
        if self.d_min == self.d_max {
            return (self.d_min, BoundState::Fixed);
        }
        match &self.curves {
            ConvexCurvePair::Quadratic(q) => {
                let raw = (price - q.utility_linear) / (2.0 * q.utility_quadratic);
                classify(raw, self.d_min, self.d_max)
            }
            ConvexCurvePair::Custom(c) => {
                if price >= c.marginal_utility(self.d_min) {
                    (self.d_min, BoundState::Lower)
                } else if price <= c.marginal_utility(self.d_max) {
                    (self.d_max, BoundState::Upper)
                } else {
                    // u' is decreasing, so price - u'(x) is increasing in x.
                    let (lo, hi, _) = bisect_increasing(
                        |x| price - c.marginal_utility(x),
                        self.d_min,
                        self.d_max,
                        0.0,
                    );
                    (0.5 * (lo + hi), BoundState::Interior)
                }
            }
        }
    }

    /// Largest `1/f''` and `-1/u''` over the capacity box.
    ///
    /// Exact for quadratics; sampled on a 101-point grid per axis otherwise.
    pub fn inverse_curvature_bounds(&self) -> (f64, f64) {
        match &self.curves {
            ConvexCurvePair::Quadratic(q) => (
                1.0 / (2.0 * q.cost_quadratic),
                1.0 / (2.0 * q.utility_quadratic.abs()),
            ),
            ConvexCurvePair::Custom(c) => {
                let cost = sample_axis(self.p_min, self.p_max)
                    .map(|p| 1.0 / c.cost_curvature(p))
                    .fold(0.0, f64::max);
                let utility = sample_axis(self.d_min, self.d_max)
                    .map(|d| -1.0 / c.utility_curvature(d))
                    .fold(0.0, f64::max);
                (cost, utility)
            }
        }
    }
}

fn classify(raw: f64, lo: f64, hi: f64) -> (f64, BoundState) {
    if raw <= lo {
        (lo, BoundState::Lower)
    } else if raw >= hi {
        (hi, BoundState::Upper)
    } else {
        (raw, BoundState::Interior)
    }
}

fn sample_axis(lo: f64, hi: f64) -> impl Iterator<Item = f64> {
    let n = CURVATURE_SAMPLES - 1;
    (0..=n).map(move |k| lo + (hi - lo) * k as f64 / n as f64)
}

/// Net cost `f(p) - u(d)` of one prosumer.
pub fn net_cost(prosumer: &Prosumer, p: f64, d: f64) -> f64 {
    prosumer.net_cost(p, d)
}

/// Best balanced operating point `p = d` when trading is not possible.
///
/// Fails with an A2 error when the production and demand intervals do not
/// overlap.
pub fn solve_self_sufficiency(prosumer: &Prosumer, tol: f64) -> Result<(f64, f64)> {
    let (lo, hi) =
        prosumer
            .self_sufficiency_box()
            .ok_or(SharingError::SelfSufficiencyInfeasible {
                id: prosumer.id,
                lower: prosumer.p_min.max(prosumer.d_min),
                upper: prosumer.p_max.min(prosumer.d_max),
            })?;
    let x = match &prosumer.curves {
        ConvexCurvePair::Quadratic(q) => {
            let unconstrained = (q.utility_linear - q.cost_linear)
                / (2.0 * (q.cost_quadratic - q.utility_quadratic));
            clip(unconstrained, lo, hi)
        }
        ConvexCurvePair::Custom(c) => {
            let slope = |x: f64| c.marginal_cost(x) - c.marginal_utility(x);
            if lo == hi || slope(lo) >= 0.0 {
                lo
            } else if slope(hi) <= 0.0 {
                hi
            } else {
                let (a, b, _) = bisect_increasing(slope, lo, hi, tol.max(0.0) * 1e-3);
                0.5 * (a + b)
            }
        }
    };
    Ok((x, x))
}

/// Price-taking response: marginal cost and marginal utility both equal `price`.
pub fn marginal_response(prosumer: &Prosumer, price: f64) -> ResponsePoint {
    let (p, p_state) = prosumer.production_at(price);
    let (d, d_state) = prosumer.demand_at(price);
    ResponsePoint {
        p,
        d,
        effective_price: price,
        p_state,
        d_state,
    }
}

fn check_market_params(a: f64, participants: usize) -> Result<()> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(SharingError::param(format!(
            "market sensitivity must be > 0, got {a}"
        )));
    }
    if participants < 2 {
        return Err(SharingError::param(format!(
            "at least two prosumers required, got {participants}"
        )));
    }
    Ok(())
}

/// Price-anticipating response of one prosumer to the broadcast price `price`.
///
/// Minimizes `f(p) - u(d) + (d - p)^2 / (2 a (I - 1)) + price (d - p)` over the
/// capacity box by locating the effective price `mu = price + (d - p)/(a (I-1))`
/// at which the marginal response is self-consistent.
pub fn solve_surrogate_best_response(
    prosumer: &Prosumer,
    price: f64,
    a: f64,
    participants: usize,
    tol: f64,
) -> Result<ResponsePoint> {
    check_market_params(a, participants)?;
    let scale = a * (participants - 1) as f64;
    let residual = |mu: f64| {
        let (p, _) = prosumer.production_at(mu);
        let (d, _) = prosumer.demand_at(mu);
        mu - price - (d - p) / scale
    };
    // (d - p) / scale is confined to [(d_min - p_max), (d_max - p_min)] / scale.
    let lower = price + (prosumer.d_min - prosumer.p_max) / scale - 1.0;
    let upper = price + (prosumer.d_max - prosumer.p_min) / scale + 1.0;
    let (lo, hi, _) = bisect_increasing(residual, lower, upper, tol);
    let mu = 0.5 * (lo + hi);
    let (p, p_state) = prosumer.production_at(mu);
    let (d, d_state) = prosumer.demand_at(mu);
    Ok(ResponsePoint {
        p,
        d,
        effective_price: price + (d - p) / scale,
        p_state,
        d_state,
    })
}

/// Value of the price-anticipating objective at `(p, d)`.
pub fn surrogate_objective(
    prosumer: &Prosumer,
    price: f64,
    a: f64,
    participants: usize,
    p: f64,
    d: f64,
) -> f64 {
    let gap = d - p;
    prosumer.net_cost(p, d) + gap * gap / (2.0 * a * (participants - 1) as f64) + price * gap
}

/// Smallest market sensitivity satisfying the A4 convergence condition.
pub fn min_market_sensitivity(prosumers: &[Prosumer], participants: usize) -> Result<f64> {
    if participants < 2 {
        return Err(SharingError::param(format!(
            "at least two prosumers required, got {participants}"
        )));
    }
    let factor = (2.0 * participants as f64 - 4.0) / (participants as f64 - 1.0);
    let sup = prosumers
        .iter()
        .map(|p| {
            let (c, u) = p.inverse_curvature_bounds();
            c.max(u)
        })
        .fold(0.0, f64::max);
    Ok(factor * sup)
}
