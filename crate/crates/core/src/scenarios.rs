//! Instance builders and experiment drivers.
//!
//! Every driver is deterministic in its inputs; random draws go through
//! `ChaCha8Rng` seeded from explicit `u64` seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bidding::{run_bidding, BiddingConfig, Schedule};
use crate::equilibrium::{
    solve_gne_direct, solve_self_sufficiency_profile, solve_social_optimum, MarketInstance,
};
use crate::error::{Result, SharingError};
use crate::metrics::{net_costs, poa_lower_bound, price_of_anarchy, sharing_payoffs};
use crate::prosumer::{solve_self_sufficiency, Prosumer, QuadraticCurves, DEFAULT_TOL};

/// Redraws allowed per prosumer when a draw has a non-negative stand-alone cost.
pub const MAX_A3_RETRIES: usize = 1000;

/// The three-prosumer reference market with `a = 100`.
pub fn builtin_three_prosumer() -> MarketInstance {
    let rows = [
        ([0.015, 0.038, -0.008, 0.8], [0.0, 20.0, 5.0, 15.0]),
        ([0.008, 0.047, -0.014, 0.5], [0.0, 25.0, 7.0, 18.0]),
        ([0.011, 0.056, -0.009, 0.4], [0.0, 30.0, 10.0, 25.0]),
    ];
    let prosumers = rows
        .iter()
        .enumerate()
        .map(|(id, (c, b))| Prosumer::quadratic(id, *c, *b).expect("reference data is valid"))
        .collect();
    MarketInstance::new(prosumers, 100.0).expect("reference market is feasible")
}

/// Uniform ranges for random prosumers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingRanges {
    pub cost_quadratic: (f64, f64),
    pub cost_linear: (f64, f64),
    pub utility_quadratic: (f64, f64),
    pub utility_linear: (f64, f64),
    pub p_max: (f64, f64),
    pub d_min: (f64, f64),
    pub d_max: (f64, f64),
}

impl Default for SamplingRanges {
    fn default() -> Self {
        Self {
            cost_quadratic: (0.01, 0.02),
            cost_linear: (0.02, 0.08),
            utility_quadratic: (-0.01, -0.005),
            utility_linear: (0.0, 1.0),
            p_max: (20.0, 40.0),
            d_min: (5.0, 10.0),
            d_max: (15.0, 30.0),
        }
    }
}

impl SamplingRanges {
    /// Draws one prosumer; consumes exactly seven uniforms in field order.
    pub fn sample<R: Rng>(&self, rng: &mut R, id: usize) -> Prosumer {
        let mut u = |(lo, hi): (f64, f64)| rng.gen_range(lo..=hi);
        let c2 = u(self.cost_quadratic);
        let c1 = u(self.cost_linear);
        let u2 = u(self.utility_quadratic);
        let u1 = u(self.utility_linear);
        let p_max = u(self.p_max);
        let d_min = u(self.d_min);
        let d_max = u(self.d_max);
        Prosumer::quadratic(id, [c2, c1, u2, u1], [0.0, p_max, d_min, d_max])
            .expect("sampling ranges are valid")
    }
}

fn require_size(size: usize) -> Result<()> {
    if size < 2 {
        return Err(SharingError::param(format!(
            "need at least two prosumers, got {size}"
        )));
    }
    Ok(())
}

/// `size` prosumers drawn independently from the default ranges.
///
/// Prosumers are drawn in order, so the first `k` prosumers of a larger
/// instance equal the instance of size `k` with the same seed.
pub fn random_instance(size: usize, a: f64, seed: u64) -> Result<MarketInstance> {
    require_size(size)?;
    let ranges = SamplingRanges::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prosumers = (0..size).map(|id| ranges.sample(&mut rng, id)).collect();
    let instance = MarketInstance::new(prosumers, a)?;
    instance.check_feasible()?;
    instance.check_self_sufficiency_feasible()?;
    Ok(instance)
}

fn self_cost(prosumer: &Prosumer) -> Result<f64> {
    let (p, d) = solve_self_sufficiency(prosumer, DEFAULT_TOL)?;
    Ok(prosumer.net_cost(p, d))
}

/// Draws one prosumer, redrawing until its stand-alone net cost is negative.
fn sample_with_a3<R: Rng>(
    ranges: &SamplingRanges,
    rng: &mut R,
    id: usize,
) -> Result<(Prosumer, usize)> {
    for retries in 0..=MAX_A3_RETRIES {
        let pr = ranges.sample(rng, id);
        if self_cost(&pr)? < 0.0 {
            return Ok((pr, retries));
        }
    }
    Err(SharingError::NonNegativeSelfCost { ids: vec![id] })
}

/// Like [`random_instance`], but prosumers with a non-negative stand-alone
/// net cost are redrawn. Returns the instance and the number of redraws.
pub fn random_instance_a3(size: usize, a: f64, seed: u64) -> Result<(MarketInstance, usize)> {
    require_size(size)?;
    let ranges = SamplingRanges::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prosumers = Vec::with_capacity(size);
    let mut redraws = 0;
    for id in 0..size {
        let (pr, r) = sample_with_a3(&ranges, &mut rng, id)?;
        prosumers.push(pr);
        redraws += r;
    }
    let instance = MarketInstance::new(prosumers, a)?;
    instance.check_feasible()?;
    Ok((instance, redraws))
}

/// One cell of a tabular report.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<u64> for Cell {
    fn from(x: u64) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<bool> for Cell {
    fn from(x: bool) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::Text(x.to_string())
    }
}

/// Flat table produced by an experiment driver.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioReport {
    pub tag: String,
    pub seeds: Vec<u64>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl ScenarioReport {
    fn new(tag: &str, seeds: Vec<u64>, columns: &[&str]) -> Self {
        Self {
            tag: tag.to_string(),
            seeds,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Planner maximizes reported welfare; no payments.
    Centralized,
    /// Sharing market re-equilibrated with the reported curves.
    Sharing,
    /// Sharing market where the other prosumers keep their truthful
    /// equilibrium bids and only the misreporting prosumer re-optimizes.
    SharingUnilateral,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Centralized => "centralized",
            Regime::Sharing => "sharing",
            Regime::SharingUnilateral => "sharing_unilateral",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MisreportPoint {
    pub regime: Regime,
    pub scale: f64,
    /// Realized net utility of each prosumer under its true curves.
    pub net_utility: Vec<f64>,
    pub total: f64,
}

/// `count` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// The 41-point grid over [0.8, 1.2]; index 20 is exactly 1.0.
pub fn default_misreport_scales() -> Vec<f64> {
    (0..41).map(|k| (80 + k) as f64 / 100.0).collect()
}

/// One prosumer reports all four curve coefficients multiplied by each scale.
///
/// The regime's outcome is computed from the reported curves; realized net
/// utilities use the true curves at that outcome. Under sharing the realized
/// utility includes the market payment.
pub fn misreport_sweep(
    instance: &MarketInstance,
    index: usize,
    scales: &[f64],
    regime: Regime,
) -> Result<Vec<MisreportPoint>> {
    let target = instance
        .prosumers()
        .get(index)
        .ok_or_else(|| SharingError::param(format!("no prosumer at index {index}")))?;
    let truth = target
        .curves()
        .as_quadratic()
        .ok_or_else(|| SharingError::param("misreporting needs quadratic curves"))?;
    let mut out = Vec::with_capacity(scales.len());
    let mut truthful = None;
    for &scale in scales {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(SharingError::param(format!(
                "scale must be positive, got {scale}"
            )));
        }
        let mut reported = instance.prosumers().to_vec();
        reported[index] = target.with_curves(truth.scaled(scale))?;
        let reported = MarketInstance::new(reported, instance.market_sensitivity())?;
        let costs = match regime {
            Regime::Centralized => {
                let s = solve_social_optimum(&reported, DEFAULT_TOL)?;
                net_costs(instance, &s)
            }
            Regime::Sharing => {
                let g = solve_gne_direct(&reported, DEFAULT_TOL)?;
                sharing_payoffs(instance, &g)?
            }
            Regime::SharingUnilateral => {
                if truthful.is_none() {
                    truthful = Some(solve_gne_direct(instance, DEFAULT_TOL)?);
                }
                let base = truthful.as_ref().expect("set above");
                unilateral_payoffs(instance, base, &reported.prosumers()[index], index)?
            }
        };
        let net_utility: Vec<f64> = costs.iter().map(|c| -c).collect();
        out.push(MisreportPoint {
            regime,
            scale,
            total: net_utility.iter().sum(),
            net_utility,
        });
    }
    Ok(out)
}

/// Payoffs when prosumer `index` (with curves `reported`) best-responds to
/// the other prosumers' fixed bids from `truthful`.
///
/// With `B` the others' bid total, the deviator's shared quantity `q = d - p`
/// pins its bid to `(I q + B) / (I - 1)` and the price to
/// `(q + B) / (a (I - 1))`, so its cost is
/// `f - u + q^2 / (a (I - 1)) + B q / (a (I - 1))`. That is the
/// price-anticipating objective with sensitivity `a / 2` at price
/// `B / (a (I - 1))`. The others keep `(p, d, b)`; their payoffs use the new
/// price.
fn unilateral_payoffs(
    instance: &MarketInstance,
    truthful: &crate::equilibrium::EquilibriumSolution,
    reported: &Prosumer,
    index: usize,
) -> Result<Vec<f64>> {
    let n = instance.len();
    let a = instance.market_sensitivity();
    let scale = a * (n - 1) as f64;
    let bids = truthful
        .bids
        .as_ref()
        .ok_or(SharingError::MissingField("bids"))?;
    let others: f64 = bids
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != index)
        .map(|(_, b)| b)
        .sum();
    let r = crate::prosumer::solve_surrogate_best_response(
        reported,
        others / scale,
        0.5 * a,
        n,
        DEFAULT_TOL,
    )?;
    let q = r.d - r.p;
    let own_bid = (n as f64 * q + others) / (n - 1) as f64;
    let price = (own_bid + others) / (a * n as f64);
    Ok(instance
        .prosumers()
        .iter()
        .enumerate()
        .map(|(j, pr)| {
            let (p, d, b) = if j == index {
                (r.p, r.d, own_bid)
            } else {
                (truthful.p[j], truthful.d[j], bids[j])
            };
            pr.net_cost(p, d) + price * (-a * price + b)
        })
        .collect())
}

pub fn misreport_report(points: &[MisreportPoint], size: usize) -> ScenarioReport {
    let mut columns = vec!["regime".to_string(), "scale".to_string()];
    columns.extend((0..size).map(|i| format!("net_utility_{i}")));
    columns.push("total".to_string());
    let mut report = ScenarioReport {
        tag: "misreport".into(),
        seeds: Vec::new(),
        columns,
        rows: Vec::new(),
    };
    for pt in points {
        let mut row = vec![Cell::from(pt.regime.as_str()), pt.scale.into()];
        row.extend(pt.net_utility.iter().map(|&x| Cell::from(x)));
        row.push(pt.total.into());
        report.push(row);
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoaPoint {
    pub seed: u64,
    pub size: usize,
    pub poa: f64,
    pub relative_gap: f64,
    pub bound: f64,
    pub c: f64,
    pub redraws: usize,
}

/// Price of anarchy of random markets across sizes and seeds.
///
/// Instances are drawn with [`random_instance_a3`], since the analytical bound
/// assumes negative stand-alone costs.
pub fn poa_vs_size(sizes: &[usize], a: f64, seeds: &[u64]) -> Result<Vec<PoaPoint>> {
    let mut out = Vec::with_capacity(sizes.len() * seeds.len());
    for &seed in seeds {
        for &size in sizes {
            let (inst, redraws) = random_instance_a3(size, a, seed)?;
            out.push(poa_point(&inst, seed, redraws)?);
        }
    }
    Ok(out)
}

/// Price of anarchy and its analytical bound for one instance.
pub fn poa_point(instance: &MarketInstance, seed: u64, redraws: usize) -> Result<PoaPoint> {
    let gne = solve_gne_direct(instance, DEFAULT_TOL)?;
    let social = solve_social_optimum(instance, DEFAULT_TOL)?;
    let alone = solve_self_sufficiency_profile(instance, DEFAULT_TOL)?;
    let poa = price_of_anarchy(instance, &gne, &social)?;
    let bound = poa_lower_bound(instance, &alone)?;
    Ok(PoaPoint {
        seed,
        size: instance.len(),
        poa: poa.ratio,
        relative_gap: poa.relative_gap,
        bound: bound.bound,
        c: bound.c,
        redraws,
    })
}

pub fn poa_report(points: &[PoaPoint]) -> ScenarioReport {
    let mut seeds: Vec<u64> = points.iter().map(|p| p.seed).collect();
    seeds.dedup();
    let mut report = ScenarioReport::new(
        "poa_vs_size",
        seeds,
        &[
            "seed",
            "size",
            "poa",
            "relative_gap",
            "lower_bound",
            "c",
            "redraws",
        ],
    );
    for p in points {
        report.push(vec![
            p.seed.into(),
            p.size.into(),
            p.poa.into(),
            p.relative_gap.into(),
            p.bound.into(),
            p.c.into(),
            p.redraws.into(),
        ]);
    }
    report
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityPoint {
    pub types: usize,
    pub savings: Vec<f64>,
    pub mean: f64,
    /// Sample variance (divisor `n - 1`); zero for a single draw.
    pub variance: f64,
}

fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let variance = if n > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    (mean, variance)
}

fn sub_seed(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(a.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(b.wrapping_mul(0x94D0_49BB_1331_11EB))
}

/// Relative saving of sharing over self-sufficiency as the population mixes
/// more prosumer types.
///
/// For `k` types, `k` parameter tuples are drawn and each is given to `size / k`
/// consecutive prosumers. The saving of one draw is
/// `(J_self - J_gne) / |J_self|` with totals over all prosumers.
pub fn diversity_experiment(
    size: usize,
    type_counts: &[usize],
    draws: usize,
    a: f64,
    seed: u64,
) -> Result<Vec<DiversityPoint>> {
    require_size(size)?;
    let ranges = SamplingRanges::default();
    let mut out = Vec::with_capacity(type_counts.len());
    for &k in type_counts {
        if k == 0 || !size.is_multiple_of(k) {
            return Err(SharingError::param(format!(
                "type count {k} does not divide {size}"
            )));
        }
        let mut savings = Vec::with_capacity(draws);
        for draw in 0..draws {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, k as u64, draw as u64));
            let mut types = Vec::with_capacity(k);
            for t in 0..k {
                types.push(sample_with_a3(&ranges, &mut rng, t)?.0);
            }
            let group = size / k;
            let prosumers = (0..size)
                .map(|id| {
                    let proto = &types[id / group];
                    Prosumer::new(
                        id,
                        proto.curves().clone(),
                        (proto.p_min(), proto.p_max()),
                        (proto.d_min(), proto.d_max()),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let inst = MarketInstance::new(prosumers, a)?;
            let gne = solve_gne_direct(&inst, DEFAULT_TOL)?;
            let alone = solve_self_sufficiency_profile(&inst, DEFAULT_TOL)?;
            let j_self = alone.total_net_cost(&inst);
            let j_gne = gne.total_net_cost(&inst);
            savings.push((j_self - j_gne) / j_self.abs());
        }
        let (mean, variance) = mean_and_variance(&savings);
        out.push(DiversityPoint {
            types: k,
            savings,
            mean,
            variance,
        });
    }
    Ok(out)
}

/// Per-draw rows: `types, draw, saving`.
pub fn diversity_report(points: &[DiversityPoint], seed: u64) -> ScenarioReport {
    let mut report = ScenarioReport::new("diversity", vec![seed], &["types", "draw", "saving"]);
    for p in points {
        for (draw, s) in p.savings.iter().enumerate() {
            report.push(vec![p.types.into(), draw.into(), (*s).into()]);
        }
    }
    report
}

/// Summary rows: `types, draws, mean_saving, variance_saving`.
pub fn diversity_summary(points: &[DiversityPoint], seed: u64) -> ScenarioReport {
    let mut report = ScenarioReport::new(
        "diversity_summary",
        vec![seed],
        &["types", "draws", "mean_saving", "variance_saving"],
    );
    for p in points {
        report.push(vec![
            p.types.into(),
            p.savings.len().into(),
            p.mean.into(),
            p.variance.into(),
        ]);
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayPoint {
    pub max_delay: usize,
    pub seed: u64,
    pub converged: bool,
    pub iterations: usize,
    pub final_price: f64,
}

/// Miss probability used by [`delay_experiment`].
pub const DELAY_MISS_PROBABILITY: f64 = 0.8;

/// Asynchronous bidding for each delay cap and seed.
pub fn delay_experiment(
    instance: &MarketInstance,
    base: &BiddingConfig,
    delays: &[usize],
    seeds: &[u64],
) -> Result<Vec<DelayPoint>> {
    let mut out = Vec::with_capacity(delays.len() * seeds.len());
    for &max_delay in delays {
        if max_delay == 0 {
            return Err(SharingError::param("delays must be >= 1"));
        }
        for &seed in seeds {
            let config = BiddingConfig {
                schedule: Schedule::Asynchronous {
                    miss_probability: DELAY_MISS_PROBABILITY,
                    max_delay,
                    seed,
                },
                ..*base
            };
            let (_, trace) = run_bidding(instance, &config)?;
            out.push(DelayPoint {
                max_delay,
                seed,
                converged: trace.converged(),
                iterations: trace.iterations(),
                final_price: trace.final_price().unwrap_or(f64::NAN),
            });
        }
    }
    Ok(out)
}

pub fn delay_report(points: &[DelayPoint]) -> ScenarioReport {
    let mut seeds: Vec<u64> = points.iter().map(|p| p.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut report = ScenarioReport::new(
        "delay",
        seeds,
        &[
            "max_delay",
            "seed",
            "converged",
            "iterations",
            "final_price",
        ],
    );
    for p in points {
        report.push(vec![
            p.max_delay.into(),
            p.seed.into(),
            p.converged.into(),
            p.iterations.into(),
            p.final_price.into(),
        ]);
    }
    report
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityPoint {
    pub a: f64,
    pub a_min: f64,
    pub termination: &'static str,
    pub converged: bool,
    pub iterations: usize,
    pub final_price: f64,
}

/// Bidding on one population under different market sensitivities.
pub fn sensitivity_sweep(
    instance: &MarketInstance,
    a_values: &[f64],
    config: &BiddingConfig,
) -> Result<Vec<SensitivityPoint>> {
    let mut out = Vec::with_capacity(a_values.len());
    for &a in a_values {
        let inst = instance.with_market_sensitivity(a)?;
        let (_, trace) = run_bidding(&inst, config)?;
        out.push(SensitivityPoint {
            a,
            a_min: inst.min_market_sensitivity(),
            termination: trace.termination.as_str(),
            converged: trace.converged(),
            iterations: trace.iterations(),
            final_price: trace.final_price().unwrap_or(f64::NAN),
        });
    }
    Ok(out)
}

pub fn sensitivity_report(points: &[SensitivityPoint], seed: Option<u64>) -> ScenarioReport {
    let mut report = ScenarioReport::new(
        "sensitivity",
        seed.into_iter().collect(),
        &[
            "a",
            "a_min",
            "termination",
            "converged",
            "iterations",
            "final_price",
        ],
    );
    for p in points {
        report.push(vec![
            p.a.into(),
            p.a_min.into(),
            p.termination.into(),
            p.converged.into(),
            p.iterations.into(),
            p.final_price.into(),
        ]);
    }
    report
}

/// Prosumers with identical curves and boxes; every regime coincides.
pub fn identical_population(size: usize, a: f64) -> Result<MarketInstance> {
    require_size(size)?;
    let proto = QuadraticCurves::new(0.015, 0.038, -0.008, 0.8);
    let prosumers = (0..size)
        .map(|id| Prosumer::new(id, proto, (0.0, 20.0), (5.0, 15.0)))
        .collect::<Result<Vec<_>>>()?;
    MarketInstance::new(prosumers, a)
}
