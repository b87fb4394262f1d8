//! The capacity model and proxy-pool anonymity bounds as executable code,
//! with Monte-Carlo estimators and brute-force oracles to check them.

pub mod oracle;
pub mod verify;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::proxy::pool::PoolTrace;

/// Slack for deciding that a floating value sits on an integer boundary.
const INTEGER_TOLERANCE: f64 = 1e-9;

/// Trials per independently seeded Monte-Carlo chunk.
const MC_CHUNK: u64 = 1 << 16;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyzerError {
    #[error("capacity vector has {capacities} entries but allocation has {types}")]
    DimensionMismatch { capacities: usize, types: usize },
    #[error("capacity {0} outside [0, 1]")]
    Capacity(f64),
    #[error("budget {budget} infeasible for {types} medium types")]
    InfeasibleBudget { budget: f64, types: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
}

fn param(msg: impl Into<String>) -> AnalyzerError {
    AnalyzerError::Parameter(msg.into())
}

/// Per-medium compromise probabilities `c_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CapacityVector(Vec<f64>);

impl CapacityVector {
    pub fn new(c: Vec<f64>) -> Result<Self, AnalyzerError> {
        if let Some(&bad) = c.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(AnalyzerError::Capacity(bad));
        }
        Ok(CapacityVector(c))
    }

    pub fn uniform(value: f64, d: usize) -> Result<Self, AnalyzerError> {
        Self::new(vec![value; d])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Fragments per medium type, `n_i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Allocation(Vec<u32>);

impl Allocation {
    pub fn new(n: Vec<u32>) -> Self {
        Allocation(n)
    }

    pub fn counts(&self) -> &[u32] {
        &self.0
    }

    pub fn types(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> u32 {
        self.0.iter().sum()
    }

    /// Medium types carrying at least one fragment.
    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, n)| **n > 0).map(|(i, _)| i)
    }

    pub fn is_balanced(&self) -> bool {
        let (lo, hi) = (self.0.iter().min(), self.0.iter().max());
        matches!((lo, hi), (Some(lo), Some(hi)) if hi - lo <= 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolParams {
    /// Pool size `P`.
    pub pool_size: usize,
    /// Size `a` of the surveilled subset.
    pub surveilled: usize,
    pub forward_probability: f64,
    pub max_hops: u32,
}

impl PoolParams {
    pub fn validate(&self) -> Result<(), AnalyzerError> {
        if self.pool_size == 0 {
            return Err(param("pool must be non-empty"));
        }
        if self.surveilled > self.pool_size {
            return Err(param(format!(
                "surveilled subset {} larger than pool {}",
                self.surveilled, self.pool_size
            )));
        }
        if !(0.0..1.0).contains(&self.forward_probability) {
            return Err(param("forward probability must lie in [0, 1)"));
        }
        if self.max_hops == 0 {
            return Err(param("hop cap must be at least 1"));
        }
        Ok(())
    }

    pub fn surveilled_fraction(&self) -> f64 {
        self.surveilled as f64 / self.pool_size as f64
    }
}

/// Exponent `k` of the per-type cost `c^k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostExponent(f64);

impl CostExponent {
    pub fn new(k: f64) -> Result<Self, AnalyzerError> {
        if k.is_finite() && k >= 1.0 {
            Ok(CostExponent(k))
        } else {
            Err(param(format!("cost exponent {k} must be at least 1")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `Π c_i^{n_i}`, with `0^0 = 1`.
pub fn recovery_probability(c: &CapacityVector, alloc: &Allocation) -> Result<f64, AnalyzerError> {
    if c.len() != alloc.types() {
        return Err(AnalyzerError::DimensionMismatch {
            capacities: c.len(),
            types: alloc.types(),
        });
    }
    Ok(c.0
        .iter()
        .zip(&alloc.0)
        .filter(|(_, n)| **n > 0)
        .map(|(c, n)| c.powi(*n as i32))
        .product())
}

fn check_budget(budget: f64, types: usize) -> Result<(), AnalyzerError> {
    if !(budget.is_finite() && budget > 0.0 && budget <= types as f64) {
        return Err(AnalyzerError::InfeasibleBudget { budget, types });
    }
    Ok(())
}

/// The adversary's best capacity vector under `Σ c_i ≤ B`, `c_i ≤ 1`.
///
/// Water-filling: the unconstrained optimum is `c_i = R·n_i/N` over the
/// unclamped types; any type pushed above 1 is pinned there and the rest
/// re-solved with the remaining budget. Pinning only raises `R/N` for the
/// survivors, so pinned types never need releasing.
pub fn adversary_optimum(
    budget: f64,
    alloc: &Allocation,
) -> Result<(CapacityVector, f64), AnalyzerError> {
    check_budget(budget, alloc.types())?;
    if alloc.total() == 0 {
        return Err(param("allocation carries no fragments"));
    }
    let mut c = vec![0.0; alloc.types()];
    let mut free: Vec<usize> = alloc.active().collect();
    let mut remaining = budget;
    loop {
        if remaining >= free.len() as f64 {
            for &i in &free {
                c[i] = 1.0;
            }
            break;
        }
        let weight: f64 = free.iter().map(|&i| alloc.0[i] as f64).sum();
        let (pinned, rest): (Vec<usize>, Vec<usize>) = free
            .iter()
            .partition(|&&i| remaining * alloc.0[i] as f64 / weight > 1.0);
        if pinned.is_empty() {
            for &i in &rest {
                c[i] = remaining * alloc.0[i] as f64 / weight;
            }
            break;
        }
        for &i in &pinned {
            c[i] = 1.0;
        }
        remaining -= pinned.len() as f64;
        free = rest;
    }
    let c = CapacityVector(c);
    let p = recovery_probability(&c, alloc)?;
    Ok((c, p))
}

/// The unclamped Lagrangian value `(B/n)^n · Π n_i^{n_i}`. Exceeds 1 when
/// some `B·n_i/n > 1`.
pub fn interior_optimum(budget: f64, alloc: &Allocation) -> f64 {
    let n = alloc.total() as f64;
    let log = n * (budget / n).ln()
        + alloc
            .0
            .iter()
            .filter(|k| **k > 0)
            .map(|&k| k as f64 * (k as f64).ln())
            .sum::<f64>();
    log.exp()
}

/// `(B/d)^n`, the adversary's best against a uniform allocation.
pub fn uniform_bound(budget: f64, d: u32, n: u32) -> f64 {
    (budget / d as f64).powi(n as i32)
}

/// The balanced allocation: every type gets `⌊n/d⌋` or `⌈n/d⌉`.
pub fn minimax_allocation(n: u32, d: u32) -> Result<Allocation, AnalyzerError> {
    if d == 0 {
        return Err(param("need at least one medium type"));
    }
    if d > n {
        return Err(param(format!(
            "{d} medium types cannot each carry one of {n} fragments"
        )));
    }
    let (base, extra) = (n / d, n % d);
    Ok(Allocation(
        (0..d).map(|i| base + u32::from(i < extra)).collect(),
    ))
}

/// Smallest integer `d` with `(B/d)^n ≤ ε`, i.e. `d ≥ B·ε^{-1/n}`.
pub fn required_diversity(budget: f64, n: u32, epsilon: f64) -> Result<u32, AnalyzerError> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(param(format!("epsilon {epsilon} must lie in (0, 1]")));
    }
    if n == 0 {
        return Err(param("need at least one fragment"));
    }
    if !(budget.is_finite() && budget > 0.0) {
        return Err(param(format!("budget {budget} must be positive")));
    }
    let bound = budget * epsilon.powf(-1.0 / n as f64);
    let d = (bound - INTEGER_TOLERANCE).ceil().max(1.0);
    if d > u32::MAX as f64 {
        return Err(param("required diversity overflows"));
    }
    Ok(d as u32)
}

/// Best recovery probability when capability costs `Σ c_i^k ≤ B` against a
/// uniform allocation: `(B/d)^{n/k}`, capped at 1.
pub fn convex_cost_optimum(budget: f64, d: u32, n: u32, k: CostExponent) -> Result<f64, AnalyzerError> {
    check_budget(budget, d as usize)?;
    Ok((budget / d as f64).powf(n as f64 / k.value()).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub estimate: f64,
    pub std_error: f64,
    pub trials: u64,
}

impl Estimate {
    fn from_hits(hits: u64, trials: u64) -> Self {
        let p = hits as f64 / trials as f64;
        Estimate {
            estimate: p,
            std_error: (p * (1.0 - p) / trials as f64).sqrt(),
            trials,
        }
    }

    /// Whether `truth` lies within `sigmas` standard errors. A zero standard
    /// error (all trials agreed) demands exact agreement.
    pub fn agrees_with(&self, truth: f64, sigmas: f64) -> bool {
        (self.estimate - truth).abs() <= sigmas * self.std_error + 1e-12
    }
}

/// Both event granularities of the compromise model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryEstimate {
    /// Every fragment-bearing medium type compromised, one Bernoulli(c_i)
    /// per type.
    pub per_type: Estimate,
    /// Every fragment intercepted, one Bernoulli(c_i) per fragment; the
    /// product form `Π c_i^{n_i}`.
    pub fragment_level: Estimate,
}

/// Monte-Carlo estimate of recovery. Trials are split into fixed-size
/// chunks, each with its own stream of the master seed, so the result does
/// not depend on how chunks are scheduled across threads.
pub fn monte_carlo_recovery(
    c: &CapacityVector,
    alloc: &Allocation,
    trials: u64,
    seed: u64,
) -> Result<RecoveryEstimate, AnalyzerError> {
    if trials == 0 {
        return Err(param("need at least one trial"));
    }
    if c.len() != alloc.types() {
        return Err(AnalyzerError::DimensionMismatch {
            capacities: c.len(),
            types: alloc.types(),
        });
    }
    let active: Vec<(f64, u32)> = alloc.active().map(|i| (c.0[i], alloc.0[i])).collect();
    let chunks = trials.div_ceil(MC_CHUNK);
    let (type_hits, frag_hits) = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk);
            let len = MC_CHUNK.min(trials - chunk * MC_CHUNK);
            let (mut by_type, mut by_frag) = (0u64, 0u64);
            for _ in 0..len {
                by_type += u64::from(active.iter().all(|(ci, _)| rng.gen::<f64>() < *ci));
                by_frag += u64::from(
                    active
                        .iter()
                        .all(|(ci, ni)| (0..*ni).all(|_| rng.gen::<f64>() < *ci)),
                );
            }
            (by_type, by_frag)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(RecoveryEstimate {
        per_type: Estimate::from_hits(type_hits, trials),
        fragment_level: Estimate::from_hits(frag_hits, trials),
    })
}

/// `(a/P)^h`: every one of `h` independently drawn hops is surveilled.
pub fn pool_trace_probability(p: &PoolParams, hops: u32) -> Result<f64, AnalyzerError> {
    p.validate()?;
    if hops == 0 {
        return Err(param("a path visits at least one proxy"));
    }
    Ok(p.surveilled_fraction().powi(hops as i32))
}

/// `(a/P)^2`: both entry and exit surveilled.
pub fn pool_correlation_probability(p: &PoolParams) -> Result<f64, AnalyzerError> {
    p.validate()?;
    Ok(p.surveilled_fraction().powi(2))
}

/// Truncated geometric law of proxies visited: entry `k-1` of the result is
/// `P(h = k) = q^{k-1}(1-q)` for `k < h_max`, with the tail mass at `h_max`.
pub fn hop_distribution(q: f64, max_hops: u32) -> Result<Vec<f64>, AnalyzerError> {
    if !(0.0..1.0).contains(&q) {
        return Err(param("forward probability must lie in [0, 1)"));
    }
    if max_hops == 0 {
        return Err(param("hop cap must be at least 1"));
    }
    let mut pmf: Vec<f64> = (1..max_hops)
        .map(|k| q.powi(k as i32 - 1) * (1.0 - q))
        .collect();
    pmf.push(q.powi(max_hops as i32 - 1));
    Ok(pmf)
}

/// Mean proxies visited, `(1 - q^{h_max}) / (1 - q)`.
pub fn expected_hops(q: f64, max_hops: u32) -> Result<f64, AnalyzerError> {
    hop_distribution(q, max_hops)?;
    Ok((1.0 - q.powi(max_hops as i32)) / (1.0 - q))
}

/// Variance of proxies visited, for sizing Monte-Carlo tolerances.
pub fn hop_variance(q: f64, max_hops: u32) -> Result<f64, AnalyzerError> {
    let pmf = hop_distribution(q, max_hops)?;
    let mean = expected_hops(q, max_hops)?;
    Ok(pmf
        .iter()
        .enumerate()
        .map(|(i, p)| p * ((i + 1) as f64 - mean).powi(2))
        .sum())
}

/// Probability every proxy on the path is surveilled, `Σ_k P(h=k)(a/P)^k`.
pub fn path_surveilled_probability(p: &PoolParams) -> Result<f64, AnalyzerError> {
    p.validate()?;
    let f = p.surveilled_fraction();
    Ok(hop_distribution(p.forward_probability, p.max_hops)?
        .iter()
        .enumerate()
        .map(|(i, pk)| pk * f.powi(i as i32 + 1))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
}

/// Goodness of fit of exit indices (each `< pool_size`) against the uniform
/// distribution over the pool.
pub fn exit_uniformity_test(exits: &[usize], pool_size: usize) -> Result<ChiSquareResult, AnalyzerError> {
    if pool_size < 2 {
        return Err(param("uniformity needs a pool of at least two"));
    }
    let needed = 10 * pool_size;
    if exits.len() < needed {
        return Err(AnalyzerError::InsufficientSamples {
            needed,
            got: exits.len(),
        });
    }
    let mut counts = vec![0u64; pool_size];
    for &e in exits {
        *counts
            .get_mut(e)
            .ok_or_else(|| param(format!("exit {e} outside pool of {pool_size}")))? += 1;
    }
    let expected = exits.len() as f64 / pool_size as f64;
    let statistic = counts
        .iter()
        .map(|&o| (o as f64 - expected).powi(2) / expected)
        .sum();
    let dof = pool_size - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| param(e.to_string()))?;
    Ok(ChiSquareResult {
        statistic,
        degrees_of_freedom: dof,
        p_value: dist.sf(statistic),
    })
}

/// Empirical pool statistics from routed traces, with the surveilled set
/// given as a membership mask over pool indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolObservation {
    pub requests: usize,
    pub mean_hops: f64,
    pub hops_std_error: f64,
    /// Every proxy on the path surveilled.
    pub path_surveilled: Estimate,
    /// Entry and exit both surveilled, over paths with at least two hops.
    pub entry_exit_surveilled: Estimate,
    pub exits: Vec<usize>,
}

pub fn observe_pool(traces: &[PoolTrace], surveilled: &[bool]) -> Result<PoolObservation, AnalyzerError> {
    if traces.is_empty() {
        return Err(param("no traces"));
    }
    let watched = |i: usize| surveilled.get(i).copied().unwrap_or(false);
    let n = traces.len() as f64;
    let hops: Vec<f64> = traces.iter().map(|t| t.hops() as f64).collect();
    let mean = hops.iter().sum::<f64>() / n;
    let var = hops.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let full = traces.iter().filter(|t| t.path.iter().all(|&i| watched(i))).count();
    let multi: Vec<&PoolTrace> = traces.iter().filter(|t| t.hops() >= 2).collect();
    let both = multi
        .iter()
        .filter(|t| watched(t.entry()) && watched(t.exit()))
        .count();
    Ok(PoolObservation {
        requests: traces.len(),
        mean_hops: mean,
        hops_std_error: (var / n).sqrt(),
        path_surveilled: Estimate::from_hits(full as u64, traces.len() as u64),
        entry_exit_surveilled: Estimate::from_hits(both as u64, multi.len().max(1) as u64),
        exits: traces.iter().map(PoolTrace::exit).collect(),
    })
}
