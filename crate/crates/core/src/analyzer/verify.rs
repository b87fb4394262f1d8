//! Cross-checks of the closed forms against the brute-force oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::{all_allocations, grid_search_optimum};
use super::{
    adversary_optimum, interior_optimum, minimax_allocation, recovery_probability, uniform_bound,
    Allocation, CapacityVector,
};

pub const GRID_STEP: f64 = 1e-3;
pub const ORACLE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub cases: usize,
    pub max_deviation: f64,
    pub passed: bool,
}

/// Fifty (budget, allocation) cases with at most three types and eight
/// fragments, including hand-picked interior and clamped ones.
pub fn oracle_sweep_cases(seed: u64) -> Vec<(f64, Allocation)> {
    let mut cases = vec![
        (1.0, Allocation::new(vec![1, 3])),
        (2.0, Allocation::new(vec![2, 6])),
        (1.5, Allocation::new(vec![1, 1, 6])),
        (0.5, Allocation::new(vec![8])),
        (2.5, Allocation::new(vec![2, 3, 3])),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while cases.len() < 50 {
        let d = rng.gen_range(1..=3usize);
        let n = rng.gen_range(1..=8u32);
        let mut counts = vec![0u32; d];
        for _ in 0..n {
            counts[rng.gen_range(0..d)] += 1;
        }
        // Budgets on a 0.05 grid keep clamped boundaries on the search grid.
        let budget = rng.gen_range(1..=(20 * d) as u32) as f64 / 20.0;
        cases.push((budget, Allocation::new(counts)));
    }
    cases
}

/// Largest gap between the water-filling solver and grid search.
pub fn oracle_agreement(cases: &[(f64, Allocation)]) -> Check {
    let max_deviation = cases
        .iter()
        .map(|(b, a)| {
            let (_, p) = adversary_optimum(*b, a).expect("sweep cases are feasible");
            (p - grid_search_optimum(*b, a, 1.0, GRID_STEP)).abs()
        })
        .fold(0.0, f64::max);
    Check {
        name: "optimum_vs_grid_search".into(),
        cases: cases.len(),
        max_deviation,
        passed: max_deviation <= ORACLE_TOLERANCE,
    }
}

/// Where no type would exceed 1, the solver equals the Lagrangian formula.
pub fn interior_identity(cases: &[(f64, Allocation)]) -> Check {
    let interior: Vec<&(f64, Allocation)> = cases
        .iter()
        .filter(|(b, a)| {
            let n = a.total() as f64;
            a.counts().iter().all(|&k| b * k as f64 / n <= 1.0)
        })
        .collect();
    let max_deviation = interior
        .iter()
        .map(|(b, a)| {
            let (_, p) = adversary_optimum(*b, a).expect("feasible");
            (p - interior_optimum(*b, a)).abs()
        })
        .fold(0.0, f64::max);
    Check {
        name: "interior_formula_identity".into(),
        cases: interior.len(),
        max_deviation,
        passed: max_deviation <= 1e-12,
    }
}

/// Outcome of enumerating every allocation for one `(n, d, B)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MinimaxCase {
    pub n: u32,
    pub d: u32,
    pub budget: f64,
    pub balanced_value: f64,
    pub best_value: f64,
    /// Allocations achieving the minimum (within 1e-12).
    pub minimizers: Vec<Allocation>,
}

impl MinimaxCase {
    /// A budget of at least `d` buys every type outright, so every
    /// allocation is recovered with certainty.
    pub fn degenerate(&self) -> bool {
        self.budget >= self.d as f64
    }

    /// The balanced allocation is optimal and, unless the case is
    /// degenerate, every other minimiser is one of its permutations.
    pub fn balanced_wins(&self) -> bool {
        self.balanced_value <= self.best_value + 1e-12
            && (self.degenerate() || self.minimizers.iter().all(Allocation::is_balanced))
    }
}

pub fn minimax_case(n: u32, d: u32, budget: f64) -> MinimaxCase {
    let balanced = minimax_allocation(n, d).expect("d <= n");
    let (_, balanced_value) = adversary_optimum(budget, &balanced).expect("feasible");
    let values: Vec<(Allocation, f64)> = all_allocations(n, d as usize)
        .into_iter()
        .map(|a| {
            let (_, p) = adversary_optimum(budget, &a).expect("feasible");
            (a, p)
        })
        .collect();
    let best_value = values.iter().map(|(_, p)| *p).fold(f64::INFINITY, f64::min);
    let minimizers = values
        .into_iter()
        .filter(|(_, p)| *p <= best_value + 1e-12)
        .map(|(a, _)| a)
        .collect();
    MinimaxCase {
        n,
        d,
        budget,
        balanced_value,
        best_value,
        minimizers,
    }
}

/// Random feasible capacity vectors never beat `(B/d)^n` against a
/// uniform allocation.
pub fn am_gm_consistency(samples: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..samples {
        let d = rng.gen_range(1..=6u32);
        let n = d * rng.gen_range(1..=3u32);
        let budget = rng.gen_range(0.05..=d as f64);
        let mut c: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
        let total: f64 = c.iter().sum();
        if total > budget {
            c.iter_mut().for_each(|x| *x *= budget / total);
        }
        let alloc = minimax_allocation(n, d).expect("d divides n");
        let p = recovery_probability(&CapacityVector::new(c).expect("in range"), &alloc)
            .expect("dimensions match");
        worst = worst.max(p - uniform_bound(budget, d, n).min(1.0));
    }
    Check {
        name: "am_gm_bound".into(),
        cases: samples,
        max_deviation: worst.max(0.0),
        passed: worst <= 1e-12,
    }
}

/// The oracle suite behind `analyze verify`.
pub fn run_suite() -> Vec<Check> {
    let cases = oracle_sweep_cases(2024);
    let mut checks = vec![oracle_agreement(&cases), interior_identity(&cases)];
    let mut worst = 0.0f64;
    let mut ok = true;
    let mut count = 0;
    for (n, d) in [(4, 2), (6, 2), (6, 3), (8, 4)] {
        for b in [0.5, 1.0, 2.0] {
            let case = minimax_case(n, d, b);
            worst = worst.max(case.balanced_value - case.best_value);
            ok &= case.balanced_wins();
            count += 1;
        }
    }
    checks.push(Check {
        name: "minimax_balanced_allocation".into(),
        cases: count,
        max_deviation: worst,
        passed: ok,
    });
    checks.push(am_gm_consistency(10_000, 7));
    let (_, p4) = adversary_optimum(2.0, &minimax_allocation(8, 4).expect("valid")).expect("feasible");
    let (_, p8) = adversary_optimum(2.0, &minimax_allocation(8, 8).expect("valid")).expect("feasible");
    let dev = (p4 - 2f64.powi(-8)).abs().max((p8 - 2f64.powi(-16)).abs());
    checks.push(Check {
        name: "uniform_bound_examples".into(),
        cases: 2,
        max_deviation: dev,
        passed: dev <= 1e-12,
    });
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_is_well_formed() {
        let cases = oracle_sweep_cases(1);
        assert_eq!(cases.len(), 50);
        assert!(cases
            .iter()
            .all(|(b, a)| a.types() <= 3 && a.total() <= 8 && *b > 0.0 && *b <= a.types() as f64));
        // The sweep exercises clamping.
        assert!(cases.iter().any(|(b, a)| {
            let n = a.total() as f64;
            a.counts().iter().any(|&k| b * k as f64 / n > 1.0)
        }));
    }

    #[test]
    fn minimax_small_case() {
        let case = minimax_case(4, 2, 1.0);
        assert_eq!(case.minimizers, vec![Allocation::new(vec![2, 2])]);
        assert!((case.balanced_value - 0.0625).abs() < 1e-15);
        assert!(case.balanced_wins());
        let flat = minimax_case(4, 2, 2.0);
        assert!(flat.degenerate() && flat.balanced_wins());
        assert_eq!(flat.minimizers.len(), 5);
    }

    #[test]
    fn suite_passes() {
        for check in run_suite() {
            assert!(check.passed, "{check:?}");
        }
    }
}
