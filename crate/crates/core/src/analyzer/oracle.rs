//! Brute-force reference computations, slow but obviously correct.

use super::{Allocation, CapacityVector};

/// Maximises `Π c_i^{n_i}` over `Σ c_i^k ≤ B`, `0 ≤ c_i ≤ 1` by grid search.
/// The first `d-1` coordinates walk a grid of the given step; the last takes
/// whatever budget is left (capped at 1), which is optimal for fixed others
/// because the objective is non-decreasing in every coordinate.
pub fn grid_search_optimum(budget: f64, alloc: &Allocation, cost_exponent: f64, step: f64) -> f64 {
    let d = alloc.types();
    assert!(d >= 1, "need at least one medium type");
    let steps = (1.0 / step).round() as usize;
    let grid: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
    let n = alloc.counts();
    let mut best = 0.0f64;
    let mut idx = vec![0usize; d - 1];
    loop {
        let spent: f64 = idx.iter().map(|&i| grid[i].powf(cost_exponent)).sum();
        if spent <= budget + 1e-12 {
            let last = (budget - spent).max(0.0).powf(1.0 / cost_exponent).min(1.0);
            let p: f64 = idx
                .iter()
                .map(|&i| grid[i])
                .chain(std::iter::once(last))
                .zip(n)
                .filter(|(_, k)| **k > 0)
                .map(|(c, k)| c.powi(*k as i32))
                .product();
            best = best.max(p);
        }
        // Odometer increment; coordinates past the budget stop early.
        let mut pos = 0;
        loop {
            if pos == idx.len() {
                return best;
            }
            idx[pos] += 1;
            if idx[pos] <= steps && grid[idx[pos]].powf(cost_exponent) <= budget + 1e-12 {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

/// Every allocation of `n` fragments over `d` types, empty types included.
pub fn all_allocations(n: u32, d: usize) -> Vec<Allocation> {
    fn fill(left: u32, slots: usize, prefix: &mut Vec<u32>, out: &mut Vec<Allocation>) {
        if slots == 1 {
            prefix.push(left);
            out.push(Allocation::new(prefix.clone()));
            prefix.pop();
            return;
        }
        for k in 0..=left {
            prefix.push(k);
            fill(left - k, slots - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if d > 0 {
        fill(n, d, &mut Vec::with_capacity(d), &mut out);
    }
    out
}

/// Exact per-type recovery probability by summing over all `2^d`
/// compromise outcomes.
pub fn per_type_exact(c: &CapacityVector, alloc: &Allocation) -> f64 {
    let d = c.len();
    assert!(d < 31, "enumeration limited to 30 types");
    let cs = c.values();
    let counts = alloc.counts();
    (0u32..1 << d)
        .map(|mask| {
            let recovered = (0..d).all(|i| counts[i] == 0 || mask & (1 << i) != 0);
            if !recovered {
                return 0.0;
            }
            (0..d)
                .map(|i| if mask & (1 << i) != 0 { cs[i] } else { 1.0 - cs[i] })
                .product::<f64>()
        })
        .sum()
}

/// Exact fragment-level recovery probability by summing over all `2^n`
/// per-fragment interception outcomes.
pub fn fragment_level_exact(c: &CapacityVector, alloc: &Allocation) -> f64 {
    let per_fragment: Vec<f64> = alloc
        .counts()
        .iter()
        .zip(c.values())
        .flat_map(|(&k, &ci)| std::iter::repeat_n(ci, k as usize))
        .collect();
    let n = per_fragment.len();
    assert!(n < 25, "enumeration limited to 24 fragments");
    (0u32..1 << n)
        .map(|mask| {
            if mask != (1 << n) - 1 {
                return 0.0;
            }
            per_fragment
                .iter()
                .enumerate()
                .map(|(i, p)| if mask & (1 << i) != 0 { *p } else { 1.0 - *p })
                .product::<f64>()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyzer::recovery_probability;

    #[test]
    fn grid_finds_known_optimum() {
        let p = grid_search_optimum(1.0, &Allocation::new(vec![1, 3]), 1.0, 1e-3);
        assert!((p - 0.10546875).abs() < 1e-4);
        let clamped = grid_search_optimum(2.0, &Allocation::new(vec![2, 6]), 1.0, 1e-3);
        assert!((clamped - 1.0).abs() < 1e-12);
        let single = grid_search_optimum(0.4, &Allocation::new(vec![3]), 1.0, 1e-3);
        assert!((single - 0.064).abs() < 1e-12);
    }

    #[test]
    fn allocation_enumeration_counts() {
        // Compositions of n into d parts: C(n+d-1, d-1).
        assert_eq!(all_allocations(4, 2).len(), 5);
        assert_eq!(all_allocations(6, 3).len(), 28);
        assert_eq!(all_allocations(8, 4).len(), 165);
        assert!(all_allocations(5, 3).iter().all(|a| a.total() == 5));
    }

    #[test]
    fn enumerations_match_closed_forms() {
        let c = CapacityVector::new(vec![0.2, 0.9, 0.5]).unwrap();
        let a = Allocation::new(vec![2, 0, 3]);
        assert!((per_type_exact(&c, &a) - 0.1).abs() < 1e-15);
        let product = recovery_probability(&c, &a).unwrap();
        assert!((fragment_level_exact(&c, &a) - product).abs() < 1e-15);
    }
}
