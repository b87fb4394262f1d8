use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BenchError, Side, TrialRecord};

/// Per (config, side, metric) statistics in microseconds. `metric` is a
/// component name or `wall`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config_id: String,
    pub side: Side,
    pub metric: String,
    pub count: usize,
    pub failures: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub p95_us: f64,
    pub p99_us: f64,
    pub std_us: f64,
}

/// Nearest-rank percentile of an ascending slice: the value at rank
/// `⌈p/100 · N⌉`.
pub fn nearest_rank(sorted: &[u64], p: f64) -> u64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn row(config_id: &str, side: Side, metric: &str, mut xs: Vec<u64>, failures: usize) -> SummaryRow {
    xs.sort_unstable();
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    SummaryRow {
        config_id: config_id.to_owned(),
        side,
        metric: metric.to_owned(),
        count: xs.len(),
        failures,
        mean_us: mean,
        median_us: nearest_rank(&xs, 50.0) as f64,
        p95_us: nearest_rank(&xs, 95.0) as f64,
        p99_us: nearest_rank(&xs, 99.0) as f64,
        std_us: var.sqrt(),
    }
}

/// Mean, nearest-rank median/p95/p99, and sample standard deviation per
/// component and side. Failed trials are counted but excluded.
pub fn summarize(records: &[TrialRecord]) -> Result<Vec<SummaryRow>, BenchError> {
    if records.is_empty() {
        return Err(BenchError::Empty);
    }
    // (config, side) -> (samples per metric, failed trials)
    type Group = (BTreeMap<String, Vec<u64>>, usize);
    let mut groups: BTreeMap<(String, Side), Group> = BTreeMap::new();
    for r in records {
        let (metrics, failures) = groups.entry((r.config_id.clone(), r.side)).or_default();
        if !r.is_ok() {
            *failures += 1;
            continue;
        }
        for (c, us) in &r.components {
            metrics.entry(c.as_str().to_owned()).or_default().push(*us);
        }
        metrics.entry("wall".into()).or_default().push(r.wall_us);
    }
    let mut rows = Vec::new();
    for ((config, side), (metrics, failures)) in groups {
        for (metric, xs) in metrics {
            rows.push(row(&config, side, &metric, xs, failures));
        }
    }
    if rows.is_empty() {
        return Err(BenchError::Empty);
    }
    Ok(rows)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // Tied values share the average of their 1-based ranks.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation, ties given average ranks. `None` when either
/// side is constant or the lengths differ.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::Component;

    fn rec(side: Side, us: u64, failure: Option<&str>) -> TrialRecord {
        TrialRecord {
            config_id: "c".into(),
            trial: 0,
            side,
            components: BTreeMap::from([(Component::Network, us)]),
            wall_us: us,
            timestamp_us: 0,
            failure: failure.map(str::to_owned),
        }
    }

    #[test]
    fn nearest_rank_definition() {
        let xs: Vec<u64> = (1..=100).collect();
        assert_eq!(nearest_rank(&xs, 95.0), 95);
        assert_eq!(nearest_rank(&xs, 99.0), 99);
        assert_eq!(nearest_rank(&xs, 50.0), 50);
        assert_eq!(nearest_rank(&xs, 0.0), 1);
        assert_eq!(nearest_rank(&xs, 100.0), 100);
        assert_eq!(nearest_rank(&[7], 99.0), 7);
    }

    #[test]
    fn constant_durations_are_degenerate() {
        let rows = summarize(&vec![rec(Side::Client, 42, None); 10]).unwrap();
        let net = rows.iter().find(|r| r.metric == "network").unwrap();
        assert_eq!(
            (net.mean_us, net.median_us, net.p95_us, net.p99_us, net.std_us),
            (42.0, 42.0, 42.0, 42.0, 0.0)
        );
    }

    #[test]
    fn failures_are_counted_not_averaged() {
        let mut records: Vec<TrialRecord> = (1..=100).map(|i| rec(Side::Qkms, i, None)).collect();
        records.push(rec(Side::Qkms, 0, Some("boom")));
        let rows = summarize(&records).unwrap();
        let net = rows.iter().find(|r| r.metric == "network").unwrap();
        assert_eq!(net.count, 100);
        assert_eq!(net.failures, 1);
        assert_eq!(net.mean_us, 50.5);
        assert_eq!(net.p95_us, 95.0);
        assert!(matches!(summarize(&[]), Err(BenchError::Empty)));
    }

    #[test]
    fn spearman_cases() {
        let x = [1.0, 2.0, 4.0, 8.0, 16.0];
        assert_eq!(spearman(&x, &[3.0, 5.0, 9.0, 20.0, 21.0]), Some(1.0));
        assert_eq!(spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]), Some(-1.0));
        // Textbook example with a tie: ranks (1, 2.5, 2.5, 4).
        assert_eq!(ranks(&[1.0, 5.0, 5.0, 9.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(spearman(&x, &[1.0; 5]), None);
        let rho = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap();
        assert!((rho - 0.8).abs() < 1e-12);
    }
}
