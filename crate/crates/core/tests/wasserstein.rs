use std::collections::HashMap;

use proptest::prelude::*;
use trafficrlhf_core::metrics::{wasserstein1, Histogram};

const UNITS: usize = 8;

/// Every way to put `UNITS` eighths of mass into `bins` bins.
fn compositions(bins: usize) -> Vec<Vec<usize>> {
    fn rec(left: usize, bins: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if bins == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for k in 0..=left {
            cur.push(k);
            rec(left - k, bins - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(UNITS, bins, &mut Vec::new(), &mut out);
    out
}

/// Cheapest plan moving the units of `a` onto `b`, searching every
/// assignment of each source unit to a destination bin. Integer plans
/// suffice because the transport polytope has integral vertices.
fn transport_oracle(a: &[usize], b: &[usize], pos: &[f64]) -> f64 {
    let sources: Vec<usize> = a
        .iter()
        .enumerate()
        .flat_map(|(i, &m)| std::iter::repeat_n(i, m))
        .collect();
    fn best(
        i: usize,
        sources: &[usize],
        left: &mut Vec<usize>,
        pos: &[f64],
        memo: &mut HashMap<u64, f64>,
    ) -> f64 {
        if i == sources.len() {
            return 0.0;
        }
        // Remaining capacities determine `i`, so they alone key the memo.
        let key = left
            .iter()
            .fold(0u64, |k, &m| k * (UNITS as u64 + 1) + m as u64);
        if let Some(&v) = memo.get(&key) {
            return v;
        }
        let mut min = f64::INFINITY;
        for j in 0..left.len() {
            if left[j] > 0 {
                left[j] -= 1;
                let c = (pos[sources[i]] - pos[j]).abs() + best(i + 1, sources, left, pos, memo);
                left[j] += 1;
                min = min.min(c);
            }
        }
        memo.insert(key, min);
        min
    }
    best(0, &sources, &mut b.to_vec(), pos, &mut HashMap::new()) / UNITS as f64
}

fn hist(edges: &[f64], units: &[usize]) -> Histogram {
    Histogram::new(
        edges.to_vec(),
        units.iter().map(|&u| u as f64 / UNITS as f64).collect(),
    )
    .unwrap()
}

#[test]
fn matches_exhaustive_transport_on_the_eighth_grid() {
    for bins in 1..=5 {
        for width in [1.0, 0.35] {
            let edges: Vec<f64> = (0..=bins).map(|k| 2.0 + k as f64 * width).collect();
            let hists = compositions(bins);
            for a in &hists {
                for b in &hists {
                    let w = wasserstein1(&hist(&edges, a), &hist(&edges, b)).unwrap();
                    let oracle = transport_oracle(a, b, &edges);
                    assert!((w - oracle).abs() < 1e-9, "{a:?} {b:?}: {w} vs {oracle}");
                }
            }
        }
    }
}

fn masses(bins: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, bins).prop_filter_map("all-zero mass", |m| {
        let total: f64 = m.iter().sum();
        (total > 1e-6).then(|| m.iter().map(|x| x / total).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn metric_axioms(
        (a, b, c) in (1usize..12).prop_flat_map(|n| (masses(n), masses(n), masses(n))),
        max in 0.5..20.0f64,
    ) {
        let edges: Vec<f64> = (0..=a.len()).map(|k| k as f64 * max / a.len() as f64).collect();
        let h = |m: &Vec<f64>| Histogram::new(edges.clone(), m.clone()).unwrap();
        let (ha, hb, hc) = (h(&a), h(&b), h(&c));
        let ab = wasserstein1(&ha, &hb).unwrap();
        prop_assert_eq!(wasserstein1(&ha, &ha).unwrap(), 0.0);
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - wasserstein1(&hb, &ha).unwrap()).abs() < 1e-12);
        let via = wasserstein1(&ha, &hc).unwrap() + wasserstein1(&hc, &hb).unwrap();
        prop_assert!(ab <= via + 1e-12, "{} > {}", ab, via);
        if a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9) {
            prop_assert!(ab > 0.0);
        }
    }
}
