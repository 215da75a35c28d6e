//! Activity-flow comparison of two logs: new and removed behavior, token
//! edit distance between variants, and the earth mover's distance between
//! the two variant distributions with its transport plan and effort rows.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_log::{variants, EventLog, LogError, Variant, VariantDistribution};

/// Largest common denominator used for integer supplies.
pub const MAX_DENOMINATOR: u64 = 10_000_000;
/// Distances are turned into integer costs at this scale.
pub const COST_SCALE: f64 = 1e9;
const FREQUENCY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("DegenerateInput: {0}")]
    DegenerateInput(String),
    #[error(transparent)]
    Log(#[from] LogError),
}

impl CompareError {
    pub fn name(&self) -> &'static str {
        match self {
            CompareError::DegenerateInput(_) => "DegenerateInput",
            CompareError::Log(e) => e.name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorDelta {
    pub new_fraction: f64,
    pub removed_fraction: f64,
    pub shared_variant_count: usize,
    pub new_variant_count: usize,
    pub removed_variant_count: usize,
}

/// Share of the union of variants that only the simulated log (new) or
/// only the original log (removed) exhibits. Counts are ignored.
pub fn behavior_delta(original: &VariantDistribution, simulated: &VariantDistribution) -> BehaviorDelta {
    let a: BTreeSet<&Variant> = original.counts().keys().collect();
    let b: BTreeSet<&Variant> = simulated.counts().keys().collect();
    let shared = a.intersection(&b).count();
    let new = b.difference(&a).count();
    let removed = a.difference(&b).count();
    let union = shared + new + removed;
    let frac = |x: usize| if union == 0 { 0.0 } else { x as f64 / union as f64 };
    BehaviorDelta {
        new_fraction: frac(new),
        removed_fraction: frac(removed),
        shared_variant_count: shared,
        new_variant_count: new,
        removed_variant_count: removed,
    }
}

/// Token-level Levenshtein distance.
pub fn edit_distance<S: AsRef<str>, T: AsRef<str>>(s: &[S], t: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=t.len()).collect();
    let mut cur = vec![0; t.len() + 1];
    for (i, a) in s.iter().enumerate() {
        cur[0] = i + 1;
        for (j, b) in t.iter().enumerate() {
            let sub = prev[j] + usize::from(a.as_ref() != b.as_ref());
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[t.len()]
}

/// Edit distance divided by the longer length; 0 for two empty traces.
pub fn trace_distance<S: AsRef<str>, T: AsRef<str>>(s: &[S], t: &[T]) -> f64 {
    let longest = s.len().max(t.len());
    if longest == 0 {
        return 0.0;
    }
    edit_distance(s, t) as f64 / longest as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub row_variants: Vec<Variant>,
    pub col_variants: Vec<Variant>,
    pub row_frequencies: Vec<f64>,
    pub col_frequencies: Vec<f64>,
    pub distances: Vec<Vec<f64>>,
    pub flow: Vec<Vec<f64>>,
    pub emd: f64,
    pub efforts: Vec<Vec<f64>>,
    /// Rows whose mass moved entirely at distance 0; their effort row is 0.
    pub exact_match: Vec<bool>,
    /// Integral optimal flow over `denominator` units of mass.
    #[serde(skip)]
    pub units: Vec<Vec<u64>>,
    #[serde(skip)]
    pub denominator: u64,
}

impl TransportPlan {
    /// Σ units · round(d · 10⁹): the objective the solver minimized.
    pub fn scaled_cost(&self) -> i128 {
        let mut total = 0i128;
        for (i, row) in self.units.iter().enumerate() {
            for (j, &u) in row.iter().enumerate() {
                total += i128::from(u) * i128::from(scaled(self.distances[i][j]));
            }
        }
        total
    }
}

fn scaled(d: f64) -> i64 {
    (d * COST_SCALE).round() as i64
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: u64, b: u64) -> Option<u64> {
    (a / gcd(a, b)).checked_mul(b)
}

/// Smallest-denominator fraction within 1e-12 of `x` (continued fractions).
fn denominator_of(x: f64) -> Option<u64> {
    let (mut h0, mut h1) = (0u64, 1u64);
    let (mut k0, mut k1) = (1u64, 0u64);
    let mut r = x;
    for _ in 0..64 {
        let a = r.floor();
        if a > 1e12 {
            return None;
        }
        let a = a as u64;
        let h = a.checked_mul(h1)?.checked_add(h0)?;
        let k = a.checked_mul(k1)?.checked_add(k0)?;
        if k > MAX_DENOMINATOR {
            return None;
        }
        (h0, h1, k0, k1) = (h1, h, k1, k);
        if (x - h as f64 / k as f64).abs() <= 1e-12 {
            return Some(k);
        }
        let frac = r - a as f64;
        if frac <= 0.0 {
            return None;
        }
        r = 1.0 / frac;
    }
    None
}

/// Integer parts of `freqs · total`, repaired by largest remainder so they
/// sum to `total` exactly.
fn apportion(freqs: &[f64], total: u64) -> Vec<u64> {
    let raw: Vec<f64> = freqs.iter().map(|f| f * total as f64).collect();
    let mut units: Vec<u64> = raw.iter().map(|r| r.floor().max(0.0) as u64).collect();
    let mut order: Vec<usize> = (0..freqs.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let mut sum: u64 = units.iter().sum();
    let mut k = 0;
    while sum < total {
        units[order[k % order.len()]] += 1;
        sum += 1;
        k += 1;
    }
    let mut k = order.len();
    while sum > total {
        k = if k == 0 { order.len() } else { k };
        k -= 1;
        let i = order[k];
        if units[i] > 0 {
            units[i] -= 1;
            sum -= 1;
        }
    }
    units
}

struct Arc {
    to: usize,
    cap: u64,
    cost: i64,
}

/// Minimum-cost flow on the bipartite transportation network by successive
/// shortest paths with Dijkstra on reduced costs.
fn transport(supply: &[u64], demand: &[u64], cost: &[Vec<i64>]) -> Vec<Vec<u64>> {
    let (k, m) = (supply.len(), demand.len());
    let (source, sink) = (0, k + m + 1);
    let n = k + m + 2;
    let mut arcs: Vec<Arc> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut add = |arcs: &mut Vec<Arc>, from: usize, to: usize, cap: u64, cost: i64| {
        adj[from].push(arcs.len());
        arcs.push(Arc { to, cap, cost });
        adj[to].push(arcs.len());
        arcs.push(Arc { to: from, cap: 0, cost: -cost });
    };
    for (i, &s) in supply.iter().enumerate() {
        add(&mut arcs, source, 1 + i, s, 0);
    }
    let mut middle = vec![vec![0usize; m]; k];
    for i in 0..k {
        for j in 0..m {
            middle[i][j] = arcs.len();
            add(&mut arcs, 1 + i, 1 + k + j, supply[i].min(demand[j]), cost[i][j]);
        }
    }
    for (j, &d) in demand.iter().enumerate() {
        add(&mut arcs, 1 + k + j, sink, d, 0);
    }

    let total: u64 = supply.iter().sum();
    let mut potential = vec![0i64; n];
    let mut sent = 0u64;
    while sent < total {
        let mut dist = vec![i64::MAX; n];
        let mut via = vec![usize::MAX; n];
        dist[source] = 0;
        let mut heap = BinaryHeap::from([Reverse((0i64, source))]);
        while let Some(Reverse((d, v))) = heap.pop() {
            if d > dist[v] {
                continue;
            }
            for &e in &adj[v] {
                let a = &arcs[e];
                if a.cap == 0 {
                    continue;
                }
                let nd = d + a.cost + potential[v] - potential[a.to];
                if nd < dist[a.to] {
                    dist[a.to] = nd;
                    via[a.to] = e;
                    heap.push(Reverse((nd, a.to)));
                }
            }
        }
        if dist[sink] == i64::MAX {
            break;
        }
        for v in 0..n {
            if dist[v] != i64::MAX {
                potential[v] += dist[v];
            }
        }
        let mut push = total - sent;
        let mut v = sink;
        while v != source {
            let e = via[v];
            push = push.min(arcs[e].cap);
            v = arcs[e ^ 1].to;
        }
        let mut v = sink;
        while v != source {
            let e = via[v];
            arcs[e].cap -= push;
            arcs[e ^ 1].cap += push;
            v = arcs[e ^ 1].to;
        }
        sent += push;
    }
    middle
        .iter()
        .map(|row| row.iter().map(|&e| arcs[e ^ 1].cap).collect())
        .collect()
}

fn plan_from_units(
    row_frequencies: Vec<f64>,
    col_frequencies: Vec<f64>,
    distances: Vec<Vec<f64>>,
    row_units: &[u64],
    col_units: &[u64],
    denominator: u64,
) -> TransportPlan {
    let cost: Vec<Vec<i64>> = distances.iter().map(|r| r.iter().map(|&d| scaled(d)).collect()).collect();
    let units = transport(row_units, col_units, &cost);
    let flow: Vec<Vec<f64>> = units
        .iter()
        .map(|r| r.iter().map(|&u| u as f64 / denominator as f64).collect())
        .collect();
    let mut emd = 0.0;
    for (i, row) in units.iter().enumerate() {
        for (j, &u) in row.iter().enumerate() {
            emd += u as f64 * distances[i][j];
        }
    }
    emd /= denominator as f64;
    let mut plan = TransportPlan {
        row_variants: Vec::new(),
        col_variants: Vec::new(),
        row_frequencies,
        col_frequencies,
        distances,
        flow,
        emd,
        efforts: Vec::new(),
        exact_match: Vec::new(),
        units,
        denominator,
    };
    let (efforts, exact) = effort_matrix(&plan);
    plan.efforts = efforts;
    plan.exact_match = exact;
    plan
}

fn check_matrix(rows: usize, cols: usize, d: &[Vec<f64>]) -> Result<(), CompareError> {
    if d.len() != rows || d.iter().any(|r| r.len() != cols) {
        return Err(CompareError::DegenerateInput(format!("distance matrix is not {rows}×{cols}")));
    }
    if d.iter().flatten().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(CompareError::DegenerateInput("distances must be finite and non-negative".into()));
    }
    Ok(())
}

/// Exact optimal transport between two relative-frequency vectors.
///
/// Frequencies are read as fractions over their least common denominator
/// (at most 10⁷; beyond that they are apportioned over 10⁷ units) and the
/// integral problem is solved by minimum-cost flow. The returned plan has
/// no variant labels; [`compare_logs`] fills them in.
pub fn solve_emd(fa: &[f64], fb: &[f64], d: &[Vec<f64>]) -> Result<TransportPlan, CompareError> {
    for (name, f) in [("original", fa), ("simulated", fb)] {
        if f.is_empty() {
            return Err(CompareError::DegenerateInput(format!("{name} frequencies are empty")));
        }
        if f.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(CompareError::DegenerateInput(format!("{name} frequencies must be non-negative")));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > FREQUENCY_TOLERANCE {
            return Err(CompareError::DegenerateInput(format!("{name} frequencies sum to {sum}")));
        }
    }
    check_matrix(fa.len(), fb.len(), d)?;
    let denominator = fa
        .iter()
        .chain(fb)
        .try_fold(1u64, |acc, &x| denominator_of(x).and_then(|q| lcm(acc, q)))
        .filter(|&q| q <= MAX_DENOMINATOR)
        .unwrap_or(MAX_DENOMINATOR);
    let row_units = apportion(fa, denominator);
    let col_units = apportion(fb, denominator);
    Ok(plan_from_units(fa.to_vec(), fb.to_vec(), d.to_vec(), &row_units, &col_units, denominator))
}

/// Optimal transport between two count vectors, normalized per side; the
/// common denominator is the least common multiple of the two totals.
pub fn solve_emd_counts(ca: &[u64], cb: &[u64], d: &[Vec<f64>]) -> Result<TransportPlan, CompareError> {
    let (na, nb): (u64, u64) = (ca.iter().sum(), cb.iter().sum());
    if na == 0 || nb == 0 {
        return Err(CompareError::DegenerateInput("a side has no traces".into()));
    }
    check_matrix(ca.len(), cb.len(), d)?;
    let fa: Vec<f64> = ca.iter().map(|&c| c as f64 / na as f64).collect();
    let fb: Vec<f64> = cb.iter().map(|&c| c as f64 / nb as f64).collect();
    let (denominator, row_units, col_units) = match lcm(na, nb).filter(|&l| l <= MAX_DENOMINATOR) {
        Some(l) => (
            l,
            ca.iter().map(|&c| c * (l / na)).collect::<Vec<_>>(),
            cb.iter().map(|&c| c * (l / nb)).collect::<Vec<_>>(),
        ),
        None => (MAX_DENOMINATOR, apportion(&fa, MAX_DENOMINATOR), apportion(&fb, MAX_DENOMINATOR)),
    };
    Ok(plan_from_units(fa, fb, d.to_vec(), &row_units, &col_units, denominator))
}

/// Row-normalized d·r; rows with no cost are all zero and flagged.
pub fn effort_matrix(plan: &TransportPlan) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut efforts = Vec::with_capacity(plan.flow.len());
    let mut exact = Vec::with_capacity(plan.flow.len());
    for (i, row) in plan.flow.iter().enumerate() {
        let work: Vec<f64> = row.iter().zip(&plan.distances[i]).map(|(r, d)| r * d).collect();
        let total: f64 = work.iter().sum();
        if total > 0.0 {
            efforts.push(work.iter().map(|w| w / total).collect());
            exact.push(false);
        } else {
            efforts.push(vec![0.0; row.len()]);
            exact.push(true);
        }
    }
    (efforts, exact)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub delta: BehaviorDelta,
    pub plan: TransportPlan,
}

/// Distance matrix between two ordered variant lists.
pub fn distance_matrix(rows: &[Variant], cols: &[Variant]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| cols.iter().map(|c| trace_distance(r, c)).collect())
        .collect()
}

/// Compares two variant distributions; variants are ordered most frequent
/// first, ties lexicographically.
pub fn compare_distributions(original: &VariantDistribution, simulated: &VariantDistribution) -> Result<Comparison, CompareError> {
    let rows = original.by_frequency();
    let cols = simulated.by_frequency();
    let row_variants: Vec<Variant> = rows.iter().map(|(v, _)| (*v).clone()).collect();
    let col_variants: Vec<Variant> = cols.iter().map(|(v, _)| (*v).clone()).collect();
    let d = distance_matrix(&row_variants, &col_variants);
    let ca: Vec<u64> = rows.iter().map(|(_, c)| *c).collect();
    let cb: Vec<u64> = cols.iter().map(|(_, c)| *c).collect();
    let mut plan = solve_emd_counts(&ca, &cb, &d)?;
    plan.row_variants = row_variants;
    plan.col_variants = col_variants;
    Ok(Comparison {
        delta: behavior_delta(original, simulated),
        plan,
    })
}

pub fn compare_logs(original: &EventLog, simulated: &EventLog) -> Result<Comparison, CompareError> {
    compare_distributions(&variants(original)?, &variants(simulated)?)
}
