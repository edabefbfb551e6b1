//! Error metrics over virtual sensors and the VS-to-AS distance diagnostic.

use std::collections::HashMap;

use ndarray::{ArrayView2, Zip};
use petgraph::algo::dijkstra;
use petgraph::graph::{DiGraph, NodeIndex};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::graph::DistanceRecord;
use crate::{Error, Result};

pub const REPORT_HEADER: &str = "vs_count,d_v2a_km,mape_pct,mae_mph,rmse_mph,n_evaluated,n_excluded";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    /// Percent, over entries with nonzero truth.
    pub mape: f64,
    /// mph.
    pub mae: f64,
    /// mph.
    pub rmse: f64,
    pub n_evaluated: usize,
    /// Entries skipped because the ground truth was not measured.
    pub n_excluded_missing: usize,
    /// Evaluated entries left out of MAPE because the truth is zero.
    pub n_zero_truth: usize,
    /// Average VS-to-AS distance in km, when distances are known.
    pub d_v2a: Option<f64>,
}

/// MAPE, MAE and RMSE over the entries where `valid` is set.
pub fn metrics(est: ArrayView2<f64>, truth: ArrayView2<f64>, valid: ArrayView2<bool>) -> Result<MetricsReport> {
    if est.dim() != truth.dim() || est.dim() != valid.dim() {
        return Err(Error::shape(format!(
            "estimates {:?}, truth {:?}, mask {:?}",
            est.dim(),
            truth.dim(),
            valid.dim()
        )));
    }
    let (mut abs, mut sq, mut pct) = (0.0, 0.0, 0.0);
    let (mut n, mut n_pct, mut excluded) = (0usize, 0usize, 0usize);
    let mut bad = false;
    Zip::from(est).and(truth).and(valid).for_each(|&e, &t, &v| {
        if !v {
            excluded += 1;
            return;
        }
        if !t.is_finite() || !e.is_finite() {
            bad = true;
            return;
        }
        let err = e - t;
        abs += err.abs();
        sq += err * err;
        n += 1;
        if t != 0.0 {
            pct += (err / t).abs();
            n_pct += 1;
        }
    });
    if bad {
        return Err(Error::NonFinite("estimate or truth is not finite at a valid entry".into()));
    }
    if n == 0 {
        return Err(Error::invalid("no valid entries to evaluate"));
    }
    Ok(MetricsReport {
        mape: if n_pct > 0 { 100.0 * pct / n_pct as f64 } else { f64::NAN },
        mae: abs / n as f64,
        rmse: (sq / n as f64).sqrt(),
        n_evaluated: n,
        n_excluded_missing: excluded,
        n_zero_truth: n - n_pct,
        d_v2a: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceSummary {
    /// Mean over reachable virtual sensors, km.
    pub mean_km: f64,
    /// Per virtual sensor, in input order; `None` when no AS is reachable.
    pub per_node_km: Vec<Option<f64>>,
}

/// Mean over virtual sensors of the directed travel distance to the nearest
/// available sensor. Listed `(vs, as)` distances are used as given; absent
/// pairs fall back to the shortest path over the distance graph.
pub fn d_v2a(distances: &[DistanceRecord], vs: &[String], available: &[String]) -> Result<DistanceSummary> {
    if vs.is_empty() || available.is_empty() {
        return Err(Error::invalid("virtual and available sensor sets must be nonempty"));
    }
    if let Some(x) = vs.iter().find(|v| available.contains(v)) {
        return Err(Error::invalid(format!("sensor `{x}` is both virtual and available")));
    }
    let mut graph = DiGraph::<(), f64>::new();
    let mut nodes: HashMap<&str, NodeIndex> = HashMap::new();
    let mut direct: HashMap<(&str, &str), f64> = HashMap::new();
    for r in distances {
        if !(r.dist >= 0.0 && r.dist.is_finite()) {
            return Err(Error::invalid(format!("bad distance {} → {}: {}", r.from, r.to, r.dist)));
        }
        let a = *nodes.entry(r.from.as_str()).or_insert_with(|| graph.add_node(()));
        let b = *nodes.entry(r.to.as_str()).or_insert_with(|| graph.add_node(()));
        graph.add_edge(a, b, r.dist);
        direct.insert((r.from.as_str(), r.to.as_str()), r.dist);
    }
    let node_of = |id: &str| nodes.get(id).copied();

    let per_node_km: Vec<Option<f64>> = vs
        .iter()
        .map(|v| {
            let paths = node_of(v).map(|s| dijkstra(&graph, s, None, |e| *e.weight()));
            available
                .iter()
                .filter_map(|a| {
                    direct
                        .get(&(v.as_str(), a.as_str()))
                        .copied()
                        .or_else(|| paths.as_ref().and_then(|p| node_of(a).and_then(|t| p.get(&t).copied())))
                })
                .min_by(f64::total_cmp)
                .map(|m| m / 1000.0)
        })
        .collect();
    let unreachable: Vec<&String> = vs.iter().zip(&per_node_km).filter(|(_, d)| d.is_none()).map(|(v, _)| v).collect();
    if !unreachable.is_empty() {
        log::warn!("virtual sensors with no reachable available sensor, excluded from D_v2a: {unreachable:?}");
    }
    let reached: Vec<f64> = per_node_km.iter().flatten().copied().collect();
    if reached.is_empty() {
        return Err(Error::invalid("no virtual sensor can reach an available sensor"));
    }
    Ok(DistanceSummary {
        mean_km: reached.iter().sum::<f64>() / reached.len() as f64,
        per_node_km,
    })
}

/// `count` distinct node indices out of `n`, sorted, drawn from `seed`.
pub fn select_virtual_sensors(n: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 || count >= n {
        return Err(Error::invalid(format!("virtual sensor count must lie in [1, {}), got {count}", n)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = index::sample(&mut rng, n, count).into_vec();
    v.sort_unstable();
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub vs_count: usize,
    pub report: MetricsReport,
}

/// Runs `runner` on a fresh virtual-sensor draw for each count. Rows are
/// computed in parallel and returned in input order.
pub fn density_sweep<F>(n_nodes: usize, vs_counts: &[usize], seed: u64, runner: F) -> Result<Vec<SweepRow>>
where
    F: Fn(&[usize]) -> Result<MetricsReport> + Sync,
{
    let draws = vs_counts
        .iter()
        .map(|&c| select_virtual_sensors(n_nodes, c, seed))
        .collect::<Result<Vec<_>>>()?;
    draws
        .par_iter()
        .zip(vs_counts)
        .map(|(vs, &vs_count)| runner(vs).map(|report| SweepRow { vs_count, report }))
        .collect()
}

pub fn report_row(vs_count: usize, r: &MetricsReport) -> String {
    let d = r.d_v2a.map(|d| format!("{d:.6}")).unwrap_or_default();
    format!(
        "{vs_count},{d},{:.6},{:.6},{:.6},{},{}",
        r.mape, r.mae, r.rmse, r.n_evaluated, r.n_excluded_missing
    )
}

pub fn report_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for row in rows {
        out.push_str(&report_row(row.vs_count, &row.report));
        out.push('\n');
    }
    out
}
