//! Whole-series estimators and the virtual-sensor evaluation protocol.
//!
//! Every estimator returns a `T × N` matrix in mph covering all nodes and may
//! read only the columns of the available sensors.

use ndarray::{s, Array2, Axis};

use crate::autoencoder::{forward_with, latent_config, GraphOperators, ModelConfig, ModelParams, NormStats};
use crate::data::{window_at, SpeedSeries};
use crate::evaluation::{metrics, MetricsReport};
use crate::graph::{NodePartition, WeightedDigraph};
use crate::propagation::{self, PropagationConfig};
use crate::training::{fit, FitResult, TrainConfig};
use crate::{Error, Result};

/// Split of the node set into virtual (held-out) and available sensors.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSplit {
    pub virtual_sensors: Vec<usize>,
    pub available: Vec<usize>,
}

impl SensorSplit {
    pub fn from_virtual(n: usize, virtual_sensors: &[usize]) -> Result<Self> {
        let mut vs = virtual_sensors.to_vec();
        vs.sort_unstable();
        vs.dedup();
        if vs.iter().any(|&i| i >= n) {
            return Err(Error::invalid("virtual sensor index out of range"));
        }
        let available: Vec<usize> = (0..n).filter(|i| vs.binary_search(i).is_err()).collect();
        if available.is_empty() {
            return Err(Error::Protocol("every sensor is virtual".into()));
        }
        Ok(SensorSplit {
            virtual_sensors: vs,
            available,
        })
    }
}

fn check_nodes(series: &SpeedSeries, g: &WeightedDigraph) -> Result<()> {
    if series.node_ids != g.node_ids() {
        return Err(Error::invalid("series columns and graph nodes differ in identity or order"));
    }
    Ok(())
}

/// Each step's mean over the measured available sensors, copied to every
/// node. Steps with no measurement reuse the previous step's mean.
pub fn mean_baseline(series: &SpeedSeries, available: &[usize]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(series.values.dim());
    let mut last = None;
    for (t, row) in series.values.axis_iter(Axis(0)).enumerate() {
        let vals: Vec<f64> = available.iter().map(|&i| row[i]).filter(|v| v.is_finite()).collect();
        let m = if vals.is_empty() {
            last
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let m = m.ok_or_else(|| Error::Protocol(format!("no available sensor is measured at step {t}")))?;
        out.row_mut(t).fill(m);
        last = Some(m);
    }
    Ok(out)
}

/// Estimates and sweep counts of a per-step propagation run.
#[derive(Debug, Clone)]
pub struct PropagationRun {
    pub estimates: Array2<f64>,
    pub iterations: Vec<usize>,
}

/// DEFP4D at every step: measured available sensors are the boundary,
/// everything else is estimated.
pub fn propagate_series(
    g: &WeightedDigraph,
    series: &SpeedSeries,
    available: &[usize],
    cfg: &PropagationConfig,
) -> Result<PropagationRun> {
    check_nodes(series, g)?;
    let n = g.len();
    let mut estimates = Array2::zeros(series.values.dim());
    let mut iterations = Vec::with_capacity(series.len());
    for (t, row) in series.values.axis_iter(Axis(0)).enumerate() {
        let obs: Vec<usize> = available.iter().copied().filter(|&i| row[i].is_finite()).collect();
        if obs.is_empty() {
            return Err(Error::Protocol(format!("no available sensor is measured at step {t}")));
        }
        let part = NodePartition::new(n, &obs)?;
        let x_obs: Vec<f64> = part.observed().iter().map(|&i| row[i]).collect();
        let (x, iters) = propagation::run(g, &part, &x_obs, cfg)?;
        estimates.row_mut(t).assign(&ndarray::ArrayView1::from(&x));
        iterations.push(iters);
    }
    Ok(PropagationRun { estimates, iterations })
}

/// Window starts covering `0..t` with hourly strides; the last window is
/// pulled back to end at `t` when the length is not a multiple of `len`.
pub fn covering_starts(t: usize, len: usize) -> Vec<usize> {
    if t < len {
        return Vec::new();
    }
    let mut starts: Vec<usize> = (0..=t - len).step_by(len).collect();
    if starts.last().map(|s| s + len) != Some(t) {
        starts.push(t - len);
    }
    starts
}

/// DGAE estimates for every node and step, one forward pass per window.
pub fn dgae_series(
    params: &ModelParams,
    g: &WeightedDigraph,
    series: &SpeedSeries,
    available: &[usize],
) -> Result<Array2<f64>> {
    check_nodes(series, g)?;
    let l = params.config.window_len;
    let starts = covering_starts(series.len(), l);
    if starts.is_empty() {
        return Err(Error::invalid(format!("series of {} steps is shorter than one window", series.len())));
    }
    let part = NodePartition::new(g.len(), available)?;
    let full_ops = GraphOperators::for_model(g, params)?;
    let obs_ops = GraphOperators::for_model(&g.induced_subgraph(part.observed()), params)?;
    let latent = latent_config(params.config.latent_iters);
    let mut out = Array2::zeros(series.values.dim());
    for start in starts {
        let w = window_at(series, start, l, part.clone());
        let est = forward_with(params, &w, &full_ops, &obs_ops, &latent)?;
        out.slice_mut(s![start..start + l, ..]).assign(&est.t());
    }
    Ok(out)
}

/// Normalisation from the available sensors' readings only.
pub fn available_norm(series: &SpeedSeries, available: &[usize]) -> Result<NormStats> {
    NormStats::from_values(
        available
            .iter()
            .flat_map(|&i| series.values.column(i).to_vec())
            .filter(|v| v.is_finite()),
    )
}

/// Initialises a model with `template`'s architecture and the training
/// data's statistics, then fits it.
pub fn train_dgae(
    template: &ModelConfig,
    g: &WeightedDigraph,
    train: &SpeedSeries,
    available: &[usize],
    cfg: &TrainConfig,
) -> Result<FitResult> {
    check_nodes(train, g)?;
    let config = ModelConfig {
        norm: available_norm(train, available)?,
        ..template.clone()
    };
    let params = ModelParams::init(config, cfg.seed)?;
    fit(params, train, available, g, cfg)
}

/// Metrics of `estimates` on the virtual-sensor columns of `truth`.
pub fn evaluate_virtual(estimates: &Array2<f64>, truth: &SpeedSeries, vs: &[usize]) -> Result<MetricsReport> {
    if estimates.dim() != truth.values.dim() {
        return Err(Error::shape("estimates and truth differ in shape"));
    }
    let est = estimates.select(Axis(1), vs);
    let tr = truth.values.select(Axis(1), vs);
    let valid = truth.mask.select(Axis(1), vs);
    metrics(est.view(), tr.view(), valid.view())
}

/// Copy of `series` with every non-available column blanked, so held-out
/// sensors cannot leak into an estimator.
pub fn hide_virtual(series: &SpeedSeries, available: &[usize]) -> SpeedSeries {
    let mut out = series.clone();
    for i in 0..series.n_nodes() {
        if available.binary_search(&i).is_err() {
            out.values.column_mut(i).fill(f64::NAN);
            out.mask.column_mut(i).fill(false);
        }
    }
    out
}

/// VS metrics of the three estimators on one split of a dataset.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub mean: MetricsReport,
    pub defp4d: MetricsReport,
    pub dgae: MetricsReport,
    pub fit: FitResult,
}

/// Trains on `train`, then scores mean baseline, coupled DEFP4D and DGAE on
/// the virtual sensors of `test` against `truth`.
#[allow(clippy::too_many_arguments)]
pub fn compare_estimators(
    g: &WeightedDigraph,
    train: &SpeedSeries,
    test: &SpeedSeries,
    truth: &SpeedSeries,
    split: &SensorSplit,
    template: &ModelConfig,
    train_cfg: &TrainConfig,
    prop_cfg: &PropagationConfig,
) -> Result<Comparison> {
    let avail = &split.available;
    let vs = &split.virtual_sensors;
    let train = hide_virtual(train, avail);
    let test = hide_virtual(test, avail);
    let fit = train_dgae(template, g, &train, avail, train_cfg)?;
    let dgae = dgae_series(&fit.params, g, &test, avail)?;
    let defp = propagate_series(g, &test, avail, prop_cfg)?.estimates;
    let mean = mean_baseline(&test, avail)?;
    Ok(Comparison {
        mean: evaluate_virtual(&mean, truth, vs)?,
        defp4d: evaluate_virtual(&defp, truth, vs)?,
        dgae: evaluate_virtual(&dgae, truth, vs)?,
        fit,
    })
}
