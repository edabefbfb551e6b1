//! Directed Dirichlet-energy feature propagation (DEFP4D).
//!
//! Observed nodes act as Dirichlet boundary values. Each sweep multiplies the
//! current signal by a transition matrix and then resets the observed entries,
//! which is forward-Euler on the energy's gradient flow with step
//! `(D_o + D_I)^{-1}`. The closed-form minimiser solves
//! `P^{uu} x^u = −P^{uo} x^o` directly and serves as the reference for the
//! iterative path.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{
    energy_operator, partition_blocks, transition_coupled, transition_decoupled, NodePartition,
    WeightedDigraph,
};
use crate::sparse::CsrMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropagationMode {
    Coupled,
    Decoupled,
}

impl std::str::FromStr for PropagationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coupled" => Ok(PropagationMode::Coupled),
            "decoupled" => Ok(PropagationMode::Decoupled),
            other => Err(Error::invalid(format!("unknown propagation mode `{other}`"))),
        }
    }
}

/// Initial values for unobserved nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitPolicy {
    Zeros,
    /// Per-channel mean of the observed values.
    ObservedMean,
    /// Uniform draws inside the per-channel observed range.
    Random(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationConfig {
    pub max_iters: usize,
    /// Early stop once the largest absolute change in a sweep is at most this.
    pub tolerance: f64,
    pub mode: PropagationMode,
    pub init: InitPolicy,
    /// Per-node free-flow reference speed; decoupled mode only.
    pub reference_speed: Option<Vec<f64>>,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            max_iters: 90,
            tolerance: 1e-6,
            mode: PropagationMode::Coupled,
            init: InitPolicy::ObservedMean,
            reference_speed: None,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::invalid("tolerance must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationResult {
    pub values: Vec<f64>,
    pub iterations: usize,
    /// Largest absolute change during the last sweep.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelResult {
    pub values: Array2<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// `½ Σ_ij A_ij (x_i − x_j)²`.
pub fn dirichlet_energy(g: &WeightedDigraph, x: &[f64]) -> Result<f64> {
    if x.len() != g.len() {
        return Err(Error::shape(format!("signal has {} entries, graph has {} nodes", x.len(), g.len())));
    }
    Ok(0.5
        * g.adjacency()
            .triplets()
            .map(|(i, j, w)| w * (x[i] - x[j]).powi(2))
            .sum::<f64>())
}

fn check_finite(what: &str, xs: impl IntoIterator<Item = f64>) -> Result<()> {
    if xs.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contains non-finite values")))
    }
}

fn initial_state(
    n: usize,
    part: &NodePartition,
    x_obs: ArrayView2<f64>,
    init: InitPolicy,
) -> Array2<f64> {
    let f = x_obs.ncols();
    let mut x = Array2::zeros((n, f));
    match init {
        InitPolicy::Zeros => {}
        InitPolicy::ObservedMean => {
            let mean = x_obs.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(f));
            for &u in part.unobserved() {
                x.row_mut(u).assign(&mean);
            }
        }
        InitPolicy::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for c in 0..f {
                let col = x_obs.column(c);
                let lo = col.fold(f64::INFINITY, |a, &b| a.min(b));
                let hi = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                for &u in part.unobserved() {
                    x[[u, c]] = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                }
            }
        }
    }
    for (k, &o) in part.observed().iter().enumerate() {
        x.row_mut(o).assign(&x_obs.row(k));
    }
    x
}

/// One sweep: `x ← T x` with empty rows holding their value, then the
/// observed rows reset. Returns the largest absolute change.
fn sweep(t: &CsrMatrix, part: &NodePartition, x: &Array2<f64>, next: &mut Array2<f64>) -> f64 {
    let mut change: f64 = 0.0;
    for &u in part.unobserved() {
        let (cols, vals) = t.row(u);
        let mut row = next.row_mut(u);
        if cols.is_empty() {
            row.assign(&x.row(u));
            continue;
        }
        row.fill(0.0);
        for (&j, &w) in cols.iter().zip(vals) {
            row.scaled_add(w, &x.row(j));
        }
        for (a, b) in row.iter().zip(x.row(u)) {
            change = change.max((a - b).abs());
        }
    }
    for &o in part.observed() {
        next.row_mut(o).assign(&x.row(o));
    }
    change
}

/// Unobserved connected components (over `A + Aᵀ`) with no edge to an
/// observed node.
pub fn unreachable_components(g: &WeightedDigraph, part: &NodePartition) -> Vec<Vec<usize>> {
    let n = g.len();
    let mut comp = vec![usize::MAX; n];
    let mut out = Vec::new();
    for &start in part.unobserved() {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = start;
        let mut stack = vec![start];
        comp[start] = id;
        let mut members = Vec::new();
        let mut touches_observed = false;
        while let Some(v) = stack.pop() {
            members.push(v);
            let (c1, _) = g.adjacency().row(v);
            let (c2, _) = g.adjacency_t().row(v);
            for &w in c1.iter().chain(c2) {
                if part.is_observed(w) {
                    touches_observed = true;
                } else if comp[w] == usize::MAX {
                    comp[w] = id;
                    stack.push(w);
                }
            }
        }
        if !touches_observed {
            members.sort_unstable();
            out.push(members);
        }
    }
    out
}

/// Iterates `x ← T x` with observed rows clamped to `x_obs`, for every
/// channel (column) of `x_obs` at once.
pub fn propagate_channels(
    t: &CsrMatrix,
    part: &NodePartition,
    x_obs: ArrayView2<f64>,
    cfg: &PropagationConfig,
) -> Result<ChannelResult> {
    cfg.validate()?;
    let n = t.nrows();
    if part.len() != n {
        return Err(Error::shape(format!("partition covers {} nodes, operator has {n}", part.len())));
    }
    if x_obs.nrows() != part.observed().len() {
        return Err(Error::shape(format!(
            "{} observed rows given for {} observed nodes",
            x_obs.nrows(),
            part.observed().len()
        )));
    }
    check_finite("observed signal", x_obs.iter().copied())?;

    let mut x = initial_state(n, part, x_obs, cfg.init);
    if part.unobserved().is_empty() {
        return Ok(ChannelResult {
            values: x,
            iterations: 0,
            residual: 0.0,
        });
    }
    let mut next = x.clone();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        residual = sweep(t, part, &x, &mut next);
        std::mem::swap(&mut x, &mut next);
        iterations += 1;
        if residual <= cfg.tolerance {
            break;
        }
    }
    Ok(ChannelResult {
        values: x,
        iterations,
        residual,
    })
}

/// Reverse-mode adjoint of [`propagate_channels`] with zero initialisation and
/// exactly `iterations` sweeps: maps the gradient with respect to the full
/// output to the gradient with respect to the observed rows.
pub fn propagate_channels_adjoint(
    t: &CsrMatrix,
    part: &NodePartition,
    grad_out: ArrayView2<f64>,
    iterations: usize,
) -> Array2<f64> {
    let f = grad_out.ncols();
    let mut g = grad_out.to_owned();
    let mut grad_obs = Array2::<f64>::zeros((part.observed().len(), f));
    let mut prev = Array2::<f64>::zeros(g.dim());
    for _ in 0..iterations {
        // reset step: observed rows of the output came straight from x_obs
        for (k, &o) in part.observed().iter().enumerate() {
            grad_obs.row_mut(k).scaled_add(1.0, &g.row(o));
            g.row_mut(o).fill(0.0);
        }
        // multiply step over unobserved rows (observed rows of `next` were copies)
        prev.fill(0.0);
        for &u in part.unobserved() {
            let (cols, vals) = t.row(u);
            let gu = g.row(u);
            if cols.is_empty() {
                prev.row_mut(u).scaled_add(1.0, &gu);
                continue;
            }
            for (&j, &w) in cols.iter().zip(vals) {
                prev.row_mut(j).scaled_add(w, &gu);
            }
        }
        std::mem::swap(&mut g, &mut prev);
    }
    for (k, &o) in part.observed().iter().enumerate() {
        grad_obs.row_mut(k).scaled_add(1.0, &g.row(o));
    }
    grad_obs
}

fn as_column(x: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((x.len(), 1), x).expect("column view")
}

/// Coupled DEFP4D on a scalar signal.
pub fn propagate(
    g: &WeightedDigraph,
    part: &NodePartition,
    x_obs: &[f64],
    cfg: &PropagationConfig,
) -> Result<PropagationResult> {
    if cfg.mode != PropagationMode::Coupled {
        return Err(Error::invalid("propagate runs coupled mode; use propagate_decoupled"));
    }
    if part.len() != g.len() {
        return Err(Error::shape(format!("partition covers {} nodes, graph has {}", part.len(), g.len())));
    }
    let stuck = unreachable_components(g, part);
    if !stuck.is_empty() {
        log::warn!("unobserved components without an observed neighbour keep their initial value: {stuck:?}");
    }
    let t = transition_coupled(g);
    let r = propagate_channels(&t.matrix, part, as_column(x_obs), cfg)?;
    Ok(PropagationResult {
        values: r.values.column(0).to_vec(),
        iterations: r.iterations,
        residual: r.residual,
    })
}

/// Exact minimiser of the energy with the observed entries fixed.
pub fn propagate_closed_form(g: &WeightedDigraph, part: &NodePartition, x_obs: &[f64]) -> Result<Vec<f64>> {
    let out = propagate_closed_form_channels(g, part, as_column(x_obs))?;
    Ok(out.column(0).to_vec())
}

pub fn propagate_closed_form_channels(
    g: &WeightedDigraph,
    part: &NodePartition,
    x_obs: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if x_obs.nrows() != part.observed().len() {
        return Err(Error::shape("observed rows do not match the partition"));
    }
    check_finite("observed signal", x_obs.iter().copied())?;
    let (p_uo, p_uu) = partition_blocks(g, part)?;
    let n = g.len();
    let f = x_obs.ncols();
    let mut out = Array2::zeros((n, f));
    for (k, &o) in part.observed().iter().enumerate() {
        out.row_mut(o).assign(&x_obs.row(k));
    }
    let nu = part.unobserved().len();
    if nu == 0 {
        return Ok(out);
    }
    let stuck = unreachable_components(g, part);
    if !stuck.is_empty() {
        return Err(Error::Singular { components: stuck });
    }
    let a = DMatrix::from_fn(nu, nu, |i, j| p_uu.get(i, j));
    let lu = a.lu();
    for c in 0..f {
        let col: Vec<f64> = x_obs.column(c).to_vec();
        let rhs = DVector::from_vec(p_uo.matvec(&col)).map(|v| -v);
        let sol = lu
            .solve(&rhs)
            .ok_or_else(|| Error::Singular { components: vec![part.unobserved().to_vec()] })?;
        for (k, &u) in part.unobserved().iter().enumerate() {
            out[[u, c]] = sol[k];
        }
    }
    Ok(out)
}

/// Rows normalised to sum to one; empty rows stay empty.
fn row_normalized(m: &CsrMatrix) -> CsrMatrix {
    let inv: Vec<f64> = m
        .row_sums()
        .iter()
        .map(|&s| if s > 0.0 { 1.0 / s } else { 0.0 })
        .collect();
    m.scale_rows(&inv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledResult {
    /// Propagated congestion deficit (mph below the reference speed).
    pub congestion: Vec<f64>,
    /// Propagated free-flow component.
    pub free_flow: Vec<f64>,
    /// `free_flow − congestion`, clamped, with observed entries restored.
    pub values: Vec<f64>,
    pub iterations: usize,
}

/// Propagates congestion deficits against traffic and free-flow speeds with
/// it, then recombines them.
///
/// Observed speeds split as `free = max(x, v_ref)` and
/// `deficit = max(v_ref − x, 0)` so that `free − deficit = x`. Each branch
/// sweeps with its own transition matrix, renormalised per row so a constant
/// boundary propagates unchanged.
pub fn propagate_decoupled(
    g: &WeightedDigraph,
    part: &NodePartition,
    x_obs: &[f64],
    cfg: &PropagationConfig,
) -> Result<DecoupledResult> {
    let v_ref = cfg
        .reference_speed
        .as_ref()
        .ok_or_else(|| Error::invalid("decoupled propagation requires a reference speed"))?;
    if v_ref.len() != g.len() {
        return Err(Error::shape(format!("reference speed has {} entries, graph has {}", v_ref.len(), g.len())));
    }
    if v_ref.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::invalid("reference speed must be finite and positive"));
    }
    if x_obs.len() != part.observed().len() {
        return Err(Error::shape("observed signal does not match the partition"));
    }
    check_finite("observed signal", x_obs.iter().copied())?;

    let (cog, free) = transition_decoupled(g);
    let cog = row_normalized(&cog.matrix);
    let free = row_normalized(&free.matrix);

    let obs = part.observed();
    let free_obs: Vec<f64> = x_obs.iter().zip(obs).map(|(&x, &i)| x.max(v_ref[i])).collect();
    let cog_obs: Vec<f64> = x_obs.iter().zip(obs).map(|(&x, &i)| (v_ref[i] - x).max(0.0)).collect();

    let branch_cfg = PropagationConfig {
        mode: PropagationMode::Coupled,
        ..cfg.clone()
    };
    let c = propagate_channels(&cog, part, as_column(&cog_obs), &branch_cfg)?;
    let f = propagate_channels(&free, part, as_column(&free_obs), &branch_cfg)?;

    let upper = v_ref
        .iter()
        .chain(x_obs)
        .fold(0.0f64, |m, &v| m.max(v));
    let congestion = c.values.column(0).to_vec();
    let free_flow = f.values.column(0).to_vec();
    let mut values: Vec<f64> = free_flow
        .iter()
        .zip(&congestion)
        .map(|(a, b)| (a - b).clamp(0.0, upper))
        .collect();
    for (k, &o) in obs.iter().enumerate() {
        values[o] = x_obs[k];
    }
    Ok(DecoupledResult {
        congestion,
        free_flow,
        values,
        iterations: c.iterations.max(f.iterations),
    })
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of the finite values.
pub fn percentile(values: impl IntoIterator<Item = f64>, q: f64) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Free-flow reference speed per node: the 85th percentile of that node's
/// history (`T × N`, NaN = missing), or the network-wide 85th percentile for
/// nodes without history.
pub fn reference_speed(history: ArrayView2<f64>) -> Result<Vec<f64>> {
    let global = percentile(history.iter().copied(), 85.0)
        .ok_or_else(|| Error::invalid("no measured values to estimate a reference speed"))?;
    Ok(history
        .axis_iter(Axis(1))
        .map(|col| percentile(col.iter().copied(), 85.0).unwrap_or(global))
        .collect())
}

/// Dispatches on `cfg.mode`; returns values and sweep count.
pub fn run(
    g: &WeightedDigraph,
    part: &NodePartition,
    x_obs: &[f64],
    cfg: &PropagationConfig,
) -> Result<(Vec<f64>, usize)> {
    match cfg.mode {
        PropagationMode::Coupled => propagate(g, part, x_obs, cfg).map(|r| (r.values, r.iterations)),
        PropagationMode::Decoupled => propagate_decoupled(g, part, x_obs, cfg).map(|r| (r.values, r.iterations)),
    }
}

/// `½ xᵀ P x`; equal to [`dirichlet_energy`] and kept as an independent route.
pub fn dirichlet_energy_quadratic(g: &WeightedDigraph, x: ArrayView1<f64>) -> f64 {
    let p = energy_operator(g);
    let px = p.matvec(x.as_slice().expect("contiguous"));
    0.5 * x.iter().zip(&px).map(|(a, b)| a * b).sum::<f64>()
}
