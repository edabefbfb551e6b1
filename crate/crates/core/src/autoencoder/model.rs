use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::params::{Block, ModelParams};
use crate::diffusion::{kernel_pair, DiffusionKernel};
use crate::graph::{transition_coupled, NodePartition, WeightedDigraph};
use crate::propagation::{
    propagate_channels, propagate_channels_adjoint, InitPolicy, PropagationConfig, PropagationMode,
};
use crate::sparse::CsrMatrix;
use crate::{Error, Result, SLOTS_PER_DAY};

/// One estimation window: `N × L` speeds with a measurement mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalWindow {
    /// Speeds in mph; entries where `mask` is false are ignored.
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
    /// 5-minute slot of day of the last column.
    pub slot_of_day: usize,
    /// Which nodes the model may read.
    pub partition: NodePartition,
    /// Index of the first column in the source series.
    pub start: usize,
}

impl SignalWindow {
    pub fn validate(&self, window_len: usize) -> Result<()> {
        if self.values.dim() != self.mask.dim() {
            return Err(Error::shape("window values and mask differ in shape"));
        }
        if self.values.ncols() != window_len {
            return Err(Error::shape(format!(
                "window has {} steps, model expects {window_len}",
                self.values.ncols()
            )));
        }
        if self.partition.len() != self.values.nrows() {
            return Err(Error::shape("window partition does not match its row count"));
        }
        if self.slot_of_day >= SLOTS_PER_DAY {
            return Err(Error::invalid(format!("slot_of_day {} out of range", self.slot_of_day)));
        }
        let bad = Zip::from(&self.values)
            .and(&self.mask)
            .fold(false, |acc, &v, &m| acc || (m && !(v.is_finite() && v >= 0.0)));
        if bad {
            return Err(Error::invalid("measured window entries must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Same window with a different visible set.
    pub fn with_partition(&self, partition: NodePartition) -> SignalWindow {
        SignalWindow {
            partition,
            ..self.clone()
        }
    }
}

/// Diffusion kernels and the coupled transition matrix of one graph.
#[derive(Debug, Clone)]
pub struct GraphOperators {
    pub cog: DiffusionKernel,
    pub free: DiffusionKernel,
    pub transition: CsrMatrix,
}

impl GraphOperators {
    pub fn new(g: &WeightedDigraph, alpha: f64, k_max: usize) -> Result<Self> {
        let (cog, free) = kernel_pair(g, alpha, k_max)?;
        Ok(GraphOperators {
            cog,
            free,
            transition: transition_coupled(g).matrix,
        })
    }

    pub fn for_model(g: &WeightedDigraph, params: &ModelParams) -> Result<Self> {
        GraphOperators::new(g, params.config.alpha, params.config.k_max)
    }

    pub fn len(&self) -> usize {
        self.transition.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Latent propagation settings: zero init, exactly `iters` sweeps.
pub fn latent_config(iters: usize) -> PropagationConfig {
    PropagationConfig {
        max_iters: iters,
        tolerance: 0.0,
        mode: PropagationMode::Coupled,
        init: InitPolicy::Zeros,
        reference_speed: None,
    }
}

fn add_bias(mut x: Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    x += &b.row(0);
    x
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Array2<f64>,
    s_cog_h: Array2<f64>,
    s_free_h: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

fn block_forward(b: &Block, x: ArrayView2<f64>, ops: &GraphOperators) -> Result<(Array2<f64>, BlockCache)> {
    let h = add_bias(x.dot(&b.w_in), &b.b_in);
    let s_cog_h = ops.cog.diffuse(h.view())?;
    let s_free_h = ops.free.diffuse(h.view())?;
    let pre = &h + &s_cog_h.dot(&b.w_cog) + &s_free_h.dot(&b.w_free);
    let act = pre.mapv(|v| v.max(0.0));
    let out = add_bias(act.dot(&b.w_out), &b.b_out);
    Ok((
        out,
        BlockCache {
            input: x.to_owned(),
            s_cog_h,
            s_free_h,
            pre,
            act,
        },
    ))
}

/// Accumulates parameter gradients into `grad` and returns the input gradient.
fn block_backward(
    b: &Block,
    cache: &BlockCache,
    d_out: ArrayView2<f64>,
    ops: &GraphOperators,
    grad: &mut Block,
) -> Result<Array2<f64>> {
    grad.w_out += &cache.act.t().dot(&d_out);
    grad.b_out += &d_out.sum_axis(Axis(0));
    let mut d_pre = d_out.dot(&b.w_out.t());
    Zip::from(&mut d_pre).and(&cache.pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    grad.w_cog += &cache.s_cog_h.t().dot(&d_pre);
    grad.w_free += &cache.s_free_h.t().dot(&d_pre);
    let d_h = &d_pre
        + &ops.cog.diffuse_transpose(d_pre.dot(&b.w_cog.t()).view())?
        + &ops.free.diffuse_transpose(d_pre.dot(&b.w_free.t()).view())?;
    grad.w_in += &cache.input.t().dot(&d_h);
    grad.b_in += &d_h.sum_axis(Axis(0));
    Ok(d_h.dot(&b.w_in.t()))
}

/// Observed rows as `[z-scored values ∥ timestamp embedding ∥ mask embedding]`.
///
/// Unmeasured entries are filled with the dataset mean (zero after z-scoring).
pub fn augment_features(window: &SignalWindow, params: &ModelParams) -> Result<Array2<f64>> {
    Ok(augment_with_cache(window, params)?.0)
}

fn augment_with_cache(window: &SignalWindow, params: &ModelParams) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let c = &params.config;
    window.validate(c.window_len)?;
    let obs = window.partition.observed();
    let l = c.window_len;
    let mut values = Array2::zeros((obs.len(), l));
    let mut mask = Array2::zeros((obs.len(), l));
    for (k, &i) in obs.iter().enumerate() {
        for t in 0..l {
            if window.mask[[i, t]] {
                values[[k, t]] = c.norm.normalize(window.values[[i, t]]);
                mask[[k, t]] = 1.0;
            }
        }
    }
    let mask_emb = add_bias(mask.dot(&params.mask_w), &params.mask_b).mapv(f64::tanh);
    let mut aug = Array2::zeros((obs.len(), c.input_width()));
    aug.slice_mut(s![.., ..l]).assign(&values);
    aug.slice_mut(s![.., l..l + c.time_dim])
        .assign(&params.time_table.row(window.slot_of_day));
    aug.slice_mut(s![.., l + c.time_dim..]).assign(&mask_emb);
    Ok((aug, mask, mask_emb))
}

/// Encodes the observed rows on the observed subgraph's operators.
pub fn encode(params: &ModelParams, aug: ArrayView2<f64>, obs_ops: &GraphOperators) -> Result<Array2<f64>> {
    if aug.nrows() != obs_ops.len() {
        return Err(Error::shape(format!(
            "{} observed rows but the observed subgraph has {} nodes",
            aug.nrows(),
            obs_ops.len()
        )));
    }
    if aug.ncols() != params.config.input_width() {
        return Err(Error::shape("augmented feature width does not match the model"));
    }
    Ok(block_forward(&params.encoder, aug, obs_ops)?.0)
}

/// Runs latent propagation on every latent channel; observed rows are copied.
pub fn extend_latent(
    z_obs: ArrayView2<f64>,
    g: &WeightedDigraph,
    part: &NodePartition,
    cfg: &PropagationConfig,
) -> Result<Array2<f64>> {
    let t = transition_coupled(g);
    Ok(propagate_channels(&t.matrix, part, z_obs, cfg)?.values)
}

/// Decodes latent rows to z-scored speeds on the full graph.
pub fn decode(params: &ModelParams, z: ArrayView2<f64>, full_ops: &GraphOperators) -> Result<Array2<f64>> {
    if z.nrows() != full_ops.len() || z.ncols() != params.config.latent {
        return Err(Error::shape(format!(
            "latent matrix is {:?}, expected ({}, {})",
            z.dim(),
            full_ops.len(),
            params.config.latent
        )));
    }
    Ok(block_forward(&params.decoder, z, full_ops)?.0)
}

struct ForwardCache {
    mask: Array2<f64>,
    mask_emb: Array2<f64>,
    enc: BlockCache,
    latent_iters: usize,
    dec: BlockCache,
    y: Array2<f64>,
}

fn forward_cached(
    params: &ModelParams,
    window: &SignalWindow,
    full_ops: &GraphOperators,
    obs_ops: &GraphOperators,
    latent: &PropagationConfig,
) -> Result<ForwardCache> {
    let n = window.values.nrows();
    if full_ops.len() != n {
        return Err(Error::shape(format!("window has {n} nodes, graph has {}", full_ops.len())));
    }
    let (aug, mask, mask_emb) = augment_with_cache(window, params)?;
    if aug.nrows() != obs_ops.len() {
        return Err(Error::shape(format!(
            "partition has {} observed nodes, observed subgraph has {}",
            aug.nrows(),
            obs_ops.len()
        )));
    }
    let (z_obs, enc) = block_forward(&params.encoder, aug.view(), obs_ops)?;
    let prop = propagate_channels(&full_ops.transition, &window.partition, z_obs.view(), latent)?;
    let (y, dec) = block_forward(&params.decoder, prop.values.view(), full_ops)?;
    Ok(ForwardCache {
        mask,
        mask_emb,
        enc,
        latent_iters: prop.iterations,
        dec,
        y,
    })
}

/// Full pipeline with precomputed operators; returns z-scored estimates.
pub fn forward_normalized(
    params: &ModelParams,
    window: &SignalWindow,
    full_ops: &GraphOperators,
    obs_ops: &GraphOperators,
    latent: &PropagationConfig,
) -> Result<Array2<f64>> {
    Ok(forward_cached(params, window, full_ops, obs_ops, latent)?.y)
}

/// Full pipeline with precomputed operators; returns estimates in mph.
pub fn forward_with(
    params: &ModelParams,
    window: &SignalWindow,
    full_ops: &GraphOperators,
    obs_ops: &GraphOperators,
    latent: &PropagationConfig,
) -> Result<Array2<f64>> {
    let norm = params.config.norm;
    Ok(forward_normalized(params, window, full_ops, obs_ops, latent)?.mapv(|z| norm.denormalize(z)))
}

/// Estimates every node of `g` from the window's observed rows, in mph.
///
/// `g_obs` must be the subgraph of `g` induced by the window's observed nodes.
pub fn forward(
    params: &ModelParams,
    window: &SignalWindow,
    g: &WeightedDigraph,
    g_obs: &WeightedDigraph,
    latent: &PropagationConfig,
) -> Result<Array2<f64>> {
    if g_obs.len() != window.partition.observed().len() {
        return Err(Error::shape("observed subgraph does not match the window partition"));
    }
    let full_ops = GraphOperators::for_model(g, params)?;
    let obs_ops = GraphOperators::for_model(g_obs, params)?;
    forward_with(params, window, &full_ops, &obs_ops, latent)
}

/// Mean squared error (z-scored units) over the entries selected by
/// `eval_mask`, and its gradient with respect to every parameter array.
pub fn loss_and_gradients(
    params: &ModelParams,
    window: &SignalWindow,
    targets: ArrayView2<f64>,
    eval_mask: ArrayView2<bool>,
    full_ops: &GraphOperators,
    obs_ops: &GraphOperators,
    latent: &PropagationConfig,
) -> Result<(f64, ModelParams)> {
    if latent.init != InitPolicy::Zeros {
        return Err(Error::invalid("latent propagation must use zero initialisation for training"));
    }
    let cache = forward_cached(params, window, full_ops, obs_ops, latent)?;
    if targets.dim() != cache.y.dim() || eval_mask.dim() != cache.y.dim() {
        return Err(Error::shape("targets or evaluation mask do not match the window"));
    }
    let count = eval_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::invalid("evaluation mask selects no entries"));
    }
    let norm = params.config.norm;
    let mut d_y = Array2::zeros(cache.y.dim());
    let mut loss = 0.0;
    Zip::from(&mut d_y)
        .and(&cache.y)
        .and(targets)
        .and(eval_mask)
        .for_each(|d, &y, &t, &m| {
            if m {
                let r = y - norm.normalize(t);
                loss += r * r;
                *d = 2.0 * r / count as f64;
            }
        });
    loss /= count as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {loss}")));
    }

    let mut grad = params.zeros_like();
    let d_z = block_backward(&params.decoder, &cache.dec, d_y.view(), full_ops, &mut grad.decoder)?;
    let d_z_obs = propagate_channels_adjoint(&full_ops.transition, &window.partition, d_z.view(), cache.latent_iters);
    let d_aug = block_backward(&params.encoder, &cache.enc, d_z_obs.view(), obs_ops, &mut grad.encoder)?;

    let c = &params.config;
    let l = c.window_len;
    let d_time = d_aug.slice(s![.., l..l + c.time_dim]).sum_axis(Axis(0));
    grad.time_table.row_mut(window.slot_of_day).assign(&d_time);
    let mut d_mask_pre = d_aug.slice(s![.., l + c.time_dim..]).to_owned();
    Zip::from(&mut d_mask_pre)
        .and(&cache.mask_emb)
        .for_each(|d, &e| *d *= 1.0 - e * e);
    grad.mask_w = cache.mask.t().dot(&d_mask_pre);
    grad.mask_b = d_mask_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
    Ok((loss, grad))
}
