//! Dynamic-masking training of the graph auto-encoder.
//!
//! Every batch is one window. A fresh random subset of the available sensors
//! is hidden from the encoder and the loss is taken on those sensors'
//! measured entries only, so the model learns to estimate nodes it cannot
//! see.

use ndarray::{Array2, Zip};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::{latent_config, loss_and_gradients, GraphOperators, ModelParams, SignalWindow};
use crate::data::{window_iter, SpeedSeries};
use crate::graph::{NodePartition, WeightedDigraph};
use crate::{Error, Result};

/// Which entries enter the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossScope {
    /// Measured entries of the nodes hidden in this batch.
    MaskedOnly,
    /// Measured entries of every available node, hidden or not.
    AllAvailable,
}

impl std::str::FromStr for LossScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(LossScope::MaskedOnly),
            "all" => Ok(LossScope::AllAvailable),
            other => Err(Error::invalid(format!("unknown loss scope `{other}` (masked|all)"))),
        }
    }
}

impl std::fmt::Display for LossScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossScope::MaskedOnly => "masked",
            LossScope::AllAvailable => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Fraction of available sensors hidden per batch.
    pub mask_ratio: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    /// Consecutive epochs without improvement before stopping.
    pub patience: usize,
    /// Leading fraction of the series used for training.
    pub split_ratio: f64,
    /// Steps between consecutive training windows.
    pub stride: usize,
    pub loss_scope: LossScope,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mask_ratio: 0.25,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 100,
            patience: 10,
            split_ratio: 0.7,
            stride: 12,
            loss_scope: LossScope::MaskedOnly,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("training config: {m}")));
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad("mask_ratio must lie in (0, 1)");
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad("split_ratio must lie in (0, 1)");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be nonnegative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.stride == 0 {
            return bad("stride must be at least 1");
        }
        Ok(())
    }
}

/// Splits at row `floor(ratio · T)`: the prefix trains, the suffix tests.
/// Each side must hold at least one window of `window_len` steps.
pub fn chronological_split(series: &SpeedSeries, ratio: f64, window_len: usize) -> Result<(SpeedSeries, SpeedSeries)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid("split ratio must lie in (0, 1)"));
    }
    let t = series.len();
    // the epsilon keeps exact products such as 0.7 · 5760 from rounding down
    let cut = (ratio * t as f64 + 1e-9).floor() as usize;
    if cut < window_len || t - cut < window_len {
        return Err(Error::invalid(format!(
            "series of {t} steps is too short for a {ratio} split with {window_len}-step windows"
        )));
    }
    Ok((series.slice_time(0, cut), series.slice_time(cut, t)))
}

/// Uniform random subset of `available` of size `round(ratio · n)`, clamped
/// to `[1, n − 1]`; returned sorted.
pub fn sample_mask(available: &[usize], ratio: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let n = available.len();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 available sensors to mask, have {n}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid("mask ratio must lie in (0, 1)"));
    }
    let k = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut out: Vec<usize> = index::sample(rng, n, k).into_iter().map(|i| available[i]).collect();
    out.sort_unstable();
    Ok(out)
}

/// First and second moment estimates for every parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected adaptive-moment update.
pub fn adaptive_moment_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2, lr, eps) = (cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.eps);
    let arrays = params
        .arrays_mut()
        .into_iter()
        .zip(grads.arrays())
        .zip(state.m.arrays_mut().into_iter().zip(state.v.arrays_mut()));
    for (((_, p), (_, g)), ((_, m), (_, v))) in arrays {
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss in z-scored units.
    pub mean_loss: f64,
    pub batches: usize,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters at the end of the epoch with the lowest mean loss.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Counts epochs since the last strict improvement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records an epoch loss; returns whether it improved on the best.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

/// Loss-selection mask for one batch: measured entries of the chosen rows.
fn eval_mask(window: &SignalWindow, rows: &[usize]) -> Array2<bool> {
    let mut m = Array2::from_elem(window.mask.dim(), false);
    for &i in rows {
        m.row_mut(i).assign(&window.mask.row(i));
    }
    m
}

/// Trains on every `cfg.stride`-spaced window of `train`, reading only the
/// `available` nodes of `g`.
pub fn fit(
    init: ModelParams,
    train: &SpeedSeries,
    available: &[usize],
    g: &WeightedDigraph,
    cfg: &TrainConfig,
) -> Result<FitResult> {
    fit_with(init, train, available, g, cfg, |_, _| {})
}

/// [`fit`] with a hook called after every epoch with its record and the
/// current parameters.
pub fn fit_with(
    init: ModelParams,
    train: &SpeedSeries,
    available: &[usize],
    g: &WeightedDigraph,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ModelParams),
) -> Result<FitResult> {
    cfg.validate()?;
    init.config.validate()?;
    if train.n_nodes() != g.len() {
        return Err(Error::shape(format!("series has {} nodes, graph has {}", train.n_nodes(), g.len())));
    }
    let all = NodePartition::new(g.len(), available)?;
    let windows: Vec<SignalWindow> = window_iter(train, init.config.window_len, cfg.stride, &all).collect();
    if windows.is_empty() {
        return Err(Error::invalid("training series is shorter than one window"));
    }
    let full_ops = GraphOperators::for_model(g, &init)?;
    let latent = latent_config(init.config.train_latent_iters);
    let available = all.observed().to_vec();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut adam = AdamState::new(&params);
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let mut total = 0.0;
        let mut batches = 0;
        for window in &windows {
            let hidden = sample_mask(&available, cfg.mask_ratio, &mut rng)?;
            let visible: Vec<usize> = available.iter().copied().filter(|i| hidden.binary_search(i).is_err()).collect();
            let batch = window.with_partition(NodePartition::new(g.len(), &visible)?);
            let targets = match cfg.loss_scope {
                LossScope::MaskedOnly => eval_mask(window, &hidden),
                LossScope::AllAvailable => eval_mask(window, &available),
            };
            if !targets.iter().any(|&m| m) {
                continue;
            }
            let obs_ops = GraphOperators::for_model(&g.induced_subgraph(&visible), &params)?;
            let (loss, grads) = loss_and_gradients(
                &params,
                &batch,
                window.values.view(),
                targets.view(),
                &full_ops,
                &obs_ops,
                &latent,
            )
            .map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!(
                    "{msg} at epoch {epoch}, window starting at step {}",
                    window.start
                )),
                other => other,
            })?;
            adaptive_moment_step(&mut params, &grads, &mut adam, cfg);
            if !params.is_finite() {
                return Err(Error::NonFinite(format!(
                    "parameters diverged at epoch {epoch}, window starting at step {}",
                    window.start
                )));
            }
            total += loss;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::invalid("no training window has a measured entry to score"));
        }
        let mean_loss = total / batches as f64;
        let record = EpochRecord {
            epoch,
            mean_loss,
            batches,
        };
        on_epoch(&record, &params);
        history.push(record);
        log::info!("epoch {epoch}: mean masked loss {mean_loss:.6} over {batches} batches");
        if stopper.observe(mean_loss) {
            best = params.clone();
            best_epoch = epoch;
        }
        if stopper.should_stop() {
            stopped_early = true;
            break;
        }
    }
    Ok(FitResult {
        params: best,
        history,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::{ModelConfig, NormStats};
    use crate::data::{generate_synthetic, SynthConfig};
    use approx::assert_abs_diff_eq;

    fn tiny_model(norm: NormStats, seed: u64) -> ModelParams {
        let cfg = ModelConfig {
            window_len: 12,
            hidden: 16,
            latent: 8,
            time_dim: 4,
            mask_dim: 4,
            train_latent_iters: 20,
            latent_iters: 40,
            norm,
            ..ModelConfig::default()
        };
        ModelParams::init(cfg, seed).unwrap()
    }

    fn corridor(n: usize, days: usize) -> (SpeedSeries, WeightedDigraph) {
        let d = generate_synthetic(&SynthConfig {
            n_nodes: n,
            days,
            seed: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let g = d.graph().unwrap();
        (d.observed, g)
    }

    #[test]
    fn split_counts_follow_floor_arithmetic() {
        let (s, _) = corridor(3, 30);
        let (tr, te) = chronological_split(&s, 0.7, 12).unwrap();
        assert_eq!(tr.len(), 6048);
        let part = NodePartition::new(3, &[0, 1, 2]).unwrap();
        assert_eq!(window_iter(&tr, 12, 12, &part).count(), 504);
        assert_eq!(window_iter(&te, 12, 12, &part).count(), 216);
        assert!(tr.timestamps.last() < te.timestamps.first());

        let ten = s.slice_time(0, 120);
        let (a, b) = chronological_split(&ten, 0.7, 12).unwrap();
        assert_eq!(window_iter(&a, 12, 12, &part).count(), 7);
        assert_eq!(window_iter(&b, 12, 12, &part).count(), 3);
        assert!(chronological_split(&s.slice_time(0, 20), 0.7, 12).is_err());
        // 0.7 · 5760 is 4031.999… in floating point
        let (a, _) = chronological_split(&s.slice_time(0, 5760), 0.7, 12).unwrap();
        assert_eq!(a.len(), 4032);
    }

    #[test]
    fn mask_sizes_and_reproducibility() {
        let avail: Vec<usize> = (0..156).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = sample_mask(&avail, 0.25, &mut rng).unwrap();
        assert_eq!(m.len(), 39);
        assert!(m.windows(2).all(|w| w[0] < w[1]));
        let two = [3, 8];
        for ratio in [0.01, 0.5, 0.99] {
            assert_eq!(sample_mask(&two, ratio, &mut rng).unwrap().len(), 1);
        }
        assert!(sample_mask(&[1], 0.5, &mut rng).is_err());
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            assert_eq!(sample_mask(&avail, 0.3, &mut a).unwrap(), sample_mask(&avail, 0.3, &mut b).unwrap());
        }
    }

    #[test]
    fn adam_closed_form_first_step() {
        let p0 = tiny_model(NormStats { mean: 50.0, std: 10.0 }, 1);
        let mut grads = p0.zeros_like();
        for (i, (_, a)) in grads.arrays_mut().into_iter().enumerate() {
            a.iter_mut().enumerate().for_each(|(j, v)| *v = ((i + j) as f64 * 0.37).sin() * 3.0);
        }
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut p = p0.clone();
        let mut st = AdamState::new(&p);
        adaptive_moment_step(&mut p, &grads, &mut st, &cfg);
        for (((_, a), (_, b)), (_, g)) in p.arrays().into_iter().zip(p0.arrays()).zip(grads.arrays()) {
            for ((&x, &y), &gv) in a.iter().zip(b.iter()).zip(g.iter()) {
                let expect = y - 0.01 * gv / (gv.abs() + cfg.eps);
                assert_abs_diff_eq!(x, expect, epsilon = 1e-12);
            }
        }

        let mut q = p0.clone();
        let mut st = AdamState::new(&q);
        adaptive_moment_step(&mut q, &p0.zeros_like(), &mut st, &cfg);
        assert_eq!(q, p0);
    }

    #[test]
    fn early_stopping_counter() {
        let mut s = EarlyStopping::new(3);
        assert!(s.observe(1.0));
        assert!(!s.observe(1.0));
        assert!(!s.observe(2.0));
        assert!(!s.should_stop());
        assert!(!s.observe(1.5));
        assert!(s.should_stop());
        assert!(s.observe(0.5));
        assert!(!s.should_stop());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (s, g) = corridor(8, 1);
        let norm = NormStats::from_values(s.measured_values()).unwrap();
        let p = tiny_model(norm, 2);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 3,
            ..TrainConfig::default()
        };
        let avail: Vec<usize> = (0..8).collect();
        let out = fit(p.clone(), &s.slice_time(0, 48), &avail, &g, &cfg).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.history.len(), 3);
    }

    #[test]
    fn fit_is_reproducible_and_respects_patience() {
        let (s, g) = corridor(8, 1);
        let norm = NormStats::from_values(s.measured_values()).unwrap();
        let avail: Vec<usize> = vec![0, 1, 2, 4, 5, 7];
        let cfg = TrainConfig {
            max_epochs: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        let data = s.slice_time(0, 96);
        let a = fit(tiny_model(norm, 3), &data, &avail, &g, &cfg).unwrap();
        let b = fit(tiny_model(norm, 3), &data, &avail, &g, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);

        let stall = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 50,
            patience: 2,
            ..cfg
        };
        let c = fit(tiny_model(norm, 3), &data, &avail, &g, &stall).unwrap();
        // constant loss: epoch 0 improves, epochs 1 and 2 do not
        assert!(c.stopped_early);
        assert_eq!(c.history.len(), 3);
        assert_eq!(c.best_epoch, 0);
    }

    #[test]
    fn single_window_overfits() {
        let d = generate_synthetic(&SynthConfig {
            n_nodes: 15,
            days: 1,
            noise_std_mph: 0.0,
            missing_rate: 0.0,
            seed: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let g = d.graph().unwrap();
        let s = d.observed;
        let norm = NormStats::from_values(s.measured_values()).unwrap();
        // the window with the widest spread of speeds
        let spread = |k: usize| {
            let w = s.values.slice(ndarray::s![k * 12..k * 12 + 12, ..]);
            w.fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - w.fold(f64::INFINITY, |a, &b| a.min(b))
        };
        let k = (0..24).max_by(|&a, &b| spread(a).total_cmp(&spread(b))).unwrap();
        let window = s.slice_time(k * 12, k * 12 + 12);
        let avail: Vec<usize> = (0..15).collect();
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            max_epochs: 500,
            patience: 500,
            seed: 1,
            ..TrainConfig::default()
        };
        let out = fit(tiny_model(norm, 4), &window, &avail, &g, &cfg).unwrap();
        let first = out.history[0].mean_loss;
        let best = out.history.iter().map(|h| h.mean_loss).fold(f64::INFINITY, f64::min);
        assert!(best < 0.1 * first, "best {best} vs first {first}");
    }
}
