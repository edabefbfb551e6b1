use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result, SLOTS_PER_DAY};

/// Architecture and normalisation settings of a DGAE model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Window length `L` (time steps per sample).
    pub window_len: usize,
    /// Hidden width `H` of both diffusion blocks.
    pub hidden: usize,
    /// Latent width `D`.
    pub latent: usize,
    /// Timestamp embedding width `D_t`.
    pub time_dim: usize,
    /// Missing-mask embedding width `D_m`.
    pub mask_dim: usize,
    /// Diffusion decay rate.
    pub alpha: f64,
    /// Diffusion truncation depth.
    pub k_max: usize,
    /// Latent propagation sweeps at inference.
    pub latent_iters: usize,
    /// Latent propagation sweeps during training.
    pub train_latent_iters: usize,
    pub norm: NormStats,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window_len: 12,
            hidden: 64,
            latent: 32,
            time_dim: 16,
            mask_dim: 16,
            alpha: 0.2,
            k_max: 3,
            latent_iters: 90,
            train_latent_iters: 30,
            norm: NormStats { mean: 0.0, std: 1.0 },
        }
    }
}

impl ModelConfig {
    pub fn input_width(&self) -> usize {
        self.window_len + self.time_dim + self.mask_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("window_len", self.window_len),
            ("hidden", self.hidden),
            ("latent", self.latent),
            ("time_dim", self.time_dim),
            ("mask_dim", self.mask_dim),
            ("k_max", self.k_max),
            ("latent_iters", self.latent_iters),
            ("train_latent_iters", self.train_latent_iters),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("alpha must lie in (0, 1)"));
        }
        if !(self.norm.std > 0.0) || !self.norm.mean.is_finite() || !self.norm.std.is_finite() {
            return Err(Error::invalid("normalisation std must be positive and finite"));
        }
        Ok(())
    }
}

/// Dataset mean and standard deviation in mph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    /// Statistics of the finite entries.
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return Err(Error::invalid("no finite values for normalisation"));
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        Ok(NormStats {
            mean,
            std: if std > 0.0 { std } else { 1.0 },
        })
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// One diffusion block: in-projection, dual-branch diffusion with a residual
/// path, ReLU, out-projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub w_in: Array2<f64>,
    pub b_in: Array2<f64>,
    pub w_cog: Array2<f64>,
    pub w_free: Array2<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array2<f64>,
}

impl Block {
    fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Block {
            w_in: Array2::zeros((input, hidden)),
            b_in: Array2::zeros((1, hidden)),
            w_cog: Array2::zeros((hidden, hidden)),
            w_free: Array2::zeros((hidden, hidden)),
            w_out: Array2::zeros((hidden, output)),
            b_out: Array2::zeros((1, output)),
        }
    }
}

/// Every learnable array of the model plus its normalisation statistics.
///
/// No shape depends on the number of nodes, so one set of parameters runs
/// on any graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: Block,
    pub decoder: Block,
    /// One row per 5-minute slot of the day.
    pub time_table: Array2<f64>,
    pub mask_w: Array2<f64>,
    pub mask_b: Array2<f64>,
}

pub(crate) const ARRAY_NAMES: [&str; 15] = [
    "enc_in_w",
    "enc_in_b",
    "enc_diff_cog_w",
    "enc_diff_free_w",
    "enc_out_w",
    "enc_out_b",
    "dec_in_w",
    "dec_in_b",
    "dec_diff_cog_w",
    "dec_diff_free_w",
    "dec_out_w",
    "dec_out_b",
    "timestamp_table",
    "mask_w",
    "mask_b",
];

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let c = &config;
        ModelParams {
            encoder: Block::zeros(c.input_width(), c.hidden, c.latent),
            decoder: Block::zeros(c.latent, c.hidden, c.window_len),
            time_table: Array2::zeros((SLOTS_PER_DAY, c.time_dim)),
            mask_w: Array2::zeros((c.window_len, c.mask_dim)),
            mask_b: Array2::zeros((1, c.mask_dim)),
            config,
        }
    }

    /// Glorot-uniform weights, zero biases, small uniform timestamp rows.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::zeros(config);
        let c = p.config.clone();
        p.encoder.w_in = glorot(c.input_width(), c.hidden, &mut rng);
        p.encoder.w_cog = glorot(c.hidden, c.hidden, &mut rng);
        p.encoder.w_free = glorot(c.hidden, c.hidden, &mut rng);
        p.encoder.w_out = glorot(c.hidden, c.latent, &mut rng);
        p.decoder.w_in = glorot(c.latent, c.hidden, &mut rng);
        p.decoder.w_cog = glorot(c.hidden, c.hidden, &mut rng);
        p.decoder.w_free = glorot(c.hidden, c.hidden, &mut rng);
        p.decoder.w_out = glorot(c.hidden, c.window_len, &mut rng);
        p.time_table = Array2::from_shape_fn((SLOTS_PER_DAY, c.time_dim), |_| rng.random_range(-0.1..0.1));
        p.mask_w = glorot(c.window_len, c.mask_dim, &mut rng);
        Ok(p)
    }

    /// Gradient buffer with the same shapes.
    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(self.config.clone())
    }

    pub fn arrays(&self) -> [(&'static str, &Array2<f64>); 15] {
        let (e, d) = (&self.encoder, &self.decoder);
        let refs = [
            &e.w_in, &e.b_in, &e.w_cog, &e.w_free, &e.w_out, &e.b_out, &d.w_in, &d.b_in, &d.w_cog,
            &d.w_free, &d.w_out, &d.b_out, &self.time_table, &self.mask_w, &self.mask_b,
        ];
        std::array::from_fn(|k| (ARRAY_NAMES[k], refs[k]))
    }

    pub fn arrays_mut(&mut self) -> [(&'static str, &mut Array2<f64>); 15] {
        let (e, d) = (&mut self.encoder, &mut self.decoder);
        let refs = [
            &mut e.w_in,
            &mut e.b_in,
            &mut e.w_cog,
            &mut e.w_free,
            &mut e.w_out,
            &mut e.b_out,
            &mut d.w_in,
            &mut d.b_in,
            &mut d.w_cog,
            &mut d.w_free,
            &mut d.w_out,
            &mut d.b_out,
            &mut self.time_table,
            &mut self.mask_w,
            &mut self.mask_b,
        ];
        let mut it = refs.into_iter();
        std::array::from_fn(|k| (ARRAY_NAMES[k], it.next().expect("15 arrays")))
    }

    /// Expected shape of every named array under `config`.
    pub fn expected_shapes(config: &ModelConfig) -> [(&'static str, (usize, usize)); 15] {
        let z = ModelParams::zeros(config.clone());
        let arrays = z.arrays();
        std::array::from_fn(|k| (arrays[k].0, arrays[k].1.dim()))
    }

    /// Fails on the first array whose shape disagrees with `config`.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        for ((name, arr), (_, want)) in self.arrays().iter().zip(ModelParams::expected_shapes(config)) {
            if arr.dim() != want {
                return Err(Error::Checkpoint {
                    array: name.to_string(),
                    msg: format!("shape {:?} does not match configured {:?}", arr.dim(), want),
                });
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }

    pub fn num_parameters(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    /// `self += scale * other`, array by array.
    pub fn add_scaled(&mut self, scale: f64, other: &ModelParams) {
        for ((_, a), (_, b)) in self.arrays_mut().into_iter().zip(other.arrays()) {
            a.scaled_add(scale, b);
        }
    }
}
