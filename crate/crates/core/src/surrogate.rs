//! Feed-forward neural-network surrogate for the Monte Carlo choice
//! oracle: maps six scaled log generalized costs plus the two correlation
//! parameters to six mode probabilities. Implemented and trained in-repo
//! (plain mini-batch gradient descent with momentum, per-output binary
//! cross-entropy on soft Monte Carlo targets); no external ML framework.

use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mc::{estimate_probs_mc, RngStream};
use crate::types::{Mode, PerMode};

/// Layer widths, input to output. Fixed by the surrogate contract; the
/// loader rejects files with any other architecture.
pub const LAYER_SIZES: [usize; 5] = [8, 8, 12, 8, 6];
pub const INPUT_DIM: usize = LAYER_SIZES[0];
pub const OUTPUT_DIM: usize = LAYER_SIZES[4];

/// Sentinel input value marking an unavailable mode.
pub const UNAVAILABLE_SENTINEL: f64 = 20.0;
/// Centered scaled log costs are clamped to this magnitude; beyond it the
/// choice probabilities are saturated anyway.
pub const INPUT_CLAMP: f64 = 8.0;

const MAGIC: &[u8; 8] = b"MSHIFTNN";
const FORMAT_VERSION: u32 = 1;

/// One training/validation point: raw scaled log costs (`ln(g_m)/σ`,
/// `+inf` for unavailable modes), the correlation pair, and the
/// oracle-estimated probability target.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateSample {
    pub scaled_log_costs: PerMode<f64>,
    pub cor_tfs: f64,
    pub cor_fs: f64,
    pub target_probs: PerMode<f64>,
}

/// Network input encoding: scaled log costs are centered on the mean over
/// available modes (choice is invariant to a common shift, so this loses
/// nothing), clamped to ±[`INPUT_CLAMP`], with unavailable modes pinned at
/// [`UNAVAILABLE_SENTINEL`]; the correlation pair fills the last two slots.
pub fn encode_inputs(
    scaled_log_costs: &PerMode<f64>,
    cor_tfs: f64,
    cor_fs: f64,
) -> Result<[f64; INPUT_DIM]> {
    let mut sum = 0.0;
    let mut n_finite = 0usize;
    for (_, &x) in scaled_log_costs.iter() {
        if x.is_nan() || x == f64::NEG_INFINITY {
            return Err(Error::invalid_input(format!(
                "scaled log cost must be finite or +inf, got {x}"
            )));
        }
        if x.is_finite() {
            sum += x;
            n_finite += 1;
        }
    }
    if n_finite == 0 {
        return Err(Error::NoAvailableMode);
    }
    let mean = sum / n_finite as f64;
    let mut input = [0.0; INPUT_DIM];
    for (mode, &x) in scaled_log_costs.iter() {
        input[mode.index()] = if x.is_finite() {
            (x - mean).clamp(-INPUT_CLAMP, INPUT_CLAMP)
        } else {
            UNAVAILABLE_SENTINEL
        };
    }
    input[6] = cor_tfs;
    input[7] = cor_fs;
    Ok(input)
}

/// A sample in network coordinates: encoded input and target vector.
#[derive(Debug, Clone)]
pub struct EncodedSample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

impl EncodedSample {
    pub fn from_sample(s: &SurrogateSample) -> Result<EncodedSample> {
        let input = encode_inputs(&s.scaled_log_costs, s.cor_tfs, s.cor_fs)?;
        Ok(EncodedSample {
            input: input.to_vec(),
            target: s.target_probs.as_array().to_vec(),
        })
    }
}

/// Training provenance carried inside the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingMeta {
    pub epochs: u32,
    pub final_loss: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    in_dim: usize,
    out_dim: usize,
    /// Row-major `out_dim × in_dim`.
    w: Vec<f64>,
    b: Vec<f64>,
}

/// The multilayer perceptron: rectifier hidden activations, logistic
/// outputs. Inputs pass through a fixed standardization (location/scale
/// learned from the training set) before the first layer; that affine
/// step is part of the stored model, not a change of architecture, and
/// keeps the +20 sentinel from swamping the first-layer pre-activations.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    input_loc: Vec<f64>,
    input_scale: Vec<f64>,
    layers: Vec<Layer>,
    pub meta: TrainingMeta,
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl MlpModel {
    /// Fresh untrained model with Xavier-uniform weights, deterministic in
    /// `seed`.
    pub fn new(seed: u64) -> MlpModel {
        MlpModel::with_sizes(&LAYER_SIZES, seed)
    }

    pub(crate) fn with_sizes(sizes: &[usize], seed: u64) -> MlpModel {
        let mut rng = RngStream::new(seed).substream(&[0x1217]);
        let layers = sizes
            .windows(2)
            .map(|io| {
                let (in_dim, out_dim) = (io[0], io[1]);
                let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
                Layer {
                    in_dim,
                    out_dim,
                    w: (0..in_dim * out_dim)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect(),
                    b: vec![0.0; out_dim],
                }
            })
            .collect();
        MlpModel {
            input_loc: vec![0.0; sizes[0]],
            input_scale: vec![1.0; sizes[0]],
            layers,
            meta: TrainingMeta {
                epochs: 0,
                final_loss: f64::NAN,
                seed,
            },
        }
    }

    /// Fix the input standardization from per-dimension sample moments.
    fn set_standardization(&mut self, data: &[EncodedSample]) {
        let dim = self.input_dim();
        let n = data.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in data {
            for (m, &x) in mean.iter_mut().zip(&s.input) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for s in data {
            for ((v, &m), &x) in var.iter_mut().zip(&mean).zip(&s.input) {
                *v += (x - m) * (x - m);
            }
        }
        self.input_loc = mean;
        self.input_scale = var
            .iter()
            .map(|v| (v / n).sqrt().max(1e-6))
            .collect();
    }

    fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    /// Forward pass keeping every activation (index 0 is the standardized
    /// input); the last vector holds the logistic outputs.
    fn forward_trace(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let standardized: Vec<f64> = input
            .iter()
            .zip(&self.input_loc)
            .zip(&self.input_scale)
            .map(|((&x, &loc), &scale)| (x - loc) / scale)
            .collect();
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(standardized);
        for (li, layer) in self.layers.iter().enumerate() {
            let prev = &acts[li];
            let last = li + 1 == self.layers.len();
            let mut out = vec![0.0; layer.out_dim];
            for (o, out_v) in out.iter_mut().enumerate() {
                let mut z = layer.b[o];
                let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (wi, &p) in row.iter().zip(prev) {
                    z += wi * p;
                }
                *out_v = if last { sigmoid(z) } else { relu(z) };
            }
            acts.push(out);
        }
        acts
    }

    /// Raw logistic outputs for an encoded input.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_trace(input).pop().unwrap()
    }

    /// Mean per-output binary cross-entropy over a batch, plus its
    /// analytic gradient. Exposed so the gradient can be checked against
    /// finite differences.
    pub fn loss_and_grad(&self, batch: &[EncodedSample]) -> (f64, MlpGradients) {
        assert!(!batch.is_empty(), "empty batch");
        let mut grad = MlpGradients::zeros(self);
        let mut loss_sum = 0.0;
        let inv_n = 1.0 / batch.len() as f64;
        for sample in batch {
            debug_assert_eq!(sample.input.len(), self.input_dim());
            debug_assert_eq!(sample.target.len(), self.output_dim());
            let acts = self.forward_trace(&sample.input);
            let y = acts.last().unwrap();
            for (yk, tk) in y.iter().zip(&sample.target) {
                let yc = yk.clamp(1e-12, 1.0 - 1e-12);
                loss_sum -= tk * yc.ln() + (1.0 - tk) * (1.0 - yc).ln();
            }
            // Output delta for sigmoid + BCE: y − t (scaled to the batch mean).
            let mut delta: Vec<f64> = y
                .iter()
                .zip(&sample.target)
                .map(|(yk, tk)| (yk - tk) * inv_n)
                .collect();
            for li in (0..self.layers.len()).rev() {
                let layer = &self.layers[li];
                let prev = &acts[li];
                let g = &mut grad.layers[li];
                for o in 0..layer.out_dim {
                    let d = delta[o];
                    g.b[o] += d;
                    let row = &mut g.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (gw, &p) in row.iter_mut().zip(prev) {
                        *gw += d * p;
                    }
                }
                if li > 0 {
                    // δ_prev = Wᵀ δ, gated by the rectifier derivative.
                    let mut next = vec![0.0; layer.in_dim];
                    for (o, &d) in delta.iter().enumerate() {
                        let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                        for (nv, &wv) in next.iter_mut().zip(row) {
                            *nv += wv * d;
                        }
                    }
                    for (nv, &a) in next.iter_mut().zip(prev) {
                        if a <= 0.0 {
                            *nv = 0.0;
                        }
                    }
                    delta = next;
                }
            }
        }
        (loss_sum * inv_n, grad)
    }

    /// Mean loss only (no gradient), parallelized over fixed chunks.
    pub fn mean_loss(&self, data: &[EncodedSample]) -> f64 {
        let chunk = 1024;
        let sums: Vec<f64> = data
            .par_chunks(chunk)
            .map(|c| {
                let mut s = 0.0;
                for sample in c {
                    let y = self.forward(&sample.input);
                    for (yk, tk) in y.iter().zip(&sample.target) {
                        let yc = yk.clamp(1e-12, 1.0 - 1e-12);
                        s -= tk * yc.ln() + (1.0 - tk) * (1.0 - yc).ln();
                    }
                }
                s
            })
            .collect();
        sums.iter().sum::<f64>() / data.len() as f64
    }

    /// Number of scalar parameters (weights + biases).
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Read one parameter by flat index (per layer: weights then biases).
    pub fn get_param(&self, mut idx: usize) -> f64 {
        for layer in &self.layers {
            if idx < layer.w.len() {
                return layer.w[idx];
            }
            idx -= layer.w.len();
            if idx < layer.b.len() {
                return layer.b[idx];
            }
            idx -= layer.b.len();
        }
        panic!("parameter index out of range");
    }

    /// Write one parameter by flat index.
    pub fn set_param(&mut self, mut idx: usize, value: f64) {
        for layer in &mut self.layers {
            if idx < layer.w.len() {
                layer.w[idx] = value;
                return;
            }
            idx -= layer.w.len();
            if idx < layer.b.len() {
                layer.b[idx] = value;
                return;
            }
            idx -= layer.b.len();
        }
        panic!("parameter index out of range");
    }

    /// Surrogate choice probabilities: encode, forward, zero the
    /// unavailable modes, renormalize over the available ones.
    pub fn predict(
        &self,
        scaled_log_costs: &PerMode<f64>,
        cor_tfs: f64,
        cor_fs: f64,
    ) -> Result<PerMode<f64>> {
        let input = encode_inputs(scaled_log_costs, cor_tfs, cor_fs)?;
        let y = self.forward(&input);
        let mut out = PerMode::from_fn(|m| {
            if scaled_log_costs[m].is_finite() {
                y[m.index()]
            } else {
                0.0
            }
        });
        let total = out.sum();
        if !(total > 0.0) {
            return Err(Error::InternalConsistency(
                "surrogate produced a zero probability mass".to_owned(),
            ));
        }
        out = out.map(|_, &p| p / total);
        Ok(out)
    }

    /// Write the model to a versioned flat binary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(LAYER_SIZES.len() as u32).to_le_bytes());
        for s in LAYER_SIZES {
            buf.extend_from_slice(&(s as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.meta.epochs.to_le_bytes());
        buf.extend_from_slice(&self.meta.seed.to_le_bytes());
        buf.extend_from_slice(&self.meta.final_loss.to_le_bytes());
        for &v in self.input_loc.iter().chain(&self.input_scale) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for layer in &self.layers {
            for &v in layer.w.iter().chain(&layer.b) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Load a model, rejecting unknown formats and mismatched
    /// architectures.
    pub fn load(path: &Path) -> Result<MlpModel> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::ModelFormat("truncated model file".to_owned()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != MAGIC {
            return Err(Error::ModelFormat("bad magic string".to_owned()));
        }
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };
        let version = read_u32(&mut pos)?;
        if version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported format version {version}"
            )));
        }
        let n_sizes = read_u32(&mut pos)? as usize;
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            sizes.push(read_u32(&mut pos)? as usize);
        }
        if sizes != LAYER_SIZES {
            return Err(Error::ModelFormat(format!(
                "architecture {sizes:?} does not match expected {LAYER_SIZES:?}"
            )));
        }
        let epochs = read_u32(&mut pos)?;
        let seed = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let final_loss = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let read_f64s = |pos: &mut usize, n: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                out.push(f64::from_le_bytes(take(pos, 8)?.try_into().unwrap()));
            }
            Ok(out)
        };
        let input_loc = read_f64s(&mut pos, LAYER_SIZES[0])?;
        let input_scale = read_f64s(&mut pos, LAYER_SIZES[0])?;
        let mut layers = Vec::new();
        for io in LAYER_SIZES.windows(2) {
            let (in_dim, out_dim) = (io[0], io[1]);
            let mut w = Vec::with_capacity(in_dim * out_dim);
            for _ in 0..in_dim * out_dim {
                w.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            let mut b = Vec::with_capacity(out_dim);
            for _ in 0..out_dim {
                b.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            layers.push(Layer {
                in_dim,
                out_dim,
                w,
                b,
            });
        }
        if pos != bytes.len() {
            return Err(Error::ModelFormat("trailing bytes in model file".to_owned()));
        }
        let model = MlpModel {
            input_loc,
            input_scale,
            layers,
            meta: TrainingMeta {
                epochs,
                final_loss,
                seed,
            },
        };
        let params_finite = model
            .layers
            .iter()
            .all(|l| l.w.iter().chain(&l.b).all(|v| v.is_finite()));
        let standardization_ok = model
            .input_loc
            .iter()
            .all(|v| v.is_finite())
            && model.input_scale.iter().all(|&v| v.is_finite() && v > 0.0);
        if !params_finite || !standardization_ok {
            return Err(Error::ModelFormat("non-finite weights".to_owned()));
        }
        Ok(model)
    }
}

/// Per-layer gradient buffers matching an [`MlpModel`].
#[derive(Debug, Clone)]
pub struct MlpGradients {
    layers: Vec<Layer>,
}

impl MlpGradients {
    fn zeros(model: &MlpModel) -> MlpGradients {
        MlpGradients {
            layers: model
                .layers
                .iter()
                .map(|l| Layer {
                    in_dim: l.in_dim,
                    out_dim: l.out_dim,
                    w: vec![0.0; l.w.len()],
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
        }
    }

    fn add(&mut self, other: &MlpGradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.w.iter_mut().zip(&b.w) {
                *x += y;
            }
            for (x, y) in a.b.iter_mut().zip(&b.b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            for x in l.w.iter_mut().chain(l.b.iter_mut()) {
                *x *= s;
            }
        }
    }

    /// Flat parameter view matching [`MlpModel::get_param`] indexing.
    pub fn get_param(&self, mut idx: usize) -> f64 {
        for layer in &self.layers {
            if idx < layer.w.len() {
                return layer.w[idx];
            }
            idx -= layer.w.len();
            if idx < layer.b.len() {
                return layer.b[idx];
            }
            idx -= layer.b.len();
        }
        panic!("parameter index out of range");
    }
}

/// How training inputs are sampled: normal scaled log costs with a
/// per-sample spread, correlation pairs uniform on the ordered triangle,
/// and a mixture of availability patterns so the network also learns the
/// masked configurations the likelihood stages feed it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub input_mean: f64,
    /// Per-sample spread is drawn uniformly from this range, widening
    /// coverage beyond a single fixed scale.
    pub spread_min: f64,
    pub spread_max: f64,
    /// Probability of the full six-mode availability pattern.
    pub full_universe_share: f64,
    /// Probability of the four-mode pattern (fhv/sfhv unavailable), the
    /// configuration the first likelihood stage uses exclusively.
    pub four_mode_share: f64,
    /// Chance that walking is additionally removed from a canonical
    /// pattern: realistic tables make walking unavailable beyond a few
    /// miles, so masked variants dominate deployment inputs.
    pub walk_drop_prob: f64,
    /// Chance that transit is additionally removed from a canonical
    /// pattern, mirroring sparse coverage.
    pub transit_drop_prob: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            input_mean: 0.0,
            spread_min: 0.5,
            spread_max: 3.0,
            full_universe_share: 0.35,
            four_mode_share: 0.35,
            walk_drop_prob: 0.4,
            transit_drop_prob: 0.1,
        }
    }
}

impl SamplingConfig {
    fn validate(&self) -> Result<()> {
        if !(self.spread_min > 0.0 && self.spread_max >= self.spread_min) {
            return Err(Error::invalid_parameter(
                "sampling spread range must be positive and ordered".to_owned(),
            ));
        }
        if self.full_universe_share < 0.0
            || self.four_mode_share < 0.0
            || self.full_universe_share + self.four_mode_share > 1.0
        {
            return Err(Error::invalid_parameter(
                "availability-pattern shares must be non-negative and sum to at most 1".to_owned(),
            ));
        }
        if !(0.0..=1.0).contains(&self.walk_drop_prob)
            || !(0.0..=1.0).contains(&self.transit_drop_prob)
        {
            return Err(Error::invalid_parameter(
                "mode drop probabilities must lie in [0, 1]".to_owned(),
            ));
        }
        Ok(())
    }

    fn draw_mask(&self, rng: &mut impl Rng) -> PerMode<bool> {
        let u: f64 = rng.gen();
        let canonical = u < self.full_universe_share + self.four_mode_share;
        if canonical {
            let mut mask = if u < self.full_universe_share {
                PerMode::splat(true)
            } else {
                PerMode::from_fn(|m| !matches!(m, Mode::Fhv | Mode::Sfhv))
            };
            if rng.gen_bool(self.walk_drop_prob) {
                mask[Mode::Walk] = false;
            }
            if rng.gen_bool(self.transit_drop_prob) {
                mask[Mode::Transit] = false;
            }
            return mask;
        }
        loop {
            let mask = PerMode::from_fn(|_| rng.gen_bool(0.7));
            if mask.values().filter(|&&a| a).count() >= 2 {
                return mask;
            }
        }
    }

    fn draw_inputs(&self, rng: &mut impl Rng) -> (PerMode<f64>, f64, f64) {
        let mask = self.draw_mask(rng);
        let spread = rng.gen_range(self.spread_min..=self.spread_max);
        let x = PerMode::from_fn(|m| {
            if mask[m] {
                self.input_mean + spread * rng.sample::<f64, _>(rand_distr::StandardNormal)
            } else {
                f64::INFINITY
            }
        });
        // Uniform on {0 ≤ a < b ≤ 1}: marginal-then-conditional quantiles.
        loop {
            let u: f64 = rng.gen();
            let v: f64 = rng.gen();
            let a = 1.0 - (1.0 - u).sqrt();
            let b = a + v * (1.0 - a);
            if b > a {
                return (x, a, b);
            }
        }
    }
}

/// Build a training set of `n` oracle-labeled samples. Deterministic given
/// `seed`; sample generation parallelizes over indices with per-index
/// substreams.
pub fn gen_training_set(
    n: usize,
    oracle_draws: u64,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<Vec<SurrogateSample>> {
    if n == 0 {
        return Err(Error::invalid_input("training set size must be >= 1"));
    }
    if oracle_draws < 1_000 {
        return Err(Error::invalid_input(
            "oracle_draws below 1000 gives targets too noisy to train on",
        ));
    }
    sampling.validate()?;
    let stream = RngStream::new(seed);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.substream(&[0x5A17, i as u64]);
            let (x, cor_tfs, cor_fs) = sampling.draw_inputs(&mut rng);
            let target_seed = rng.next_u64();
            let target_probs = estimate_probs_mc(&x, cor_tfs, cor_fs, oracle_draws, target_seed)?;
            Ok(SurrogateSample {
                scaled_log_costs: x,
                cor_tfs,
                cor_fs,
                target_probs,
            })
        })
        .collect()
}

/// Optimizer and schedule settings for [`train`]. The learning rate
/// interpolates geometrically from `learning_rate` down to `final_rate`
/// across the epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: u32,
    pub learning_rate: f64,
    pub final_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1500,
            learning_rate: 0.03,
            final_rate: 0.0003,
            momentum: 0.9,
            batch_size: 128,
            seed: 0x7A31,
        }
    }
}

impl TrainConfig {
    fn rate_at(&self, epoch: u32) -> f64 {
        if self.epochs <= 1 {
            return self.learning_rate;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        self.learning_rate * (self.final_rate / self.learning_rate).powf(t)
    }
}

/// A trained model plus its per-epoch mean training loss.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub loss_history: Vec<f64>,
}

/// Train the surrogate by mini-batch gradient descent with momentum.
/// Deterministic given `config.seed`: shuffling, batching, and the
/// within-batch gradient reduction all follow seed-derived order.
pub fn train(dataset: &[SurrogateSample], config: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::invalid_input("empty training set"));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::invalid_input(
            "batch size and epoch count must be >= 1",
        ));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0)
        || !(config.final_rate.is_finite() && config.final_rate > 0.0)
    {
        return Err(Error::invalid_parameter(format!(
            "learning rates must be positive, got {} -> {}",
            config.learning_rate, config.final_rate
        )));
    }
    if !(0.0..1.0).contains(&config.momentum) {
        return Err(Error::invalid_parameter(format!(
            "momentum must lie in [0, 1), got {}",
            config.momentum
        )));
    }
    let encoded: Vec<EncodedSample> = dataset
        .iter()
        .map(EncodedSample::from_sample)
        .collect::<Result<_>>()?;
    let mut model = MlpModel::new(config.seed);
    model.set_standardization(&encoded);
    let mut velocity = MlpGradients::zeros(&model);
    let stream = RngStream::new(config.seed);
    let mut indices: Vec<usize> = (0..encoded.len()).collect();
    let mut loss_history = Vec::with_capacity(config.epochs as usize);
    for epoch in 0..config.epochs {
        let rate = config.rate_at(epoch);
        let mut rng = stream.substream(&[0xE90C, epoch as u64]);
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for batch_idx in indices.chunks(config.batch_size) {
            let batch: Vec<EncodedSample> =
                batch_idx.iter().map(|&i| encoded[i].clone()).collect();
            // Split the batch into fixed sub-chunks so the parallel
            // gradient reduction has a deterministic summation order.
            let parts: Vec<(f64, MlpGradients)> = batch
                .par_chunks(32)
                .map(|part| {
                    let (loss, mut grad) = model.loss_and_grad(part);
                    let w = part.len() as f64 / batch.len() as f64;
                    grad.scale(w);
                    (loss * w, grad)
                })
                .collect();
            let mut grad = MlpGradients::zeros(&model);
            let mut loss = 0.0;
            for (l, g) in &parts {
                loss += l;
                grad.add(g);
            }
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch}; try a smaller learning rate"
                )));
            }
            for (vl, gl) in velocity.layers.iter_mut().zip(&grad.layers) {
                for (v, g) in vl
                    .w
                    .iter_mut()
                    .chain(vl.b.iter_mut())
                    .zip(gl.w.iter().chain(gl.b.iter()))
                {
                    *v = config.momentum * *v - rate * g;
                }
            }
            for (ml, vl) in model.layers.iter_mut().zip(&velocity.layers) {
                for (w, v) in ml
                    .w
                    .iter_mut()
                    .chain(ml.b.iter_mut())
                    .zip(vl.w.iter().chain(vl.b.iter()))
                {
                    *w += v;
                }
            }
            epoch_loss += loss;
            n_batches += 1;
        }
        if model
            .layers
            .iter()
            .any(|l| l.w.iter().chain(&l.b).any(|v| !v.is_finite()))
        {
            return Err(Error::Divergence(format!(
                "non-finite weights at epoch {epoch}; try a smaller learning rate"
            )));
        }
        loss_history.push(epoch_loss / n_batches as f64);
    }
    model.meta = TrainingMeta {
        epochs: config.epochs,
        final_loss: *loss_history.last().unwrap(),
        seed: config.seed,
    };
    Ok(TrainOutcome {
        model,
        loss_history,
    })
}

/// Surrogate accuracy against the Monte Carlo oracle on freshly sampled
/// points from the training distribution. Errors are absolute per-mode
/// probability deviations over available modes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationReport {
    pub mean_abs_err: f64,
    pub max_abs_err: f64,
    pub n_points: usize,
}

pub fn validate(
    model: &MlpModel,
    n_points: usize,
    oracle_draws: u64,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<ValidationReport> {
    if n_points == 0 {
        return Err(Error::invalid_input("validation needs n_points >= 1"));
    }
    let points = gen_training_set(n_points, oracle_draws, sampling, seed)?;
    let errors: Vec<(f64, f64, usize)> = points
        .par_iter()
        .map(|p| {
            let pred = model.predict(&p.scaled_log_costs, p.cor_tfs, p.cor_fs)?;
            let mut sum = 0.0;
            let mut max = 0.0f64;
            let mut n = 0usize;
            for (mode, &x) in p.scaled_log_costs.iter() {
                if x.is_finite() {
                    let e = (pred[mode] - p.target_probs[mode]).abs();
                    sum += e;
                    max = max.max(e);
                    n += 1;
                }
            }
            Ok((sum, max, n))
        })
        .collect::<Result<_>>()?;
    let total: f64 = errors.iter().map(|e| e.0).sum();
    let count: usize = errors.iter().map(|e| e.2).sum();
    let max = errors.iter().map(|e| e.1).fold(0.0f64, f64::max);
    Ok(ValidationReport {
        mean_abs_err: total / count as f64,
        max_abs_err: max,
        n_points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sample_from(x: PerMode<f64>, a: f64, b: f64, t: PerMode<f64>) -> SurrogateSample {
        SurrogateSample {
            scaled_log_costs: x,
            cor_tfs: a,
            cor_fs: b,
            target_probs: t,
        }
    }

    #[test]
    fn encode_centers_clamps_and_marks_sentinels() {
        let mut x = PerMode::splat(3.0);
        x[Mode::Fhv] = f64::INFINITY;
        x[Mode::Taxi] = 3.0 + 30.0; // far above the rest: clamps at +8
        let input = encode_inputs(&x, 0.2, 0.6).unwrap();
        assert_eq!(input[Mode::Fhv.index()], UNAVAILABLE_SENTINEL);
        assert_eq!(input[Mode::Taxi.index()], INPUT_CLAMP);
        assert_eq!(input[6], 0.2);
        assert_eq!(input[7], 0.6);

        // Common shifts are removed exactly.
        let y = x.map(|_, &v| if v.is_finite() { v + 57.0 } else { v });
        assert_eq!(encode_inputs(&y, 0.2, 0.6).unwrap(), input);

        let all_unavailable = PerMode::splat(f64::INFINITY);
        assert!(matches!(
            encode_inputs(&all_unavailable, 0.2, 0.6),
            Err(Error::NoAvailableMode)
        ));
    }

    #[test]
    fn training_set_targets_are_simplices_with_valid_correlations() {
        let samples = gen_training_set(40, 2_000, &SamplingConfig::default(), 5).unwrap();
        assert_eq!(samples.len(), 40);
        for s in &samples {
            assert!(s.cor_fs > s.cor_tfs);
            assert!((0.0..=1.0).contains(&s.cor_tfs) && (0.0..=1.0).contains(&s.cor_fs));
            assert_eq!(s.target_probs.sum(), 1.0);
            for (mode, &x) in s.scaled_log_costs.iter() {
                if !x.is_finite() {
                    assert_eq!(s.target_probs[mode], 0.0);
                }
            }
        }
        // Deterministic in the seed.
        let again = gen_training_set(40, 2_000, &SamplingConfig::default(), 5).unwrap();
        assert_eq!(samples, again);
        let other = gen_training_set(40, 2_000, &SamplingConfig::default(), 6).unwrap();
        assert_ne!(samples, other);
    }

    #[test]
    fn symmetric_inputs_yield_near_uniform_targets() {
        let x = PerMode::splat(0.0);
        let p = estimate_probs_mc(&x, 0.0, 0.0, 60_000, 3).unwrap();
        for m in Mode::ALL {
            assert_abs_diff_eq!(p[m], 1.0 / 6.0, epsilon = 0.01);
        }
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        // Random small nets, random batches: max relative deviation of the
        // analytic gradient from central differences stays below 1e-5.
        for (sizes, seed) in [
            (vec![3usize, 4, 2], 1u64),
            (vec![5, 6, 4, 3], 2),
            (vec![8, 8, 12, 8, 6], 3),
        ] {
            let model = MlpModel::with_sizes(&sizes, seed);
            let mut rng = RngStream::new(seed).substream(&[99]);
            let batch: Vec<EncodedSample> = (0..8)
                .map(|_| {
                    let input: Vec<f64> =
                        (0..sizes[0]).map(|_| rng.gen_range(-2.0..2.0)).collect();
                    let raw: Vec<f64> = (0..*sizes.last().unwrap())
                        .map(|_| rng.gen_range(0.05..1.0))
                        .collect();
                    let total: f64 = raw.iter().sum();
                    EncodedSample {
                        input,
                        target: raw.iter().map(|v| v / total).collect(),
                    }
                })
                .collect();
            let (_, grad) = model.loss_and_grad(&batch);
            let h = 1e-5;
            let mut worst = 0.0f64;
            for idx in 0..model.num_params() {
                let orig = model.get_param(idx);
                let mut m = model.clone();
                m.set_param(idx, orig + h);
                let (lp, _) = m.loss_and_grad(&batch);
                m.set_param(idx, orig - h);
                let (lm, _) = m.loss_and_grad(&batch);
                let fd = (lp - lm) / (2.0 * h);
                let a = grad.get_param(idx);
                let rel = (a - fd).abs() / (1e-6 + a.abs().max(fd.abs()));
                worst = worst.max(rel);
            }
            assert!(worst <= 1e-5, "sizes {sizes:?}: max relative deviation {worst}");
        }
    }

    #[test]
    fn training_is_deterministic_and_loss_decreases() {
        let samples = gen_training_set(256, 2_000, &SamplingConfig::default(), 11).unwrap();
        let config = TrainConfig {
            epochs: 8,
            learning_rate: 0.05,
            final_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            seed: 21,
        };
        let a = train(&samples, &config).unwrap();
        let b = train(&samples, &config).unwrap();
        assert_eq!(a.model, b.model);
        assert!(a.loss_history.last().unwrap() < a.loss_history.first().unwrap());
        assert_eq!(a.model.meta.epochs, 8);
        assert!(a.model.meta.final_loss.is_finite());
    }

    #[test]
    fn constant_target_dataset_converges_to_it() {
        let mut x = PerMode::splat(0.0);
        x[Mode::Walk] = 1.0;
        let target = PerMode([0.3, 0.2, 0.1, 0.15, 0.15, 0.1]);
        let dataset: Vec<SurrogateSample> =
            vec![sample_from(x, 0.25, 0.75, target); 64];
        let config = TrainConfig {
            epochs: 400,
            learning_rate: 0.05,
            final_rate: 0.02,
            momentum: 0.9,
            batch_size: 64,
            seed: 3,
        };
        let out = train(&dataset, &config).unwrap();
        let pred = out.model.predict(&x, 0.25, 0.75).unwrap();
        for m in Mode::ALL {
            assert_abs_diff_eq!(pred[m], target[m], epsilon = 0.02);
        }
    }

    #[test]
    fn absurd_learning_rate_reports_divergence() {
        let samples = gen_training_set(64, 2_000, &SamplingConfig::default(), 13).unwrap();
        let config = TrainConfig {
            epochs: 50,
            learning_rate: 1e300,
            final_rate: 1e300,
            momentum: 0.9,
            batch_size: 16,
            seed: 1,
        };
        match train(&samples, &config) {
            Err(Error::Divergence(msg)) => assert!(msg.contains("learning rate")),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn predict_is_a_simplex_with_zeros_on_unavailable() {
        let model = MlpModel::new(77);
        let mut x = PerMode::splat(0.3);
        x[Mode::Drive] = f64::INFINITY;
        x[Mode::Sfhv] = f64::INFINITY;
        let p = model.predict(&x, 0.1, 0.5).unwrap();
        assert_eq!(p[Mode::Drive], 0.0);
        assert_eq!(p[Mode::Sfhv], 0.0);
        assert_abs_diff_eq!(p.sum(), 1.0, epsilon = 1e-12);
        assert!(p.values().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn save_load_round_trip_and_format_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let mut model = MlpModel::new(5);
        model.meta = TrainingMeta {
            epochs: 12,
            final_loss: 0.25,
            seed: 5,
        };
        model.save(&path).unwrap();
        let loaded = MlpModel::load(&path).unwrap();
        assert_eq!(model, loaded);

        // Corrupt the magic.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xFF;
        let bad = dir.path().join("bad.bin");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(MlpModel::load(&bad), Err(Error::ModelFormat(_))));

        // Corrupt the architecture descriptor.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[16] = 7;
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(MlpModel::load(&bad), Err(Error::ModelFormat(_))));

        // Truncate.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&bad, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(MlpModel::load(&bad), Err(Error::ModelFormat(_))));
    }

    #[test]
    fn validate_reports_errors_without_failing_on_untrained_models() {
        let model = MlpModel::new(1);
        let report = validate(&model, 20, 2_000, &SamplingConfig::default(), 55).unwrap();
        assert!(report.mean_abs_err.is_finite());
        assert!(report.max_abs_err >= report.mean_abs_err);
        assert_eq!(report.n_points, 20);
    }
}
