//! Training step: variance-weighted score matching with an Adam update.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{to_tensor3, Ctx, ParamStore, ScoreModel};
use crate::labelkit::FrameConditions;
use crate::{Error, Result};

/// Lower clamp on sampled diffusion times.
pub const TRAIN_T_MIN: f64 = 1e-4;

/// Equal-length batch; shorter items are zero-padded and masked out.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Normalized mels, `(B, n_mels, T)`.
    pub x0: Array3<f64>,
    pub conds: Vec<FrameConditions>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn new(items: &[(Array2<f64>, FrameConditions)]) -> Result<Self> {
        let Some((first, _)) = items.first() else {
            return Err(Error::Precondition("empty batch".into()));
        };
        let rows = first.nrows();
        let t_max = items.iter().map(|(x, _)| x.ncols()).max().unwrap_or(0);
        if t_max == 0 {
            return Err(Error::Precondition("batch items have no frames".into()));
        }
        let mut x0 = Array3::zeros((items.len(), rows, t_max));
        let mut conds = Vec::with_capacity(items.len());
        let mut lengths = Vec::with_capacity(items.len());
        for (i, (x, fc)) in items.iter().enumerate() {
            if x.nrows() != rows || fc.n_frames() != x.ncols() {
                return Err(Error::Precondition(format!(
                    "item {i}: mel {:?} vs {} condition frames",
                    x.dim(),
                    fc.n_frames()
                )));
            }
            x0.slice_mut(s![i, .., ..x.ncols()]).assign(x);
            conds.push(fc.padded(t_max));
            lengths.push(x.ncols());
        }
        Ok(Batch { x0, conds, lengths })
    }

    pub fn len(&self) -> usize {
        self.conds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conds.is_empty()
    }

    fn frame_mask(&self) -> Array3<f64> {
        let (b, rows, t) = self.x0.dim();
        Array3::from_shape_fn((b, rows, t), |(i, _, j)| if j < self.lengths[i] { 1.0 } else { 0.0 })
    }
}

/// Randomness of one loss evaluation, drawn up front so the loss is a pure
/// function of the parameters.
#[derive(Debug, Clone)]
pub struct LossNoise {
    pub times: Vec<f64>,
    pub eps: Array3<f64>,
    pub dropout_seed: Option<u64>,
}

impl LossNoise {
    pub fn draw(batch: &Batch, rng: &mut ChaCha8Rng, dropout: bool) -> Self {
        let times = (0..batch.len()).map(|_| rng.random_range(TRAIN_T_MIN..1.0)).collect();
        let eps = Array3::from_shape_simple_fn(batch.x0.dim(), || rng.sample::<f64, _>(StandardNormal));
        let dropout_seed = dropout.then(|| rng.random());
        LossNoise { times, eps, dropout_seed }
    }
}

impl ScoreModel {
    /// Mean over unmasked entries of `var(t)·(s_θ − ∇log p)²`, evaluated as
    /// the equivalent noise regression `(ε̂ − ε)²`.
    pub fn loss(&self, batch: &Batch, noise: &LossNoise) -> Result<Tensor> {
        let dtype = self.dtype();
        let sched = &self.config().schedule;
        let mut xt = batch.x0.clone();
        for (i, &t) in noise.times.iter().enumerate() {
            let st = sched.noise_stats(t)?;
            let sd = st.var.sqrt();
            let mut slab = xt.slice_mut(s![i, .., ..]);
            slab.zip_mut_with(&noise.eps.slice(s![i, .., ..]), |x, e| *x = st.mean_coef * *x + sd * e);
        }
        let mask_arr = batch.frame_mask();
        // padded frames stay exactly zero so they carry no noise into convolutions
        xt *= &mask_arr;
        let mut drop_rng = noise.dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let mut ctx = Ctx { dropout_rng: drop_rng.as_mut() };
        let emb = self.encode_batch(&batch.conds, &batch.lengths, &mut ctx)?;
        let score = self.score_from_embedding(&to_tensor3(&xt, dtype)?, &emb, &noise.times)?;
        // ε̂ = −σ·s
        let sd: Vec<f64> = noise
            .times
            .iter()
            .map(|&t| Ok(sched.noise_stats(t)?.var.sqrt()))
            .collect::<Result<_>>()?;
        let sd = Tensor::from_vec(sd, (batch.len(), 1, 1), score.device())?.to_dtype(dtype)?;
        let eps_hat = score.broadcast_mul(&sd)?.neg()?;
        let count = mask_arr.sum();
        let mask = to_tensor3(&mask_arr, dtype)?;
        let diff = (eps_hat - to_tensor3(&noise.eps, dtype)?)?;
        Ok((diff.sqr()? * mask)?.sum_all()?.affine(1.0 / count, 0.0)?)
    }
}

/// Adam with optional global-norm gradient clipping.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0), step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `params` that has a
    /// gradient in `grads`.
    pub fn update(&mut self, params: &ParamStore, grads: &candle_core::backprop::GradStore) -> Result<()> {
        let mut collected = Vec::new();
        let mut sq = 0.0;
        for (name, var) in params.vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                collected.push((name.to_string(), var, g.clone()));
            }
        }
        let scale = match self.clip_norm {
            Some(c) if sq.sqrt() > c => c / sq.sqrt(),
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var, g) in collected {
            let g = g.affine(scale, 0.0)?;
            let (m, v) = match self.moments.remove(&name) {
                Some(mv) => mv,
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let delta = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let updated = (var.as_tensor() - (delta * self.lr)?)?;
            var.set(&updated)?;
            self.moments.insert(name, (m, v));
        }
        Ok(())
    }
}

pub struct Trainer {
    model: ScoreModel,
    adam: Adam,
}

impl Trainer {
    pub fn new(model: ScoreModel, lr: f64) -> Self {
        Trainer { model, adam: Adam::new(lr) }
    }

    pub fn model(&self) -> &ScoreModel {
        &self.model
    }

    pub fn into_model(self) -> ScoreModel {
        self.model
    }

    pub fn steps(&self) -> u64 {
        self.adam.steps()
    }

    /// One optimizer update; returns the pre-update loss.
    pub fn train_step(&mut self, batch: &Batch, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = LossNoise::draw(batch, &mut rng, true);
        let loss = self.model.loss(batch, &noise)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {value} at step {} (batch of {}, lengths {:?}, t = {:?}, max |x0| = {:.3e})",
                self.adam.steps(),
                batch.len(),
                batch.lengths,
                noise.times,
                batch.x0.iter().fold(0.0f64, |a, v| a.max(v.abs()))
            )));
        }
        let grads = loss.backward()?;
        self.adam.update(self.model.params(), &grads)?;
        if !self.model.params().all_finite()? {
            return Err(Error::Training(format!("parameters became non-finite at step {}", self.adam.steps())));
        }
        Ok(value)
    }
}

/// Analytic vs central-difference derivative of the loss for one scalar
/// parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn rel_error(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs());
        if denom == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / denom
        }
    }
}

/// Compares backprop against `(L(θ+h) − L(θ−h)) / 2h` at the given entries.
/// Needs an f64 model; dropout should be off in `noise`.
pub fn finite_difference_check(
    model: &ScoreModel,
    batch: &Batch,
    noise: &LossNoise,
    entries: &[(String, usize)],
    h: f64,
) -> Result<Vec<GradCheck>> {
    if model.dtype() != DType::F64 {
        return Err(Error::Precondition("gradient check needs an f64 model".into()));
    }
    let grads = model.loss(batch, noise)?.backward()?;
    let mut out = Vec::with_capacity(entries.len());
    for (name, index) in entries {
        let var = model
            .params()
            .get(name)
            .ok_or_else(|| Error::Domain(format!("no parameter named {name}")))?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.get(*index)?.to_scalar::<f64>()?,
            None => 0.0,
        };
        let orig = model.params().value_at(name, *index)?;
        model.params().set_value_at(name, *index, orig + h)?;
        let up = model.loss(batch, noise)?.to_scalar::<f64>()?;
        model.params().set_value_at(name, *index, orig - h)?;
        let down = model.loss(batch, noise)?.to_scalar::<f64>()?;
        model.params().set_value_at(name, *index, orig)?;
        out.push(GradCheck { name: name.clone(), index: *index, analytic, numeric: (up - down) / (2.0 * h) });
    }
    Ok(out)
}
