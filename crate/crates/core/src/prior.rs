//! Diffusion prior over target embeddings, conditioned on brain features.
//!
//! A DDPM with a linear beta schedule; the denoiser predicts the injected
//! noise from `[x_t, timestep embedding, condition]`.

use crate::error::{FpedError, Result};
use crate::losses::{softclip_loss, softclip_loss_tape};
use crate::numerics::{ParamId, ParamStore, SeededRng, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear betas from `beta_start` to `beta_end` over `steps` timesteps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(FpedError::Config(format!("need at least 2 diffusion steps, got {steps}")));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(FpedError::Config(format!("bad beta range [{beta_start}, {beta_end}]")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(FpedError::Argument(format!("timestep {t} outside 0..{}", self.steps())));
        }
        Ok(())
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(100, 1e-4, 0.02).expect("default schedule is valid")
    }
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn noising(x0: &[f64], t: usize, eps: &[f64], s: &DiffusionSchedule) -> Result<Vec<f64>> {
    s.check(t)?;
    if x0.len() != eps.len() {
        return Err(FpedError::Shape(format!("x0 {} vs eps {}", x0.len(), eps.len())));
    }
    let (a, b) = (s.alpha_bars[t].sqrt(), (1.0 - s.alpha_bars[t]).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Sinusoidal embedding: `dim/2` sines then `dim/2` cosines.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Three-layer perceptron `eps(x_t, t, cond)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
    pub dim: usize,
    pub cond_dim: usize,
    pub temb_dim: usize,
}

impl Denoiser {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        cond_dim: usize,
        temb_dim: usize,
        hidden: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let fan = dim + temb_dim + cond_dim;
        let sh = 1.0 / (hidden as f64).sqrt();
        Self {
            w1: store.add_normal(format!("{prefix}.w1"), &[fan, hidden], 1.0 / (fan as f64).sqrt(), rng),
            b1: store.add_zeros(format!("{prefix}.b1"), &[1, hidden]),
            w2: store.add_normal(format!("{prefix}.w2"), &[hidden, hidden], sh, rng),
            b2: store.add_zeros(format!("{prefix}.b2"), &[1, hidden]),
            w3: store.add_normal(format!("{prefix}.w3"), &[hidden, dim], sh, rng),
            b3: store.add_zeros(format!("{prefix}.b3"), &[1, dim]),
            dim,
            cond_dim,
            temb_dim,
        }
    }

    /// Predicted noise for a batch; row `r` uses timestep `ts[r]`.
    pub fn forward(&self, tape: &mut Tape<'_>, x_t: Var, ts: &[usize], cond: Var) -> Var {
        let temb: Vec<f64> = ts.iter().flat_map(|&t| timestep_embedding(t, self.temb_dim)).collect();
        let temb = tape.constant(Tensor::new(&[ts.len(), self.temb_dim], temb).expect("temb shape"));
        let inp = tape.concat_cols(&[x_t, temb, cond]);
        let p: Vec<Var> = [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
            .iter()
            .map(|&id| tape.param(id))
            .collect();
        let h = tape.matmul(inp, p[0]);
        let h = tape.add_row(h, p[1]);
        let h = tape.gelu(h);
        let h = tape.matmul(h, p[2]);
        let h = tape.add_row(h, p[3]);
        let h = tape.gelu(h);
        let o = tape.matmul(h, p[4]);
        tape.add_row(o, p[5])
    }

    /// Untaped single prediction.
    pub fn predict(&self, store: &ParamStore, x_t: &[f64], t: usize, cond: &[f64]) -> Vec<f64> {
        let mut tape = Tape::with_params(store);
        let x = tape.constant(Tensor::row(x_t.to_vec()));
        let c = tape.constant(Tensor::row(cond.to_vec()));
        let y = self.forward(&mut tape, x, &[t], c);
        tape.value(y).data().to_vec()
    }

    /// Ancestral sample conditioned on `cond`.
    pub fn sample(&self, store: &ParamStore, s: &DiffusionSchedule, cond: &[f64], rng: &mut SeededRng) -> Vec<f64> {
        sample_prior(|x, t| self.predict(store, x, t, cond), s, self.dim, rng)
    }
}

/// Per-dimension mean of `(eps - eps_hat)^2` at a random timestep, for any
/// noise predictor `eps_hat(x_t, t)`.
pub fn dp_loss<F>(x0: &[f64], predict: F, s: &DiffusionSchedule, rng: &mut SeededRng) -> f64
where
    F: Fn(&[f64], usize) -> Vec<f64>,
{
    let t = rng.below(s.steps());
    let eps = rng.normal_vec(x0.len());
    let x_t = noising(x0, t, &eps, s).expect("t drawn in range");
    let eps_hat = predict(&x_t, t);
    eps.iter().zip(&eps_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x0.len() as f64
}

/// Standard ancestral reverse loop from `x_T ~ N(0, I)` with the posterior
/// variance.
pub fn sample_prior<F>(predict: F, s: &DiffusionSchedule, dim: usize, rng: &mut SeededRng) -> Vec<f64>
where
    F: Fn(&[f64], usize) -> Vec<f64>,
{
    let mut x = rng.normal_vec(dim);
    for t in (0..s.steps()).rev() {
        let eps = predict(&x, t);
        let coef = s.betas[t] / (1.0 - s.alpha_bars[t]).sqrt();
        let inv = 1.0 / s.alphas[t].sqrt();
        for (xi, e) in x.iter_mut().zip(&eps) {
            *xi = inv * (*xi - coef * e);
        }
        if t > 0 {
            let var = s.betas[t] * (1.0 - s.alpha_bars[t - 1]) / (1.0 - s.alpha_bars[t]);
            let sd = var.sqrt();
            for xi in x.iter_mut() {
                *xi += sd * rng.normal();
            }
        }
    }
    x
}

/// Taped diffusion step for a batch.
#[derive(Clone, Debug)]
pub struct DpStep {
    pub loss: Var,
    /// One-step estimate of `x0` from the predicted noise.
    pub x0_hat: Var,
}

/// Diffusion loss at explicit timesteps and noise, differentiable in the
/// denoiser and the condition.
pub fn dp_loss_at(
    tape: &mut Tape<'_>,
    den: &Denoiser,
    s: &DiffusionSchedule,
    x0: &Tensor,
    cond: Var,
    ts: &[usize],
    eps: &Tensor,
) -> DpStep {
    let (n, d) = x0.dims2();
    let mut xt = Vec::with_capacity(n * d);
    let mut a = Vec::with_capacity(n * d);
    let mut b = Vec::with_capacity(n * d);
    for r in 0..n {
        let row = noising(x0.row_slice(r), ts[r], eps.row_slice(r), s).expect("timestep in range");
        xt.extend(row);
        let ab = s.alpha_bars[ts[r]];
        a.extend(std::iter::repeat_n(1.0 / ab.sqrt(), d));
        b.extend(std::iter::repeat_n(-(1.0 - ab).sqrt() / ab.sqrt(), d));
    }
    let xt_t = Tensor::new(&[n, d], xt).expect("shape");
    let xt_v = tape.constant(xt_t.clone());
    let eps_hat = den.forward(tape, xt_v, ts, cond);
    let eps_v = tape.constant(eps.clone());
    let diff = tape.sub(eps_hat, eps_v);
    let sq = tape.sqr(diff);
    let loss = tape.mean(sq);
    let a_x = Tensor::new(&[n, d], xt_t.data().iter().zip(&a).map(|(x, c)| x * c).collect()).expect("shape");
    let a_x = tape.constant(a_x);
    let bv = tape.constant(Tensor::new(&[n, d], b).expect("shape"));
    let scaled = tape.mul(eps_hat, bv);
    let x0_hat = tape.add(a_x, scaled);
    DpStep { loss, x0_hat }
}

/// [`dp_loss_at`] with timesteps and noise drawn from `rng`.
pub fn dp_loss_tape(
    tape: &mut Tape<'_>,
    den: &Denoiser,
    s: &DiffusionSchedule,
    x0: &Tensor,
    cond: Var,
    rng: &mut SeededRng,
) -> DpStep {
    let n = x0.dims2().0;
    let ts: Vec<usize> = (0..n).map(|_| rng.below(s.steps())).collect();
    let eps = Tensor::new(x0.shape(), rng.normal_vec(x0.len())).expect("shape");
    dp_loss_at(tape, den, s, x0, cond, &ts, &eps)
}

/// `lambda * SoftCLIP(c_hat, c)`.
pub fn prior_clip_loss(c_hat: &Tensor, c: &Tensor, lambda: f64, tau: f64, bidirectional: bool) -> Result<f64> {
    if lambda == 0.0 {
        return Ok(0.0);
    }
    Ok(lambda * softclip_loss(c_hat, c, tau, bidirectional)?)
}

pub fn prior_clip_loss_tape(tape: &mut Tape<'_>, c_hat: Var, c: Var, lambda: f64, tau: f64, bidirectional: bool) -> Var {
    let l = softclip_loss_tape(tape, c_hat, c, tau, bidirectional);
    tape.scale(l, lambda)
}

/// Trains the denoiser alone on fixed `(cond, target)` pairs and returns the
/// mean diffusion loss of every epoch.
#[allow(clippy::too_many_arguments)]
pub fn fit_prior(
    den: &Denoiser,
    store: &mut ParamStore,
    s: &DiffusionSchedule,
    conds: &[Vec<f64>],
    targets: &[Vec<f64>],
    epochs: usize,
    batch: usize,
    lr: f64,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    if conds.len() != targets.len() || conds.is_empty() || batch == 0 {
        return Err(FpedError::Argument("need matching, nonempty pairs and batch >= 1".into()));
    }
    let mut opt = crate::trainer::Adam::new(store, lr, 0.9, 0.999, 1e-8);
    let mut order: Vec<usize> = (0..conds.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let x0 = Tensor::from_rows(&chunk.iter().map(|&i| targets[i].clone()).collect::<Vec<_>>())?;
            let c = Tensor::from_rows(&chunk.iter().map(|&i| conds[i].clone()).collect::<Vec<_>>())?;
            let grads = {
                let mut tape = Tape::with_params(store);
                let cv = tape.constant(c);
                let step = dp_loss_tape(&mut tape, den, s, &x0, cv, rng);
                total += tape.scalar(step.loss) * chunk.len() as f64;
                let g = tape.backward(step.loss);
                tape.param_grads(&g, store.len())
            };
            opt.step(store, &grads);
        }
        let mean = total / conds.len() as f64;
        if !mean.is_finite() {
            return Err(FpedError::Divergence(format!("prior loss {mean}")));
        }
        history.push(mean);
    }
    Ok(history)
}
