//! Toy spatiotemporal routing for image generation.
//!
//! A timestep-conditioned gate mixes coarse (fused layer-1) and fine
//! (layer-2) brain tokens; latent image tokens then query the mixture with
//! single-head cross-attention inside a small noise-prediction network over
//! 16x16 images.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{FpedError, Result};
use crate::numerics::{cosine, ParamId, ParamStore, SeededRng, Tape, Tensor, Var};
use crate::prior::{noising, sample_prior, timestep_embedding, DiffusionSchedule};

pub const IMAGE_SIDE: usize = 16;
pub const BLOCK: usize = 4;
/// Image tokens: 4x4 pixel blocks of a 16x16 image.
pub const IMAGE_TOKENS: usize = (IMAGE_SIDE / BLOCK) * (IMAGE_SIDE / BLOCK);
pub const TOKEN_PIXELS: usize = BLOCK * BLOCK;

#[derive(Clone, Debug, PartialEq)]
pub struct StageTwoConfig {
    /// Width of the brain tokens fed to the router.
    pub brain_width: usize,
    pub embed: usize,
    pub attn: usize,
    pub hidden: usize,
    pub temb_dim: usize,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Magnitude of the fixed gate bias favouring coarse tokens at large t.
    pub gate_bias: f64,
}

impl Default for StageTwoConfig {
    fn default() -> Self {
        Self {
            brain_width: 32,
            embed: 32,
            attn: 32,
            hidden: 64,
            temb_dim: 16,
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.05,
            gate_bias: 2.0,
        }
    }
}

/// Two-way softmax over (coarse, fine) driven by the timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalGate {
    pub w: ParamId,
    pub b: ParamId,
    pub temb_dim: usize,
    pub bias: f64,
}

impl TemporalGate {
    pub fn new(store: &mut ParamStore, prefix: &str, temb_dim: usize, bias: f64, rng: &mut SeededRng) -> Self {
        Self {
            w: store.add_normal(format!("{prefix}.w"), &[temb_dim, 2], 0.01, rng),
            b: store.add_zeros(format!("{prefix}.b"), &[1, 2]),
            temb_dim,
            bias,
        }
    }

    /// Fixed monotone logit offset: `+bias` for coarse at `t = T-1`, `-bias` at `t = 0`.
    fn fixed(&self, t: usize, steps: usize) -> [f64; 2] {
        let s = self.bias * (2.0 * t as f64 / (steps - 1).max(1) as f64 - 1.0);
        [s, -s]
    }

    /// `1 x 2` simplex weights (coarse, fine).
    pub fn forward(&self, tape: &mut Tape<'_>, t: usize, steps: usize) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        gate_on_tape(tape, t, steps, w, b, self.temb_dim, self.fixed(t, steps))
    }
}

fn gate_on_tape(tape: &mut Tape<'_>, t: usize, _steps: usize, w: Var, b: Var, temb_dim: usize, fixed: [f64; 2]) -> Var {
    let e = tape.constant(Tensor::row(timestep_embedding(t, temb_dim)));
    let z = tape.matmul(e, w);
    let z = tape.add(z, b);
    let f = tape.constant(Tensor::row(fixed.to_vec()));
    let z = tape.add(z, f);
    tape.softmax_rows(z)
}

/// Untaped gate value; `t` must lie in `0..steps`.
pub fn temporal_gate(gate: &TemporalGate, store: &ParamStore, t: usize, steps: usize) -> Result<(f64, f64)> {
    if t >= steps {
        return Err(FpedError::Argument(format!("timestep {t} outside 0..{steps}")));
    }
    let mut tape = Tape::with_params(store);
    let g = gate.forward(&mut tape, t, steps);
    let v = tape.value(g).data();
    Ok((v[0], v[1]))
}

/// Single-head cross-attention weights `[wq, wk, wv, wo]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialRouter {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl SpatialRouter {
    pub fn new(store: &mut ParamStore, prefix: &str, query: usize, key: usize, attn: usize, rng: &mut SeededRng) -> Self {
        Self {
            wq: store.add_normal(format!("{prefix}.wq"), &[query, attn], 1.0 / (query as f64).sqrt(), rng),
            wk: store.add_normal(format!("{prefix}.wk"), &[key, attn], 1.0 / (key as f64).sqrt(), rng),
            wv: store.add_normal(format!("{prefix}.wv"), &[key, attn], 1.0 / (key as f64).sqrt(), rng),
            wo: store.add_normal(format!("{prefix}.wo"), &[attn, query], 1.0 / (attn as f64).sqrt(), rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, z: Var, brain: Var) -> Result<Attention> {
        let w = [self.wq, self.wk, self.wv, self.wo].map(|id| tape.param(id));
        spatial_attend(tape, z, brain, w)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    /// Same token count as the queries.
    pub out: Var,
    /// `queries x keys`, rows on the simplex.
    pub weights: Var,
}

/// `softmax((z Wq)(k Wk)^T / sqrt(a)) (k Wv) Wo`.
pub fn spatial_attend(tape: &mut Tape<'_>, z: Var, brain: Var, [wq, wk, wv, wo]: [Var; 4]) -> Result<Attention> {
    let (_, zw) = tape.value(z).dims2();
    let (_, bw) = tape.value(brain).dims2();
    let (qin, a) = tape.value(wq).dims2();
    let (kin, a2) = tape.value(wk).dims2();
    if zw != qin || bw != kin || a != a2 || tape.value(wv).dims2() != (kin, a) || tape.value(wo).dims2().0 != a {
        return Err(FpedError::Shape(format!(
            "queries width {zw}, keys width {bw}, projections {:?}/{:?}/{:?}/{:?}",
            tape.value(wq).shape(),
            tape.value(wk).shape(),
            tape.value(wv).shape(),
            tape.value(wo).shape()
        )));
    }
    let q = tape.matmul(z, wq);
    let k = tape.matmul(brain, wk);
    let v = tape.matmul(brain, wv);
    let kt = tape.transpose(k);
    let s = tape.matmul(q, kt);
    let s = tape.scale(s, 1.0 / (a as f64).sqrt());
    let weights = tape.softmax_rows(s);
    let ctx = tape.matmul(weights, v);
    let out = tape.matmul(ctx, wo);
    Ok(Attention { out, weights })
}

/// Noise predictor over image tokens, conditioned through the gate and the
/// cross-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyGenerator {
    pub config: StageTwoConfig,
    pub gate: TemporalGate,
    pub router: SpatialRouter,
    pub w_in: ParamId,
    pub pos: ParamId,
    pub w_t: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Per-call record of the routing weights.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorPass {
    pub eps_hat: Var,
    pub gate: Var,
    pub attention: Var,
}

impl ToyGenerator {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &StageTwoConfig, rng: &mut SeededRng) -> Self {
        let e = cfg.embed;
        Self {
            config: cfg.clone(),
            gate: TemporalGate::new(store, &format!("{prefix}.gate"), cfg.temb_dim, cfg.gate_bias, rng),
            router: SpatialRouter::new(store, &format!("{prefix}.attn"), e, cfg.brain_width, cfg.attn, rng),
            w_in: store.add_normal(format!("{prefix}.w_in"), &[TOKEN_PIXELS, e], 0.25, rng),
            pos: store.add_normal(format!("{prefix}.pos"), &[IMAGE_TOKENS, e], 0.1, rng),
            w_t: store.add_normal(format!("{prefix}.w_t"), &[cfg.temb_dim, e], 0.25, rng),
            w1: store.add_normal(format!("{prefix}.w1"), &[e, cfg.hidden], 1.0 / (e as f64).sqrt(), rng),
            b1: store.add_zeros(format!("{prefix}.b1"), &[1, cfg.hidden]),
            w2: store.add_normal(format!("{prefix}.w2"), &[cfg.hidden, TOKEN_PIXELS], 0.1 / (cfg.hidden as f64).sqrt(), rng),
            b2: store.add_zeros(format!("{prefix}.b2"), &[1, TOKEN_PIXELS]),
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.config.steps, self.config.beta_start, self.config.beta_end)
    }

    /// `x_t` is `IMAGE_TOKENS x TOKEN_PIXELS`; `coarse`/`fine` are `G x d`.
    pub fn forward(&self, tape: &mut Tape<'_>, x_t: Var, t: usize, coarse: Var, fine: Var) -> Result<GeneratorPass> {
        let steps = self.config.steps;
        let g = self.gate.forward(tape, t, steps);
        let gc = tape.gather(g, &[0], &[1, 1]);
        let gf = tape.gather(g, &[1], &[1, 1]);
        let c = tape.mul_scalar_var(coarse, gc);
        let f = tape.mul_scalar_var(fine, gf);
        let brain = tape.add(c, f);

        let [w_in, pos, w_t, w1, b1, w2, b2] =
            [self.w_in, self.pos, self.w_t, self.w1, self.b1, self.w2, self.b2].map(|id| tape.param(id));
        let temb = tape.constant(Tensor::row(timestep_embedding(t, self.config.temb_dim)));
        let te = tape.matmul(temb, w_t);
        let u = tape.matmul(x_t, w_in);
        let u = tape.add(u, pos);
        let u = tape.add_row(u, te);
        let att = self.router.forward(tape, u, brain)?;
        let u = tape.add(u, att.out);
        let h = tape.matmul(u, w1);
        let h = tape.add_row(h, b1);
        let h = tape.gelu(h);
        let o = tape.matmul(h, w2);
        let eps_hat = tape.add_row(o, b2);
        Ok(GeneratorPass { eps_hat, gate: g, attention: att.weights })
    }
}

/// Row-major 16x16 pixels to `IMAGE_TOKENS x TOKEN_PIXELS` block tokens.
pub fn to_tokens(pixels: &[f64]) -> Vec<f64> {
    let per_row = IMAGE_SIDE / BLOCK;
    let mut out = vec![0.0; IMAGE_SIDE * IMAGE_SIDE];
    for (p, &v) in pixels.iter().enumerate() {
        let (y, x) = (p / IMAGE_SIDE, p % IMAGE_SIDE);
        let token = (y / BLOCK) * per_row + x / BLOCK;
        let within = (y % BLOCK) * BLOCK + x % BLOCK;
        out[token * TOKEN_PIXELS + within] = v;
    }
    out
}

pub fn from_tokens(tokens: &[f64]) -> Vec<f64> {
    let per_row = IMAGE_SIDE / BLOCK;
    let mut out = vec![0.0; IMAGE_SIDE * IMAGE_SIDE];
    for (p, slot) in out.iter_mut().enumerate() {
        let (y, x) = (p / IMAGE_SIDE, p % IMAGE_SIDE);
        let token = (y / BLOCK) * per_row + x / BLOCK;
        *slot = tokens[token * TOKEN_PIXELS + (y % BLOCK) * BLOCK + x % BLOCK];
    }
    out
}

/// Synthetic target image for a sample: brightness of each pixel follows the
/// cosine between the patch embedding under it and the image target.
pub fn render_target(patches: &[f64], c_img: &[f64], grid: usize) -> Vec<f64> {
    let d = c_img.len();
    (0..IMAGE_SIDE * IMAGE_SIDE)
        .map(|p| {
            let (y, x) = (p / IMAGE_SIDE, p % IMAGE_SIDE);
            let cell = (y * grid / IMAGE_SIDE) * grid + x * grid / IMAGE_SIDE;
            let s = cosine(&patches[cell * d..(cell + 1) * d], c_img).unwrap_or(0.0);
            (0.5 + 0.5 * s).clamp(0.0, 1.0)
        })
        .collect()
}

/// One stage-2 training example.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTwoPair {
    pub coarse: Tensor,
    pub fine: Tensor,
    /// Row-major 16x16 pixels in [0, 1].
    pub image: Vec<f64>,
}

fn x0_tokens(image: &[f64]) -> Vec<f64> {
    to_tokens(&image.iter().map(|v| 2.0 * v - 1.0).collect::<Vec<_>>())
}

/// Mean noise-prediction error of one pair at timestep `t` with noise `eps`.
fn pair_loss_tape(
    tape: &mut Tape<'_>,
    gen: &ToyGenerator,
    s: &DiffusionSchedule,
    pair: &StageTwoPair,
    t: usize,
    eps: &[f64],
) -> Result<(Var, Var)> {
    let xt = noising(&x0_tokens(&pair.image), t, eps, s)?;
    let xt = tape.constant(Tensor::new(&[IMAGE_TOKENS, TOKEN_PIXELS], xt)?);
    let coarse = tape.constant(pair.coarse.clone());
    let fine = tape.constant(pair.fine.clone());
    let pass = gen.forward(tape, xt, t, coarse, fine)?;
    let e = tape.constant(Tensor::new(&[IMAGE_TOKENS, TOKEN_PIXELS], eps.to_vec())?);
    let d = tape.sub(pass.eps_hat, e);
    let sq = tape.sqr(d);
    Ok((tape.mean(sq), pass.gate))
}

/// Average stage-2 loss over `pairs` with timesteps and noise fixed by `seed`.
pub fn stage2_loss(gen: &ToyGenerator, store: &ParamStore, pairs: &[StageTwoPair], draws: usize, seed: u64) -> Result<f64> {
    let s = gen.schedule()?;
    let mut rng = crate::numerics::seeded_rng(seed);
    let mut acc = 0.0;
    for _ in 0..draws {
        for pair in pairs {
            let t = rng.below(s.steps());
            let eps = rng.normal_vec(IMAGE_TOKENS * TOKEN_PIXELS);
            let mut tape = Tape::with_params(store);
            let (l, _) = pair_loss_tape(&mut tape, gen, &s, pair, t, &eps)?;
            acc += tape.scalar(l);
        }
    }
    Ok(acc / (draws * pairs.len()) as f64)
}

/// Outcome of [`train_stage2`].
#[derive(Clone, Debug, PartialEq)]
pub struct StageTwoReport {
    /// Mean training loss of every epoch.
    pub losses: Vec<f64>,
    pub gate_calls: usize,
    /// Largest `|g_coarse + g_fine - 1|` over all gate calls.
    pub max_gate_deviation: f64,
}

/// Trains the generator on fixed pairs in batches of 8.
pub fn train_stage2(
    gen: &ToyGenerator,
    store: &mut ParamStore,
    pairs: &[StageTwoPair],
    epochs: usize,
    lr: f64,
    rng: &mut SeededRng,
) -> Result<StageTwoReport> {
    if pairs.is_empty() {
        return Err(FpedError::Argument("no stage-2 pairs".into()));
    }
    let s = gen.schedule()?;
    let mut opt = crate::trainer::Adam::new(store, lr, 0.9, 0.999, 1e-8);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut report = StageTwoReport { losses: Vec::with_capacity(epochs), gate_calls: 0, max_gate_deviation: 0.0 };
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(8) {
            let grads = {
                let mut tape = Tape::with_params(store);
                let mut acc: Option<Var> = None;
                for &i in chunk {
                    let t = rng.below(s.steps());
                    let eps = rng.normal_vec(IMAGE_TOKENS * TOKEN_PIXELS);
                    let (l, g) = pair_loss_tape(&mut tape, gen, &s, &pairs[i], t, &eps)?;
                    let dev = (tape.value(g).data().iter().sum::<f64>() - 1.0).abs();
                    report.gate_calls += 1;
                    report.max_gate_deviation = report.max_gate_deviation.max(dev);
                    acc = Some(match acc {
                        None => l,
                        Some(a) => tape.add(a, l),
                    });
                }
                let loss = tape.scale(acc.expect("nonempty chunk"), 1.0 / chunk.len() as f64);
                total += tape.scalar(loss) * chunk.len() as f64;
                let g = tape.backward(loss);
                tape.param_grads(&g, store.len())
            };
            opt.step(store, &grads);
        }
        let mean = total / pairs.len() as f64;
        if !mean.is_finite() {
            return Err(FpedError::Divergence(format!("stage-2 loss {mean}")));
        }
        report.losses.push(mean);
    }
    Ok(report)
}

/// Samples a 16x16 image in [0, 1] conditioned on the brain tokens.
pub fn generate_image(gen: &ToyGenerator, store: &ParamStore, coarse: &Tensor, fine: &Tensor, seed: u64) -> Result<Vec<f64>> {
    let s = gen.schedule()?;
    let mut rng = crate::numerics::seeded_rng(seed);
    // Surface shape errors before the sampling loop.
    {
        let mut tape = Tape::with_params(store);
        let xt = tape.constant(Tensor::zeros(&[IMAGE_TOKENS, TOKEN_PIXELS]));
        let c = tape.constant(coarse.clone());
        let f = tape.constant(fine.clone());
        gen.forward(&mut tape, xt, 0, c, f)?;
    }
    let predict = |x: &[f64], t: usize| -> Vec<f64> {
        let mut tape = Tape::with_params(store);
        let xt = tape.constant(Tensor::new(&[IMAGE_TOKENS, TOKEN_PIXELS], x.to_vec()).expect("token shape"));
        let c = tape.constant(coarse.clone());
        let f = tape.constant(fine.clone());
        let pass = gen.forward(&mut tape, xt, t, c, f).expect("shapes checked above");
        tape.value(pass.eps_hat).data().to_vec()
    };
    let x0 = sample_prior(predict, &s, IMAGE_TOKENS * TOKEN_PIXELS, &mut rng);
    Ok(from_tokens(&x0).into_iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect())
}

/// Binary 8-bit greymap of values in [0, 1].
pub fn write_pgm(path: &Path, pixels: &[f64], width: usize, height: usize) -> Result<()> {
    if pixels.len() != width * height {
        return Err(FpedError::Shape(format!("{} pixels for {width}x{height}", pixels.len())));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}
