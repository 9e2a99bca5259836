//! Alignment and contrastive objectives plus total-loss assembly.
//!
//! Plain functions take `N x D` batches and report exact values; the `*_tape`
//! variants record the same computation for training.

use crate::error::{FpedError, Result};
use crate::numerics::{cosine, Tape, Tensor, Var};
use crate::numerics::{dot, norm};

/// Norm floor used inside taped losses so gradients stay finite.
pub const NORM_FLOOR: f64 = 1e-12;

pub const DEFAULT_TAU: f64 = 0.125;

fn same_shape(b: &Tensor, c: &Tensor) -> Result<(usize, usize)> {
    let (bn, bd) = b.dims2();
    if b.dims2() != c.dims2() {
        return Err(FpedError::Shape(format!("{:?} vs {:?}", b.shape(), c.shape())));
    }
    Ok((bn, bd))
}

/// Batch mean of `1 - cos(b_i, c_i)`.
pub fn cosine_loss(b: &Tensor, c: &Tensor) -> Result<f64> {
    let (n, _) = same_shape(b, c)?;
    let mut acc = 0.0;
    for i in 0..n {
        let s = cosine(b.row_slice(i), c.row_slice(i))
            .ok_or_else(|| FpedError::Numeric(format!("zero-norm vector in cosine loss row {i}")))?;
        acc += 1.0 - s;
    }
    Ok(acc / n as f64)
}

/// Batch mean of the per-dimension mean squared difference.
pub fn mse_loss(b: &Tensor, c: &Tensor) -> Result<f64> {
    let (n, d) = same_shape(b, c)?;
    let sq: f64 = b.data().iter().zip(c.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sq / (n * d) as f64)
}

fn normalized_rows(m: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (n, _) = m.dims2();
    (0..n)
        .map(|i| {
            let r = m.row_slice(i);
            let l = norm(r);
            if l == 0.0 || !l.is_finite() {
                return Err(FpedError::Numeric(format!("row {i} has norm {l}")));
            }
            Ok(r.iter().map(|v| v / l).collect())
        })
        .collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `-mean_i sum_j softmax_j(y_i.y_j/tau) * log softmax_j(x_i.y_j/tau)` on
/// normalized rows.
fn softclip_direction(x: &[Vec<f64>], y: &[Vec<f64>], tau: f64) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        let t = softmax(&y.iter().map(|yj| dot(&y[i], yj) / tau).collect::<Vec<_>>());
        let s: Vec<f64> = y.iter().map(|yj| dot(&x[i], yj) / tau).collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        acc -= t.iter().zip(&s).map(|(tj, sj)| tj * (sj - lse)).sum::<f64>();
    }
    acc / n as f64
}

/// SoftCLIP between predictions `b` and targets `c`. The bidirectional form
/// averages the (c-targets, b-predictions) and (b-targets, c-predictions)
/// directions; otherwise only the first is used.
pub fn softclip_loss(b: &Tensor, c: &Tensor, tau: f64, bidirectional: bool) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(FpedError::Argument(format!("temperature must be positive, got {tau}")));
    }
    same_shape(b, c)?;
    let bn = normalized_rows(b)?;
    let cn = normalized_rows(c)?;
    let forward = softclip_direction(&bn, &cn, tau);
    if bidirectional {
        Ok(0.5 * (forward + softclip_direction(&cn, &bn, tau)))
    } else {
        Ok(forward)
    }
}

pub fn cosine_loss_tape(tape: &mut Tape<'_>, b: Var, c: Var) -> Var {
    let n = tape.value(b).dims2().0 as f64;
    let bn = tape.l2_normalize_rows(b);
    let cn = tape.l2_normalize_rows(c);
    let prod = tape.mul(bn, cn);
    let s = tape.sum(prod);
    let s = tape.scale(s, -1.0 / n);
    tape.add_scalar(s, 1.0)
}

pub fn mse_loss_tape(tape: &mut Tape<'_>, b: Var, c: Var) -> Var {
    let d = tape.sub(b, c);
    let sq = tape.sqr(d);
    tape.mean(sq)
}

fn softclip_direction_tape(tape: &mut Tape<'_>, x: Var, y: Var, tau: f64) -> Var {
    let n = tape.value(x).dims2().0 as f64;
    let yt = tape.transpose(y);
    let yy = tape.matmul(y, yt);
    let yy = tape.scale(yy, 1.0 / tau);
    let targets = tape.softmax_rows(yy);
    let xy = tape.matmul(x, yt);
    let xy = tape.scale(xy, 1.0 / tau);
    let logp = tape.log_softmax_rows(xy);
    let prod = tape.mul(targets, logp);
    let s = tape.sum(prod);
    tape.scale(s, -1.0 / n)
}

/// Taped SoftCLIP; `tau` must be positive.
pub fn softclip_loss_tape(tape: &mut Tape<'_>, b: Var, c: Var, tau: f64, bidirectional: bool) -> Var {
    let bn = tape.l2_normalize_rows(b);
    let cn = tape.l2_normalize_rows(c);
    let forward = softclip_direction_tape(tape, bn, cn, tau);
    if bidirectional {
        let backward = softclip_direction_tape(tape, cn, bn, tau);
        let s = tape.add(forward, backward);
        tape.scale(s, 0.5)
    } else {
        forward
    }
}

/// Per-term multipliers of the total objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub kl: f64,
    pub cos: f64,
    pub mse: f64,
    pub softclip: f64,
    pub dp: f64,
    pub prior_clip: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { kl: 1.0, cos: 1.0, mse: 1.0, softclip: 1.0, dp: 1.0, prior_clip: 1.0 }
    }
}

/// One batch's loss terms, already multiplied by their weights.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub epoch: usize,
    pub batch: usize,
    pub kl: f64,
    pub cos: f64,
    pub mse: f64,
    pub softclip: f64,
    pub dp: f64,
    pub prior_clip: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "epoch,batch,kl,cos,mse,softclip,dp,prior_clip,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.epoch, self.batch, self.kl, self.cos, self.mse, self.softclip, self.dp, self.prior_clip, self.total
        )
    }
}

/// Unweighted raw terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub kl: f64,
    pub cos: f64,
    pub mse: f64,
    pub softclip: f64,
    pub dp: f64,
    pub prior_clip: f64,
}

/// Weighted sum of the parts; any non-finite part is an error.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<LossBreakdown> {
    let named = [
        ("kl", parts.kl),
        ("cos", parts.cos),
        ("mse", parts.mse),
        ("softclip", parts.softclip),
        ("dp", parts.dp),
        ("prior_clip", parts.prior_clip),
    ];
    if let Some((name, v)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(FpedError::Divergence(format!("loss term {name} is {v}")));
    }
    let mut b = LossBreakdown {
        kl: w.kl * parts.kl,
        cos: w.cos * parts.cos,
        mse: w.mse * parts.mse,
        softclip: w.softclip * parts.softclip,
        dp: w.dp * parts.dp,
        prior_clip: w.prior_clip * parts.prior_clip,
        ..Default::default()
    };
    b.total = b.kl + b.cos + b.mse + b.softclip + b.dp + b.prior_clip;
    Ok(b)
}
