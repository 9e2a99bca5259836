//! Expert networks: seven network-specific layer-1 experts, a data-driven
//! layer-2 bank with a dense top-n gate, and pooled projection heads.

use crate::error::{FpedError, Result};
use crate::numerics::{ParamId, ParamStore, SeededRng, Tape, Var};
use crate::NUM_NETWORKS;

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertConfig {
    pub input_len: usize,
    /// Token count `G` of every expert output.
    pub tokens: usize,
    /// Token width `d`.
    pub width: usize,
    pub l1_hidden: usize,
    pub l2_experts: usize,
    pub l2_hidden: usize,
    /// Layer-2 experts evaluated per input.
    pub l2_top: usize,
    pub embed_dim: usize,
    /// Typical number of routed positions per expert, used for init scale.
    pub fan_in: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            input_len: crate::FEATURE_LEN,
            tokens: 8,
            width: 32,
            l1_hidden: 32,
            l2_experts: 14,
            l2_hidden: 64,
            l2_top: 2,
            embed_dim: 64,
            fan_in: 586,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.input_len, self.tokens, self.width, self.l1_hidden, self.l2_experts, self.l2_hidden];
        if dims.contains(&0) || self.embed_dim == 0 || self.fan_in == 0 {
            return Err(FpedError::Config(format!("zero dimension in {self:?}")));
        }
        if self.l2_top == 0 || self.l2_top > self.l2_experts {
            return Err(FpedError::Config(format!(
                "l2_top {} outside 1..={}",
                self.l2_top, self.l2_experts
            )));
        }
        Ok(())
    }
}

/// Two-layer perceptron `R^L -> R^{G x d}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Layer1Expert {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub tokens: usize,
    pub width: usize,
}

impl Layer1Expert {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ExpertConfig, rng: &mut SeededRng) -> Self {
        let out = cfg.tokens * cfg.width;
        let w1 = store.add_normal(
            format!("{prefix}.w1"),
            &[cfg.input_len, cfg.l1_hidden],
            1.0 / (cfg.fan_in as f64).sqrt(),
            rng,
        );
        let b1 = store.add_zeros(format!("{prefix}.b1"), &[1, cfg.l1_hidden]);
        let w2 = store.add_normal(format!("{prefix}.w2"), &[cfg.l1_hidden, out], 1.0 / (cfg.l1_hidden as f64).sqrt(), rng);
        let b2 = store.add_zeros(format!("{prefix}.b2"), &[1, out]);
        Self { w1, b1, w2, b2, tokens: cfg.tokens, width: cfg.width }
    }

    /// `F = reshape(gelu(q W1[rows] + b1) W2 + b2)`. `q` is `1 x |rows|`; with
    /// `rows = None` it is the dense `1 x L` input.
    pub fn forward(&self, tape: &mut Tape<'_>, q: Var, rows: Option<&[usize]>) -> Var {
        let w1 = tape.param(self.w1);
        let b1 = tape.param(self.b1);
        let w2 = tape.param(self.w2);
        let b2 = tape.param(self.b2);
        expert_forward_l1(tape, q, rows, [w1, b1, w2, b2], self.tokens, self.width)
    }
}

/// Layer-1 expert forward with explicit weight handles `[w1, b1, w2, b2]`.
pub fn expert_forward_l1(
    tape: &mut Tape<'_>,
    q: Var,
    rows: Option<&[usize]>,
    [w1, b1, w2, b2]: [Var; 4],
    tokens: usize,
    width: usize,
) -> Var {
    let w1 = match rows {
        Some(r) => tape.gather_rows(w1, r),
        None => w1,
    };
    let h = tape.matmul(q, w1);
    let h = tape.add(h, b1);
    let h = tape.gelu(h);
    let o = tape.matmul(h, w2);
    let o = tape.add(o, b2);
    tape.reshape(o, &[tokens, width])
}

/// Elementwise sum of equally shaped expert outputs.
pub fn fuse_l1(tape: &mut Tape<'_>, parts: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = parts.split_first() else {
        return Err(FpedError::Argument("nothing to fuse".into()));
    };
    let shape = tape.value(first).shape().to_vec();
    let mut acc = first;
    for &p in rest {
        if tape.value(p).shape() != shape.as_slice() {
            return Err(FpedError::Shape(format!("{:?} vs {:?}", tape.value(p).shape(), shape)));
        }
        acc = tape.add(acc, p);
    }
    Ok(acc)
}

/// Token-wise two-layer perceptron `R^d -> R^d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Layer2Expert {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Layer2Expert {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &ExpertConfig, rng: &mut SeededRng) -> Self {
        let (d, h) = (cfg.width, cfg.l2_hidden);
        Self {
            w1: store.add_normal(format!("{prefix}.w1"), &[d, h], 1.0 / (d as f64).sqrt(), rng),
            b1: store.add_zeros(format!("{prefix}.b1"), &[1, h]),
            w2: store.add_normal(format!("{prefix}.w2"), &[h, d], 1.0 / (h as f64).sqrt(), rng),
            b2: store.add_zeros(format!("{prefix}.b2"), &[1, d]),
        }
    }

    fn forward(&self, tape: &mut Tape<'_>, h: Var) -> Var {
        let w1 = tape.param(self.w1);
        let b1 = tape.param(self.b1);
        let w2 = tape.param(self.w2);
        let b2 = tape.param(self.b2);
        let u = tape.matmul(h, w1);
        let u = tape.add_row(u, b1);
        let u = tape.gelu(u);
        let o = tape.matmul(u, w2);
        tape.add_row(o, b2)
    }
}

/// Data-driven second expert layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer2 {
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub experts: Vec<Layer2Expert>,
    pub top: usize,
}

/// Result of one layer-2 pass.
#[derive(Clone, Debug)]
pub struct Layer2Output {
    pub out: Var,
    /// Dense gate probabilities over all experts.
    pub gate: Vec<f64>,
    /// Evaluated experts, highest gate first.
    pub selected: Vec<usize>,
}

impl Layer2 {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ExpertConfig, rng: &mut SeededRng) -> Self {
        let gate_w = store.add_normal(
            format!("{prefix}.gate_w"),
            &[cfg.width, cfg.l2_experts],
            0.1 / (cfg.width as f64).sqrt(),
            rng,
        );
        let gate_b = store.add_zeros(format!("{prefix}.gate_b"), &[1, cfg.l2_experts]);
        let experts = (0..cfg.l2_experts)
            .map(|e| Layer2Expert::new(store, &format!("{prefix}.e{e}"), cfg, rng))
            .collect();
        Self { gate_w, gate_b, experts, top: cfg.l2_top }
    }

    /// Gate on the token mean, evaluate the `top` experts and mix them with
    /// gate weights renormalized over the selection.
    pub fn forward(&self, tape: &mut Tape<'_>, h: Var) -> Layer2Output {
        self.forward_top(tape, h, self.top)
    }

    pub fn forward_top(&self, tape: &mut Tape<'_>, h: Var, top: usize) -> Layer2Output {
        let gw = tape.param(self.gate_w);
        let gb = tape.param(self.gate_b);
        let m = tape.mean_rows(h);
        let logits = tape.matmul(m, gw);
        let logits = tape.add(logits, gb);
        self.mix(tape, h, logits, top)
    }

    /// Mixes experts under externally supplied gate logits (`1 x E`).
    pub fn mix(&self, tape: &mut Tape<'_>, h: Var, logits: Var, top: usize) -> Layer2Output {
        let probs = tape.softmax_rows(logits);
        let gate = tape.value(probs).data().to_vec();
        let top = top.clamp(1, gate.len());
        let mut order: Vec<usize> = (0..gate.len()).collect();
        order.sort_by(|&a, &b| gate[b].total_cmp(&gate[a]).then(a.cmp(&b)));
        let selected = order[..top].to_vec();
        // Renormalizing the selected softmax entries equals a softmax over the
        // selected logits; this form keeps unselected logits off the tape.
        let l_sel = tape.gather(logits, &selected, &[1, top]);
        let g_sel = tape.softmax_rows(l_sel);
        let mut out = None;
        for (j, &e) in selected.iter().enumerate() {
            let y = self.experts[e].forward(tape, h);
            let g = tape.gather(g_sel, &[j], &[1, 1]);
            let term = tape.mul_scalar_var(y, g);
            out = Some(match out {
                None => term,
                Some(acc) => tape.add(acc, term),
            });
        }
        Layer2Output { out: out.expect("top >= 1"), gate, selected }
    }
}

/// Mean-pool over tokens followed by separate text and image affine heads.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Heads {
    pub text_w: ParamId,
    pub text_b: ParamId,
    pub img_w: ParamId,
    pub img_b: ParamId,
}

impl Heads {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, embed_dim: usize, rng: &mut SeededRng) -> Self {
        let s = 1.0 / (width as f64).sqrt();
        Self {
            text_w: store.add_normal(format!("{prefix}.text_w"), &[width, embed_dim], s, rng),
            text_b: store.add_zeros(format!("{prefix}.text_b"), &[1, embed_dim]),
            img_w: store.add_normal(format!("{prefix}.img_w"), &[width, embed_dim], s, rng),
            img_b: store.add_zeros(format!("{prefix}.img_b"), &[1, embed_dim]),
        }
    }

    pub fn text(&self, tape: &mut Tape<'_>, h: Var) -> Var {
        let (w, b) = (tape.param(self.text_w), tape.param(self.text_b));
        pool_project(tape, h, w, b)
    }

    pub fn image(&self, tape: &mut Tape<'_>, h: Var) -> Var {
        let (w, b) = (tape.param(self.img_w), tape.param(self.img_b));
        pool_project(tape, h, w, b)
    }
}

/// `mean_tokens(h) W + b`, shape `1 x D`.
pub fn pool_project(tape: &mut Tape<'_>, h: Var, w: Var, b: Var) -> Var {
    let m = tape.mean_rows(h);
    let y = tape.matmul(m, w);
    tape.add(y, b)
}

/// The seven layer-1 experts, the layer-2 bank and the projection heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBank {
    pub config: ExpertConfig,
    pub layer1: Vec<Layer1Expert>,
    pub layer2: Layer2,
    pub heads: Heads,
}

impl ExpertBank {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ExpertConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let layer1 = (0..NUM_NETWORKS)
            .map(|k| Layer1Expert::new(store, &format!("{prefix}.l1.{}", crate::NETWORK_NAMES[k]), cfg, rng))
            .collect();
        let layer2 = Layer2::new(store, &format!("{prefix}.l2"), cfg, rng);
        let heads = Heads::new(store, &format!("{prefix}.head"), cfg.width, cfg.embed_dim, rng);
        Ok(Self { config: cfg.clone(), layer1, layer2, heads })
    }

    /// Number of scalar parameters registered under this bank.
    pub fn param_count(&self, store: &ParamStore) -> usize {
        let mut ids = Vec::new();
        for e in &self.layer1 {
            ids.extend([e.w1, e.b1, e.w2, e.b2]);
        }
        ids.extend([self.layer2.gate_w, self.layer2.gate_b]);
        for e in &self.layer2.experts {
            ids.extend([e.w1, e.b1, e.w2, e.b2]);
        }
        ids.extend([self.heads.text_w, self.heads.text_b, self.heads.img_w, self.heads.img_b]);
        ids.iter().map(|&id| store.get(id).len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, seeded_rng, Tensor};

    fn small_cfg() -> ExpertConfig {
        ExpertConfig {
            input_len: 10,
            tokens: 3,
            width: 4,
            l1_hidden: 5,
            l2_experts: 6,
            l2_hidden: 5,
            l2_top: 2,
            embed_dim: 3,
            fan_in: 4,
        }
    }

    #[test]
    fn default_bank_is_desk_scale() {
        let mut store = ParamStore::new();
        let bank = ExpertBank::new(&mut store, "bank", &ExpertConfig::default(), &mut seeded_rng(0)).unwrap();
        let n = bank.param_count(&store);
        assert_eq!(n, store.count());
        assert!(n < 5_000_000, "{n}");
    }

    #[test]
    fn layer1_examples() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let e = Layer1Expert::new(&mut store, "e", &cfg, &mut seeded_rng(1));
        for id in [e.w1, e.w2] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::with_params(&store);
        let q = tape.constant(Tensor::row(vec![1.0; 10]));
        let f = e.forward(&mut tape, q, None);
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(f).shape(), &[3, 4]);

        let mut store = ParamStore::new();
        let e = Layer1Expert::new(&mut store, "e", &cfg, &mut seeded_rng(2));
        store.get_mut(e.b1).data_mut().fill(0.7);
        store.get_mut(e.b2).data_mut().copy_from_slice(&(0..12).map(|v| v as f64).collect::<Vec<_>>());
        let mut tape = Tape::with_params(&store);
        let q = tape.constant(Tensor::row(vec![0.0; 10]));
        let f = e.forward(&mut tape, q, None);
        let g = 0.5 * 0.7 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (0.7 + 0.044715 * 0.343)).tanh());
        let w2 = store.get(e.w2);
        for j in 0..12 {
            let want: f64 = (0..5).map(|i| g * w2.get2(i, j)).sum::<f64>() + j as f64;
            assert!((tape.value(f).data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn sparse_rows_match_dense_input() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(3);
        let e = Layer1Expert::new(&mut store, "e", &cfg, &mut rng);
        let rows = [1usize, 4, 7];
        let vals = rng.normal_vec(3);
        let mut dense = vec![0.0; 10];
        for (r, v) in rows.iter().zip(&vals) {
            dense[*r] = *v;
        }
        let mut tape = Tape::with_params(&store);
        let qs = tape.constant(Tensor::row(vals));
        let qd = tape.constant(Tensor::row(dense));
        let a = e.forward(&mut tape, qs, Some(&rows));
        let b = e.forward(&mut tape, qd, None);
        for (x, y) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_examples() {
        let mut rng = seeded_rng(4);
        let mut tape = Tape::new();
        let parts: Vec<Tensor> = (0..7).map(|_| Tensor::new(&[3, 4], rng.normal_vec(12)).unwrap()).collect();
        let vars: Vec<Var> = parts.iter().map(|p| tape.constant(p.clone())).collect();
        let s = fuse_l1(&mut tape, &vars).unwrap();
        let mut rev = vars.clone();
        rev.reverse();
        let r = fuse_l1(&mut tape, &rev).unwrap();
        for j in 0..12 {
            let oracle: f64 = parts.iter().map(|p| p.data()[j]).sum();
            assert!((tape.value(s).data()[j] - oracle).abs() < 1e-12);
            assert!((tape.value(r).data()[j] - oracle).abs() < 1e-12);
        }
        let zero = tape.constant(Tensor::zeros(&[3, 4]));
        let one = tape.constant(parts[2].clone());
        let s = fuse_l1(&mut tape, &[zero, one, zero]).unwrap();
        assert_eq!(tape.value(s), &parts[2]);
        let bad = tape.constant(Tensor::zeros(&[4, 3]));
        assert!(fuse_l1(&mut tape, &[zero, bad]).is_err());
    }

    fn layer2_fixture(seed: u64) -> (ParamStore, Layer2, Tensor) {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let l2 = Layer2::new(&mut store, "l2", &cfg, &mut rng);
        let h = Tensor::new(&[3, 4], rng.normal_vec(12)).unwrap();
        (store, l2, h)
    }

    #[test]
    fn layer2_tie_rule() {
        let (mut store, l2, h) = layer2_fixture(5);
        store.get_mut(l2.gate_w).data_mut().fill(0.0);
        let mut tape = Tape::with_params(&store);
        let hv = tape.constant(h);
        let out = l2.forward(&mut tape, hv);
        assert_eq!(out.selected, vec![0, 1]);
        let y0 = l2.experts[0].forward(&mut tape, hv);
        let y1 = l2.experts[1].forward(&mut tape, hv);
        for j in 0..12 {
            let want = 0.5 * tape.value(y0).data()[j] + 0.5 * tape.value(y1).data()[j];
            assert!((tape.value(out.out).data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn layer2_dominant_gate() {
        let (mut store, l2, h) = layer2_fixture(6);
        store.get_mut(l2.gate_w).data_mut().fill(0.0);
        store.get_mut(l2.gate_b).data_mut()[3] = 1000.0;
        let mut tape = Tape::with_params(&store);
        let hv = tape.constant(h);
        let out = l2.forward(&mut tape, hv);
        assert_eq!(out.selected[0], 3);
        let y = l2.experts[3].forward(&mut tape, hv);
        for j in 0..12 {
            assert!((tape.value(out.out).data()[j] - tape.value(y).data()[j]).abs() < 1e-12);
        }
    }

    /// Dense mixture computed directly from the definition.
    fn dense_oracle(store: &ParamStore, l2: &Layer2, h: &Tensor, logits: &[f64]) -> Vec<f64> {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
        let mut out = vec![0.0; h.len()];
        for (e, ex) in l2.experts.iter().enumerate() {
            let g = (logits[e] - m).exp() / z;
            let mut tape = Tape::with_params(store);
            let hv = tape.constant(h.clone());
            let y = ex.forward(&mut tape, hv);
            for (o, v) in out.iter_mut().zip(tape.value(y).data()) {
                *o += g * v;
            }
        }
        out
    }

    #[test]
    fn widened_top_equals_dense_mixture() {
        for seed in 0..5 {
            let (store, l2, h) = layer2_fixture(10 + seed);
            let mut tape = Tape::with_params(&store);
            let hv = tape.constant(h.clone());
            let out = l2.forward_top(&mut tape, hv, 6);
            let m: Vec<f64> = (0..4).map(|j| (0..3).map(|i| h.get2(i, j)).sum::<f64>() / 3.0).collect();
            let logits: Vec<f64> = (0..6)
                .map(|e| {
                    (0..4).map(|j| m[j] * store.get(l2.gate_w).get2(j, e)).sum::<f64>()
                        + store.get(l2.gate_b).data()[e]
                })
                .collect();
            let oracle = dense_oracle(&store, &l2, &h, &logits);
            for (a, b) in tape.value(out.out).data().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn top2_converges_to_dense_for_peaked_gates() {
        let mut rng = seeded_rng(20);
        for trial in 0..10 {
            let (store, l2, h) = layer2_fixture(30 + trial);
            let mut logits = rng.normal_vec(6);
            logits[rng.below(6)] += 40.0;
            let mut tape = Tape::with_params(&store);
            let hv = tape.constant(h.clone());
            let lv = tape.constant(Tensor::row(logits.clone()));
            let out = l2.mix(&mut tape, hv, lv, 2);
            let oracle = dense_oracle(&store, &l2, &h, &logits);
            for (a, b) in tape.value(out.out).data().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pool_project_examples() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::new(&[3, 2], vec![1.5, -2.0, 1.5, -2.0, 1.5, -2.0]).unwrap());
        let m = tape.mean_rows(h);
        assert_eq!(tape.value(m).data(), &[1.5, -2.0]);
        let w = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::row(vec![0.1, 0.2, 0.3]));
        let y = pool_project(&mut tape, h, w, b);
        assert_eq!(tape.value(y).data(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn expert_gradients_check() {
        let cfg = small_cfg();
        let mut rng = seeded_rng(40);
        let mut layout = ParamStore::new();
        let bank = ExpertBank::new(&mut layout, "b", &cfg, &mut rng).unwrap();
        let q = rng.normal_vec(4);
        let rows = [0usize, 3, 5, 9];
        let r: Vec<f64> = rng.normal_vec(3).iter().map(|v| 0.05 * v).collect();
        for _ in 0..5 {
            let theta = Tensor::row(rng.normal_vec(layout.count())).map(|v| 0.3 * v);
            // Whole pipeline: sparse layer-1 input through both layers and a head.
            let err = grad_check(
                |t, th| {
                    t.bind_flat(&layout, th);
                    let qv = t.constant(Tensor::row(q.clone()));
                    let parts: Vec<Var> = bank.layer1.iter().map(|e| e.forward(t, qv, Some(&rows))).collect();
                    let h = fuse_l1(t, &parts).unwrap();
                    let h2 = bank.layer2.forward(t, h).out;
                    let b = bank.heads.image(t, h2);
                    let c = t.constant(Tensor::row(r.clone()));
                    let s = t.mul(b, c);
                    t.sum(s)
                },
                &theta,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
            // Squared norm of a layer-1 output wrt its routed input.
            let qt = Tensor::row(rng.normal_vec(4));
            let store = {
                let mut s = layout.clone();
                s.unflatten(theta.data()).unwrap();
                s
            };
            let err = grad_check(
                |t, qv| {
                    let w = [bank.layer1[0].w1, bank.layer1[0].b1, bank.layer1[0].w2, bank.layer1[0].b2]
                        .map(|id| t.constant(store.get(id).clone()));
                    let f = expert_forward_l1(t, qv, Some(&rows), w, cfg.tokens, cfg.width);
                    let sq = t.sqr(f);
                    t.sum(sq)
                },
                &qt,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }
}
