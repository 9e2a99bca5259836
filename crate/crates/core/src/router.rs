//! Layer-1 prior-guided routing.
//!
//! Every feature position `i` gets logits `z_i = x_i * w_r + b_i` over the
//! seven network experts, a softmax turns them into routing probabilities,
//! and a one-hot prior built from the position's network label regularizes
//! them through a scheduled KL term. Each expert then keeps the `K`
//! positions with the highest probability in its column, weighted by that
//! probability.

use crate::error::{FpedError, Result};
use crate::numerics::{softmax_rows, ParamId, ParamStore, SeededRng, Tape, Tensor, Var};
use crate::NUM_NETWORKS;

/// Floor applied to routing probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// How per-position KL values are aggregated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlReduction {
    Mean,
    Sum,
}

/// Piecewise-linear KL weight over epochs: ramp up, hold, decay, floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlSchedule {
    pub ramp: f64,
    pub plateau: f64,
    pub decay: f64,
    pub w_max: f64,
    pub w_min: f64,
}

impl KlSchedule {
    /// 20% ramp, 50% plateau, 30% decay of `epochs`.
    pub fn for_epochs(epochs: usize, w_max: f64, w_min: f64) -> Self {
        let e = epochs as f64;
        Self { ramp: 0.2 * e, plateau: 0.5 * e, decay: 0.3 * e, w_max, w_min }
    }

    pub fn constant(w: f64) -> Self {
        Self { ramp: 0.0, plateau: f64::INFINITY, decay: 0.0, w_max: w, w_min: w }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.ramp, self.plateau, self.decay].iter().all(|&v| v >= 0.0)
            && self.w_max >= 0.0
            && self.w_min >= 0.0
            && self.w_max.is_finite()
            && self.w_min.is_finite();
        if ok {
            Ok(())
        } else {
            Err(FpedError::Config(format!("invalid KL schedule {self:?}")))
        }
    }
}

/// KL weight at (possibly fractional) epoch `t`.
pub fn kl_weight(t: f64, s: &KlSchedule) -> f64 {
    let t = t.max(0.0);
    if t < s.ramp {
        return s.w_max * t / s.ramp;
    }
    let t = t - s.ramp;
    if t <= s.plateau {
        return s.w_max;
    }
    let t = t - s.plateau;
    if t < s.decay {
        return s.w_max + (s.w_min - s.w_max) * t / s.decay;
    }
    s.w_min
}

/// `ceil(L * CF / E)`.
pub fn expert_capacity(len: usize, capacity_factor: f64, experts: usize) -> Result<usize> {
    if len == 0 || experts == 0 {
        return Err(FpedError::Argument("L and E must be positive".into()));
    }
    if !(capacity_factor > 0.0 && capacity_factor <= 2.0) {
        return Err(FpedError::Argument(format!(
            "capacity factor {capacity_factor} outside (0, 2]"
        )));
    }
    Ok((len as f64 * capacity_factor / experts as f64).ceil() as usize)
}

/// `Z[i, :] = x_i * w_r + B[i, :]`, shape `L x 7`.
pub fn compute_logits(x: &[f64], w_r: &[f64], bias: Option<&Tensor>) -> Result<Tensor> {
    if w_r.len() != NUM_NETWORKS {
        return Err(FpedError::Shape(format!("w_r has {} entries, need {NUM_NETWORKS}", w_r.len())));
    }
    let l = x.len();
    if let Some(b) = bias {
        if b.shape() != [l, NUM_NETWORKS] {
            return Err(FpedError::Shape(format!("bias shape {:?}, need [{l}, 7]", b.shape())));
        }
    }
    let mut z = Vec::with_capacity(l * NUM_NETWORKS);
    for (i, &xi) in x.iter().enumerate() {
        for k in 0..NUM_NETWORKS {
            let b = bias.map_or(0.0, |b| b.data()[i * NUM_NETWORKS + k]);
            z.push(xi * w_r[k] + b);
        }
    }
    Tensor::new(&[l, NUM_NETWORKS], z)
}

/// One-hot prior rows from 0-based network labels.
pub fn build_prior(labels: &[u8]) -> Result<Tensor> {
    let mut p = vec![0.0; labels.len() * NUM_NETWORKS];
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= NUM_NETWORKS {
            return Err(FpedError::Argument(format!("network label {l} at position {i} out of range")));
        }
        p[i * NUM_NETWORKS + l as usize] = 1.0;
    }
    Tensor::new(&[labels.len(), NUM_NETWORKS], p)
}

/// `w * reduce_i KL(prior_i || p_raw_i)`.
pub fn kl_penalty(prior: &Tensor, p_raw: &Tensor, w: f64, reduction: KlReduction) -> Result<f64> {
    if prior.shape() != p_raw.shape() || prior.rank() != 2 {
        return Err(FpedError::Shape(format!("prior {:?} vs p_raw {:?}", prior.shape(), p_raw.shape())));
    }
    let (rows, cols) = prior.dims2();
    let mut total = 0.0;
    for i in 0..rows {
        for k in 0..cols {
            let q = prior.get2(i, k);
            if q == 0.0 {
                continue;
            }
            let p = p_raw.get2(i, k);
            if !(p.is_finite() && p >= PROB_FLOOR) {
                return Err(FpedError::Numeric(format!(
                    "routing probability {p:e} at prior slot ({i}, {k})"
                )));
            }
            total += q * (q.ln() - p.ln());
        }
    }
    let agg = match reduction {
        KlReduction::Mean => total / rows as f64,
        KlReduction::Sum => total,
    };
    Ok(w * agg)
}

/// Positions of the `k` largest entries of column `col`; ties go to the lower
/// index. Returned in ascending position order.
pub fn top_k_column(p: &Tensor, col: usize, k: usize) -> Vec<usize> {
    let (rows, cols) = p.dims2();
    let k = k.min(rows);
    let data = p.data();
    let mut idx: Vec<usize> = (0..rows).collect();
    if k < rows {
        idx.select_nth_unstable_by(k.saturating_sub(1), |&a, &b| {
            data[b * cols + col].total_cmp(&data[a * cols + col]).then(a.cmp(&b))
        });
    }
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Per-expert routed input.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertDispatch {
    pub mask: Vec<bool>,
    pub weights: Vec<f64>,
    pub routed: Vec<f64>,
    /// Selected positions in ascending order.
    pub selected: Vec<usize>,
}

fn clamp_capacity(k: usize, len: usize) -> usize {
    if k > len {
        log::warn!("capacity {k} exceeds feature length {len}; clamping");
        len
    } else {
        k
    }
}

/// Capacity-limited expert-wise top-K dispatch.
pub fn dispatch(x: &[f64], p_raw: &Tensor, capacity: usize) -> Result<Vec<ExpertDispatch>> {
    let (rows, cols) = p_raw.dims2();
    if rows != x.len() {
        return Err(FpedError::Shape(format!("x has {} entries, p_raw {rows} rows", x.len())));
    }
    if capacity == 0 {
        return Err(FpedError::Argument("capacity must be at least 1".into()));
    }
    let k = clamp_capacity(capacity, rows);
    Ok((0..cols)
        .map(|e| {
            let selected = top_k_column(p_raw, e, k);
            let mut mask = vec![false; rows];
            let mut weights = vec![0.0; rows];
            let mut routed = vec![0.0; rows];
            for &i in &selected {
                mask[i] = true;
                weights[i] = p_raw.get2(i, e);
                routed[i] = weights[i] * x[i];
            }
            ExpertDispatch { mask, weights, routed, selected }
        })
        .collect())
}

/// Complete layer-1 routing of one feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingState {
    pub logits: Tensor,
    pub p_raw: Tensor,
    pub prior: Tensor,
    pub experts: Vec<ExpertDispatch>,
    pub capacity: usize,
}

/// Learnable router parameters: shared `w_r` and an optional per-position bias.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Router {
    pub w_r: ParamId,
    pub bias: Option<ParamId>,
    pub len: usize,
}

impl Router {
    /// `w_r` starts small and random so routing is not tied at step 0; the
    /// per-position bias starts at zero.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        len: usize,
        position_bias: bool,
        rng: &mut SeededRng,
    ) -> Self {
        let w_r = store.add_normal(format!("{prefix}.w_r"), &[1, NUM_NETWORKS], 0.1, rng);
        let bias = position_bias.then(|| store.add_zeros(format!("{prefix}.bias"), &[len, NUM_NETWORKS]));
        Self { w_r, bias, len }
    }

    /// Untaped routing, used by analysis and tests.
    pub fn route(&self, store: &ParamStore, x: &[f64], labels: &[u8], capacity: usize) -> Result<RoutingState> {
        let logits = compute_logits(x, store.get(self.w_r).data(), self.bias.map(|b| store.get(b)))?;
        let p_raw = softmax_rows(&logits)?;
        let prior = build_prior(labels)?;
        let experts = dispatch(x, &p_raw, capacity)?;
        Ok(RoutingState { logits, p_raw, prior, experts, capacity: capacity.min(x.len()) })
    }

    /// Taped routing of `x` (`L x 1` leaf).
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, labels: &[u8], capacity: usize) -> TapedRouting {
        let w_r = tape.param(self.w_r);
        let bias = self.bias.map(|b| tape.param(b));
        route_on_tape(tape, x, w_r, bias, labels, capacity)
    }
}

/// Routing recorded on a tape.
#[derive(Clone, Debug)]
pub struct TapedRouting {
    pub p_raw: Var,
    /// Mean over positions of `-ln p_raw[i, roi(i)]`, unweighted.
    pub kl_mean: Var,
    /// Per expert: selected positions (ascending) and the `1 x K` routed input.
    pub routed: Vec<(Vec<usize>, Var)>,
}

/// Taped router with explicit parameter handles, so checks can perturb them.
pub fn route_on_tape(
    tape: &mut Tape<'_>,
    x: Var,
    w_r: Var,
    bias: Option<Var>,
    labels: &[u8],
    capacity: usize,
) -> TapedRouting {
    let len = tape.value(x).len();
    let mut z = tape.matmul(x, w_r);
    if let Some(b) = bias {
        z = tape.add(z, b);
    }
    let p_raw = tape.softmax_rows(z);
    let slots: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * NUM_NETWORKS + l as usize).collect();
    let at_prior = tape.gather(p_raw, &slots, &[1, len]);
    let logs = tape.ln(at_prior, PROB_FLOOR);
    let mean_log = tape.mean(logs);
    let kl_mean = tape.scale(mean_log, -1.0);

    let k = clamp_capacity(capacity, len);
    let p_val = tape.value(p_raw).clone();
    let x_val = tape.value(x).data().to_vec();
    let mut routed = Vec::with_capacity(NUM_NETWORKS);
    for e in 0..NUM_NETWORKS {
        let selected = top_k_column(&p_val, e, k);
        let idx: Vec<usize> = selected.iter().map(|&i| i * NUM_NETWORKS + e).collect();
        let w = tape.gather(p_raw, &idx, &[1, selected.len()]);
        let xs: Vec<f64> = selected.iter().map(|&i| x_val[i]).collect();
        let xs = tape.constant(Tensor::row(xs));
        let q = tape.mul(w, xs);
        routed.push((selected, q));
    }
    TapedRouting { p_raw, kl_mean, routed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, seeded_rng};
    use proptest::prelude::*;

    #[test]
    fn logits_examples() {
        let mut rng = seeded_rng(0);
        let w: Vec<f64> = rng.normal_vec(7);
        let b = Tensor::new(&[2, 7], rng.normal_vec(14)).unwrap();
        let z = compute_logits(&[0.0, 1.5], &w, Some(&b)).unwrap();
        assert_eq!(z.row_slice(0), b.row_slice(0));
        let z0 = compute_logits(&[3.0, -2.0], &[0.0; 7], None).unwrap();
        assert!(z0.data().iter().all(|&v| v == 0.0));
        let p = softmax_rows(&z0).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
        // Homogeneity of the x-term.
        let x = [0.3, -1.1];
        let za = compute_logits(&x, &w, Some(&b)).unwrap();
        let zb = compute_logits(&[x[0] * 2.5, x[1] * 2.5], &w, Some(&b)).unwrap();
        for i in 0..14 {
            let lhs = zb.data()[i] - b.data()[i];
            let rhs = 2.5 * (za.data()[i] - b.data()[i]);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_examples() {
        let p = build_prior(&[2]).unwrap();
        assert_eq!(p.data(), &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let p = build_prior(&[4; 5]).unwrap();
        for i in 0..5 {
            assert_eq!(p.get2(i, 4), 1.0);
            assert_eq!(p.row_slice(i).iter().sum::<f64>(), 1.0);
        }
        assert!(build_prior(&[7]).is_err());
    }

    #[test]
    fn kl_examples() {
        let prior = build_prior(&[0, 3, 6]).unwrap();
        let uniform = Tensor::full(&[3, 7], 1.0 / 7.0);
        let v = kl_penalty(&prior, &uniform, 1.0, KlReduction::Mean).unwrap();
        assert!((v - 7f64.ln()).abs() < 1e-12);
        assert!((v - 1.945_91).abs() < 1e-5);
        let near = Tensor::new(
            &[3, 7],
            (0..3)
                .flat_map(|i| {
                    let slot = [0, 3, 6][i];
                    (0..7).map(move |k| if k == slot { 1.0 - 6e-9 } else { 1e-9 })
                })
                .collect(),
        )
        .unwrap();
        assert!(kl_penalty(&prior, &near, 1.0, KlReduction::Mean).unwrap() < 1e-8);
        assert_eq!(kl_penalty(&prior, &uniform, 0.0, KlReduction::Mean).unwrap(), 0.0);
        let sum = kl_penalty(&prior, &uniform, 1.0, KlReduction::Sum).unwrap();
        assert!((sum - 3.0 * 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_zero_probability_is_an_error() {
        let prior = build_prior(&[0]).unwrap();
        let mut p = vec![0.0; 7];
        p[1] = 1.0;
        let p = Tensor::new(&[1, 7], p).unwrap();
        assert!(matches!(kl_penalty(&prior, &p, 1.0, KlReduction::Mean), Err(FpedError::Numeric(_))));
    }

    #[test]
    fn schedule_examples() {
        let s = KlSchedule::for_epochs(100, 10.0, 0.1);
        assert_eq!(kl_weight(0.0, &s), 0.0);
        assert_eq!(kl_weight(10.0, &s), 5.0);
        assert_eq!(kl_weight(45.0, &s), 10.0);
        assert_eq!(kl_weight(250.0, &s), 0.1);
        assert!((kl_weight(85.0, &s) - 5.05).abs() < 1e-12);
        // Continuity at the phase boundaries.
        for b in [20.0, 70.0, 100.0] {
            assert!((kl_weight(b - 1e-9, &s) - kl_weight(b + 1e-9, &s)).abs() < 1e-6);
        }
        assert_eq!(kl_weight(0.0, &KlSchedule::constant(10.0)), 10.0);
        assert_eq!(kl_weight(1e6, &KlSchedule::constant(10.0)), 10.0);
    }

    #[test]
    fn capacity_examples() {
        assert_eq!(expert_capacity(4096, 1.0, 7).unwrap(), 586);
        assert_eq!(expert_capacity(4096, 2.0, 7).unwrap(), 1171);
        assert_eq!(expert_capacity(7, 1.0, 7).unwrap(), 1);
        assert!(expert_capacity(4096, 0.0, 7).is_err());
        assert!(expert_capacity(4096, 2.5, 7).is_err());
    }

    fn columns_to_tensor(cols: &[&[f64]]) -> Tensor {
        let rows = cols[0].len();
        let data = (0..rows).flat_map(|i| cols.iter().map(move |c| c[i])).collect();
        Tensor::new(&[rows, cols.len()], data).unwrap()
    }

    #[test]
    fn two_expert_selection() {
        let p = columns_to_tensor(&[&[0.9, 0.8, 0.1, 0.2], &[0.1, 0.2, 0.9, 0.8]]);
        assert_eq!(top_k_column(&p, 0, 2), vec![0, 1]);
        assert_eq!(top_k_column(&p, 1, 2), vec![2, 3]);
        let flat = columns_to_tensor(&[&[0.5; 6]]);
        assert_eq!(top_k_column(&flat, 0, 3), vec![0, 1, 2]);
    }

    #[test]
    fn dispatch_clamps_capacity() {
        let x = vec![1.0; 10];
        let p = Tensor::full(&[10, 7], 1.0 / 7.0);
        let d = dispatch(&x, &p, 50).unwrap();
        assert!(d.iter().all(|e| e.selected.len() == 10));
        assert!(dispatch(&x, &p, 0).is_err());
    }

    fn random_probs(rng: &mut SeededRng, rows: usize) -> Tensor {
        let z = Tensor::new(&[rows, 7], rng.normal_vec(rows * 7)).unwrap();
        softmax_rows(&z).unwrap()
    }

    #[test]
    fn dispatch_matches_full_sort_oracle() {
        let mut rng = seeded_rng(11);
        for trial in 0..1000 {
            let rows = 5 + trial % 60;
            let p = random_probs(&mut rng, rows);
            let x = rng.normal_vec(rows);
            let k = 1 + rng.below(rows);
            let d = dispatch(&x, &p, k).unwrap();
            for (e, ed) in d.iter().enumerate() {
                let mut order: Vec<usize> = (0..rows).collect();
                order.sort_by(|&a, &b| p.get2(b, e).partial_cmp(&p.get2(a, e)).unwrap().then(a.cmp(&b)));
                let mut oracle = order[..k].to_vec();
                oracle.sort();
                assert_eq!(ed.selected, oracle);
                assert_eq!(ed.mask.iter().filter(|&&m| m).count(), k);
                for i in 0..rows {
                    let want = if ed.mask[i] { p.get2(i, e) * x[i] } else { 0.0 };
                    assert_eq!(ed.routed[i], want);
                    assert!(ed.mask[i] || ed.weights[i] == 0.0);
                }
            }
        }
    }

    #[test]
    fn kl_matches_brute_force_definition() {
        let mut rng = seeded_rng(12);
        for _ in 0..50 {
            let rows = 1 + rng.below(30);
            let p = random_probs(&mut rng, rows);
            let labels: Vec<u8> = (0..rows).map(|_| rng.below(7) as u8).collect();
            let prior = build_prior(&labels).unwrap();
            let got = kl_penalty(&prior, &p, 1.0, KlReduction::Mean).unwrap();
            let mut brute = 0.0;
            for i in 0..rows {
                for k in 0..7 {
                    let q = if labels[i] as usize == k { 1.0 } else { 0.0 };
                    if q > 0.0 {
                        brute += q * (q / p.get2(i, k)).ln();
                    }
                }
            }
            assert!((got - brute / rows as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn taped_routing_matches_untaped() {
        let mut rng = seeded_rng(13);
        let mut store = ParamStore::new();
        let router = Router::new(&mut store, "r", 40, true, &mut rng);
        store.get_mut(router.bias.unwrap()).data_mut().copy_from_slice(&rng.normal_vec(280));
        let x = rng.normal_vec(40);
        let labels: Vec<u8> = (0..40).map(|i| (i / 6).min(6) as u8).collect();
        let plain = router.route(&store, &x, &labels, 9).unwrap();
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(Tensor::new(&[40, 1], x.clone()).unwrap());
        let taped = router.forward(&mut tape, xv, &labels, 9);
        assert_eq!(tape.value(taped.p_raw), &plain.p_raw);
        let kl = kl_penalty(&plain.prior, &plain.p_raw, 1.0, KlReduction::Mean).unwrap();
        assert!((tape.scalar(taped.kl_mean) - kl).abs() < 1e-12);
        for (e, (sel, q)) in taped.routed.iter().enumerate() {
            assert_eq!(sel, &plain.experts[e].selected);
            let dense: Vec<f64> = sel.iter().map(|&i| plain.experts[e].routed[i]).collect();
            assert_eq!(tape.value(*q).data(), dense.as_slice());
        }
    }

    #[test]
    fn router_gradient_check() {
        let mut rng = seeded_rng(14);
        let len = 12;
        let labels: Vec<u8> = (0..len).map(|i| (i % 7) as u8).collect();
        let x = rng.normal_vec(len);
        let r = rng.normal_vec(7 * 3);
        for _ in 0..10 {
            let theta = Tensor::row(rng.normal_vec(7 + len * 7));
            let err = grad_check(
                |t, th| {
                    let w = t.gather(th, &(0..7).collect::<Vec<_>>(), &[1, 7]);
                    let b = t.gather(th, &(7..7 + len * 7).collect::<Vec<_>>(), &[len, 7]);
                    let xv = t.constant(Tensor::new(&[len, 1], x.clone()).unwrap());
                    let routing = route_on_tape(t, xv, w, Some(b), &labels, 3);
                    let mut acc = routing.kl_mean;
                    for (e, (_, q)) in routing.routed.iter().enumerate() {
                        let c = t.constant(Tensor::row(r[e * 3..e * 3 + 3].to_vec()));
                        let s = t.mul(*q, c);
                        let s = t.sum(s);
                        acc = t.add(acc, s);
                    }
                    acc
                },
                &theta,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_on_simplex_and_shift_invariant(
            row in prop::collection::vec(-50.0f64..50.0, 7),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax_rows(&Tensor::new(&[1, 7], row.clone()).unwrap()).unwrap();
            prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
            let q = softmax_rows(&Tensor::new(&[1, 7], shifted).unwrap()).unwrap();
            for (a, b) in p.data().iter().zip(q.data()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
