use super::config::{AblationMode, TrainConfig};
use super::transformer::TransformerEncoder;
use crate::datagen::FeatureVector;
use crate::error::{FpedError, Result};
use crate::experts::{fuse_l1, ExpertBank, ExpertConfig, Layer2Output};
use crate::numerics::{seeded_rng, ParamId, ParamStore, Tape, Tensor, Var};
use crate::prior::{Denoiser, DiffusionSchedule};
use crate::router::{expert_capacity, Router, TapedRouting};
use crate::NUM_NETWORKS;

/// Target space a head aligns to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Text, Modality::Image];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }
}

const MODEL_STREAM: u64 = 0x006d_6f64_656c;

/// Stage-1 model: router(s), expert bank or replacement encoder, and the
/// diffusion prior.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub embed_dim: usize,
    /// One shared router, or text then image routers.
    pub routers: Vec<Router>,
    pub bank: Option<ExpertBank>,
    /// Attention mode: query scoring pooled expert outputs.
    pub attn_query: Option<ParamId>,
    pub encoder: Option<TransformerEncoder>,
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
    pub capacity: usize,
}

/// One trunk evaluation.
#[derive(Clone, Debug)]
pub struct Pass {
    /// `None` when a single pass feeds both heads.
    pub modality: Option<Modality>,
    pub routing: Option<TapedRouting>,
    /// Layer-1 expert outputs `F_k` (empty for the transformer).
    pub experts: Vec<Var>,
    /// Fused layer-1 tokens (coarse bank).
    pub coarse: Var,
    /// Tokens after the second layer (fine bank).
    pub fine: Var,
    pub layer2: Option<Layer2Output>,
}

#[derive(Clone, Debug)]
pub struct SampleForward {
    pub b_text: Var,
    pub b_img: Var,
    /// Unweighted KL averaged over routers.
    pub kl: Option<Var>,
    pub passes: Vec<Pass>,
}

impl SampleForward {
    pub fn pass(&self, m: Modality) -> &Pass {
        self.passes.iter().find(|p| p.modality.is_none_or(|pm| pm == m)).expect("every modality has a pass")
    }
}

impl Model {
    /// Builds the model and its freshly initialised parameters.
    pub fn new(cfg: &TrainConfig, embed_dim: usize) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = seeded_rng(cfg.seed).fork(MODEL_STREAM);
        let mut store = ParamStore::new();
        let capacity = expert_capacity(cfg.feature_len, cfg.capacity_factor, NUM_NETWORKS)?;
        let ecfg = ExpertConfig {
            input_len: cfg.feature_len,
            tokens: cfg.tokens,
            width: cfg.width,
            l1_hidden: cfg.l1_hidden,
            l2_experts: cfg.l2_experts,
            l2_hidden: cfg.l2_hidden,
            l2_top: cfg.l2_top,
            embed_dim,
            fan_in: capacity,
        };
        let mut routers = Vec::new();
        if cfg.mode.routed() {
            let names: &[&str] = if cfg.modality_routers { &["router.text", "router.image"] } else { &["router"] };
            for n in names {
                routers.push(Router::new(&mut store, n, cfg.feature_len, cfg.position_bias, &mut rng));
            }
        }
        let (bank, encoder, attn_query) = if cfg.mode == AblationMode::Transformer {
            // Match the size of the default expert trunk built on a scratch store.
            let mut scratch = ParamStore::new();
            let mut srng = seeded_rng(0);
            let moe = ExpertBank::new(&mut scratch, "bank", &ecfg, &mut srng)?;
            let mut target = moe.param_count(&scratch);
            let n_routers = if cfg.modality_routers { 2 } else { 1 };
            target += n_routers * NUM_NETWORKS * (1 + if cfg.position_bias { cfg.feature_len } else { 0 });
            let enc = TransformerEncoder::matched(
                &mut store,
                "encoder",
                cfg.feature_len,
                cfg.tokens,
                cfg.width,
                embed_dim,
                target,
                &mut rng,
            );
            (None, Some(enc), None)
        } else {
            let bank = ExpertBank::new(&mut store, "bank", &ecfg, &mut rng)?;
            let q = (cfg.mode == AblationMode::Attention)
                .then(|| store.add_normal("bank.attn_query", &[cfg.width, 1], 1.0 / (cfg.width as f64).sqrt(), &mut rng));
            (Some(bank), None, q)
        };
        let denoiser = Denoiser::new(
            &mut store,
            "prior",
            embed_dim,
            embed_dim,
            cfg.prior_temb,
            cfg.prior_hidden,
            &mut rng,
        );
        let schedule = DiffusionSchedule::linear(cfg.prior_steps, 1e-4, 0.02)?;
        let model = Self {
            config: cfg.clone(),
            embed_dim,
            routers,
            bank,
            attn_query,
            encoder,
            denoiser,
            schedule,
            capacity,
        };
        Ok((model, store))
    }

    /// Parameters of everything except the diffusion prior.
    pub fn encoder_param_count(&self, store: &ParamStore) -> usize {
        store.iter().filter(|(n, _)| !n.starts_with("prior.")).map(|(_, t)| t.len()).sum()
    }

    pub fn router_for(&self, m: Modality) -> Option<&Router> {
        match (self.routers.len(), m) {
            (0, _) => None,
            (1, _) => self.routers.first(),
            (_, Modality::Text) => self.routers.first(),
            (_, Modality::Image) => self.routers.get(1),
        }
    }

    /// Input actually seen by the model for this mode.
    pub fn model_input(&self, fv: &FeatureVector) -> FeatureVector {
        if self.config.mode == AblationMode::OnlyV {
            fv.restricted_to(0)
        } else {
            fv.clone()
        }
    }

    fn routed_pass(&self, tape: &mut Tape<'_>, router: &Router, fv: &FeatureVector, modality: Option<Modality>) -> Result<Pass> {
        let bank = self.bank.as_ref().expect("routed modes have a bank");
        let x_col = tape.constant(Tensor::new(&[fv.len(), 1], fv.x.clone())?);
        let routing = router.forward(tape, x_col, &fv.labels, self.capacity);
        let experts: Vec<Var> = bank
            .layer1
            .iter()
            .zip(&routing.routed)
            .map(|(e, (sel, q))| e.forward(tape, *q, Some(sel)))
            .collect();
        let coarse = fuse_l1(tape, &experts)?;
        let l2 = bank.layer2.forward(tape, coarse);
        Ok(Pass { modality, routing: Some(routing), experts, coarse, fine: l2.out, layer2: Some(l2) })
    }

    /// Fixed atlas partition: expert `k` reads exactly the network-`k`
    /// positions, weighted `1/7` in uniform mode and `1` otherwise.
    fn partition_pass(&self, tape: &mut Tape<'_>, fv: &FeatureVector) -> Result<Pass> {
        let bank = self.bank.as_ref().expect("partition modes have a bank");
        let scale = if self.config.mode == AblationMode::Uniform { 1.0 / NUM_NETWORKS as f64 } else { 1.0 };
        let experts: Vec<Var> = bank
            .layer1
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let rows: Vec<usize> = (0..fv.len()).filter(|&i| fv.labels[i] as usize == k).collect();
                let q = tape.constant(Tensor::row(rows.iter().map(|&i| fv.x[i] * scale).collect()));
                e.forward(tape, q, Some(&rows))
            })
            .collect();
        let coarse = match self.attn_query {
            Some(q) => {
                let q = tape.param(q);
                let scores: Vec<Var> = experts
                    .iter()
                    .map(|&f| {
                        let m = tape.mean_rows(f);
                        tape.matmul(m, q)
                    })
                    .collect();
                let s = tape.concat_cols(&scores);
                let s = tape.scale(s, 1.0 / (self.config.width as f64).sqrt());
                let a = tape.softmax_rows(s);
                let mut acc = None;
                for (k, &f) in experts.iter().enumerate() {
                    let ak = tape.gather(a, &[k], &[1, 1]);
                    let term = tape.mul_scalar_var(f, ak);
                    acc = Some(match acc {
                        None => term,
                        Some(prev) => tape.add(prev, term),
                    });
                }
                acc.expect("seven experts")
            }
            None => fuse_l1(tape, &experts)?,
        };
        let l2 = bank.layer2.forward(tape, coarse);
        Ok(Pass { modality: None, routing: None, experts, coarse, fine: l2.out, layer2: Some(l2) })
    }

    /// Forward pass of one feature vector.
    pub fn forward(&self, tape: &mut Tape<'_>, fv: &FeatureVector) -> Result<SampleForward> {
        if fv.len() != self.config.feature_len || fv.labels.len() != fv.len() {
            return Err(FpedError::Shape(format!(
                "feature vector of length {} (labels {}), model expects {}",
                fv.len(),
                fv.labels.len(),
                self.config.feature_len
            )));
        }
        let fv = self.model_input(fv);
        if let Some(enc) = &self.encoder {
            let x = tape.constant(Tensor::row(fv.x.clone()));
            let h = enc.forward(tape, x);
            let b_text = enc.heads.text(tape, h);
            let b_img = enc.heads.image(tape, h);
            let pass = Pass { modality: None, routing: None, experts: Vec::new(), coarse: h, fine: h, layer2: None };
            return Ok(SampleForward { b_text, b_img, kl: None, passes: vec![pass] });
        }
        let bank = self.bank.as_ref().expect("non-transformer modes have a bank");
        if !self.config.mode.routed() {
            let pass = self.partition_pass(tape, &fv)?;
            let b_text = bank.heads.text(tape, pass.fine);
            let b_img = bank.heads.image(tape, pass.fine);
            return Ok(SampleForward { b_text, b_img, kl: None, passes: vec![pass] });
        }
        if self.routers.len() == 1 {
            let pass = self.routed_pass(tape, &self.routers[0], &fv, None)?;
            let b_text = bank.heads.text(tape, pass.fine);
            let b_img = bank.heads.image(tape, pass.fine);
            let kl = pass.routing.as_ref().map(|r| r.kl_mean);
            return Ok(SampleForward { b_text, b_img, kl, passes: vec![pass] });
        }
        let text = self.routed_pass(tape, &self.routers[0], &fv, Some(Modality::Text))?;
        let image = self.routed_pass(tape, &self.routers[1], &fv, Some(Modality::Image))?;
        let b_text = bank.heads.text(tape, text.fine);
        let b_img = bank.heads.image(tape, image.fine);
        let kt = text.routing.as_ref().expect("routed").kl_mean;
        let ki = image.routing.as_ref().expect("routed").kl_mean;
        let s = tape.add(kt, ki);
        let kl = Some(tape.scale(s, 0.5));
        Ok(SampleForward { b_text, b_img, kl, passes: vec![text, image] })
    }

    /// Untaped predictions `(b_text, b_img)`.
    pub fn predict(&self, store: &ParamStore, fv: &FeatureVector) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::with_params(store);
        let out = self.forward(&mut tape, fv)?;
        Ok((tape.value(out.b_text).data().to_vec(), tape.value(out.b_img).data().to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: AblationMode) -> TrainConfig {
        TrainConfig {
            mode,
            feature_len: 70,
            tokens: 2,
            width: 4,
            l1_hidden: 3,
            l2_experts: 4,
            l2_hidden: 3,
            prior_hidden: 6,
            prior_temb: 4,
            prior_steps: 10,
            ..Default::default()
        }
    }

    fn feature(seed: u64) -> FeatureVector {
        let mut rng = seeded_rng(seed);
        FeatureVector { x: rng.normal_vec(70), labels: (0..70).map(|i| (i / 10) as u8).collect(), sample_id: 0 }
    }

    #[test]
    fn every_mode_runs_and_is_deterministic() {
        for mode in AblationMode::ALL {
            let (m, store) = Model::new(&small(mode), 5).unwrap();
            let a = m.predict(&store, &feature(1)).unwrap();
            let (m2, store2) = Model::new(&small(mode), 5).unwrap();
            assert_eq!(store, store2);
            assert_eq!(a, m2.predict(&store2, &feature(1)).unwrap());
            assert_eq!(a.0.len(), 5);
            assert!(a.0.iter().chain(&a.1).all(|v| v.is_finite()));
        }
    }

    #[test]
    fn onlyv_sees_only_visual_positions() {
        let (m, _) = Model::new(&small(AblationMode::OnlyV), 5).unwrap();
        let fv = feature(2);
        let seen = m.model_input(&fv);
        for (i, &l) in fv.labels.iter().enumerate() {
            if l == 0 {
                assert_eq!(seen.x[i], fv.x[i]);
            } else {
                assert_eq!(seen.x[i], 0.0);
            }
        }
    }

    #[test]
    fn modality_passes_use_their_own_router() {
        let (m, store) = Model::new(&small(AblationMode::Moe), 5).unwrap();
        assert_eq!(m.routers.len(), 2);
        let mut tape = Tape::with_params(&store);
        let out = m.forward(&mut tape, &feature(3)).unwrap();
        assert_eq!(out.passes.len(), 2);
        assert_eq!(out.pass(Modality::Text).modality, Some(Modality::Text));
        assert_eq!(out.pass(Modality::Image).modality, Some(Modality::Image));
        assert!(out.kl.is_some());
        let cfg = TrainConfig { modality_routers: false, ..small(AblationMode::Moe) };
        let (m, _) = Model::new(&cfg, 5).unwrap();
        assert_eq!(m.routers.len(), 1);
    }

    #[test]
    fn wrong_length_is_a_shape_error() {
        let (m, store) = Model::new(&small(AblationMode::Moe), 5).unwrap();
        let fv = FeatureVector { x: vec![0.0; 10], labels: vec![0; 10], sample_id: 0 };
        assert!(matches!(m.predict(&store, &fv), Err(FpedError::Shape(_))));
    }

    #[test]
    fn transformer_matches_expert_trunk_size() {
        let cfg = TrainConfig::default();
        let (moe, s1) = Model::new(&cfg, 64).unwrap();
        let (tr, s2) = Model::new(&TrainConfig { mode: AblationMode::Transformer, ..cfg }, 64).unwrap();
        let a = moe.encoder_param_count(&s1) as f64;
        let b = tr.encoder_param_count(&s2) as f64;
        assert!((a - b).abs() / a <= 0.1, "{a} vs {b}");
    }
}
