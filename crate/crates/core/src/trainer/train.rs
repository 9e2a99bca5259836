use super::config::{PriorTarget, TrainConfig};
use super::model::{Modality, Model};
use super::optim::Adam;
use crate::datagen::{Dataset, FeatureVector, Preprocessor, Split};
use crate::error::{FpedError, Result};
use crate::losses::{
    cosine_loss_tape, mse_loss_tape, softclip_loss_tape, total_loss, LossBreakdown, LossParts,
};
use crate::numerics::{seeded_rng, ParamStore, SeededRng, Tape, Tensor, Var};
use crate::prior::{dp_loss_tape, prior_clip_loss_tape};
use crate::router::{kl_weight, KlReduction};
use crate::{NUM_NETWORKS, NETWORK_NAMES};

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const NOISE_STREAM: u64 = 0x4e4f_4953;

/// Preprocessed features with their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub features: Vec<FeatureVector>,
    pub c_text: Vec<Vec<f64>>,
    pub c_img: Vec<Vec<f64>>,
}

impl TrainingSet {
    pub fn from_split(ds: &Dataset, pre: &Preprocessor, split: Split) -> Result<Self> {
        let features = pre.transform_split(ds, split)?;
        let c_text = ds.split(split).map(|s| s.c_text.clone()).collect();
        let c_img = ds.split(split).map(|s| s.c_img.clone()).collect();
        Ok(Self { features, c_text, c_img })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn targets(&self, m: Modality) -> &[Vec<f64>] {
        match m {
            Modality::Text => &self.c_text,
            Modality::Image => &self.c_img,
        }
    }
}

/// Per-epoch summary of one router over the training set.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterDiagnostics {
    pub epoch: usize,
    /// `shared`, `text` or `image`.
    pub router: &'static str,
    pub kl_weight: f64,
    /// Mean over samples of the unweighted KL.
    pub kl: f64,
    /// Fraction of positions whose most probable expert is their network.
    pub adherence: f64,
    pub mean_max_prob: f64,
    /// Mean probability at each position's own network.
    pub mean_prior_prob: f64,
    /// Fraction of positions whose most probable expert is `k`.
    pub load: [f64; NUM_NETWORKS],
    /// Share of selected routing mass per expert.
    pub contribution: [f64; NUM_NETWORKS],
}

impl RouterDiagnostics {
    pub fn csv_header() -> String {
        let mut h = "epoch,router,kl_weight,kl,adherence,mean_max_prob,mean_prior_prob".to_string();
        for n in NETWORK_NAMES {
            h.push_str(&format!(",load_{n}"));
        }
        for n in NETWORK_NAMES {
            h.push_str(&format!(",contrib_{n}"));
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!(
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.epoch, self.router, self.kl_weight, self.kl, self.adherence, self.mean_max_prob, self.mean_prior_prob
        );
        for c in self.load.iter().chain(&self.contribution) {
            r.push_str(&format!(",{c:.17e}"));
        }
        r
    }
}

fn router_label(model: &Model, idx: usize) -> &'static str {
    match (model.routers.len(), idx) {
        (1, _) => "shared",
        (_, 0) => "text",
        _ => "image",
    }
}

/// Router statistics over `features` for every router of the model.
pub fn router_diagnostics(
    model: &Model,
    store: &ParamStore,
    features: &[FeatureVector],
    epoch: usize,
    w: f64,
) -> Result<Vec<RouterDiagnostics>> {
    let mut out = Vec::new();
    for (ri, router) in model.routers.iter().enumerate() {
        let (mut kl, mut hits, mut total, mut maxp, mut priorp) = (0.0, 0usize, 0usize, 0.0, 0.0);
        let mut mass = [0.0; NUM_NETWORKS];
        let mut load = [0usize; NUM_NETWORKS];
        for f in features {
            let fv = model.model_input(f);
            let st = router.route(store, &fv.x, &fv.labels, model.capacity)?;
            let (rows, cols) = st.p_raw.dims2();
            let mut sample_kl = 0.0;
            for i in 0..rows {
                let row = st.p_raw.row_slice(i);
                let (arg, &best) = row
                    .iter()
                    .enumerate()
                    .fold((0, &row[0]), |acc, (k, v)| if *v > *acc.1 { (k, v) } else { acc });
                if arg == fv.labels[i] as usize {
                    hits += 1;
                }
                load[arg] += 1;
                maxp += best;
                priorp += row[fv.labels[i] as usize];
                sample_kl -= row[fv.labels[i] as usize].max(crate::router::PROB_FLOOR).ln();
            }
            total += rows;
            kl += sample_kl / rows as f64;
            for (k, e) in st.experts.iter().enumerate().take(cols) {
                mass[k] += e.selected.iter().map(|&i| e.weights[i]).sum::<f64>();
            }
        }
        let z: f64 = mass.iter().sum();
        let contribution = if z > 0.0 { mass.map(|m| m / z) } else { [0.0; NUM_NETWORKS] };
        out.push(RouterDiagnostics {
            epoch,
            router: router_label(model, ri),
            kl_weight: w,
            kl: kl / features.len().max(1) as f64,
            adherence: hits as f64 / total.max(1) as f64,
            mean_max_prob: maxp / total.max(1) as f64,
            mean_prior_prob: priorp / total.max(1) as f64,
            load: load.map(|c| c as f64 / total.max(1) as f64),
            contribution,
        });
    }
    Ok(out)
}

/// Everything produced by a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub preprocessor: Preprocessor,
    /// One row per batch.
    pub history: Vec<LossBreakdown>,
    /// One row per router per epoch, measured after the epoch.
    pub router_history: Vec<RouterDiagnostics>,
}

struct BatchVars {
    parts: [Option<Var>; 6],
    total: Var,
}

fn stack(tape: &mut Tape<'_>, rows: &[&Vec<f64>]) -> Result<Var> {
    let t = Tensor::from_rows(&rows.iter().map(|r| (*r).clone()).collect::<Vec<_>>())?;
    Ok(tape.constant(t))
}

fn batch_loss(
    tape: &mut Tape<'_>,
    model: &Model,
    set: &TrainingSet,
    batch: &[usize],
    kl_w: f64,
    rng: &mut SeededRng,
) -> Result<BatchVars> {
    let cfg = &model.config;
    let w = &cfg.weights;
    let mut bt = Vec::with_capacity(batch.len());
    let mut bi = Vec::with_capacity(batch.len());
    let mut kls = Vec::new();
    for &i in batch {
        let out = model.forward(tape, &set.features[i])?;
        bt.push(out.b_text);
        bi.push(out.b_img);
        if let Some(k) = out.kl {
            kls.push(k);
        }
    }
    let bt = tape.concat_rows(&bt);
    let bi = tape.concat_rows(&bi);
    let ct = stack(tape, &batch.iter().map(|&i| &set.c_text[i]).collect::<Vec<_>>())?;
    let ci = stack(tape, &batch.iter().map(|&i| &set.c_img[i]).collect::<Vec<_>>())?;

    let pair = |tape: &mut Tape<'_>, f: &dyn Fn(&mut Tape<'_>, Var, Var) -> Var| {
        let a = f(tape, bt, ct);
        let b = f(tape, bi, ci);
        let s = tape.add(a, b);
        tape.scale(s, 0.5)
    };
    let cos = pair(tape, &|t, b, c| cosine_loss_tape(t, b, c));
    let mse = pair(tape, &|t, b, c| mse_loss_tape(t, b, c));
    let (tau, bidir) = (cfg.tau, cfg.bidirectional);
    let sc = pair(tape, &|t, b, c| softclip_loss_tape(t, b, c, tau, bidir));

    let kl = if kls.is_empty() {
        None
    } else {
        let s = tape.concat_cols(&kls);
        let m = tape.mean(s);
        let scale = match cfg.kl_reduction {
            KlReduction::Mean => 1.0,
            KlReduction::Sum => cfg.feature_len as f64,
        };
        Some(tape.scale(m, kl_w * scale))
    };

    let (cond, x0_rows) = match cfg.prior_target {
        PriorTarget::Image => (bi, &set.c_img),
        PriorTarget::Text => (bt, &set.c_text),
    };
    let x0 = Tensor::from_rows(&batch.iter().map(|&i| x0_rows[i].clone()).collect::<Vec<_>>())?;
    let x0_var = tape.constant(x0.clone());
    let step = dp_loss_tape(tape, &model.denoiser, &model.schedule, &x0, cond, rng);
    let pc = prior_clip_loss_tape(tape, step.x0_hat, x0_var, cfg.lambda_prior, tau, bidir);

    let parts = [kl, Some(cos), Some(mse), Some(sc), Some(step.loss), Some(pc)];
    let weights = [w.kl, w.cos, w.mse, w.softclip, w.dp, w.prior_clip];
    let mut total: Option<Var> = None;
    for (p, wt) in parts.iter().zip(weights) {
        if let Some(p) = p {
            let term = tape.scale(*p, wt);
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term),
            });
        }
    }
    Ok(BatchVars { parts, total: total.expect("alignment terms always present") })
}

/// Observer called after every epoch with the current parameters.
pub type EpochHook<'a> = dyn FnMut(usize, &Model, &ParamStore) + 'a;

/// Fits the preprocessing chain on the training split and trains a fresh model.
pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome> {
    train_with_hook(cfg, ds, &mut |_, _, _| {})
}

pub fn train_with_hook(cfg: &TrainConfig, ds: &Dataset, hook: &mut EpochHook<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pre = Preprocessor::fit_with_len(ds, cfg.feature_len)?;
    let set = TrainingSet::from_split(ds, &pre, Split::Train)?;
    if set.is_empty() {
        return Err(FpedError::Argument("training split is empty".into()));
    }
    let (model, mut store) = Model::new(cfg, ds.config.embed_dim)?;
    log::info!(
        "model: mode {}, {} parameters ({} excluding the prior)",
        cfg.mode,
        store.count(),
        model.encoder_param_count(&store)
    );
    let (history, router_history) = train_model(&model, &mut store, &set, hook)?;
    Ok(TrainOutcome { model, store, preprocessor: pre, history, router_history })
}

/// Optimizes `store` in place on `set`.
pub fn train_model(
    model: &Model,
    store: &mut ParamStore,
    set: &TrainingSet,
    hook: &mut EpochHook<'_>,
) -> Result<(Vec<LossBreakdown>, Vec<RouterDiagnostics>)> {
    let cfg = &model.config;
    let schedule = cfg.kl_schedule();
    let mut root = seeded_rng(cfg.seed);
    let mut shuffle = root.fork(SHUFFLE_STREAM);
    let mut noise = root.fork(NOISE_STREAM);
    let mut opt = Adam::new(store, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    for id in store.ids() {
        let name = store.name(id);
        if name.starts_with("router") {
            opt.set_lr_scale(id, cfg.router_lr_scale);
        } else if name.starts_with("bank.") || name.starts_with("encoder.") {
            opt.set_weight_decay(id, cfg.weight_decay);
        }
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    let n_batches = set.len().div_ceil(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs * n_batches);
    let mut diags = Vec::new();

    for epoch in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let t = epoch as f64 + b as f64 / n_batches as f64;
            let kl_w = kl_weight(t, &schedule);
            let (row, grads) = {
                let mut tape = Tape::with_params(store);
                let vars = batch_loss(&mut tape, model, set, batch, kl_w, &mut noise)?;
                let val = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
                let raw = LossParts {
                    kl: val(vars.parts[0]),
                    cos: val(vars.parts[1]),
                    mse: val(vars.parts[2]),
                    softclip: val(vars.parts[3]),
                    dp: val(vars.parts[4]),
                    prior_clip: val(vars.parts[5]),
                };
                let mut row = match total_loss(&raw, &cfg.weights) {
                    Ok(r) => r,
                    Err(e) => {
                        log::error!("epoch {epoch} batch {b}: {e}; samples {batch:?}");
                        return Err(e);
                    }
                };
                row.epoch = epoch;
                row.batch = b;
                let taped = tape.scalar(vars.total);
                if !taped.is_finite() || taped.abs() > cfg.divergence_limit {
                    log::error!("epoch {epoch} batch {b}: loss {taped} diverged; samples {batch:?}");
                    return Err(FpedError::Divergence(format!(
                        "loss {taped} at epoch {epoch} batch {b} exceeds {}",
                        cfg.divergence_limit
                    )));
                }
                let g = tape.backward(vars.total);
                (row, tape.param_grads(&g, store.len()))
            };
            opt.step(store, &grads);
            history.push(row);
        }
        if !model.routers.is_empty() {
            let w = kl_weight(epoch as f64 + 1.0, &schedule);
            diags.extend(router_diagnostics(model, store, &set.features, epoch, w)?);
        }
        let mean: f64 = history[history.len() - n_batches..].iter().map(|r| r.total).sum::<f64>() / n_batches as f64;
        log::debug!("epoch {epoch}: mean total loss {mean:.6}");
        hook(epoch, model, store);
    }
    Ok((history, diags))
}
