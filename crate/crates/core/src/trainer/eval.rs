use std::path::Path;

use super::checkpoint::{read_checkpoint, write_checkpoint, CheckpointFile, KIND_STAGE1};
use super::config::{AblationMode, TrainConfig};
use super::model::{Modality, Model};
use super::train::{train, TrainOutcome};
use crate::datagen::{Dataset, Preprocessor, Split, Standardizer};
use crate::error::{FpedError, Result};
use crate::numerics::{cosine, ParamStore, Tensor};

/// Embedding-space identification scores.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Identification {
    /// Fraction of (target, distractor) pairs where the target is closer.
    pub two_way: f64,
    /// Fraction of predictions whose nearest candidate is their own target.
    pub top1: f64,
    pub mean_cosine: f64,
}

/// Scores predictions against targets with cosine similarity. Every other
/// target in the set serves as a distractor; exact ties count half.
pub fn identification(pred: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Identification> {
    let n = pred.len();
    if n == 0 || targets.len() != n {
        return Err(FpedError::Argument(format!(
            "need matching nonempty sets, got {n} predictions and {} targets",
            targets.len()
        )));
    }
    let sim = |a: &[f64], b: &[f64]| cosine(a, b).unwrap_or(0.0);
    let (mut wins, mut pairs, mut hits, mut cos_sum) = (0.0, 0usize, 0usize, 0.0);
    for (i, p) in pred.iter().enumerate() {
        if p.len() != targets[i].len() {
            return Err(FpedError::Shape(format!("prediction {i} has length {}", p.len())));
        }
        let row: Vec<f64> = targets.iter().map(|t| sim(p, t)).collect();
        let own = row[i];
        cos_sum += own;
        let mut best = true;
        for (j, &s) in row.iter().enumerate() {
            if j == i {
                continue;
            }
            pairs += 1;
            if own > s {
                wins += 1.0;
            } else if own == s {
                wins += 0.5;
            }
            if s >= own {
                best = false;
            }
        }
        if best {
            hits += 1;
        }
    }
    Ok(Identification {
        two_way: if pairs == 0 { 1.0 } else { wins / pairs as f64 },
        top1: hits as f64 / n as f64,
        mean_cosine: cos_sum / n as f64,
    })
}

/// Scores for both heads on one split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub split: Split,
    pub samples: usize,
    pub text: Identification,
    pub image: Identification,
}

impl EvalMetrics {
    pub const CSV_HEADER: &'static str =
        "split,samples,text_two_way,text_top1,text_cos,image_two_way,image_top1,image_cos";

    pub fn csv_row(&self) -> String {
        let (t, i) = (&self.text, &self.image);
        format!(
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.split.as_str(),
            self.samples,
            t.two_way,
            t.top1,
            t.mean_cosine,
            i.two_way,
            i.top1,
            i.mean_cosine
        )
    }

    pub fn head(&self, m: Modality) -> &Identification {
        match m {
            Modality::Text => &self.text,
            Modality::Image => &self.image,
        }
    }
}

/// A trained stage-1 model together with its preprocessing chain.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model,
    pub store: ParamStore,
    pub preprocessor: Preprocessor,
}

impl From<TrainOutcome> for TrainedModel {
    fn from(o: TrainOutcome) -> Self {
        Self { model: o.model, store: o.store, preprocessor: o.preprocessor }
    }
}

impl TrainedModel {
    /// Head outputs for every sample of `split`.
    pub fn predict_split(&self, ds: &Dataset, split: Split) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        self.check_dataset(ds)?;
        let feats = self.preprocessor.transform_split(ds, split)?;
        let mut bt = Vec::with_capacity(feats.len());
        let mut bi = Vec::with_capacity(feats.len());
        for f in &feats {
            let (t, i) = self.model.predict(&self.store, f)?;
            bt.push(t);
            bi.push(i);
        }
        Ok((bt, bi))
    }

    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.config.embed_dim != self.model.embed_dim {
            return Err(FpedError::Checkpoint(format!(
                "model predicts {}-d embeddings but the dataset has {}-d targets",
                self.model.embed_dim, ds.config.embed_dim
            )));
        }
        if ds.config.top_k != self.preprocessor.top_k {
            return Err(FpedError::Checkpoint(format!(
                "model was fitted with top_k {} but the dataset uses {}",
                self.preprocessor.top_k, ds.config.top_k
            )));
        }
        Ok(())
    }

    pub fn evaluate(&self, ds: &Dataset, split: Split) -> Result<EvalMetrics> {
        if ds.split_len(split) == 0 {
            return Err(FpedError::Argument(format!("split {} is empty", split.as_str())));
        }
        let (bt, bi) = self.predict_split(ds, split)?;
        let ct: Vec<Vec<f64>> = ds.split(split).map(|s| s.c_text.clone()).collect();
        let ci: Vec<Vec<f64>> = ds.split(split).map(|s| s.c_img.clone()).collect();
        Ok(EvalMetrics {
            split,
            samples: bt.len(),
            text: identification(&bt, &ct)?,
            image: identification(&bi, &ci)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let p = &self.preprocessor;
        let mut blocks = vec![
            (
                "preprocess.meta".to_string(),
                Tensor::row(vec![p.lambda, p.top_k as f64, p.feature_len as f64, self.model.embed_dim as f64]),
            ),
            ("preprocess.mean".to_string(), Tensor::row(p.standardizer.mean.clone())),
            ("preprocess.std".to_string(), Tensor::row(p.standardizer.std.clone())),
        ];
        blocks.extend(self.store.iter().map(|(n, t)| (n.to_string(), t.clone())));
        write_checkpoint(path, &CheckpointFile { kind: KIND_STAGE1, config: self.model.config.serialize(), blocks })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = read_checkpoint(path)?;
        if file.kind != KIND_STAGE1 {
            return Err(FpedError::Checkpoint("not a stage-1 checkpoint".into()));
        }
        let cfg = TrainConfig::parse(&file.config)
            .map_err(|e| FpedError::Checkpoint(format!("stored config is invalid: {e}")))?;
        let missing = |n: &str| FpedError::Checkpoint(format!("missing block {n}"));
        let meta = file.block("preprocess.meta").ok_or_else(|| missing("preprocess.meta"))?.data();
        if meta.len() != 4 {
            return Err(FpedError::Checkpoint("preprocess.meta must hold 4 values".into()));
        }
        let (top_k, feature_len, embed_dim) = (meta[1] as usize, meta[2] as usize, meta[3] as usize);
        if feature_len != cfg.feature_len {
            return Err(FpedError::Checkpoint(format!(
                "stored feature length {feature_len} disagrees with config {}",
                cfg.feature_len
            )));
        }
        let mean = file.block("preprocess.mean").ok_or_else(|| missing("preprocess.mean"))?.data().to_vec();
        let std = file.block("preprocess.std").ok_or_else(|| missing("preprocess.std"))?.data().to_vec();
        if mean.len() != feature_len || std.len() != feature_len {
            return Err(FpedError::Checkpoint("standardizer length disagrees with feature length".into()));
        }
        let (model, mut store) = Model::new(&cfg, embed_dim)?;
        let stored = file.params("preprocess.");
        store
            .load_from(&stored)
            .map_err(|e| FpedError::Checkpoint(format!("parameters do not match the stored config: {e}")))?;
        if stored.len() != store.len() {
            return Err(FpedError::Checkpoint(format!(
                "checkpoint holds {} tensors, config expects {}",
                stored.len(),
                store.len()
            )));
        }
        let preprocessor = Preprocessor { lambda: meta[0], top_k, feature_len, standardizer: Standardizer { mean, std } };
        Ok(Self { model, store, preprocessor })
    }
}

/// One ablation row.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub params: usize,
    pub final_loss: f64,
    pub metrics: EvalMetrics,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str =
        "mode,params,final_loss,split,samples,text_two_way,text_top1,text_cos,image_two_way,image_top1,image_cos";

    pub fn csv_row(&self) -> String {
        format!("{},{},{:.17e},{}", self.mode, self.params, self.final_loss, self.metrics.csv_row())
    }
}

/// Trains and evaluates every mode with the same seed and budget.
pub fn ablate(base: &TrainConfig, modes: &[AblationMode], ds: &Dataset, split: Split) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut cfg = base.clone();
        cfg.mode = mode;
        log::info!("ablation: training mode {mode}");
        let out = train(&cfg, ds)?;
        let final_loss = out.history.last().map_or(f64::NAN, |r| r.total);
        let trained = TrainedModel::from(out);
        let metrics = trained.evaluate(ds, split)?;
        rows.push(AblationRow {
            mode,
            params: trained.model.encoder_param_count(&trained.store),
            final_loss,
            metrics,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    #[test]
    fn perfect_predictions_score_one() {
        let mut rng = seeded_rng(0);
        let t: Vec<Vec<f64>> = (0..10).map(|_| rng.normal_vec(8)).collect();
        let m = identification(&t, &t).unwrap();
        assert_eq!(m.two_way, 1.0);
        assert_eq!(m.top1, 1.0);
        assert!((m.mean_cosine - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_predictions_are_near_chance() {
        let mut rng = seeded_rng(1);
        let mut total = 0.0;
        let trials = 1000;
        for _ in 0..trials {
            let p: Vec<Vec<f64>> = (0..100).map(|_| rng.normal_vec(16)).collect();
            let t: Vec<Vec<f64>> = (0..100).map(|_| rng.normal_vec(16)).collect();
            let m = identification(&p, &t).unwrap();
            assert!((m.two_way - 0.5).abs() < 0.04 * 3.0);
            total += m.two_way;
        }
        assert!((total / trials as f64 - 0.5).abs() < 0.04);
    }

    #[test]
    fn brute_force_two_way() {
        let mut rng = seeded_rng(2);
        let p: Vec<Vec<f64>> = (0..6).map(|_| rng.normal_vec(4)).collect();
        let t: Vec<Vec<f64>> = (0..6).map(|_| rng.normal_vec(4)).collect();
        let c = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let mut w = 0;
        for i in 0..6 {
            for j in 0..6 {
                if i != j && c(&p[i], &t[i]) > c(&p[i], &t[j]) {
                    w += 1;
                }
            }
        }
        let m = identification(&p, &t).unwrap();
        assert!((m.two_way - w as f64 / 30.0).abs() < 1e-15);
    }

    #[test]
    fn mismatched_sets_error() {
        assert!(identification(&[], &[]).is_err());
        assert!(identification(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
    }
}
