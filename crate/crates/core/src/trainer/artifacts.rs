use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::checkpoint::{read_checkpoint, write_checkpoint, CheckpointFile, KIND_STAGE2};
use super::eval::{AblationRow, EvalMetrics, TrainedModel};
use super::model::Modality;
use super::train::{RouterDiagnostics, TrainOutcome};
use crate::datagen::{Dataset, Split};
use crate::error::{FpedError, Result};
use crate::losses::LossBreakdown;
use crate::numerics::{ParamStore, Tape};
use crate::stroute::{render_target, StageTwoConfig, StageTwoPair, ToyGenerator};

pub const LOSS_CSV: &str = "loss.csv";
pub const ROUTER_CSV: &str = "router.csv";
pub const MODEL_CKPT: &str = "model.ckpt";

fn write_lines(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_loss_csv(path: &Path, rows: &[LossBreakdown]) -> Result<()> {
    write_lines(path, LossBreakdown::CSV_HEADER, rows.iter().map(LossBreakdown::csv_row))
}

pub fn write_router_csv(path: &Path, rows: &[RouterDiagnostics]) -> Result<()> {
    write_lines(path, &RouterDiagnostics::csv_header(), rows.iter().map(RouterDiagnostics::csv_row))
}

pub fn write_metrics_csv(path: &Path, rows: &[EvalMetrics]) -> Result<()> {
    write_lines(path, EvalMetrics::CSV_HEADER, rows.iter().map(EvalMetrics::csv_row))
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    write_lines(path, AblationRow::CSV_HEADER, rows.iter().map(AblationRow::csv_row))
}

/// Writes `loss.csv`, `router.csv` and `model.ckpt` into `dir`.
pub fn save_run(outcome: &TrainOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let (loss, router, ckpt) = (dir.join(LOSS_CSV), dir.join(ROUTER_CSV), dir.join(MODEL_CKPT));
    write_loss_csv(&loss, &outcome.history)?;
    write_router_csv(&router, &outcome.router_history)?;
    let trained = TrainedModel {
        model: outcome.model.clone(),
        store: outcome.store.clone(),
        preprocessor: outcome.preprocessor.clone(),
    };
    trained.save(&ckpt)?;
    Ok(vec![loss, router, ckpt])
}

/// Stage-2 pairs from the image pass of a trained stage-1 model: coarse
/// tokens after layer-1 fusion, fine tokens after layer 2, and the rendered
/// target image.
pub fn stage2_pairs(trained: &TrainedModel, ds: &Dataset, split: Split) -> Result<Vec<StageTwoPair>> {
    trained.check_dataset(ds)?;
    ds.split(split)
        .map(|s| {
            let fv = trained.preprocessor.transform(ds, s)?;
            let (coarse, fine) = brain_tokens(trained, &fv)?;
            Ok(StageTwoPair { coarse, fine, image: render_target(&s.patches, &s.c_img, ds.config.patch_grid) })
        })
        .collect()
}

pub fn brain_tokens(
    trained: &TrainedModel,
    fv: &crate::datagen::FeatureVector,
) -> Result<(crate::numerics::Tensor, crate::numerics::Tensor)> {
    let mut tape = Tape::with_params(&trained.store);
    let out = trained.model.forward(&mut tape, fv)?;
    let pass = out.pass(Modality::Image);
    Ok((tape.value(pass.coarse).clone(), tape.value(pass.fine).clone()))
}

fn stage2_config_text(c: &StageTwoConfig) -> String {
    format!(
        "brain_width = {}\nembed = {}\nattn = {}\nhidden = {}\ntemb_dim = {}\nsteps = {}\nbeta_start = {:?}\nbeta_end = {:?}\ngate_bias = {:?}\n",
        c.brain_width, c.embed, c.attn, c.hidden, c.temb_dim, c.steps, c.beta_start, c.beta_end, c.gate_bias
    )
}

fn parse_stage2_config(text: &str) -> Result<StageTwoConfig> {
    let mut c = StageTwoConfig::default();
    let bad = |k: &str, v: &str| FpedError::Checkpoint(format!("bad stage-2 value {v:?} for {k}"));
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| FpedError::Checkpoint(format!("bad stage-2 config line {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        let u = || v.parse::<usize>().map_err(|_| bad(k, v));
        let f = || v.parse::<f64>().map_err(|_| bad(k, v));
        match k {
            "brain_width" => c.brain_width = u()?,
            "embed" => c.embed = u()?,
            "attn" => c.attn = u()?,
            "hidden" => c.hidden = u()?,
            "temb_dim" => c.temb_dim = u()?,
            "steps" => c.steps = u()?,
            "beta_start" => c.beta_start = f()?,
            "beta_end" => c.beta_end = f()?,
            "gate_bias" => c.gate_bias = f()?,
            _ => return Err(FpedError::Checkpoint(format!("unknown stage-2 key {k}"))),
        }
    }
    Ok(c)
}

pub const STAGE2_PREFIX: &str = "s2";

pub fn save_stage2(path: &Path, gen: &ToyGenerator, store: &ParamStore) -> Result<()> {
    let blocks = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    write_checkpoint(path, &CheckpointFile { kind: KIND_STAGE2, config: stage2_config_text(&gen.config), blocks })
}

pub fn load_stage2(path: &Path) -> Result<(ToyGenerator, ParamStore)> {
    let file = read_checkpoint(path)?;
    if file.kind != KIND_STAGE2 {
        return Err(FpedError::Checkpoint("not a stage-2 checkpoint".into()));
    }
    let cfg = parse_stage2_config(&file.config)?;
    let mut store = ParamStore::new();
    let gen = ToyGenerator::new(&mut store, STAGE2_PREFIX, &cfg, &mut crate::numerics::seeded_rng(0));
    let stored = file.params("\u{0}");
    store.load_from(&stored)?;
    if stored.len() != store.len() {
        return Err(FpedError::Checkpoint("stage-2 checkpoint has extra tensors".into()));
    }
    Ok((gen, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    #[test]
    fn stage2_checkpoint_round_trip() {
        let cfg = StageTwoConfig { hidden: 8, attn: 8, embed: 8, gate_bias: 1.5, ..Default::default() };
        let mut store = ParamStore::new();
        let gen = ToyGenerator::new(&mut store, STAGE2_PREFIX, &cfg, &mut seeded_rng(4));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s2.ckpt");
        save_stage2(&p, &gen, &store).unwrap();
        let (g2, s2) = load_stage2(&p).unwrap();
        assert_eq!(g2.config, cfg);
        assert_eq!(s2.flatten(), store.flatten());
    }
}
