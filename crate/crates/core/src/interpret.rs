//! Expert/patch similarity heatmaps and per-network routing contributions.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::datagen::{Dataset, Split};
use crate::error::{FpedError, Result};
use crate::numerics::{dot, norm, Tape};
use crate::router::RoutingState;
use crate::stroute::write_pgm;
use crate::trainer::{Modality, TrainedModel};
use crate::NUM_NETWORKS;

/// Cosine grid of one expert feature against every patch.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityGrid {
    pub side: usize,
    /// Row-major `side x side`.
    pub values: Vec<f64>,
    /// Cells whose patch (or the expert feature) had zero norm; set to 0.
    pub degenerate: Vec<usize>,
}

/// Cosine of `feature` with each `dim`-long patch of a square grid.
pub fn expert_patch_similarity(feature: &[f64], patches: &[f64], dim: usize) -> Result<SimilarityGrid> {
    if feature.len() != dim || dim == 0 || !patches.len().is_multiple_of(dim) {
        return Err(FpedError::Shape(format!(
            "feature length {} and {} patch values do not fit dimension {dim}",
            feature.len(),
            patches.len()
        )));
    }
    let n = patches.len() / dim;
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(FpedError::Shape(format!("{n} patches do not form a square grid")));
    }
    let fnorm = norm(feature);
    let mut values = Vec::with_capacity(n);
    let mut degenerate = Vec::new();
    for p in 0..n {
        let patch = &patches[p * dim..(p + 1) * dim];
        let pn = norm(patch);
        if pn == 0.0 || fnorm == 0.0 {
            values.push(0.0);
            degenerate.push(p);
        } else {
            values.push((dot(feature, patch) / (fnorm * pn)).clamp(-1.0, 1.0));
        }
    }
    if !degenerate.is_empty() {
        log::warn!("{} zero-norm cells set to 0", degenerate.len());
    }
    Ok(SimilarityGrid { side, values, degenerate })
}

/// How routing mass is counted per expert.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ContributionStat {
    /// Sum of the routing weights at selected positions.
    #[default]
    Weight,
    /// Number of selected positions.
    Count,
}

/// Normalised per-network routing mass over a batch of routing states.
pub fn routing_contribution(states: &[RoutingState], stat: ContributionStat) -> Result<[f64; NUM_NETWORKS]> {
    if states.is_empty() {
        return Err(FpedError::Argument("no routing states".into()));
    }
    let mut mass = [0.0; NUM_NETWORKS];
    for st in states {
        if st.experts.len() != NUM_NETWORKS {
            return Err(FpedError::Shape(format!("{} experts in routing state", st.experts.len())));
        }
        for (k, e) in st.experts.iter().enumerate() {
            mass[k] += match stat {
                ContributionStat::Weight => e.selected.iter().map(|&i| e.weights[i]).sum::<f64>(),
                ContributionStat::Count => e.selected.len() as f64,
            };
        }
    }
    let z: f64 = mass.iter().sum();
    if !(z > 0.0) {
        return Err(FpedError::Numeric("all routing weights are zero".into()));
    }
    Ok(mass.map(|m| m / z))
}

/// Writes `grid` as CSV (one row per grid row) and as an 8-bit PGM mapping
/// `[-1, 1]` linearly onto `[0, 255]`.
pub fn export_heatmap(grid: &SimilarityGrid, csv_path: &Path, pgm_path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(csv_path)?);
    for row in grid.values.chunks(grid.side) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    let pixels: Vec<f64> = grid.values.iter().map(|v| (v + 1.0) / 2.0).collect();
    write_pgm(pgm_path, &pixels, grid.side, grid.side)
}

/// Reads a heatmap CSV written by [`export_heatmap`].
pub fn read_heatmap_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|e| FpedError::Format(format!("bad cell {c:?}: {e}"))))
                .collect()
        })
        .collect()
}

/// Heatmaps of one sample plus routing contributions over a split.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapReport {
    pub sample_id: u32,
    /// One grid per layer-1 expert, in network order.
    pub grids: Vec<SimilarityGrid>,
    pub contributions: Vec<(Modality, [f64; NUM_NETWORKS])>,
}

/// Routing states of the router serving `m`, one per sample of `split`.
pub fn routing_states(trained: &TrainedModel, ds: &Dataset, split: Split, m: Modality) -> Result<Vec<RoutingState>> {
    let model = &trained.model;
    let router = model
        .router_for(m)
        .ok_or_else(|| FpedError::Argument(format!("mode {} has no router", model.config.mode)))?;
    trained
        .preprocessor
        .transform_split(ds, split)?
        .iter()
        .map(|f| {
            let fv = model.model_input(f);
            router.route(&trained.store, &fv.x, &fv.labels, model.capacity)
        })
        .collect()
}

/// Contribution vector for each modality over `split`.
pub fn contributions(
    trained: &TrainedModel,
    ds: &Dataset,
    split: Split,
    stat: ContributionStat,
) -> Result<Vec<(Modality, [f64; NUM_NETWORKS])>> {
    Modality::BOTH
        .iter()
        .map(|&m| Ok((m, routing_contribution(&routing_states(trained, ds, split, m)?, stat)?)))
        .collect()
}

/// Layer-1 expert features of one sample projected into the embedding
/// space: mean over tokens, then the image head weights.
pub fn expert_features(trained: &TrainedModel, ds: &Dataset, sample_id: u32) -> Result<Vec<Vec<f64>>> {
    trained.check_dataset(ds)?;
    let sample = ds
        .sample(sample_id)
        .ok_or_else(|| FpedError::Argument(format!("no sample with id {sample_id}")))?;
    let bank = trained.model.bank.as_ref().ok_or_else(|| {
        FpedError::Argument(format!("mode {} has no expert bank", trained.model.config.mode))
    })?;
    let fv = trained.preprocessor.transform(ds, sample)?;
    let mut tape = Tape::with_params(&trained.store);
    let out = trained.model.forward(&mut tape, &fv)?;
    let experts = out.pass(Modality::Image).experts.clone();
    let w = tape.param(bank.heads.img_w);
    experts
        .into_iter()
        .map(|f| {
            let m = tape.mean_rows(f);
            let p = tape.matmul(m, w);
            Ok(tape.value(p).data().to_vec())
        })
        .collect()
}

pub fn heatmap_report(
    trained: &TrainedModel,
    ds: &Dataset,
    sample_id: u32,
    split: Split,
    stat: ContributionStat,
) -> Result<HeatmapReport> {
    let feats = expert_features(trained, ds, sample_id)?;
    let sample = ds.sample(sample_id).expect("checked by expert_features");
    let grids = feats
        .iter()
        .map(|f| expert_patch_similarity(f, &sample.patches, ds.config.embed_dim))
        .collect::<Result<_>>()?;
    let contributions = contributions(trained, ds, split, stat)?;
    Ok(HeatmapReport { sample_id, grids, contributions })
}

/// Writes `expert_<k>_heatmap.{csv,pgm}` and `routing_contrib_<modality>.csv`.
pub fn write_report(report: &HeatmapReport, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (k, g) in report.grids.iter().enumerate() {
        let csv = dir.join(format!("expert_{k}_heatmap.csv"));
        let pgm = dir.join(format!("expert_{k}_heatmap.pgm"));
        export_heatmap(g, &csv, &pgm)?;
        written.push(csv);
        written.push(pgm);
    }
    for (m, c) in &report.contributions {
        let path = dir.join(format!("routing_contrib_{}.csv", m.as_str()));
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "network,contribution")?;
        for (name, v) in crate::NETWORK_NAMES.iter().zip(c) {
            writeln!(w, "{name},{v:.17e}")?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_rng, Tensor};
    use crate::router::ExpertDispatch;

    fn state(weights: [f64; NUM_NETWORKS]) -> RoutingState {
        let experts = weights
            .iter()
            .map(|&w| ExpertDispatch { mask: vec![true], weights: vec![w], routed: vec![w], selected: vec![0] })
            .collect();
        let t = Tensor::zeros(&[1, NUM_NETWORKS]);
        RoutingState { logits: t.clone(), p_raw: t.clone(), prior: t, experts, capacity: 1 }
    }

    #[test]
    fn similarity_examples() {
        let mut rng = seeded_rng(0);
        let patches = rng.normal_vec(9 * 4);
        let g = expert_patch_similarity(&patches[8..12], &patches, 4).unwrap();
        assert_eq!(g.side, 3);
        assert!((g.values[2] - 1.0).abs() < 1e-12);
        for (p, v) in g.values.iter().enumerate() {
            let q = &patches[p * 4..p * 4 + 4];
            let f = &patches[8..12];
            let d: f64 = f.iter().zip(q).map(|(a, b)| a * b).sum();
            let n = f.iter().map(|a| a * a).sum::<f64>().sqrt() * q.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((v - d / n).abs() < 1e-12);
        }
        let ortho = [0.0, 0.0, 0.0, 1.0];
        let flat: Vec<f64> = (0..4).flat_map(|i| [1.0 + i as f64, -2.0, 0.5, 0.0]).collect();
        let g = expert_patch_similarity(&ortho, &flat, 4).unwrap();
        assert!(g.values.iter().all(|v| *v == 0.0) && g.degenerate.is_empty());
    }

    #[test]
    fn zero_patch_is_flagged() {
        let g = expert_patch_similarity(&[1.0, 0.0], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(g.degenerate, vec![1]);
        assert_eq!(g.values[1], 0.0);
    }

    #[test]
    fn contribution_examples() {
        let mut w = [0.0; NUM_NETWORKS];
        w[3] = 2.5;
        let c = routing_contribution(&[state(w)], ContributionStat::Weight).unwrap();
        assert_eq!(c, [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let c = routing_contribution(&[state([0.3; NUM_NETWORKS])], ContributionStat::Weight).unwrap();
        assert!(c.iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-15));
        assert!(routing_contribution(&[state([0.0; NUM_NETWORKS])], ContributionStat::Weight).is_err());
        let c = routing_contribution(&[state(w)], ContributionStat::Count).unwrap();
        assert!(c.iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn pgm_extremes_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (csv, pgm) = (dir.path().join("h.csv"), dir.path().join("h.pgm"));
        for (v, byte) in [(1.0, 255u8), (-1.0, 0u8)] {
            let g = SimilarityGrid { side: 2, values: vec![v; 4], degenerate: vec![] };
            export_heatmap(&g, &csv, &pgm).unwrap();
            let bytes = fs::read(&pgm).unwrap();
            assert!(bytes[bytes.len() - 4..].iter().all(|&b| b == byte));
        }
        let mut rng = seeded_rng(3);
        let values: Vec<f64> = (0..16).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let g = SimilarityGrid { side: 4, values: values.clone(), degenerate: vec![] };
        export_heatmap(&g, &csv, &pgm).unwrap();
        let back: Vec<f64> = read_heatmap_csv(&csv).unwrap().concat();
        for (a, b) in back.iter().zip(&values) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
