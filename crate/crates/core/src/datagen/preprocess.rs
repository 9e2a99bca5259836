use std::cmp::Ordering;

use super::{Dataset, ParcellationMap, RawSample, Split};
use crate::error::{FpedError, Result};
use crate::{FEATURE_LEN, NUM_NETWORKS};

/// Candidate ridge penalties searched on the training split.
pub const RIDGE_LAMBDA_GRID: [f64; 3] = [0.1, 1.0, 10.0];

/// Network-labelled feature vector fed to the router.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub x: Vec<f64>,
    /// 0-based network label of every position.
    pub labels: Vec<u8>,
    pub sample_id: u32,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Copy with every position outside network `keep` set to zero.
    pub fn restricted_to(&self, keep: u8) -> FeatureVector {
        let x = self
            .x
            .iter()
            .zip(&self.labels)
            .map(|(&v, &l)| if l == keep { v } else { 0.0 })
            .collect();
        FeatureVector { x, labels: self.labels.clone(), sample_id: self.sample_id }
    }
}

/// Positions of the `k` largest magnitudes; ties go to the lower index.
pub fn topk_mask(v: &[f64], k: usize) -> Result<Vec<bool>> {
    if k == 0 || k > v.len() {
        return Err(FpedError::Argument(format!("k = {k} outside 1..={}", v.len())));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    let by_magnitude = |&a: &usize, &b: &usize| -> Ordering {
        v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b))
    };
    if k < v.len() {
        idx.select_nth_unstable_by(k - 1, by_magnitude);
    }
    let mut mask = vec![false; v.len()];
    for &i in &idx[..k] {
        mask[i] = true;
    }
    Ok(mask)
}

/// Ridge fit of the repetitions on an all-ones design: `R / (R + lambda) * mean`.
pub fn ridge_denoise(repetitions: &[f64], lambda: f64) -> Result<f64> {
    if repetitions.is_empty() {
        return Err(FpedError::Argument("no repetitions to denoise".into()));
    }
    if !(lambda >= 0.0) {
        return Err(FpedError::Argument(format!("lambda must be >= 0, got {lambda}")));
    }
    let r = repetitions.len() as f64;
    let mean = repetitions.iter().sum::<f64>() / r;
    if lambda.is_infinite() {
        return Ok(0.0);
    }
    Ok(r / (r + lambda) * mean)
}

/// Picks the grid penalty with the lowest two-fold cross-repetition residual
/// over the given (training) samples. Even-indexed repetitions form one fold
/// and odd-indexed the other; each fold's shrunken mean predicts the other
/// fold's plain mean. With a single repetition there is nothing to hold out
/// and the smallest penalty is returned.
pub fn fit_ridge_lambda<'a>(
    train: impl IntoIterator<Item = &'a RawSample>,
    v_total: usize,
    repetitions: usize,
) -> f64 {
    if repetitions < 2 {
        return RIDGE_LAMBDA_GRID[0];
    }
    let even: Vec<usize> = (0..repetitions).step_by(2).collect();
    let odd: Vec<usize> = (1..repetitions).step_by(2).collect();
    let mut residual = [0.0f64; RIDGE_LAMBDA_GRID.len()];
    for s in train {
        for v in 0..v_total {
            let fold_mean = |reps: &[usize]| {
                reps.iter().map(|&r| s.voxels[r * v_total + v]).sum::<f64>() / reps.len() as f64
            };
            let (me, mo) = (fold_mean(&even), fold_mean(&odd));
            let (ne, no) = (even.len() as f64, odd.len() as f64);
            for (res, &lam) in residual.iter_mut().zip(&RIDGE_LAMBDA_GRID) {
                let pe = ne / (ne + lam) * me;
                let po = no / (no + lam) * mo;
                *res += (pe - mo).powi(2) + (po - me).powi(2);
            }
        }
    }
    let best = residual
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    RIDGE_LAMBDA_GRID[best]
}

/// Largest-remainder apportionment of `total` positions to networks in
/// proportion to `counts`; remainder ties go to the lower network index.
pub fn segment_lengths(counts: &[usize; NUM_NETWORKS], total: usize) -> Result<[usize; NUM_NETWORKS]> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(FpedError::Argument("empty mask".into()));
    }
    let mut lens = [0usize; NUM_NETWORKS];
    let mut rems = [0u128; NUM_NETWORKS];
    for k in 0..NUM_NETWORKS {
        let q = total as u128 * counts[k] as u128;
        lens[k] = (q / n as u128) as usize;
        rems[k] = q % n as u128;
    }
    let assigned: usize = lens.iter().sum();
    let mut order: Vec<usize> = (0..NUM_NETWORKS).collect();
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    for &k in order.iter().take(total - assigned) {
        lens[k] += 1;
    }
    Ok(lens)
}

/// Average-pools `values` into `len` equal-width bins. Bin edges fall at
/// multiples of `values.len() / len`, so partial voxels contribute by overlap;
/// this covers both shrinking and stretching.
fn pool_bins(values: &[f64], len: usize) -> Vec<f64> {
    let n = values.len();
    let (n128, s128) = (n as u128, len as u128);
    (0..len)
        .map(|t| {
            // Work in units of 1/len voxel so every overlap is an integer.
            let lo = t as u128 * n128;
            let hi = (t as u128 + 1) * n128;
            let first = (lo / s128) as usize;
            let last = hi.div_ceil(s128) as usize;
            let mut acc = 0.0;
            for (v, &value) in values.iter().enumerate().take(last.min(n)).skip(first) {
                let a = lo.max(v as u128 * s128);
                let b = hi.min((v as u128 + 1) * s128);
                if b > a {
                    acc += (b - a) as f64 * value;
                }
            }
            acc / n as f64
        })
        .collect()
}

/// Concatenates per-network masked voxels into a `len`-long labelled vector.
pub fn assemble_feature_vector(
    denoised: &[f64],
    mask: &[bool],
    parcellation: &ParcellationMap,
    len: usize,
    sample_id: u32,
) -> Result<FeatureVector> {
    if denoised.len() != parcellation.len() || mask.len() != parcellation.len() {
        return Err(FpedError::Shape(format!(
            "voxels {}, mask {}, parcellation {}",
            denoised.len(),
            mask.len(),
            parcellation.len()
        )));
    }
    let mut per_net: [Vec<f64>; NUM_NETWORKS] = Default::default();
    for ((&v, &m), &l) in denoised.iter().zip(mask).zip(parcellation.labels()) {
        if m {
            per_net[l as usize].push(v);
        }
    }
    let counts: [usize; NUM_NETWORKS] = std::array::from_fn(|k| per_net[k].len());
    let lens = segment_lengths(&counts, len)?;
    let mut x = Vec::with_capacity(len);
    let mut labels = Vec::with_capacity(len);
    for k in 0..NUM_NETWORKS {
        if lens[k] == 0 {
            continue;
        }
        x.extend(pool_bins(&per_net[k], lens[k]));
        labels.extend(std::iter::repeat_n(k as u8, lens[k]));
    }
    debug_assert_eq!(x.len(), len);
    Ok(FeatureVector { x, labels, sample_id })
}

/// Per-position z-scoring with statistics from the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &[FeatureVector]) -> Result<Self> {
        let Some(first) = features.first() else {
            return Err(FpedError::Argument("no features to fit".into()));
        };
        let len = first.len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; len];
        for f in features {
            mean.iter_mut().zip(&f.x).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; len];
        for f in features {
            for i in 0..len {
                var[i] += (f.x[i] - mean[i]).powi(2) / n;
            }
        }
        let std = var.into_iter().map(|v| if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, f: &mut FeatureVector) {
        for i in 0..f.x.len() {
            f.x[i] = (f.x[i] - self.mean[i]) / self.std[i];
        }
    }
}

/// Train-fitted preprocessing chain: ridge denoise, top-k, assemble, standardize.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessor {
    pub lambda: f64,
    pub top_k: usize,
    pub feature_len: usize,
    pub standardizer: Standardizer,
}

impl Preprocessor {
    /// Fits the ridge penalty and standardizer on the training split only.
    pub fn fit(ds: &Dataset) -> Result<Self> {
        Self::fit_with_len(ds, FEATURE_LEN)
    }

    pub fn fit_with_len(ds: &Dataset, feature_len: usize) -> Result<Self> {
        let cfg = &ds.config;
        let lambda = fit_ridge_lambda(ds.split(Split::Train), cfg.v_total, cfg.repetitions);
        let raw: Vec<FeatureVector> = ds
            .split(Split::Train)
            .map(|s| raw_features(ds, s, lambda, cfg.top_k, feature_len))
            .collect::<Result<_>>()?;
        let standardizer = Standardizer::fit(&raw)?;
        Ok(Self { lambda, top_k: cfg.top_k, feature_len, standardizer })
    }

    pub fn transform(&self, ds: &Dataset, s: &RawSample) -> Result<FeatureVector> {
        let mut f = raw_features(ds, s, self.lambda, self.top_k, self.feature_len)?;
        self.standardizer.apply(&mut f);
        Ok(f)
    }

    pub fn transform_split(&self, ds: &Dataset, split: Split) -> Result<Vec<FeatureVector>> {
        ds.split(split).map(|s| self.transform(ds, s)).collect()
    }
}

/// Denoised voxel values of one sample.
pub fn denoise_sample(ds: &Dataset, s: &RawSample, lambda: f64) -> Result<Vec<f64>> {
    let v_total = ds.config.v_total;
    let r = ds.config.repetitions;
    let mut reps = vec![0.0; r];
    (0..v_total)
        .map(|v| {
            for (k, slot) in reps.iter_mut().enumerate() {
                *slot = s.voxels[k * v_total + v];
            }
            ridge_denoise(&reps, lambda)
        })
        .collect()
}

fn raw_features(
    ds: &Dataset,
    s: &RawSample,
    lambda: f64,
    top_k: usize,
    len: usize,
) -> Result<FeatureVector> {
    let den = denoise_sample(ds, s, lambda)?;
    let mask = topk_mask(&den, top_k)?;
    assemble_feature_vector(&den, &mask, &ds.parcellation, len, s.id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_topk(v: &[f64], k: usize) -> Vec<bool> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[b].abs().partial_cmp(&v[a].abs()).unwrap().then(a.cmp(&b)));
        let mut m = vec![false; v.len()];
        for &i in &idx[..k] {
            m[i] = true;
        }
        m
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_mask(&[3.0, -5.0, 1.0, 2.0], 2).unwrap(), vec![true, true, false, false]);
        assert_eq!(topk_mask(&[2.0, 2.0, 1.0], 1).unwrap(), vec![true, false, false]);
        assert!(topk_mask(&[1.0, 2.0], 2).unwrap().iter().all(|&b| b));
        assert!(topk_mask(&[1.0], 0).is_err());
        assert!(topk_mask(&[1.0], 2).is_err());
    }

    #[test]
    fn ridge_examples() {
        assert_eq!(ridge_denoise(&[1.0, 3.0], 0.0).unwrap(), 2.0);
        assert_eq!(ridge_denoise(&[1.0, 3.0], 2.0).unwrap(), 1.0);
        assert_eq!(ridge_denoise(&[1.0, 3.0], f64::INFINITY).unwrap(), 0.0);
        assert!(ridge_denoise(&[1.0, 3.0], 1e12).unwrap() < 1e-11);
        assert!(ridge_denoise(&[], 1.0).is_err());
    }

    #[test]
    fn equal_counts_split_4096() {
        let lens = segment_lengths(&[100; 7], 4096).unwrap();
        assert_eq!(lens, [586, 585, 585, 585, 585, 585, 585]);
        // Independent oracle: floor plus one extra for the largest remainders.
        let q: f64 = 4096.0 / 7.0;
        assert_eq!(lens.iter().filter(|&&l| l as f64 == q.floor()).count(), 6);
    }

    #[test]
    fn single_network_owns_everything() {
        let lens = segment_lengths(&[0, 0, 0, 0, 9, 0, 0], 4096).unwrap();
        assert_eq!(lens[4], 4096);
    }

    #[test]
    fn doubling_counts_keeps_lengths() {
        let c = [13, 200, 7, 55, 90, 1, 321];
        let d = c.map(|v| v * 2);
        assert_eq!(segment_lengths(&c, 4096).unwrap(), segment_lengths(&d, 4096).unwrap());
    }

    #[test]
    fn empty_mask_is_rejected() {
        let parc = ParcellationMap::contiguous(14).unwrap();
        let r = assemble_feature_vector(&[1.0; 14], &[false; 14], &parc, 4096, 0);
        assert!(matches!(r, Err(FpedError::Argument(_))));
    }

    #[test]
    fn pooling_preserves_constant_and_mean() {
        assert_eq!(pool_bins(&[2.0; 5], 12), vec![2.0; 12]);
        let vals = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        for len in [1, 3, 7, 10, 29] {
            let pooled = pool_bins(&vals, len);
            let mean_in = vals.iter().sum::<f64>() / 7.0;
            let mean_out = pooled.iter().sum::<f64>() / len as f64;
            assert!((mean_in - mean_out).abs() < 1e-12);
        }
        assert_eq!(pool_bins(&[1.0, 3.0, 5.0, 7.0], 2), vec![2.0, 6.0]);
    }

    #[test]
    fn assembled_layout_is_contiguous_by_network() {
        let parc = ParcellationMap::contiguous(70).unwrap();
        let vals: Vec<f64> = (0..70).map(|i| i as f64).collect();
        let mask = vec![true; 70];
        let f = assemble_feature_vector(&vals, &mask, &parc, 4096, 3).unwrap();
        assert_eq!(f.len(), 4096);
        assert!(f.labels.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(f.sample_id, 3);
    }

    proptest! {
        #[test]
        fn topk_popcount_and_oracle(v in prop::collection::vec(-5.0f64..5.0, 1..60), kf in 0.0f64..1.0) {
            let k = 1 + ((v.len() - 1) as f64 * kf) as usize;
            let m = topk_mask(&v, k).unwrap();
            prop_assert_eq!(m.iter().filter(|&&b| b).count(), k);
            prop_assert_eq!(m, brute_topk(&v, k));
        }

        #[test]
        fn assembled_length_is_exact(
            counts in prop::collection::vec(0usize..40, 7),
            len in 1usize..5000,
        ) {
            let total: usize = counts.iter().sum();
            prop_assume!(total > 0);
            let mut labels = Vec::new();
            let mut mask = Vec::new();
            for (k, &c) in counts.iter().enumerate() {
                labels.extend(std::iter::repeat_n(k as u8, c + 1));
                mask.extend(std::iter::repeat_n(true, c));
                mask.push(false);
            }
            let parc = ParcellationMap::from_labels(labels).unwrap();
            let vals: Vec<f64> = (0..parc.len()).map(|i| (i as f64).sin()).collect();
            let f = assemble_feature_vector(&vals, &mask, &parc, len, 0).unwrap();
            prop_assert_eq!(f.x.len(), len);
            prop_assert_eq!(f.labels.len(), len);
        }
    }
}
