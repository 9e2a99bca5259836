use fped_core::numerics::{cosine, seeded_rng, ParamStore};
use fped_core::prior::{fit_prior, Denoiser, DiffusionSchedule};

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

#[test]
fn overfit_64_pairs_raises_sample_cosine() {
    let d = 64;
    let mut rng = seeded_rng(21);
    let conds: Vec<Vec<f64>> = (0..64).map(|_| rng.normal_vec(d)).collect();
    let targets: Vec<Vec<f64>> = (0..64).map(|_| unit(rng.normal_vec(d))).collect();
    let s = DiffusionSchedule::default();
    let mut store = ParamStore::new();
    let den = Denoiser::new(&mut store, "prior", d, d, 32, 128, &mut rng);
    let mean_cos = |store: &ParamStore, seed: u64| {
        let mut r = seeded_rng(seed);
        conds
            .iter()
            .zip(&targets)
            .map(|(c, t)| cosine(&den.sample(store, &s, c, &mut r), t).unwrap())
            .sum::<f64>()
            / 64.0
    };
    let before = mean_cos(&store, 5);
    let t0 = std::time::Instant::now();
    let hist = fit_prior(&den, &mut store, &s, &conds, &targets, 500, 16, 1e-3, &mut rng).unwrap();
    let after = mean_cos(&store, 5);
    eprintln!("before {before:.4} after {after:.4} loss {:.4}->{:.4} {:?}", hist[0], hist[499], t0.elapsed());
    assert!(after - before >= 0.3);
}
