use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use fped_core::datagen::{export_csv, generate_dataset, read_dataset, write_dataset, DataConfig, Dataset, Split};
use fped_core::interpret::{heatmap_report, write_report, ContributionStat};
use fped_core::numerics::{seeded_rng, ParamStore};
use fped_core::stroute::{generate_image, render_target, train_stage2, write_pgm, StageTwoConfig, ToyGenerator};
use fped_core::trainer::{
    ablate, brain_tokens, load_stage2, save_run, save_stage2, stage2_pairs, train, write_ablation_csv,
    write_metrics_csv, AblationMode, TrainConfig, TrainedModel, MODEL_CKPT, STAGE2_PREFIX,
};
use fped_core::{FpedError, Result};

const MANIFEST: &str = "manifest.txt";

#[derive(Parser, Debug)]
#[command(name = "fped", version, about = "Prior-guided mixture-of-experts brain decoder")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenData),
    /// Train a stage-1 model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train and evaluate every ablation mode at the same budget.
    Ablate(AblateArgs),
    /// Export expert heatmaps and routing contributions.
    Interpret(InterpretArgs),
    /// Train the stage-2 toy generator and sample an image.
    GenImage(GenImageArgs),
    /// Parse and validate a config file.
    ValidateConfig(ValidateArgs),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    v_total: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    patch_grid: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Also write an inspection CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

/// Overrides shared by commands that read a training config.
#[derive(Args, Debug)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    mode: Option<AblationMode>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    split: Split,
    /// Dataset; defaults to the path stored in the checkpoint config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Metrics CSV; defaults to `metrics_<split>.csv` beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated modes; defaults to all five.
    #[arg(long, value_delimiter = ',')]
    modes: Vec<AblationMode>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct InterpretArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    sample_id: u32,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split whose routing states feed the contribution vectors.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Count selected positions instead of summing routing weights.
    #[arg(long)]
    count_based: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct GenImageArgs {
    /// Stage-1 checkpoint providing the brain tokens.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    sample_id: u32,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Reuse a trained generator instead of fitting one.
    #[arg(long)]
    stage2_ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    config: PathBuf,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Refuses to touch existing outputs unless `force` is set.
fn check_outputs(paths: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    for p in paths {
        if p.exists() {
            return Err(FpedError::Argument(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    Ok(())
}

struct Manifest {
    command: &'static str,
    config_hash: String,
    seed: u64,
    extra: Vec<(String, String)>,
    outputs: Vec<PathBuf>,
}

impl Manifest {
    fn write(&self, path: &Path) -> Result<()> {
        let mut s = format!(
            "command = {}\nversion = {}\nconfig_hash = {}\nseed = {}\n",
            self.command,
            env!("CARGO_PKG_VERSION"),
            self.config_hash,
            self.seed
        );
        for (k, v) in &self.extra {
            s.push_str(&format!("{k} = {v}\n"));
        }
        for (i, o) in self.outputs.iter().enumerate() {
            s.push_str(&format!("output.{i} = {}\n", o.display()));
        }
        fs::write(path, s)?;
        Ok(())
    }
}

fn load_config(a: &ConfigArgs) -> Result<TrainConfig> {
    let text = fs::read_to_string(&a.config)
        .map_err(|e| FpedError::Config(format!("cannot read {}: {e}", a.config.display())))?;
    let mut cfg = TrainConfig::parse(&text)?;
    for kv in &a.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| FpedError::Config(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(d) = &a.data {
        cfg.data = d.clone();
    }
    if let Some(o) = &a.out_dir {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(path: &Path) -> Result<Dataset> {
    read_dataset(path).map_err(|e| match e {
        FpedError::Io(io) => FpedError::Argument(format!("cannot read dataset {}: {io}", path.display())),
        other => other,
    })
}

fn cmd_gen_data(a: GenData) -> Result<()> {
    let d = DataConfig::default();
    let cfg = DataConfig {
        seed: a.seed,
        n_train: a.n_train.unwrap_or(d.n_train),
        n_val: a.n_val.unwrap_or(d.n_val),
        n_test: a.n_test.unwrap_or(d.n_test),
        v_total: a.v_total.unwrap_or(d.v_total),
        embed_dim: a.embed_dim.unwrap_or(d.embed_dim),
        patch_grid: a.patch_grid.unwrap_or(d.patch_grid),
        repetitions: a.repetitions.unwrap_or(d.repetitions),
        noise: a.noise.unwrap_or(d.noise),
        baseline: d.baseline,
        top_k: a.top_k.unwrap_or(d.top_k),
    };
    cfg.validate()?;
    let manifest_path = PathBuf::from(format!("{}.manifest.txt", a.out.display()));
    let mut outputs = vec![a.out.clone()];
    outputs.extend(a.csv.clone());
    let mut guarded = outputs.clone();
    guarded.push(manifest_path.clone());
    check_outputs(&guarded, a.force)?;
    let ds = generate_dataset(&cfg)?;
    write_dataset(&ds, &a.out)?;
    if let Some(c) = &a.csv {
        export_csv(&ds, c)?;
    }
    Manifest {
        command: "gen-data",
        config_hash: sha256_hex(format!("{cfg:?}").as_bytes()),
        seed: cfg.seed,
        extra: vec![("dataset_sha256".into(), sha256_hex(&fs::read(&a.out)?))],
        outputs,
    }
    .write(&manifest_path)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    let dir = PathBuf::from(&cfg.out_dir);
    let planned: Vec<PathBuf> = ["loss.csv", "router.csv", MODEL_CKPT, "config.txt", MANIFEST].iter().map(|f| dir.join(f)).collect();
    check_outputs(&planned, a.force)?;
    let ds = load_data(Path::new(&cfg.data))?;
    let outcome = train(&cfg, &ds)?;
    let outputs = save_run(&outcome, &dir)?;
    let text = cfg.serialize();
    fs::write(dir.join("config.txt"), &text)?;
    let mut all = outputs;
    all.push(dir.join("config.txt"));
    let last = outcome.history.last().map_or(f64::NAN, |r| r.total);
    println!("trained {} for {} epochs; final batch loss {last:.6}", cfg.mode, cfg.epochs);
    Manifest {
        command: "train",
        config_hash: sha256_hex(text.as_bytes()),
        seed: cfg.seed,
        extra: vec![("mode".into(), cfg.mode.to_string()), ("data".into(), cfg.data.clone())],
        outputs: all,
    }
    .write(&dir.join(MANIFEST))
}

fn trained_and_data(ckpt: &Path, data: Option<&Path>) -> Result<(TrainedModel, Dataset)> {
    let trained = TrainedModel::load(ckpt)?;
    let data = data.map_or_else(|| PathBuf::from(&trained.model.config.data), Path::to_path_buf);
    let ds = load_data(&data)?;
    trained.check_dataset(&ds)?;
    Ok((trained, ds))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (trained, ds) = trained_and_data(&a.ckpt, a.data.as_deref())?;
    let dir = a.ckpt.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let out = a.out.clone().unwrap_or_else(|| dir.join(format!("metrics_{}.csv", a.split.as_str())));
    let manifest = PathBuf::from(format!("{}.manifest.txt", out.display()));
    check_outputs(&[out.clone(), manifest.clone()], a.force)?;
    let m = trained.evaluate(&ds, a.split)?;
    write_metrics_csv(&out, &[m])?;
    println!(
        "{} ({} samples): text two-way {:.4} top-1 {:.4} cos {:.4}; image two-way {:.4} top-1 {:.4} cos {:.4}",
        a.split.as_str(),
        m.samples,
        m.text.two_way,
        m.text.top1,
        m.text.mean_cosine,
        m.image.two_way,
        m.image.top1,
        m.image.mean_cosine
    );
    let text = trained.model.config.serialize();
    Manifest {
        command: "eval",
        config_hash: sha256_hex(text.as_bytes()),
        seed: trained.model.config.seed,
        extra: vec![("checkpoint".into(), a.ckpt.display().to_string()), ("split".into(), a.split.as_str().into())],
        outputs: vec![out],
    }
    .write(&manifest)
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cfg = load_config(&a.cfg)?;
    let modes = if a.modes.is_empty() { AblationMode::ALL.to_vec() } else { a.modes.clone() };
    let dir = PathBuf::from(&cfg.out_dir);
    let out = dir.join("ablation.csv");
    check_outputs(&[out.clone(), dir.join(MANIFEST)], a.force)?;
    let ds = load_data(Path::new(&cfg.data))?;
    let rows = ablate(&cfg, &modes, &ds, a.split)?;
    fs::create_dir_all(&dir)?;
    write_ablation_csv(&out, &rows)?;
    for r in &rows {
        println!(
            "{:<12} params {:>9}  text two-way {:.4}  image two-way {:.4}",
            r.mode.as_str(),
            r.params,
            r.metrics.text.two_way,
            r.metrics.image.two_way
        );
    }
    let text = cfg.serialize();
    Manifest {
        command: "ablate",
        config_hash: sha256_hex(text.as_bytes()),
        seed: cfg.seed,
        extra: vec![(
            "modes".into(),
            modes.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(","),
        )],
        outputs: vec![out],
    }
    .write(&dir.join(MANIFEST))
}

fn cmd_interpret(a: InterpretArgs) -> Result<()> {
    check_outputs(&[a.out_dir.join(MANIFEST)], a.force)?;
    let (trained, ds) = trained_and_data(&a.ckpt, a.data.as_deref())?;
    let stat = if a.count_based { ContributionStat::Count } else { ContributionStat::Weight };
    let report = heatmap_report(&trained, &ds, a.sample_id, a.split, stat)?;
    let outputs = write_report(&report, &a.out_dir)?;
    for (m, c) in &report.contributions {
        let parts: Vec<String> =
            fped_core::NETWORK_NAMES.iter().zip(c).map(|(n, v)| format!("{n} {v:.4}")).collect();
        println!("{}: {}", m.as_str(), parts.join("  "));
    }
    Manifest {
        command: "interpret",
        config_hash: sha256_hex(trained.model.config.serialize().as_bytes()),
        seed: trained.model.config.seed,
        extra: vec![("checkpoint".into(), a.ckpt.display().to_string()), ("sample_id".into(), a.sample_id.to_string())],
        outputs,
    }
    .write(&a.out_dir.join(MANIFEST))
}

fn cmd_gen_image(a: GenImageArgs) -> Result<()> {
    let image_path = a.out_dir.join(format!("sample_{}.pgm", a.sample_id));
    let target_path = a.out_dir.join(format!("target_{}.pgm", a.sample_id));
    let mut planned = vec![image_path.clone(), target_path.clone(), a.out_dir.join(MANIFEST)];
    if a.stage2_ckpt.is_none() {
        planned.push(a.out_dir.join("stage2.ckpt"));
        planned.push(a.out_dir.join("stage2_loss.csv"));
    }
    check_outputs(&planned, a.force)?;
    let (trained, ds) = trained_and_data(&a.ckpt, a.data.as_deref())?;
    let sample = ds
        .sample(a.sample_id)
        .ok_or_else(|| FpedError::Argument(format!("no sample with id {}", a.sample_id)))?;
    fs::create_dir_all(&a.out_dir)?;
    let mut outputs = Vec::new();
    let (gen, store) = match &a.stage2_ckpt {
        Some(p) => load_stage2(p)?,
        None => {
            let pairs = stage2_pairs(&trained, &ds, Split::Train)?;
            let cfg = StageTwoConfig { brain_width: trained.model.config.width, ..Default::default() };
            let mut rng = seeded_rng(a.seed);
            let mut store = ParamStore::new();
            let gen = ToyGenerator::new(&mut store, STAGE2_PREFIX, &cfg, &mut rng);
            let report = train_stage2(&gen, &mut store, &pairs, a.epochs, a.lr, &mut rng)?;
            let ck = a.out_dir.join("stage2.ckpt");
            save_stage2(&ck, &gen, &store)?;
            let csv = a.out_dir.join("stage2_loss.csv");
            let mut text = String::from("epoch,loss\n");
            for (e, l) in report.losses.iter().enumerate() {
                text.push_str(&format!("{e},{l:.17e}\n"));
            }
            fs::write(&csv, text)?;
            outputs.push(ck);
            outputs.push(csv);
            (gen, store)
        }
    };
    let fv = trained.preprocessor.transform(&ds, sample)?;
    let (coarse, fine) = brain_tokens(&trained, &fv)?;
    let img = generate_image(&gen, &store, &coarse, &fine, a.seed)?;
    write_pgm(&image_path, &img, 16, 16)?;
    write_pgm(&target_path, &render_target(&sample.patches, &sample.c_img, ds.config.patch_grid), 16, 16)?;
    outputs.push(image_path);
    outputs.push(target_path);
    Manifest {
        command: "gen-image",
        config_hash: sha256_hex(trained.model.config.serialize().as_bytes()),
        seed: a.seed,
        extra: vec![("checkpoint".into(), a.ckpt.display().to_string()), ("sample_id".into(), a.sample_id.to_string())],
        outputs,
    }
    .write(&a.out_dir.join(MANIFEST))
}

fn cmd_validate(a: ValidateArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config)
        .map_err(|e| FpedError::Config(format!("cannot read {}: {e}", a.config.display())))?;
    let cfg = TrainConfig::parse(&text)?;
    println!("ok: mode {} seed {} config_hash {}", cfg.mode, cfg.seed, sha256_hex(cfg.serialize().as_bytes()));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Interpret(a) => cmd_interpret(a),
        Command::GenImage(a) => cmd_gen_image(a),
        Command::ValidateConfig(a) => cmd_validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
