//! `putr`: dataset generation, training, patch-based upsampling, evaluation,
//! noise sweeps, gradient checks and parameter counts.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use putr::data::{generate_dataset, load_checkpoint, load_dataset, read_xyz, save_checkpoint, write_dataset, write_xyz};
use putr::metrics::{MetricReport, SurfaceRef};
use putr::model::{Model, ModelConfig};
use putr::pipeline::{
    git_blob_hash, gradcheck_config, gradcheck_suite, noise_sweep, train, upsample_cloud, EvalCase, OptimizerKind,
    ParamsReport, RunManifest, TrainConfig, TrainPair, DEFAULT_PATCH_SIZE, REFERENCE_TOTALS,
};
use putr::{Error, Result};

#[derive(Parser)]
#[command(name = "putr", version, about = "Point cloud upsampling transformer")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample sparse/dense training pairs from analytic surfaces.
    Generate(GenerateArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Upsample one cloud with a trained checkpoint.
    Upsample(UpsampleArgs),
    /// CD / HD / P2F of a prediction against ground truth.
    Evaluate(EvaluateArgs),
    /// Metrics under increasing input noise.
    NoiseSweep(NoiseSweepArgs),
    /// Finite-difference check of every gradient on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Trainable parameter counts per block.
    Params(ParamsArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Comma-separated shapes: zoo names (sphere, torus, cylinder,
    /// heightfield, all) or full specs such as `torus:1,0.4`.
    #[arg(long, default_value = "all", value_parser = parse_shapes)]
    shapes: Shapes,
    #[arg(long, default_value_t = 256)]
    n_in: usize,
    #[arg(long, default_value_t = 4)]
    ratio: usize,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Where the best-loss checkpoint is written.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run manifest path; defaults to the checkpoint path with `.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Model config as `key=value` lines; defaults to the standard model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    decay_interval: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<Optimizer>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Samples used for the final metric report.
    #[arg(long, default_value_t = 4)]
    report_samples: usize,
}

#[derive(Args)]
struct UpsampleArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Expected upsampling ratio; must match the checkpoint.
    #[arg(long)]
    ratio: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_PATCH_SIZE)]
    patch_size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Surface spec, e.g. `sphere:1` or `mesh:model.obj`.
    #[arg(long)]
    surface: String,
    /// Also write the report as `key=value` lines.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NoiseSweepArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Noise levels as fractions of each input's bounding radius.
    #[arg(long, value_delimiter = ',', default_value = "0,0.005,0.01,0.02")]
    betas: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_PATCH_SIZE)]
    patch_size: usize,
    /// Use at most this many samples.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Points per cloud.
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct ParamsArgs {
    /// Model config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of encoders, with the default width schedule.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    #[arg(long)]
    head_channels: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    psi: Option<usize>,
    #[arg(long)]
    ratio: Option<usize>,
    /// Also list totals of the default family for 3 to 6 encoders.
    #[arg(long)]
    depths: bool,
}

#[derive(Clone)]
struct Shapes(Vec<SurfaceRef>);

fn zoo(name: &str) -> Option<Vec<SurfaceRef>> {
    let all = SurfaceRef::default_zoo();
    let pick = |i: usize| Some(vec![all[i].clone()]);
    match name {
        "all" => Some(all.clone()),
        "sphere" => pick(0),
        "torus" => pick(1),
        "cylinder" => pick(2),
        "heightfield" => pick(3),
        _ => None,
    }
}

/// Splits on commas, re-attaching numeric tokens to the spec before them.
fn parse_shapes(text: &str) -> std::result::Result<Shapes, String> {
    let mut items: Vec<String> = Vec::new();
    for tok in text.split(',').map(str::trim) {
        match items.last_mut() {
            Some(last) if last.contains(':') && tok.parse::<f64>().is_ok() => {
                last.push(',');
                last.push_str(tok);
            }
            _ => items.push(tok.to_string()),
        }
    }
    let mut out = Vec::new();
    for item in items {
        match zoo(&item) {
            Some(s) => out.extend(s),
            None if item.contains(':') => out.push(SurfaceRef::parse(&item, None).map_err(|e| e.to_string())?),
            None => return Err(format!("unknown shape {item:?}")),
        }
    }
    if out.is_empty() {
        return Err("no shapes given".into());
    }
    Ok(Shapes(out))
}

fn read_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?;
    ModelConfig::from_kv(&text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Argument(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    let (params, cfg) = load_checkpoint(path)?;
    Model::new(cfg, params)
}

fn cmd_generate(a: GenerateArgs, seed: u64) -> Result<()> {
    let records = generate_dataset(&a.shapes.0, a.n_in, a.ratio, a.count, seed)?;
    let manifest = write_dataset(&a.out, &records)?;
    println!(
        "wrote {} samples ({} -> {} points) to {}",
        records.len(),
        a.n_in,
        a.n_in * a.ratio,
        manifest.display()
    );
    Ok(())
}

fn mean_report(reports: &[MetricReport]) -> MetricReport {
    let k = reports.len() as f64;
    MetricReport {
        cd: reports.iter().map(|r| r.cd).sum::<f64>() / k,
        hd: reports.iter().map(|r| r.hd).sum::<f64>() / k,
        p2f: reports.iter().map(|r| r.p2f).sum::<f64>() / k,
        n_pred: reports.iter().map(|r| r.n_pred).sum::<usize>() / reports.len(),
        n_gt: reports.iter().map(|r| r.n_gt).sum::<usize>() / reports.len(),
    }
}

fn cmd_train(a: TrainArgs, seed: u64) -> Result<()> {
    let records = load_dataset(&a.dataset)?;
    let mut cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => ModelConfig::default(),
    };
    let ratio = records[0].dense.len() / records[0].sparse.len().max(1);
    if a.config.is_none() {
        cfg.ratio = ratio;
    }
    cfg.validate()?;
    if let Some(r) = records.iter().find(|r| r.dense.len() != cfg.ratio * r.sparse.len()) {
        return Err(Error::Argument(format!(
            "sample {} has {} -> {} points, not ratio {}",
            r.id,
            r.sparse.len(),
            r.dense.len(),
            cfg.ratio
        )));
    }
    let mut tc = match a.preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Paper => TrainConfig::paper(),
    };
    tc.epochs = a.epochs.unwrap_or(tc.epochs);
    tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
    tc.lr0 = a.lr.unwrap_or(tc.lr0);
    tc.lr_decay = a.lr_decay.unwrap_or(tc.lr_decay);
    tc.decay_interval = a.decay_interval.unwrap_or(tc.decay_interval);
    if let Some(o) = a.optimizer {
        tc.optimizer = match o {
            Optimizer::Adam => OptimizerKind::Adam,
            Optimizer::Sgd => OptimizerKind::Sgd,
        };
    }
    tc.max_steps = a.max_steps;
    tc.seed = seed;
    tc.dataset = Some(a.dataset.clone());
    tc.checkpoint = Some(a.checkpoint.clone());

    let pairs = records.iter().map(TrainPair::from_record).collect::<Result<Vec<_>>>()?;
    let model = Model::<f32>::init(cfg.clone(), seed)?;
    eprintln!("training on {} pairs, {} steps per epoch", pairs.len(), pairs.len().div_ceil(tc.batch_size));
    let outcome = train(model, &pairs, &tc, |log| {
        eprintln!(
            "epoch {:>4}  lr {:.3e}  loss {:.6e}  steps {}  {:.1}s",
            log.epoch, log.lr, log.mean_loss, log.steps, log.seconds
        );
    })?;
    save_checkpoint(&outcome.best.params, &cfg, &a.checkpoint)?;
    let bytes = std::fs::read(&a.checkpoint).map_err(|e| Error::Argument(format!("{}: {e}", a.checkpoint.display())))?;

    let mut reports = Vec::new();
    for r in records.iter().take(a.report_samples.max(1)) {
        let pred = upsample_cloud(&outcome.best, &r.sparse, DEFAULT_PATCH_SIZE)?;
        reports.push(MetricReport::compute(pred.points(), r.dense.points(), &r.surface)?);
    }
    let report = mean_report(&reports);
    let manifest = RunManifest {
        model_config: RunManifest::config_map(&cfg),
        train_config: tc,
        checkpoint_hash: Some(git_blob_hash(&bytes)),
        loss_curve: outcome.loss_curve(),
        epoch_seconds: outcome.epochs.iter().map(|e| e.seconds).collect(),
        best_epoch: outcome.best_epoch,
        steps: outcome.steps,
        final_report: Some(RunManifest::report_map(&report)),
    };
    manifest.validate()?;
    let path = a.manifest.unwrap_or_else(|| a.checkpoint.with_extension("json"));
    write_text(&path, &manifest.to_json()?)?;
    println!("{report}");
    eprintln!("checkpoint {} ({})", a.checkpoint.display(), manifest.checkpoint_hash.unwrap_or_default());
    Ok(())
}

fn cmd_upsample(a: UpsampleArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    if let Some(r) = a.ratio {
        if r != model.cfg.ratio {
            return Err(Error::Argument(format!(
                "--ratio {r} does not match the checkpoint ratio {}",
                model.cfg.ratio
            )));
        }
    }
    let cloud = read_xyz(&a.input)?;
    let out = upsample_cloud(&model, &cloud, a.patch_size)?;
    match &a.out {
        Some(p) => {
            write_xyz(&out, p)?;
            eprintln!("{} -> {} points written to {}", cloud.len(), out.len(), p.display());
        }
        None => print!("{}", putr::data::format_xyz(&out)),
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<bool> {
    let pred = read_xyz(&a.pred)?;
    let gt = read_xyz(&a.gt)?;
    let surface = SurfaceRef::parse(&a.surface, None)?;
    let report = MetricReport::compute(pred.points(), gt.points(), &surface)?;
    println!("{report}");
    if let Some(p) = &a.out {
        write_text(p, &report.to_kv_block())?;
    }
    if !report.is_finite() {
        eprintln!("error: non-finite metric");
        return Ok(false);
    }
    Ok(true)
}

fn cmd_noise_sweep(a: NoiseSweepArgs, seed: u64) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let mut records = load_dataset(&a.dataset)?;
    if let Some(l) = a.limit {
        records.truncate(l.max(1));
    }
    let cases: Vec<EvalCase> = records
        .into_iter()
        .map(|r| EvalCase {
            input: r.sparse,
            gt: r.dense,
            surface: r.surface,
        })
        .collect();
    let sweep = noise_sweep(&model, &cases, &a.betas, a.patch_size, seed)?;
    let table = sweep.to_table();
    print!("{table}");
    if let Some(p) = &a.out {
        write_text(p, &table)?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, seed: u64) -> Result<bool> {
    let started = Instant::now();
    let suite = gradcheck_suite(&gradcheck_config(), a.n, seed, a.tol)?;
    print!("{}", suite.to_table());
    eprintln!("{} tensors checked in {:.1}s", suite.tensors.len(), started.elapsed().as_secs_f64());
    let failures = suite.failures();
    if !failures.is_empty() {
        eprintln!("error: gradient check failed for {}", failures.join(", "));
        return Ok(false);
    }
    Ok(true)
}

fn cmd_params(a: ParamsArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => ModelConfig::default(),
    };
    if let Some(l) = a.layers {
        cfg.channels = ModelConfig::channels_for_layers(l);
    }
    if let Some(c) = a.channels {
        cfg.channels = c;
    }
    cfg.head_channels = a.head_channels.unwrap_or(cfg.head_channels);
    cfg.k = a.k.unwrap_or(cfg.k);
    cfg.psi = a.psi.unwrap_or(cfg.psi);
    cfg.ratio = a.ratio.unwrap_or(cfg.ratio);
    print!("{}", ParamsReport::new(&cfg)?);
    if a.depths {
        println!("depth sweep (default widths):");
        for (l, reference) in REFERENCE_TOTALS {
            let r = ParamsReport::new(&ModelConfig::with_layers(l))?;
            println!("  L={l}  {:>10}  reference {:.1}k", r.count.total, reference / 1e3);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let seed = cli.seed;
    match cli.command {
        Command::Generate(a) => cmd_generate(a, seed).map(|_| true),
        Command::Train(a) => cmd_train(a, seed).map(|_| true),
        Command::Upsample(a) => cmd_upsample(a).map(|_| true),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::NoiseSweep(a) => cmd_noise_sweep(a, seed).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a, seed),
        Command::Params(a) => cmd_params(a).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
