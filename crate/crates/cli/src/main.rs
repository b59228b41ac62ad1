use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use synfoc::data::{build_split, Dataset, DomainSpec, SplitConfig};
use synfoc::models::{FoundationSegNet, PretrainConfig};
use synfoc::trainer::{
    evaluate_checkpoint, load_dataset, load_pretrained, pretrain_holdout_report, pretrain_on,
    pretrained_checkpoint, run_suite, suite_threads, train_on, ModelKind,
    Precision, Strategy, TrainConfig,
};
use synfoc::metrics::MetricReport;
use synfoc::Scalar;

#[derive(Parser)]
#[command(name = "synfoc", version, about = "Synergistic two-model semi-supervised segmentation on synthetic multi-domain data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory.
    GenData(GenData),
    /// Pretrain the foundation network and attach adapters.
    Pretrain(Pretrain),
    /// Train one strategy.
    Train(Train),
    /// Evaluate a run checkpoint on a dataset.
    Eval(Eval),
    /// Train several strategies and tabulate their test metrics.
    Suite(Suite),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Number of experiment domains (at most 3).
    #[arg(long, default_value_t = 3)]
    domains: usize,
    #[arg(long, default_value_t = 10)]
    labeled: usize,
    #[arg(long, default_value_t = 300)]
    unlabeled: usize,
    #[arg(long, default_value_t = 60)]
    test: usize,
    #[arg(long, default_value_t = 1)]
    classes: usize,
    /// Image side in pixels (a multiple of 8).
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Size of the pretraining corpus.
    #[arg(long, default_value_t = 512)]
    pretrain_count: usize,
}

#[derive(Args)]
struct Pretrain {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Overrides shared by `train` and `suite`; each beats the config file.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    foundation_ckpt: Option<PathBuf>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Overrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        for kv in &self.sets {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set {kv:?}: expected KEY=VALUE"))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.t_max {
            cfg.t_max = t;
        }
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        if let Some(c) = &self.foundation_ckpt {
            cfg.foundation_ckpt = Some(c.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Output directory (default `runs/<strategy>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct Suite {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated strategies (default: all eight).
    #[arg(long, value_delimiter = ',')]
    strategies: Vec<Strategy>,
}

fn row(name: &str, r: &MetricReport) -> String {
    format!(
        "{name}: DSC {:.2}%  Jaccard {:.2}%  HD95 {:.2}  ASD {:.2}\n",
        100.0 * r.mean.dsc,
        100.0 * r.mean.jaccard,
        r.mean.hd95,
        r.mean.asd
    )
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Suite(a) => suite(a),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let all = DomainSpec::experiment_defaults();
    if a.domains < 2 || a.domains > all.len() {
        bail!("--domains must be between 2 and {}", all.len());
    }
    let cfg = SplitConfig {
        seed: a.seed,
        classes: a.classes,
        domains: all[..a.domains].to_vec(),
        labeled: a.labeled,
        unlabeled: a.unlabeled,
        test_per_domain: a.test,
        size: a.size,
        pretrain_count: a.pretrain_count,
        ..SplitConfig::default()
    };
    let data = Dataset::generate(build_split(&cfg)?)?;
    data.save(&a.out)?;
    println!("wrote {} samples to {}", data.manifest.entries.len(), a.out.display());
    Ok(())
}

fn pretrain(a: Pretrain) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let mut cfg = PretrainConfig::default();
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let (net, _) = pretrain_and_report::<f32>(&data, &cfg)?;
    pretrained_checkpoint(&net, &cfg).save(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn pretrain_and_report<T: Scalar>(data: &Dataset, cfg: &PretrainConfig) -> Result<(FoundationSegNet<T>, f64)> {
    let start = Instant::now();
    let (net, losses) = pretrain_on::<T>(data, cfg)?;
    for (e, l) in losses.iter().enumerate() {
        println!("epoch {}: loss {l:.4}", e + 1);
    }
    let holdout = pretrain_holdout_report(&net, data, 120)?;
    println!(
        "pretrained in {:.0}s; held-out pretraining-domain DSC {:.2}%",
        start.elapsed().as_secs_f64(),
        100.0 * holdout.mean.dsc
    );
    Ok((net, holdout.mean.dsc))
}

fn train(a: Train) -> Result<()> {
    let mut cfg = a.overrides.resolve()?;
    if let Some(s) = a.strategy {
        cfg.strategy = s;
    }
    let out = a.out.unwrap_or_else(|| PathBuf::from("runs").join(cfg.strategy.name()));
    let data = load_dataset(&cfg)?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(&cfg, &data, &out),
        Precision::F64 => train_typed::<f64>(&cfg, &data, &out),
    }
}

fn foundation_for<T: Scalar>(cfg: &TrainConfig, strategies: &[Strategy]) -> Result<Option<FoundationSegNet<T>>> {
    if !strategies.iter().any(|s| s.uses_found()) {
        return Ok(None);
    }
    let path = cfg
        .foundation_ckpt
        .as_ref()
        .context("this strategy needs a pretrained checkpoint: pass --foundation-ckpt (see `synfoc pretrain`)")?;
    Ok(Some(load_pretrained(path).with_context(|| format!("loading {}", path.display()))?))
}

fn train_typed<T: Scalar>(cfg: &TrainConfig, data: &Dataset, out: &Path) -> Result<()> {
    let found = foundation_for::<T>(cfg, &[cfg.strategy])?;
    let start = Instant::now();
    let outcome = train_on(cfg, data, found.as_ref())?;
    outcome.log.write(out)?;
    outcome.checkpoint(cfg).save(&out.join("run.ckpt"))?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;
    let mut summary = format!("# {}\n\n{} iterations in {:.0}s\n\n", cfg.strategy, cfg.t_max, start.elapsed().as_secs_f64());
    for e in outcome.log.evals.iter().filter(|e| e.iteration == cfg.t_max) {
        summary.push_str(&row(e.model.name(), &e.report));
    }
    std::fs::write(out.join("summary.md"), &summary)?;
    print!("{summary}");
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    for (model, report) in evaluate_checkpoint(&a.ckpt, &data)? {
        print!("{}", row(model.name(), &report));
        for d in &report.domains {
            println!(
                "  domain {}: DSC {:.2}%  Jaccard {:.2}%  HD95 {:.2}  ASD {:.2}",
                d.domain,
                100.0 * d.mean.dsc,
                100.0 * d.mean.jaccard,
                d.mean.hd95,
                d.mean.asd
            );
        }
    }
    Ok(())
}

fn suite(a: Suite) -> Result<()> {
    let cfg = a.overrides.resolve()?;
    let strategies = if a.strategies.is_empty() { Strategy::ALL.to_vec() } else { a.strategies };
    let data = load_dataset(&cfg)?;
    match cfg.precision {
        Precision::F32 => suite_typed::<f32>(cfg, &strategies, &data, &a.out),
        Precision::F64 => suite_typed::<f64>(cfg, &strategies, &data, &a.out),
    }
}

fn suite_typed<T: Scalar>(mut cfg: TrainConfig, strategies: &[Strategy], data: &Dataset, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    if cfg.foundation_ckpt.is_none() && strategies.iter().any(|s| s.uses_found()) {
        let cached = out.join("pretrained.ckpt");
        if !cached.exists() {
            let (net, _) = pretrain_and_report::<T>(data, &cfg.pretrain)?;
            pretrained_checkpoint(&net, &cfg.pretrain).save(&cached)?;
        }
        cfg.foundation_ckpt = Some(cached);
    }
    let found = foundation_for::<T>(&cfg, strategies)?;
    let start = Instant::now();
    let result = run_suite(&cfg, strategies, data, found.as_ref(), suite_threads(), |s, log| {
        let dsc = |k| log.final_report(k).map(|r| format!("{:.2}", 100.0 * r.mean.dsc)).unwrap_or("-".into());
        println!(
            "[{:.0}s] {s}: conv {} found {}",
            start.elapsed().as_secs_f64(),
            dsc(ModelKind::ConvStudent),
            dsc(ModelKind::FoundStudent)
        );
    })?;
    result.write(out)?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;
    print!("{}", result.to_markdown());
    println!("wrote {}", out.display());
    Ok(())
}
