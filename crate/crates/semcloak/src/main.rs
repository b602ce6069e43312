//! `semcloak` command line: train the stages, run attacks, evaluate and report.

use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use semcloak::dataset::save_pngs;
use semcloak::harness::{channel_seed, kind_seed, run_attack, AttackInputs, Run, Stage, RECORD_FILE};
use semcloak::record::{family_name, AttackKind};
use semcloak::report::emit_report;
use semcloak::{replay, run_experiment, ExperimentConfig, ExperimentRecord};
use semcloak_core::metrics::MetricReport;
use semcloak_core::signal::{ChannelFamily, ChannelSpec};

#[derive(Parser)]
#[command(name = "semcloak", version, about = "Eavesdropping attacks and covert defense for semantic image transmission")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment configuration (TOML). Defaults apply to every omitted field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Reuse checkpoints already present in the run directory.
    #[arg(long, global = true)]
    resume: bool,
    /// Override the run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the semantic encoder/decoder (trains the identity model first if needed).
    TrainCodec,
    /// Train the generative prior.
    TrainGenerator,
    /// Train the identity model used for FPESR and the perceptual loss.
    TrainIdentity,
    /// Train the steganography module on the frozen codec.
    TrainSteg,
    /// Run one eavesdropping attack and write reconstructions and metrics.
    Attack(AttackArgs),
    /// Run the full evaluation grid and write the experiment record.
    Evaluate(EvaluateArgs),
    /// Render tables and plots from an experiment record.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Awgn,
    Rayleigh,
}

#[derive(Args)]
struct AttackArgs {
    /// glass, closed, genai-glass, genai-closed, or deepjscc for plain decoding.
    #[arg(long)]
    strategy: AttackKind,
    #[arg(long, value_enum, default_value = "awgn")]
    family: Family,
    /// Eve's SNR in dB; `inf` for a noiseless link.
    #[arg(long, default_value_t = 5.0)]
    snr: f64,
    /// Closed-box probe count M.
    #[arg(long)]
    probes: Option<usize>,
    /// Learning rate of the attack optimizer or inverse-network training.
    #[arg(long)]
    lr: Option<f64>,
    /// Iteration cap T_max of the glass-box attacks.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Per-sample stop threshold of the glass-box attacks.
    #[arg(long)]
    eps: Option<f64>,
    /// Inverse-network training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed of Eve's channel draw. Defaults to the one the grid uses.
    #[arg(long)]
    channel_seed: Option<u64>,
    /// Seed of the attack itself. Defaults to the one the grid uses.
    #[arg(long)]
    attack_seed: Option<u64>,
    /// Attack only the first n test images.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Re-evaluate this record from its checkpoints and compare metrics bit for bit.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Checkpoint directory for the replay, when it has moved since the record was written.
    #[arg(long, requires = "replay")]
    checkpoints: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Record to render. Defaults to the run directory's record.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Output directory. Defaults to `report/` next to the record.
    #[arg(long)]
    dir: Option<PathBuf>,
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(g: &Global, stage: Stage) -> Result<()> {
    let mut run = Run::open(load_config(g)?, g.resume)?;
    match stage {
        Stage::Identity => {
            let m = run.identity()?;
            println!("identity accuracy {:.3} over {} identities", m.accuracy, m.n_ids);
        }
        Stage::Codec => {
            run.codec()?;
        }
        Stage::Generator => {
            run.generator()?;
        }
        Stage::Steg => {
            run.steg()?;
        }
    }
    let hash = run.record.checkpoints.get(stage.name()).cloned().unwrap_or_default();
    println!("{} {} sha256 {hash}", stage.name(), run.checkpoint_path(stage).display());
    Ok(())
}

fn attack(g: &Global, a: &AttackArgs) -> Result<()> {
    let mut cfg = load_config(g)?;
    if let Some(m) = a.probes {
        cfg.attacks.probes = m;
    }
    if let Some(lr) = a.lr {
        cfg.attacks.glass.lr = lr;
        cfg.attacks.genai_glass.lr = lr;
        cfg.attacks.inverse.lr = lr;
    }
    if let Some(t) = a.max_iters {
        cfg.attacks.glass.max_iters = t;
        cfg.attacks.genai_glass.max_iters = t;
    }
    if let Some(e) = a.eps {
        cfg.attacks.glass.stop_eps = e;
        cfg.attacks.genai_glass.stop_eps = e;
    }
    if let Some(e) = a.epochs {
        cfg.attacks.inverse.epochs = e;
    }
    if let Some(n) = a.limit {
        cfg.attacks.eval_limit = Some(n);
    }
    let family = match a.family {
        Family::Awgn => ChannelFamily::Awgn,
        Family::Rayleigh => ChannelFamily::Rayleigh,
    };
    let spec = ChannelSpec::new(family, a.snr);
    let mut run = Run::open(cfg, g.resume)?;
    run.codec()?;
    if matches!(a.strategy, AttackKind::Strategy(s) if s.uses_prior()) {
        run.generator()?;
    }
    let eval = run.eval_set();
    let probes = run.probes();
    let models = run.models().context("codec and identity model are required")?;
    let inputs = AttackInputs {
        api: models.codec,
        codec: models.codec,
        generator: models.generator,
        probes: &probes,
        grid: &run.cfg.attacks,
        cache: None,
    };
    let cs = a.channel_seed.unwrap_or_else(|| channel_seed(run.cfg.seed, &spec));
    let ks = a.attack_seed.unwrap_or_else(|| kind_seed(run.cfg.seed, a.strategy, &spec));
    let z = models.codec.encode(&eval.images)?;
    let (images, info) = run_attack(a.strategy, &z, &spec, &inputs, cs, ks)?;
    let report = MetricReport::compute(&images, &eval.images, models.identity)?;

    let dir = run.dir.join("attacks").join(format!("{}-{}-{}", a.strategy, family_name(family), a.snr));
    save_pngs(&images, &dir.join("reconstructions"), "recon_")?;
    let log_path = dir.join("metrics.jsonl");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    for i in 0..report.n_samples {
        let line = serde_json::json!({
            "sample": i,
            "psnr": report.psnr[i],
            "ms_ssim": report.ms_ssim[i],
            "perceptual": report.perceptual[i],
            "same_identity": report.same_identity[i],
        });
        writeln!(w, "{line}")?;
    }
    let summary = serde_json::json!({
        "attack": a.strategy.name(),
        "family": family_name(family),
        "snr_db": a.snr,
        "channel_seed": cs,
        "attack_seed": ks,
        "info": info,
        "n_samples": report.n_samples,
        "fpesr": report.fpesr,
        "psnr_mean": report.psnr_summary().mean,
        "ms_ssim_mean": report.ms_ssim_summary().mean,
        "perceptual_mean": report.perceptual_summary().mean,
    });
    writeln!(w, "{summary}")?;
    w.flush()?;
    println!(
        "{} {} {} dB: fpesr {:.3} psnr {:.2} ms-ssim {:.3} perceptual {:.4} -> {}",
        a.strategy,
        family_name(family),
        a.snr,
        report.fpesr,
        report.psnr_summary().mean,
        report.ms_ssim_summary().mean,
        report.perceptual_summary().mean,
        dir.display()
    );
    Ok(())
}

fn evaluate(g: &Global, a: &EvaluateArgs) -> Result<()> {
    if let Some(path) = &a.replay {
        let record = ExperimentRecord::load(path)?;
        let fresh = replay(&record, a.checkpoints.as_deref())?;
        let diffs = record.differences(&fresh);
        if !diffs.is_empty() {
            bail!("replay differs in {} cells: {}", diffs.len(), diffs.join(", "));
        }
        println!("replay reproduced {} cells bit for bit", record.cells.len());
        return Ok(());
    }
    let cfg = load_config(g)?;
    let dir = cfg.out_dir.clone();
    let record = run_experiment(cfg, g.resume)?;
    for c in &record.cells {
        println!(
            "{:<14} {:<8} {:>5} dB  fpesr {:.3}  psnr {:6.2}  ms-ssim {:.3}  perceptual {:.4}",
            c.attack.name(),
            family_name(c.channel.family),
            c.channel.snr_db,
            c.report.fpesr,
            c.report.psnr_summary().mean,
            c.report.ms_ssim_summary().mean,
            c.report.perceptual_summary().mean
        );
    }
    for f in &record.failures {
        eprintln!("failed: {} ({})", f.stage, f.message);
    }
    println!("record written to {}", dir.join(RECORD_FILE).display());
    Ok(())
}

fn report(g: &Global, a: &ReportArgs) -> Result<()> {
    let path = match &a.record {
        Some(p) => p.clone(),
        None => load_config(g)?.out_dir.join(RECORD_FILE),
    };
    let mut record = ExperimentRecord::load(&path)?;
    let dir = a
        .dir
        .clone()
        .unwrap_or_else(|| path.parent().map(PathBuf::from).unwrap_or_default().join("report"));
    let files = emit_report(&record, &dir)?;
    record.plots = files.iter().filter(|f| f.extension().is_some_and(|e| e == "svg")).cloned().collect();
    record.save(&path)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let g = &cli.global;
    match &cli.command {
        Command::TrainCodec => train(g, Stage::Codec),
        Command::TrainGenerator => train(g, Stage::Generator),
        Command::TrainIdentity => train(g, Stage::Identity),
        Command::TrainSteg => train(g, Stage::Steg),
        Command::Attack(a) => attack(g, a),
        Command::Evaluate(a) => evaluate(g, a),
        Command::Report(a) => report(g, a),
    }
}
