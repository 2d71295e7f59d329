use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rtc_core::checkpoint;
use rtc_core::config::{Preset, RunConfig};
use rtc_core::data::{generate_dataset, save_dataset};
use rtc_core::experiment::{self, Split};
use rtc_core::gradcheck::{self, GradCheckOptions};
use rtc_core::trainer::Event;
use rtc_core::RtcError;

#[derive(Parser)]
#[command(name = "rtc", version, about = "Weakly-supervised segmentation on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset on disk.
    GenData(GenDataArgs),
    /// Train one configuration.
    Train(Common),
    /// Evaluate a checkpoint.
    Eval(CheckpointArgs),
    /// Dump raw, refined and compensatory CAMs plus pseudo-masks.
    ExportCams(CheckpointArgs),
    /// Compare analytic and finite-difference gradients of every loss term.
    GradCheck(Common),
    /// Train the four presets over several seeds and report the ordering.
    Ablate(AblateArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Flat JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory or manifest; overrides the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = ["baseline", "crr", "crr_ctr", "full"])]
    ablate: Option<String>,
    /// Prototypes from the same view's features.
    #[arg(long)]
    str_mode: bool,
    /// Single-affinity refinement instead of the two-representation one.
    #[arg(long)]
    pcm_mode: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[command(flatten)]
    common: Common,
    /// Defaults to the config.json stored next to the checkpoint, when present.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "val", value_parser = ["train", "val"])]
    split: String,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Also train the PCM and STR variants of the full preset.
    #[arg(long)]
    compare: bool,
}

fn exit_code(e: &RtcError) -> u8 {
    match e {
        RtcError::NonFinite { .. } | RtcError::NonFiniteLoss(_) => 3,
        RtcError::Internal(_) => 1,
        _ => 2,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, RtcError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn resolve(c: &Common, fallback: Option<&Path>) -> Result<RunConfig, RtcError> {
    let mut cfg = load_config(c.config.as_deref().or(fallback))?;
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.run.out_dir = out.display().to_string();
    }
    if let Some(data) = &c.data {
        cfg.run.data = Some(data.display().to_string());
    }
    if let Some(name) = &c.ablate {
        cfg.apply_preset(Preset::parse(name).expect("clap restricts the preset names"));
    }
    cfg.run.str_mode |= c.str_mode;
    cfg.run.pcm_mode |= c.pcm_mode;
    cfg.validate()?;
    Ok(cfg)
}

fn threads() -> Result<usize, RtcError> {
    match std::env::var("RTC_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| RtcError::Config {
                path: "RTC_THREADS".into(),
                msg: format!("expected a positive integer, got {v:?}"),
            }),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<(), RtcError> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.run.data_seed = seed;
    }
    if let Some(n) = a.train {
        cfg.run.n_train = n;
    }
    if let Some(n) = a.val {
        cfg.run.n_val = n;
    }
    if let Some(c) = a.classes {
        cfg.run.classes = c;
    }
    cfg.validate()?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    let ds = generate_dataset(cfg.run.n_train, cfg.run.n_val, cfg.run.classes, cfg.run.data_seed)?;
    let manifest = save_dataset(&ds, &out)?;
    println!(
        "wrote {} train and {} val samples ({} classes) to {}",
        manifest.train.len(),
        manifest.val.len(),
        manifest.classes.len(),
        out.display()
    );
    Ok(())
}

fn train(c: &Common) -> Result<(), RtcError> {
    let cfg = resolve(c, None)?;
    let ds = experiment::dataset_for(&cfg)?;
    let out = PathBuf::from(&cfg.run.out_dir);
    eprintln!("pretraining for {} epochs", cfg.train.pretrain_epochs);
    let outcome = experiment::run_training(&cfg, &ds, None, Some(&out), |ev| {
        if let Event::Epoch(r) = ev {
            eprintln!(
                "epoch {:>3} {:<6} loss {:.4} cam {:.4} mask {:.4}",
                r.epoch,
                r.phase.as_str(),
                r.losses.total,
                r.cam_miou,
                r.mask_miou
            );
        }
    })?;
    let last = outcome.records.last().expect("at least one epoch");
    println!(
        "final cam_miou {:.4} mask_miou {:.4}; best epoch {}; artifacts in {}",
        last.cam_miou,
        last.mask_miou,
        outcome.best_epoch,
        out.display()
    );
    Ok(())
}

fn checkpoint_config(a: &CheckpointArgs) -> Result<RunConfig, RtcError> {
    let stored = a.checkpoint.parent().map(|d| d.join(experiment::CONFIG_FILE));
    let fallback = stored.filter(|p| p.is_file());
    resolve(&a.common, fallback.as_deref())
}

fn eval(a: &CheckpointArgs) -> Result<(), RtcError> {
    let cfg = checkpoint_config(a)?;
    let ds = experiment::dataset_for(&cfg)?;
    let params = checkpoint::load(&a.checkpoint)?;
    let split = Split::parse(&a.split).expect("clap restricts the split names");
    let s = experiment::run_eval(&cfg, &ds, split, &params, a.common.out.as_deref())?;
    println!("cam_filtered_miou {:.6}", s.cam_filtered.miou);
    println!("cam_unfiltered_miou {:.6}", s.cam_unfiltered.miou);
    println!("mask_miou {:.6}", s.mask.miou);
    Ok(())
}

fn export_cams(a: &CheckpointArgs) -> Result<(), RtcError> {
    let cfg = checkpoint_config(a)?;
    let ds = experiment::dataset_for(&cfg)?;
    let params = checkpoint::load(&a.checkpoint)?;
    let split = Split::parse(&a.split).expect("clap restricts the split names");
    let out = a.common.out.clone().unwrap_or_else(|| PathBuf::from("cams"));
    let files = experiment::export_cams(&cfg, &params, split.samples(&ds), &out)?;
    println!("exported {} images to {}", files.len(), out.display());
    Ok(())
}

/// Returns whether every term passed.
fn grad_check(c: &Common) -> Result<bool, RtcError> {
    let cfg = resolve(c, None)?;
    let opts = GradCheckOptions {
        seed: cfg.train.seed,
        ..GradCheckOptions::default()
    };
    let report = gradcheck::run_default(&cfg.train, &cfg.switches(), cfg.run.classes, &opts)?;
    println!("{:<9} {:>12} {:>8}  worst parameter", "term", "rel_error", "checked");
    for t in &report.terms {
        println!(
            "{:<9} {:>12.3e} {:>8}  {}",
            t.term, t.worst_rel_error, t.checked, t.worst_param
        );
    }
    println!(
        "skipped {} coordinates near kinks; tolerance {:e}",
        report.skipped_near_kinks, report.tolerance
    );
    if let Some(out) = &c.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(
            out.join("grad_check.json"),
            serde_json::to_string_pretty(&report)? + "\n",
        )?;
    }
    let passed = report.passed();
    println!("{}", if passed { "PASS" } else { "FAIL" });
    Ok(passed)
}

fn ablate(a: &AblateArgs) -> Result<(), RtcError> {
    let mut cfg = resolve(&a.common, None)?;
    if let Some(seed) = a.common.seed {
        cfg.run.ablation_seeds = vec![seed];
    }
    let threads = threads()?;
    let ds = experiment::dataset_for(&cfg)?;
    let out = PathBuf::from(&cfg.run.out_dir);
    let report = experiment::run_ablation(&cfg, &ds, a.compare, threads, Some(&out), |m| eprintln!("{m}"))?;
    print!("{}", experiment::report_text(&report));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(c) => train(c),
        Command::Eval(a) => eval(a),
        Command::ExportCams(a) => export_cams(a),
        Command::GradCheck(c) => match grad_check(c) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(3),
            Err(e) => Err(e),
        },
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
