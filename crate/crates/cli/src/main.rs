//! `transfusion`: dataset generation, training, evaluation, verification,
//! ablation sweeps, and attention export for the two-view segmentation
//! toolkit. Exit codes: 0 success, 1 validation error, 2 runtime failure,
//! 3 verification failure.

mod attn;
mod configs;
mod render;
mod run;

use std::collections::BTreeMap;
use std::env;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use transfusion_core::checkpoint::{self, Checkpoint};
use transfusion_core::network::ModelConfig;
use transfusion_core::synthdata::make_dataset_slice;
use transfusion_core::verify;

use crate::run::RunSpec;

#[derive(Debug)]
pub enum CmdError {
    Validation(String),
    Runtime(String),
}

impl CmdError {
    pub fn validation(msg: impl Into<String>) -> CmdError {
        CmdError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> CmdError {
        CmdError::Runtime(msg.into())
    }
}

#[derive(Parser)]
#[command(name = "transfusion", version, about = "Two-view segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset with train/ and test/ splits.
    GenData(GenDataArgs),
    /// Train a model; writes checkpoints, metrics, and a run manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split (Dice and Hausdorff).
    Eval(EvalArgs),
    /// Run the built-in verification suites.
    Verify(VerifyArgs),
    /// Sweep cross-view fusion levels across seeds; emits CSV and a plot.
    AblateDifa(AblateArgs),
    /// Export cross-view attention maps for one sample.
    DumpAttention(DumpArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Phantom spec JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the spec's training sample count.
    #[arg(long)]
    n_train: Option<usize>,
    /// Override the spec's test sample count.
    #[arg(long)]
    n_test: Option<usize>,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory holding train/ and test/.
    #[arg(long)]
    data: PathBuf,
    /// Model config JSON.
    #[arg(long)]
    model: PathBuf,
    /// Training profile JSON.
    #[arg(long = "train")]
    train_cfg: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this run's ckpt_last.
    #[arg(long)]
    resume: bool,
    /// Overwrite an existing non-empty run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding model.json and checkpoints.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory holding the split.
    #[arg(long)]
    data: PathBuf,
    /// Dataset split to evaluate.
    #[arg(long, default_value = "test")]
    split: String,
    /// Checkpoint to load: best or last.
    #[arg(long, default_value = "best")]
    which: String,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run a single suite instead of all of them.
    #[arg(long)]
    suite: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset directory holding train/ and test/.
    #[arg(long)]
    data: PathBuf,
    /// Base model config JSON; fusion levels are overridden per set.
    #[arg(long)]
    model: PathBuf,
    /// Training profile JSON; the seed varies per repetition.
    #[arg(long = "train")]
    train_cfg: PathBuf,
    /// Output directory for the sweep.
    #[arg(long)]
    out: PathBuf,
    /// Semicolon-separated fusion level sets, e.g. ";5;45;345" (empty = none).
    #[arg(long)]
    levels_sets: String,
    /// Training repetitions per level set.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DumpArgs {
    /// Run directory holding model.json and checkpoints.
    #[arg(long)]
    ckpt: PathBuf,
    /// Phantom sample seed to render.
    #[arg(long)]
    sample: u64,
    /// Pyramid level whose cross-view attention to export.
    #[arg(long)]
    level: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to load: best or last.
    #[arg(long, default_value = "best")]
    which: String,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = setup_threads() {
        return report(e);
    }
    let invocation = env::args().skip(1).collect::<Vec<_>>().join(" ");
    match dispatch(cli, &invocation) {
        Ok(code) => code,
        Err(e) => report(e),
    }
}

fn report(e: CmdError) -> ExitCode {
    match e {
        CmdError::Validation(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        CmdError::Runtime(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn setup_threads() -> Result<(), CmdError> {
    let Ok(raw) = env::var("TRANSFUSION_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            CmdError::validation(format!("TRANSFUSION_THREADS={raw:?} is not a positive thread count"))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CmdError::runtime(format!("thread pool: {e}")))
}

fn dispatch(cli: Cli, invocation: &str) -> Result<ExitCode, CmdError> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args, invocation),
        Command::Eval(args) => cmd_eval(args),
        Command::Verify(args) => cmd_verify(args),
        Command::AblateDifa(args) => cmd_ablate(args, invocation),
        Command::DumpAttention(args) => cmd_dump(args),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<ExitCode, CmdError> {
    let spec = configs::load_phantom(&args.spec)?;
    let n_train = args.n_train.unwrap_or(spec.n_train);
    let n_test = args.n_test.unwrap_or(spec.n_test);
    let seed = args.seed.unwrap_or(spec.seed);
    if n_train == 0 || n_test == 0 {
        return Err(CmdError::validation("sample counts must be positive"));
    }
    run::prepare_dir(&args.out, args.force)?;
    let train = make_dataset_slice::<f32>(&args.out.join("train"), 0, n_train, seed)
        .map_err(|e| CmdError::runtime(e.to_string()))?;
    let test = make_dataset_slice::<f32>(&args.out.join("test"), n_train, n_test, seed)
        .map_err(|e| CmdError::runtime(e.to_string()))?;
    println!("train: {} samples, sha256 {}", train.n, train.sha256);
    println!("test: {} samples, sha256 {}", test.n, test.sha256);
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs, invocation: &str) -> Result<ExitCode, CmdError> {
    let model_cfg = configs::load_model(&args.model)?;
    let train_file = configs::load_train(&args.train_cfg)?;
    let data = run::load_data(&args.data)?;
    if args.resume {
        if !args.out.join("ckpt_last").exists() {
            return Err(CmdError::validation(format!(
                "--resume: {} has no ckpt_last",
                args.out.display()
            )));
        }
    } else {
        run::prepare_dir(&args.out, args.force)?;
    }
    let spec = RunSpec {
        model_cfg: &model_cfg,
        train_file: &train_file,
        seed: None,
        command: invocation.to_string(),
        config_paths: vec![path_string(&args.model), path_string(&args.train_cfg)],
        resume: args.resume,
        quiet: false,
    };
    let outcome = run::train_run(&spec, &data, &args.out)?;
    println!(
        "best epoch {}: mean test dice {:.4}",
        outcome.best_epoch, outcome.best_mean
    );
    Ok(ExitCode::SUCCESS)
}

fn load_run_dir(dir: &Path, which: &str) -> Result<(ModelConfig, Checkpoint<f32>), CmdError> {
    if which != "best" && which != "last" {
        return Err(CmdError::validation(format!(
            "--which must be best or last, got {which:?}"
        )));
    }
    let model_cfg = configs::load_model(&dir.join("model.json"))?;
    let ck = checkpoint::load::<f32>(&dir.join(format!("ckpt_{which}")))
        .map_err(|e| CmdError::validation(e.to_string()))?;
    Ok((model_cfg, ck))
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode, CmdError> {
    let (model_cfg, ck) = load_run_dir(&args.ckpt, &args.which)?;
    let (ds, samples) = run::open_split(&args.data, &args.split)?;
    let rows = run::evaluate_split(&model_cfg, &ck.params, &ds, &samples)?;
    print!("{}", run::format_eval_table(&rows));
    let mut jsonl = String::new();
    for row in &rows {
        jsonl.push_str(&serde_json::to_string(row).map_err(|e| CmdError::runtime(e.to_string()))?);
        jsonl.push('\n');
    }
    let out = args.ckpt.join(format!("eval_{}.jsonl", args.split));
    std::fs::write(&out, jsonl).map_err(|e| CmdError::runtime(format!("{}: {e}", out.display())))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode, CmdError> {
    let reports = match args.suite {
        Some(name) => {
            vec![verify::run_suite(&name).map_err(|e| CmdError::validation(e.to_string()))?]
        }
        None => verify::run_all().map_err(|e| CmdError::runtime(e.to_string()))?,
    };
    let mut all_passed = true;
    for r in &reports {
        let line = serde_json::json!({
            "suite": r.name,
            "cases": r.cases,
            "passed": r.passed(),
            "failures": r.failures,
        });
        println!("{line}");
        eprintln!("{}", r.summary_line());
        all_passed &= r.passed();
    }
    Ok(if all_passed { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

fn parse_level_sets(raw: &str, max_level: usize) -> Result<Vec<(String, Vec<usize>)>, CmdError> {
    let mut sets = Vec::new();
    for part in raw.split(';') {
        let label = part.trim().to_string();
        let mut levels = Vec::new();
        for c in label.chars() {
            let lv = c
                .to_digit(10)
                .map(|d| d as usize)
                .filter(|&d| (3..=max_level).contains(&d))
                .ok_or_else(|| {
                    CmdError::validation(format!(
                        "level set {label:?}: {c:?} is not a level in 3..={max_level}"
                    ))
                })?;
            if levels.last().is_some_and(|&prev| prev >= lv) {
                return Err(CmdError::validation(format!(
                    "level set {label:?} must list levels in ascending order"
                )));
            }
            levels.push(lv);
        }
        if sets.iter().any(|(l, _)| *l == label) {
            return Err(CmdError::validation(format!("duplicate level set {label:?}")));
        }
        sets.push((label, levels));
    }
    Ok(sets)
}

fn cmd_ablate(args: AblateArgs, invocation: &str) -> Result<ExitCode, CmdError> {
    let model_cfg = configs::load_model(&args.model)?;
    let train_file = configs::load_train(&args.train_cfg)?;
    if args.seeds == 0 {
        return Err(CmdError::validation("--seeds must be positive"));
    }
    let sets = parse_level_sets(&args.levels_sets, model_cfg.levels)?;
    let data = run::load_data(&args.data)?;
    run::prepare_dir(&args.out, args.force)?;
    let started = run::unix_now();

    let view_names: Vec<String> = model_cfg.views.iter().map(|v| v.name.clone()).collect();
    let mut csv = String::from("level_set,seed");
    for name in &view_names {
        csv.push_str(&format!(",avg_dice_{name}"));
    }
    csv.push('\n');

    let mut by_set: Vec<(String, Vec<BTreeMap<String, f64>>)> = Vec::new();
    for (label, levels) in &sets {
        let cfg = model_cfg.with_cross_view_levels(levels);
        let dir_label = if label.is_empty() { "none" } else { label };
        let mut runs = Vec::new();
        for rep in 0..args.seeds {
            let seed = train_file.seed + rep as u64;
            let sub = args.out.join(format!("run-{dir_label}-seed{rep}"));
            run::prepare_dir(&sub, false)?;
            let spec = RunSpec {
                model_cfg: &cfg,
                train_file: &train_file,
                seed: Some(seed),
                command: invocation.to_string(),
                config_paths: vec![path_string(&args.model), path_string(&args.train_cfg)],
                resume: false,
                quiet: true,
            };
            let outcome = run::train_run(&spec, &data, &sub)?;
            csv.push_str(&format!("{label},{rep}"));
            for name in &view_names {
                csv.push_str(&format!(",{:.6}", outcome.best_by_view[name]));
            }
            csv.push('\n');
            eprintln!(
                "set {:?} seed {rep}: mean test dice {:.4}",
                label, outcome.best_mean
            );
            runs.push(outcome.best_by_view);
        }
        by_set.push((label.clone(), runs));
    }

    let csv_path = args.out.join("ablation.csv");
    std::fs::write(&csv_path, &csv)
        .map_err(|e| CmdError::runtime(format!("{}: {e}", csv_path.display())))?;

    let categories: Vec<String> = by_set
        .iter()
        .map(|(label, _)| if label.is_empty() { "none".to_string() } else { label.clone() })
        .collect();
    let palette = [
        image::Rgb([214u8, 69, 65]),
        image::Rgb([31u8, 119, 180]),
        image::Rgb([44u8, 140, 60]),
        image::Rgb([148u8, 103, 189]),
    ];
    let series: Vec<render::Series> = view_names
        .iter()
        .enumerate()
        .map(|(vi, name)| {
            let points = by_set
                .iter()
                .map(|(_, runs)| {
                    let vals: Vec<f64> = runs.iter().map(|r| r[name]).collect();
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    let var =
                        vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
                    (mean, var.sqrt())
                })
                .collect();
            render::Series {
                name: name.clone(),
                color: palette[vi % palette.len()],
                points,
            }
        })
        .collect();
    render::category_plot(
        &args.out.join("ablation.png"),
        "fusion level ablation",
        "fused levels",
        "mean foreground dice",
        &categories,
        &series,
    )?;

    let manifest = run::RunManifest {
        schema: run::MANIFEST_SCHEMA.to_string(),
        command: invocation.to_string(),
        configs: vec![path_string(&args.model), path_string(&args.train_cfg)],
        dataset_sha256: data.sha256.clone(),
        code_version: run::code_version(),
        started_unix: started,
        finished_unix: run::unix_now(),
    };
    run::write_json(&args.out.join("manifest.json"), &manifest)?;

    for (i, (label, runs)) in by_set.iter().enumerate() {
        let means: Vec<f64> = runs
            .iter()
            .map(|r| r.values().sum::<f64>() / r.len() as f64)
            .collect();
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        println!("{}: mean dice {:.4} over {} seeds", categories[i], mean, means.len());
        let _ = label;
    }
    println!("wrote {} and ablation.png", csv_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_dump(args: DumpArgs) -> Result<ExitCode, CmdError> {
    let (model_cfg, ck) = load_run_dir(&args.ckpt, &args.which)?;
    run::prepare_dir(&args.out, args.force)?;
    attn::dump_attention(&model_cfg, &ck.params, args.sample, args.level, &args.out)?;
    println!("wrote {}", args.out.join("index.json").display());
    Ok(ExitCode::SUCCESS)
}

fn path_string(path: &Path) -> String {
    path.display().to_string()
}
