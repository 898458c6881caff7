//! Run directories: the training driver shared by `train` and `ablate-difa`,
//! split evaluation with Dice and Hausdorff aggregation, and the manifest
//! every run directory carries.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use transfusion_core::checkpoint::{self, Checkpoint};
use transfusion_core::network::{ModelConfig, TransFusionModel};
use transfusion_core::objectives;
use transfusion_core::params::ParamStore;
use transfusion_core::synthdata::{Dataset, SampleBundle};
use transfusion_core::trainer::{self, MetricsRecord, Trainer};

use crate::configs::TrainFile;
use crate::CmdError;

pub const MANIFEST_SCHEMA: &str = "run-manifest/1";
pub const BEST_SCHEMA: &str = "best-checkpoint/1";

/// Written once per run directory when the command completes.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema: String,
    pub command: String,
    pub configs: Vec<String>,
    pub dataset_sha256: BTreeMap<String, String>,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

/// Content hash of the build's version string; ties artifacts to a release.
pub fn code_version() -> String {
    let digest = Sha256::digest(env!("CARGO_PKG_VERSION").as_bytes());
    format!("{digest:x}")
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BestRecord {
    pub schema: String,
    pub epoch: usize,
    pub mean_dice: f64,
}

/// A dataset root holding `train/` and `test/` splits.
pub struct LoadedData {
    pub train: Vec<SampleBundle<f32>>,
    pub test: Vec<SampleBundle<f32>>,
    pub sha256: BTreeMap<String, String>,
}

pub fn open_split(root: &Path, split: &str) -> Result<(Dataset, Vec<SampleBundle<f32>>), CmdError> {
    let dir = root.join(split);
    let ds = Dataset::open(&dir)
        .map_err(|e| CmdError::validation(format!("dataset split {}: {e}", dir.display())))?;
    let samples = ds
        .load_all::<f32>()
        .map_err(|e| CmdError::runtime(format!("dataset split {}: {e}", dir.display())))?;
    Ok((ds, samples))
}

pub fn load_data(root: &Path) -> Result<LoadedData, CmdError> {
    let (train_ds, train) = open_split(root, "train")?;
    let (test_ds, test) = open_split(root, "test")?;
    let mut sha256 = BTreeMap::new();
    sha256.insert("train".to_string(), train_ds.meta.sha256.clone());
    sha256.insert("test".to_string(), test_ds.meta.sha256.clone());
    Ok(LoadedData { train, test, sha256 })
}

/// Refuses to clobber existing output unless forced.
pub fn prepare_dir(path: &Path, force: bool) -> Result<(), CmdError> {
    if path.exists() {
        let occupied = path
            .read_dir()
            .map_err(|e| CmdError::runtime(format!("{}: {e}", path.display())))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(CmdError::validation(format!(
                "{} exists and is not empty; pass --force to overwrite",
                path.display()
            )));
        }
        fs::remove_dir_all(path)
            .map_err(|e| CmdError::runtime(format!("{}: {e}", path.display())))?;
    }
    fs::create_dir_all(path).map_err(|e| CmdError::runtime(format!("{}: {e}", path.display())))
}

pub struct RunOutcome {
    pub best_epoch: usize,
    pub best_mean: f64,
    /// Mean foreground Dice per view on the test split, from the best epoch.
    pub best_by_view: BTreeMap<String, f64>,
}

pub struct RunSpec<'a> {
    pub model_cfg: &'a ModelConfig,
    pub train_file: &'a TrainFile,
    /// Overrides the profile's seed; ablation sweeps vary this.
    pub seed: Option<u64>,
    pub command: String,
    pub config_paths: Vec<String>,
    pub resume: bool,
    pub quiet: bool,
}

/// Trains into `out`, tracking the best test-split mean Dice. The directory
/// ends up with `model.json`, `train.json`, `metrics.jsonl`, `ckpt_last/`,
/// `ckpt_best/`, `best.json`, and exactly one `manifest.json`.
pub fn train_run(spec: &RunSpec, data: &LoadedData, out: &Path) -> Result<RunOutcome, CmdError> {
    let started = unix_now();
    let model = TransFusionModel::new(spec.model_cfg.clone())
        .map_err(|e| CmdError::validation(e.to_string()))?;
    let mut train_file = spec.train_file.clone();
    if let Some(seed) = spec.seed {
        train_file.seed = seed;
    }
    let cfg = train_file.to_train_config();

    let mut trainer = if spec.resume {
        let ck: Checkpoint<f32> = checkpoint::load(&out.join("ckpt_last"))
            .map_err(|e| CmdError::validation(format!("--resume: {e}")))?;
        Trainer::from_checkpoint(model, cfg, ck).map_err(|e| CmdError::validation(e.to_string()))?
    } else {
        Trainer::new(model, cfg.seed, cfg)
    };

    write_json(&out.join("model.json"), spec.model_cfg)?;
    write_json(&out.join("train.json"), &train_file)?;

    let mut best: Option<BestRecord> = if spec.resume {
        read_json_opt(&out.join("best.json"))?
    } else {
        None
    };
    let mut best_by_view = if spec.resume {
        read_json_opt::<BTreeMap<String, f64>>(&out.join("best_by_view.json"))?.unwrap_or_default()
    } else {
        BTreeMap::new()
    };
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("metrics.jsonl"))
        .map_err(|e| CmdError::runtime(format!("metrics.jsonl: {e}")))?;

    while trainer.epoch < trainer.cfg.epochs {
        let stats = trainer
            .run_epoch(&data.train)
            .map_err(|e| CmdError::runtime(e.to_string()))?;
        let scores = trainer::evaluate(&trainer.model, &trainer.params, &data.test)
            .map_err(|e| CmdError::runtime(e.to_string()))?;
        let mut line = format!(
            "epoch {:>3}  lr {:.6}  loss {:.4}  test dice",
            stats.epoch, stats.lr, stats.mean_loss
        );
        let mut by_view = BTreeMap::new();
        for s in &scores {
            let rec = MetricsRecord::new(stats.epoch, s);
            serde_json::to_writer(&mut metrics, &rec)
                .map_err(|e| CmdError::runtime(format!("metrics.jsonl: {e}")))?;
            metrics
                .write_all(b"\n")
                .map_err(|e| CmdError::runtime(format!("metrics.jsonl: {e}")))?;
            line.push_str(&format!("  {} {:.4}", s.view, s.dice.avg()));
            by_view.insert(s.view.clone(), s.dice.avg());
        }
        let mean = by_view.values().sum::<f64>() / by_view.len() as f64;
        line.push_str(&format!("  mean {mean:.4}"));
        if !spec.quiet {
            println!("{line}");
        }

        save_ckpt(&out.join("ckpt_last"), &trainer)?;
        if best.as_ref().map_or(true, |b| mean > b.mean_dice) {
            best = Some(BestRecord {
                schema: BEST_SCHEMA.to_string(),
                epoch: stats.epoch,
                mean_dice: mean,
            });
            best_by_view = by_view;
            save_ckpt(&out.join("ckpt_best"), &trainer)?;
            write_json(&out.join("best.json"), best.as_ref().unwrap())?;
            write_json(&out.join("best_by_view.json"), &best_by_view)?;
        }
    }

    let best = best.ok_or_else(|| {
        CmdError::validation("training ran zero epochs; lower the checkpoint's epoch or raise epochs".to_string())
    })?;
    let manifest = RunManifest {
        schema: MANIFEST_SCHEMA.to_string(),
        command: spec.command.clone(),
        configs: spec.config_paths.clone(),
        dataset_sha256: data.sha256.clone(),
        code_version: code_version(),
        started_unix: started,
        finished_unix: unix_now(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;

    Ok(RunOutcome {
        best_epoch: best.epoch,
        best_mean: best.mean_dice,
        best_by_view,
    })
}

fn save_ckpt(dir: &Path, trainer: &Trainer<f32>) -> Result<(), CmdError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| CmdError::runtime(format!("{}: {e}", dir.display())))?;
    }
    checkpoint::save(dir, &trainer.checkpoint()).map_err(|e| CmdError::runtime(e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CmdError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CmdError::runtime(format!("{}: {e}", path.display())))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| CmdError::runtime(format!("{}: {e}", path.display())))
}

fn read_json_opt<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>, CmdError> {
    if !path.exists() {
        return Ok(None);
    }
    let bytes =
        fs::read(path).map_err(|e| CmdError::runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map(Some)
        .map_err(|e| CmdError::runtime(format!("{}: {e}", path.display())))
}

/// Per-view test metrics: mean Dice per class and mean symmetric Hausdorff
/// in millimeters over the samples where both masks are nonempty.
#[derive(Clone, Debug, Serialize)]
pub struct EvalRow {
    pub view: String,
    pub n: usize,
    pub dice_lv: f64,
    pub dice_myo: f64,
    pub dice_rv: f64,
    pub dice_avg: f64,
    pub hd_lv: Option<f64>,
    pub hd_myo: Option<f64>,
    pub hd_rv: Option<f64>,
    pub hd_avg: Option<f64>,
}

pub fn evaluate_split(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    ds: &Dataset,
    samples: &[SampleBundle<f32>],
) -> Result<Vec<EvalRow>, CmdError> {
    let model =
        TransFusionModel::new(cfg.clone()).map_err(|e| CmdError::validation(e.to_string()))?;
    if samples.is_empty() {
        return Err(CmdError::validation("evaluation split is empty".to_string()));
    }
    let spacing_of = |name: &str| -> Result<Vec<f64>, CmdError> {
        ds.meta
            .views
            .iter()
            .find(|v| v.name == name)
            .map(|v| v.spacing_mm.clone())
            .ok_or_else(|| CmdError::runtime(format!("dataset meta lacks view {name:?}")))
    };

    struct SampleStats {
        dice: [f64; 3],
        hd: [Option<f64>; 3],
    }
    let per_sample: Vec<Vec<SampleStats>> = samples
        .par_iter()
        .map(|bundle| -> Result<Vec<SampleStats>, CmdError> {
            let preds = trainer::predict_sample(&model, params, bundle)
                .map_err(|e| CmdError::runtime(e.to_string()))?;
            bundle
                .views
                .iter()
                .zip(&preds)
                .map(|(view, pred)| {
                    let spacing = spacing_of(&view.name)?;
                    let shape = view.image.shape();
                    let mut dice = [0.0; 3];
                    let mut hd = [None; 3];
                    for (slot, class) in (1u8..=3).enumerate() {
                        dice[slot] = objectives::dice_score(pred, &view.labels, class);
                        hd[slot] =
                            objectives::hausdorff(pred, &view.labels, shape, &spacing, class);
                    }
                    Ok(SampleStats { dice, hd })
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;

    let views = &samples[0].views;
    let mut rows = Vec::new();
    for (vi, view) in views.iter().enumerate() {
        let n = per_sample.len();
        let mut dice_sum = [0.0f64; 3];
        let mut hd_sum = [0.0f64; 3];
        let mut hd_n = [0usize; 3];
        for stats in &per_sample {
            for slot in 0..3 {
                dice_sum[slot] += stats[vi].dice[slot];
                if let Some(d) = stats[vi].hd[slot] {
                    hd_sum[slot] += d;
                    hd_n[slot] += 1;
                }
            }
        }
        let dice: Vec<f64> = dice_sum.iter().map(|s| s / n as f64).collect();
        let hd: Vec<Option<f64>> = (0..3)
            .map(|slot| (hd_n[slot] > 0).then(|| hd_sum[slot] / hd_n[slot] as f64))
            .collect();
        let hd_avg = hd
            .iter()
            .copied()
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64);
        rows.push(EvalRow {
            view: view.name.clone(),
            n,
            dice_lv: dice[0],
            dice_myo: dice[1],
            dice_rv: dice[2],
            dice_avg: (dice[0] + dice[1] + dice[2]) / 3.0,
            hd_lv: hd[0],
            hd_myo: hd[1],
            hd_rv: hd[2],
            hd_avg,
        });
    }
    Ok(rows)
}

/// Two-block table, one block per target view, Dice and Hausdorff columns.
pub fn format_eval_table(rows: &[EvalRow]) -> String {
    let fmt_opt = |v: Option<f64>| match v {
        Some(x) => format!("{x:>8.4}"),
        None => format!("{:>8}", "n/a"),
    };
    let mut out = String::new();
    for row in rows {
        out.push_str(&format!("view {} (n={})\n", row.view, row.n));
        out.push_str(&format!(
            "  {:<6}{:>8}{:>8}{:>8}{:>8}\n",
            "", "LV", "RV", "Myo", "avg"
        ));
        out.push_str(&format!(
            "  {:<6}{:>8.4}{:>8.4}{:>8.4}{:>8.4}\n",
            "dice", row.dice_lv, row.dice_rv, row.dice_myo, row.dice_avg
        ));
        out.push_str(&format!(
            "  {:<6}{}{}{}{}\n",
            "hd_mm",
            fmt_opt(row.hd_lv),
            fmt_opt(row.hd_rv),
            fmt_opt(row.hd_myo),
            fmt_opt(row.hd_avg)
        ));
    }
    out
}
