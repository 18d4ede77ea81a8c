//! Command-line front end. Every command returns what it printed so tests
//! can drive it in-process; `main` only maps errors to exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::conditioning::TreatmentCode;
use crate::data::{
    generate_synthetic, normalize, read_dataset, read_volume, write_dataset, SyntheticConfig,
    VolumeSample,
};
use crate::error::{Error, Result};
use crate::gradsuite::run_suite;
use crate::model::{clamp_days, Fusion, SurvivalNet, SurvivalNetConfig};
use crate::tensor::gradcheck::GradCheckOptions;
use crate::tensor::Tensor;
use crate::training::{cross_validate, load_checkpoint, run_ablation, save_checkpoint, TrainConfig};

/// Config file layout: one section per component, every key optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfigFile {
    pub synthetic: SyntheticConfig,
    pub model: SurvivalNetConfig,
    pub train: TrainConfig,
}

impl CliConfigFile {
    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.synthetic.validate()?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(name = "treatsurv", version, about = "Treatment-conditioned survival regression on 3D volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom dataset.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate one fusion mode; writes fold checkpoints and a report.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        fusion: Fusion,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate all three fusion modes over a list of seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds, e.g. 0,1,2,3,4.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict survival days for one volume under one treatment.
    Predict {
        #[command(flatten)]
        query: Query,
        #[arg(long)]
        treatment: TreatmentCode,
    },
    /// Predict under every treatment and rank them.
    Compare {
        #[command(flatten)]
        query: Query,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(Debug, Args)]
pub struct Query {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub volume: PathBuf,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

/// Text for stdout and stderr, and whether the command reported failure.
#[derive(Debug, Default)]
pub struct Outcome {
    pub stdout: String,
    pub stderr: String,
    pub failed: bool,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Generate { config, out } => generate(config.as_deref(), &out),
        Command::Train {
            data,
            config,
            fusion,
            out,
        } => train(&data, config.as_deref(), fusion, &out),
        Command::Ablate {
            data,
            config,
            seeds,
            out,
        } => ablate(&data, config.as_deref(), &seeds, &out),
        Command::Predict { query, treatment } => predict(&query, treatment),
        Command::Compare { query } => compare(&query),
        Command::Gradcheck { seed, tol } => gradcheck(seed, tol),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn generate(config: Option<&Path>, out: &Path) -> Result<Outcome> {
    let cfg = CliConfigFile::load(config)?;
    let samples = generate_synthetic(&cfg.synthetic)?;
    write_dataset(&samples, out)?;
    write_json(&out.join("config.json"), &json!({ "config": cfg }))?;
    let mut counts = [0usize; 3];
    for s in &samples {
        counts[s.treatment.index()] += 1;
    }
    let stdout = format!(
        "subjects: {}\ntreatments: GTR {}, STR {}, NA {}\n",
        samples.len(),
        counts[0],
        counts[1],
        counts[2]
    );
    Ok(Outcome {
        stdout,
        ..Outcome::default()
    })
}

fn train(data: &Path, config: Option<&Path>, fusion: Fusion, out: &Path) -> Result<Outcome> {
    let mut cfg = CliConfigFile::load(config)?;
    cfg.model.fusion = fusion;
    let samples = read_dataset(data)?;
    create_dir(out)?;
    let report = cross_validate(&samples, &cfg.model, &cfg.train, |fold, trainer| {
        save_checkpoint(trainer, &out.join(format!("fold{fold}.ckpt")))
    })?;
    write_json(&out.join("report.json"), &json!({ "config": cfg, "report": report }))?;
    Ok(Outcome {
        stdout: format!("fusion: {fusion}\n{}\n", report.summary()),
        ..Outcome::default()
    })
}

fn ablate(data: &Path, config: Option<&Path>, seeds: &[u64], out: &Path) -> Result<Outcome> {
    let cfg = CliConfigFile::load(config)?;
    let samples = read_dataset(data)?;
    let report = run_ablation(&samples, &cfg.model, &cfg.train, seeds)?;
    create_dir(out)?;
    write_json(&out.join("ablation.json"), &json!({ "config": cfg, "report": report }))?;
    let table = report.table();
    fs::write(out.join("ablation.txt"), &table).map_err(|e| Error::io(out.join("ablation.txt"), e))?;
    Ok(Outcome {
        stdout: table,
        ..Outcome::default()
    })
}

/// Normalizes a raw `[C, D, H, W]` volume the way training does and predicts
/// raw days under each of `treatments`.
pub fn predict_volume(net: &SurvivalNet, volume: &Tensor, treatments: &[TreatmentCode]) -> Result<Vec<f64>> {
    let expected = net.config().in_channels;
    if volume.ndim() != 4 || volume.shape()[0] != expected {
        return Err(Error::Shape(format!(
            "volume {:?} does not match the model's {expected} input channels",
            volume.shape()
        )));
    }
    // Only the volume matters to normalization; the label fields are inert.
    let sample = normalize(&VolumeSample {
        subject_id: "query".into(),
        volume: volume.clone(),
        treatment: TreatmentCode::NA,
        survival_days: 0.0,
    })?;
    let x = Tensor::stack(&[&sample.volume])?;
    treatments
        .iter()
        .map(|&t| Ok(net.predict(&x, &[t])?[0]))
        .collect()
}

fn load_query(query: &Query) -> Result<(SurvivalNet, Tensor)> {
    let trainer = load_checkpoint(&query.checkpoint)?;
    let volume = read_volume(&query.volume)?;
    Ok((trainer.net, volume))
}

fn predict(query: &Query, treatment: TreatmentCode) -> Result<Outcome> {
    let (net, volume) = load_query(query)?;
    let raw = predict_volume(&net, &volume, &[treatment])?[0];
    let clamped = clamp_days(raw);
    let stdout = if query.json {
        let v = json!({
            "treatment": treatment,
            "raw_days": raw,
            "clamped_days": clamped,
            "config": { "model": net.config() },
        });
        format!("{v}\n")
    } else {
        format!("treatment {treatment}: {raw:.3} days raw, {clamped:.3} days clamped\n")
    };
    Ok(Outcome {
        stdout,
        ..Outcome::default()
    })
}

/// One line of a treatment comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub treatment: TreatmentCode,
    pub raw_days: f64,
    pub clamped_days: f64,
    pub best: bool,
}

/// Predictions under every treatment, longest survival first; ties keep the
/// order GTR, STR, NA. Without treatment fusion nothing is flagged as best.
pub fn compare_rows(net: &SurvivalNet, volume: &Tensor) -> Result<Vec<CompareRow>> {
    let preds = predict_volume(net, volume, &TreatmentCode::ALL)?;
    let mut rows: Vec<CompareRow> = TreatmentCode::ALL
        .iter()
        .zip(preds)
        .map(|(&treatment, raw_days)| CompareRow {
            treatment,
            raw_days,
            clamped_days: clamp_days(raw_days),
            best: false,
        })
        .collect();
    rows.sort_by(|a, b| b.raw_days.total_cmp(&a.raw_days));
    if net.fusion() != Fusion::None {
        rows[0].best = true;
    }
    Ok(rows)
}

fn compare(query: &Query) -> Result<Outcome> {
    let (net, volume) = load_query(query)?;
    let rows = compare_rows(&net, &volume)?;
    let stderr = if net.fusion() == Fusion::None {
        "warning: checkpoint was trained without treatment fusion; all treatments predict the same survival\n".to_string()
    } else {
        String::new()
    };
    let stdout = if query.json {
        let v = json!({ "rows": rows, "config": { "model": net.config() } });
        format!("{v}\n")
    } else {
        let mut s = String::from("treatment | raw days | clamped days\n");
        for r in &rows {
            s.push_str(&format!(
                "{:<9} | {:>8.3} | {:>8.3}{}\n",
                r.treatment.to_string(),
                r.raw_days,
                r.clamped_days,
                if r.best { "  <- best" } else { "" }
            ));
        }
        s
    };
    Ok(Outcome {
        stdout,
        stderr,
        failed: false,
    })
}

fn gradcheck(seed: u64, tol: f64) -> Result<Outcome> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tol must be positive, got {tol}")));
    }
    let opts = GradCheckOptions {
        tol,
        ..GradCheckOptions::default()
    };
    let reports = run_suite(seed, &opts)?;
    let mut stdout = String::new();
    let mut failed = false;
    for r in &reports {
        let ok = r.passed();
        failed |= !ok;
        stdout.push_str(&format!(
            "{:<16} max rel error {:.3e}  {}\n",
            r.name,
            r.max_rel_error(),
            if ok { "ok" } else { "FAIL" }
        ));
    }
    let passed = reports.iter().filter(|r| r.passed()).count();
    stdout.push_str(&format!("{passed}/{} checks passed at tol {tol:e}\n", reports.len()));
    Ok(Outcome {
        stdout,
        stderr: String::new(),
        failed,
    })
}
