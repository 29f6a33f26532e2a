use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use orbpred::chem::{Family, Geometry};
use orbpred::datagen::{generate_dataset, min_weight_matching, read_dataset, DatasetSpec};
use orbpred::model::Checkpoint;
use orbpred::pipeline::{
    curve_csv, energy_curve, evaluate, parse_grid, predict_orbitals, resume_training, timing_comparison, train,
    warm_start_eval, CurveMode, TrainConfig,
};

#[derive(Parser)]
#[command(name = "orbpred", version, about = "Predict optimized pair-ansatz orbitals for hydrogen clusters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample geometries and write orbital-optimized reference records (JSONL).
    Generate {
        #[arg(long, value_parser = parse_family)]
        family: Family,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue the run already in --out up to the configured epochs.
        #[arg(long)]
        resume: bool,
    },
    /// Predict the orbital rotation for one geometry (JSON with `coords`).
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        geometry: PathBuf,
    },
    /// Energy errors of predicted orbitals on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Per-record CSV; a per-size summary goes to stdout.
        #[arg(long)]
        report: PathBuf,
        /// Also compare one warm-start step from the prediction and from the Givens guess.
        #[arg(long)]
        warm: bool,
        /// Time prediction against full optimization on the first K records.
        #[arg(long, value_name = "K")]
        timing: Option<usize>,
    },
    /// Potential energy curve along a structured family.
    Curve {
        #[arg(long, value_parser = parse_family)]
        family: Family,
        #[arg(long)]
        n: usize,
        /// `start:end:steps`, in Å.
        #[arg(long)]
        grid: String,
        /// Without a checkpoint only the reference curve is computed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_family(s: &str) -> Result<Family, String> {
    s.parse().map_err(|e: orbpred::Error| e.to_string())
}

#[derive(Deserialize)]
struct GeometryInput {
    coords: Vec<[f64; 3]>,
    #[serde(default)]
    elements: Option<Vec<String>>,
}

#[derive(Serialize)]
struct PredictOutput {
    n_atoms: usize,
    matching: Vec<(usize, usize)>,
    a_upper: Vec<f64>,
    m_pred: Vec<Vec<f64>>,
    seconds: f64,
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { family, n, count, seed, out } => {
            let spec = DatasetSpec { family, n, count, seed };
            let summary = generate_dataset(&spec, &out)?;
            eprintln!(
                "wrote {} records to {} ({} rejected attempts)",
                summary.written,
                out.display(),
                summary.rejected
            );
        }
        Command::Train { config, out, resume } => {
            let cfg = TrainConfig::load(&config)?;
            let outcome = if resume { resume_training(&cfg, &out)? } else { train(&cfg, &out)? };
            if let Some(last) = outcome.history.last() {
                eprintln!(
                    "epoch {}: train loss {:.6}, best epoch {}",
                    last.epoch, last.train.total, outcome.best_epoch
                );
            }
        }
        Command::Predict { checkpoint, geometry } => {
            let ck = load_checkpoint(&checkpoint)?;
            let text = std::fs::read_to_string(&geometry)
                .with_context(|| format!("reading {}", geometry.display()))?;
            let input: GeometryInput =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", geometry.display()))?;
            let mut geom = Geometry::hydrogen(input.coords);
            if let Some(elements) = input.elements {
                geom.elements = elements;
            }
            geom.validate()?;
            let matching = min_weight_matching(&geom)?;
            let pred = predict_orbitals(&ck, &geom, &matching)?;
            let m = pred.m_pred.matrix();
            let out = PredictOutput {
                n_atoms: geom.n_atoms(),
                matching: matching.edges().to_vec(),
                a_upper: pred.a_upper.values().to_vec(),
                m_pred: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
                seconds: pred.seconds,
            };
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Eval { checkpoint, dataset, report, warm, timing } => {
            let ck = load_checkpoint(&checkpoint)?;
            let records = read_dataset(&dataset)?;
            let mut rep = evaluate(&ck, &records)?;
            if warm {
                rep.warm = Some(warm_start_eval(&ck, &records)?);
            }
            if let Some(k) = timing {
                if k == 0 {
                    bail!("--timing needs at least one record");
                }
                rep.timing = Some(timing_comparison(&ck, &records[..k.min(records.len())])?);
            }
            write(&report, &rep.to_csv())?;
            print!("{}", rep.summary_csv());
            if let Some(w) = &rep.warm {
                println!(
                    "warm start: prediction not worse on {:.1}% of records, mean improvement {:.6} Ha",
                    100.0 * w.fraction_pred_not_worse,
                    w.mean_improvement
                );
            }
            if let Some(t) = &rep.timing {
                println!(
                    "timing over {} records: predict {:.3} ms, optimize {:.1} ms ({:.0}x)",
                    t.records,
                    1e3 * t.mean_predict_seconds,
                    1e3 * t.mean_optimize_seconds,
                    t.speedup()
                );
            }
        }
        Command::Curve { family, n, grid, checkpoint, out } => {
            let grid = parse_grid(&grid)?;
            let ck = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let modes: &[CurveMode] = if ck.is_some() {
                &[CurveMode::Reference, CurveMode::Predicted, CurveMode::Warm]
            } else {
                &[CurveMode::Reference]
            };
            let rows = energy_curve(family, n, &grid, modes, ck.as_ref())?;
            write(&out, &curve_csv(&rows))?;
            eprintln!("wrote {} points to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
