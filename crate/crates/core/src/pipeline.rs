//! Training loop, prediction, energy evaluation, warm starts and potential
//! energy curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chem::{Family, Geometry, IntegralSet};
use crate::datagen::{equidistant_geometry, givens_guess, min_weight_matching, read_dataset, DatasetRecord, Matching};
use crate::error::{Error, Result};
use crate::features::{featurize, FeatureGraph};
use crate::linalg::{logm_special_orthogonal, orthogonality_residual, SpecialOrthogonal, UpperTriangular};
use crate::losses::{LossParts, LossWeights, OccupiedSelector};
use crate::model::{
    forward, init_params, model_gradients, model_loss, Adam, AdamState, Checkpoint, ModelConfig, ModelParams,
    Sample, TrainState,
};
use crate::orbital_opt::{energy_with_orbitals, optimize_orbitals, warm_start_step, OrbitalOptResult};

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const CONFIG_FILE: &str = "config.json";
const METRICS_HEADER: &str = "epoch,train_total,train_huber,train_det,train_orb,val_total,val_huber,val_det,val_orb";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub model: ModelConfig,
    /// JSONL datasets, concatenated in order.
    pub datasets: Vec<PathBuf>,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            epochs: 200,
            batch_size: 32,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            datasets: Vec::new(),
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-length schedule (1000 epochs) instead of the desk-scale 200.
    pub fn full_schedule() -> Self {
        TrainConfig {
            epochs: 1000,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid("lr0 must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid("val_fraction must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be ≥ 1"));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: source.line(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// A record turned into network inputs and training targets.
#[derive(Debug, Clone)]
pub struct PreparedRecord {
    pub features: FeatureGraph,
    pub a_ref: Vec<f64>,
    pub m_ref: DMatrix<f64>,
    pub selector: OccupiedSelector,
}

pub fn prepare_record(record: &DatasetRecord, cfg: &ModelConfig) -> Result<PreparedRecord> {
    let features = featurize(&record.geometry, &record.matching, &cfg.feature_config())?;
    let a_ref = logm_special_orthogonal(&record.m_oo)?.upper().into_values();
    Ok(PreparedRecord {
        features,
        a_ref,
        m_ref: record.m_oo.matrix().clone(),
        selector: OccupiedSelector::from_matching(&record.matching),
    })
}

pub fn prepare_records(records: &[DatasetRecord], cfg: &ModelConfig) -> Result<Vec<PreparedRecord>> {
    records.par_iter().map(|r| prepare_record(r, cfg)).collect()
}

/// Seeded split into (train, validation) indices; validation gets
/// `round(fraction·n)` records, at least one and never all.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::invalid("need at least two records to split off validation data"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    idx.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    Ok((idx, val))
}

fn samples<'a>(data: &'a [PreparedRecord], ids: &[usize]) -> Vec<Sample<'a>> {
    ids.iter()
        .map(|&i| {
            let r = &data[i];
            Sample {
                id: i,
                features: &r.features,
                a_ref: &r.a_ref,
                m_ref: &r.m_ref,
                selector: &r.selector,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train: LossParts,
    pub val: Option<LossParts>,
}

impl EpochMetrics {
    fn csv_row(&self) -> String {
        let parts = |p: Option<LossParts>| match p {
            Some(p) => format!("{},{},{},{}", p.total, p.huber, p.det, p.orb),
            None => ",,,".to_string(),
        };
        format!("{},{},{}", self.epoch, parts(Some(self.train)), parts(self.val))
    }

    fn selection_loss(&self) -> f64 {
        self.val.unwrap_or(self.train).total
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in history {
        out.push_str(&m.csv_row());
        out.push('\n');
    }
    out
}

fn parse_parts(cols: &[&str]) -> Result<Option<LossParts>> {
    if cols.iter().all(|c| c.is_empty()) {
        return Ok(None);
    }
    let v: Vec<f64> = cols
        .iter()
        .map(|c| c.parse::<f64>().map_err(|_| Error::Schema(format!("bad metrics value '{c}'"))))
        .collect::<Result<_>>()?;
    Ok(Some(LossParts {
        total: v[0],
        huber: v[1],
        det: v[2],
        orb: v[3],
    }))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Schema("metrics file has an unexpected header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            if cols.len() != 9 {
                return Err(Error::Schema(format!("metrics row '{l}' has {} columns", cols.len())));
            }
            let epoch = cols[0]
                .parse()
                .map_err(|_| Error::Schema(format!("bad epoch '{}'", cols[0])))?;
            Ok(EpochMetrics {
                epoch,
                train: parse_parts(&cols[1..5])?.ok_or_else(|| Error::Schema("missing train loss".into()))?,
                val: parse_parts(&cols[5..9])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub best_params: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Adam training on prepared records. With `out` set, `metrics.csv`,
/// `last.ckpt` and `best.ckpt` are rewritten after every epoch. `resume`
/// continues from a checkpoint carrying optimizer state.
pub fn train_prepared(
    cfg: &TrainConfig,
    data: &[PreparedRecord],
    train_ids: &[usize],
    val_ids: &[usize],
    out: Option<&Path>,
    resume: Option<(Checkpoint, Vec<EpochMetrics>)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ids.is_empty() {
        return Err(Error::invalid("no training records"));
    }
    let adam = Adam {
        lr: cfg.lr0,
        ..Adam::default()
    };
    let (mut params, mut state, mut history, mut best_val) = match resume {
        Some((ck, history)) => {
            if ck.config != cfg.model {
                return Err(Error::invalid("checkpoint model configuration differs from the training config"));
            }
            let t = ck
                .train
                .ok_or_else(|| Error::invalid("checkpoint has no optimizer state to resume from"))?;
            if history.len() != t.epoch {
                return Err(Error::Schema(format!(
                    "metrics log has {} epochs, checkpoint {}",
                    history.len(),
                    t.epoch
                )));
            }
            (ck.params, t.adam_state, history, t.best_val)
        }
        None => (init_params(&cfg.model)?, AdamState::new(&cfg.model), Vec::new(), None),
    };
    let mut best_params = match (out, best_val) {
        (Some(dir), Some(_)) => Checkpoint::load(&dir.join(BEST_CHECKPOINT))?.params,
        _ => params.clone(),
    };
    let mut best_epoch = history
        .iter()
        .filter(|m| Some(m.selection_loss()) == best_val)
        .map(|m| m.epoch)
        .next_back()
        .unwrap_or(0);
    let train_set = samples(data, train_ids);
    let val_set = samples(data, val_ids);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in history.len()..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample<'_>> = chunk.iter().map(|&k| train_set[k]).collect();
            let g = model_gradients(&params, &cfg.model, &batch, &cfg.weights)?;
            adam.step(&mut state, &mut params, &g.grads);
        }
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            train: model_loss(&params, &cfg.model, &train_set, &cfg.weights)?,
            val: if val_set.is_empty() {
                None
            } else {
                Some(model_loss(&params, &cfg.model, &val_set, &cfg.weights)?)
            },
        };
        history.push(metrics);
        let score = metrics.selection_loss();
        let improved = best_val.is_none_or(|b| score < b);
        if improved {
            best_val = Some(score);
            best_params = params.clone();
            best_epoch = epoch + 1;
        }
        if let Some(dir) = out {
            let ck = Checkpoint {
                config: cfg.model,
                params: params.clone(),
                train: Some(TrainState {
                    epoch: epoch + 1,
                    best_val,
                    weights: cfg.weights,
                    adam,
                    adam_state: state.clone(),
                }),
            };
            ck.save(&dir.join(LAST_CHECKPOINT))?;
            if improved {
                ck.save(&dir.join(BEST_CHECKPOINT))?;
            }
            write_file(&dir.join(METRICS_FILE), metrics_csv(&history).as_bytes())?;
        }
    }
    Ok(TrainOutcome {
        params,
        best_params,
        best_epoch,
        history,
    })
}

fn load_training_data(cfg: &TrainConfig) -> Result<Vec<DatasetRecord>> {
    if cfg.datasets.is_empty() {
        return Err(Error::invalid("training config lists no datasets"));
    }
    let mut records = Vec::new();
    for path in &cfg.datasets {
        records.extend(read_dataset(path)?);
    }
    if records.is_empty() {
        return Err(Error::invalid("training datasets are empty"));
    }
    Ok(records)
}

/// Trains from the datasets in `cfg`, writing checkpoints, metrics and a copy
/// of the config into `out_dir`.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let records = load_training_data(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_file(&out_dir.join(CONFIG_FILE), cfg.to_json().as_bytes())?;
    let data = prepare_records(&records, &cfg.model)?;
    let (train_ids, val_ids) = split_indices(data.len(), cfg.val_fraction, cfg.seed)?;
    train_prepared(cfg, &data, &train_ids, &val_ids, Some(out_dir), None)
}

/// Continues a run in `out_dir` up to `cfg.epochs`. Everything except the
/// epoch count must match the original config.
pub fn resume_training(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    let original = TrainConfig::load(&out_dir.join(CONFIG_FILE))?;
    if (TrainConfig { epochs: cfg.epochs, ..original.clone() }) != *cfg {
        return Err(Error::invalid("resume config differs from the original run beyond the epoch count"));
    }
    let ck = Checkpoint::load(&out_dir.join(LAST_CHECKPOINT))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let text = std::fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut history = parse_metrics_csv(&text)?;
    history.truncate(ck.train.as_ref().map_or(0, |t| t.epoch));
    let records = load_training_data(cfg)?;
    let data = prepare_records(&records, &cfg.model)?;
    let (train_ids, val_ids) = split_indices(data.len(), cfg.val_fraction, cfg.seed)?;
    write_file(&out_dir.join(CONFIG_FILE), cfg.to_json().as_bytes())?;
    train_prepared(cfg, &data, &train_ids, &val_ids, Some(out_dir), Some((ck, history)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedOrbitals {
    pub m_pred: SpecialOrthogonal,
    pub a_upper: UpperTriangular,
    /// Featurization plus forward pass.
    pub seconds: f64,
}

pub fn predict_orbitals(ck: &Checkpoint, geom: &Geometry, matching: &Matching) -> Result<PredictedOrbitals> {
    let start = Instant::now();
    let fg = featurize(geom, matching, &ck.config.feature_config())?;
    let pred = forward(&ck.params, &ck.config, &fg)?;
    Ok(PredictedOrbitals {
        m_pred: pred.m_pred,
        a_upper: pred.a_upper,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalRow {
    pub index: usize,
    pub n_atoms: usize,
    pub e_model: f64,
    pub e_spa: f64,
    pub e_init: f64,
    pub orthogonality: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SizeSummary {
    pub n_atoms: usize,
    pub count: usize,
    pub mae_model: f64,
    pub mae_init: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WarmRow {
    pub index: usize,
    pub n_atoms: usize,
    /// Energy at the predicted orbitals before the step.
    pub e_model: f64,
    pub e_warm_pred: f64,
    pub e_warm_givens: f64,
    pub e_spa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WarmReport {
    pub rows: Vec<WarmRow>,
    /// Share of records where the step from the prediction ends at or
    /// below the step from the Givens guess.
    pub fraction_pred_not_worse: f64,
    pub mean_improvement: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingReport {
    pub records: usize,
    pub mean_predict_seconds: f64,
    pub mean_optimize_seconds: f64,
}

impl TimingReport {
    pub fn speedup(&self) -> f64 {
        self.mean_optimize_seconds / self.mean_predict_seconds
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub sizes: Vec<SizeSummary>,
    pub mae_model: f64,
    pub mae_init: f64,
    pub warm: Option<WarmReport>,
    pub timing: Option<TimingReport>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn record_energy(record: &DatasetRecord, m: &SpecialOrthogonal) -> Result<f64> {
    let ints = IntegralSet::native(&record.geometry)?;
    let (_, e) = energy_with_orbitals(&ints, &record.matching.pair_structure(), m)?;
    Ok(e)
}

/// Evaluates orbitals produced by `predict` for every record; the energy is a
/// fresh θ minimization under those orbitals.
pub fn evaluate_with<F>(records: &[DatasetRecord], predict: F) -> Result<EvalReport>
where
    F: Fn(&DatasetRecord) -> Result<SpecialOrthogonal> + Sync,
{
    if records.is_empty() {
        return Err(Error::invalid("no records to evaluate"));
    }
    let rows: Vec<EvalRow> = records
        .par_iter()
        .enumerate()
        .map(|(index, r)| {
            let m = predict(r)?;
            Ok(EvalRow {
                index,
                n_atoms: r.n_atoms(),
                e_model: record_energy(r, &m)?,
                e_spa: r.e_spa,
                e_init: r.e_init,
                orthogonality: orthogonality_residual(m.matrix()),
            })
        })
        .collect::<Result<_>>()?;
    let mut by_size: BTreeMap<usize, Vec<&EvalRow>> = BTreeMap::new();
    for row in &rows {
        by_size.entry(row.n_atoms).or_default().push(row);
    }
    let sizes = by_size
        .into_iter()
        .map(|(n_atoms, group)| SizeSummary {
            n_atoms,
            count: group.len(),
            mae_model: mean(group.iter().map(|r| (r.e_spa - r.e_model).abs())),
            mae_init: mean(group.iter().map(|r| (r.e_spa - r.e_init).abs())),
        })
        .collect();
    Ok(EvalReport {
        mae_model: mean(rows.iter().map(|r| (r.e_spa - r.e_model).abs())),
        mae_init: mean(rows.iter().map(|r| (r.e_spa - r.e_init).abs())),
        rows,
        sizes,
        warm: None,
        timing: None,
    })
}

pub fn evaluate(ck: &Checkpoint, records: &[DatasetRecord]) -> Result<EvalReport> {
    evaluate_with(records, |r| Ok(predict_orbitals(ck, &r.geometry, &r.matching)?.m_pred))
}

/// One outer step; a step that finds no descent keeps the starting point.
fn one_step(ints: &IntegralSet, record: &DatasetRecord, start: &SpecialOrthogonal) -> Result<OrbitalOptResult> {
    match warm_start_step(ints, &record.matching.pair_structure(), start) {
        Err(Error::OrbitalConvergence(r)) => Ok(*r),
        other => other,
    }
}

/// One warm-start step from the orbitals given by `predict` and one from the
/// Givens guess, per record.
pub fn warm_start_eval_with<F>(records: &[DatasetRecord], predict: F) -> Result<WarmReport>
where
    F: Fn(&DatasetRecord) -> Result<SpecialOrthogonal> + Sync,
{
    if records.is_empty() {
        return Err(Error::invalid("no records to evaluate"));
    }
    let rows: Vec<WarmRow> = records
        .par_iter()
        .enumerate()
        .map(|(index, r)| {
            let ints = IntegralSet::native(&r.geometry)?;
            let ps = r.matching.pair_structure();
            let m_pred = predict(r)?;
            let (_, e_model) = energy_with_orbitals(&ints, &ps, &m_pred)?;
            let warm = one_step(&ints, r, &m_pred)?;
            let guess = givens_guess(&r.matching, r.n_atoms())?;
            let cold = one_step(&ints, r, &guess)?;
            Ok(WarmRow {
                index,
                n_atoms: r.n_atoms(),
                e_model,
                e_warm_pred: warm.e_spa,
                e_warm_givens: cold.e_spa,
                e_spa: r.e_spa,
            })
        })
        .collect::<Result<_>>()?;
    let wins = rows.iter().filter(|w| w.e_warm_pred <= w.e_warm_givens).count();
    Ok(WarmReport {
        fraction_pred_not_worse: wins as f64 / rows.len() as f64,
        mean_improvement: mean(rows.iter().map(|w| w.e_model - w.e_warm_pred)),
        rows,
    })
}

pub fn warm_start_eval(ck: &Checkpoint, records: &[DatasetRecord]) -> Result<WarmReport> {
    warm_start_eval_with(records, |r| Ok(predict_orbitals(ck, &r.geometry, &r.matching)?.m_pred))
}

/// Sequential wall-clock comparison of prediction against full orbital
/// optimization from the Givens guess.
pub fn timing_comparison(ck: &Checkpoint, records: &[DatasetRecord]) -> Result<TimingReport> {
    if records.is_empty() {
        return Err(Error::invalid("no records to time"));
    }
    let (mut predict, mut optimize) = (0.0, 0.0);
    for r in records {
        predict += predict_orbitals(ck, &r.geometry, &r.matching)?.seconds;
        let start = Instant::now();
        let ints = IntegralSet::native(&r.geometry)?;
        let guess = givens_guess(&r.matching, r.n_atoms())?;
        match optimize_orbitals(&ints, &r.matching.pair_structure(), &guess) {
            Ok(_) | Err(Error::OrbitalConvergence(_)) => {}
            Err(e) => return Err(e),
        }
        optimize += start.elapsed().as_secs_f64();
    }
    let k = records.len() as f64;
    Ok(TimingReport {
        records: records.len(),
        mean_predict_seconds: predict / k,
        mean_optimize_seconds: optimize / k,
    })
}

impl EvalReport {
    /// Per-record rows; warm-start columns are filled when present.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,n_atoms,e_model,e_spa,e_init,abs_err_model,abs_err_init,orthogonality");
        let warm: BTreeMap<usize, &WarmRow> = self
            .warm
            .iter()
            .flat_map(|w| w.rows.iter().map(|r| (r.index, r)))
            .collect();
        if self.warm.is_some() {
            out.push_str(",e_warm_pred,e_warm_givens");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.index,
                r.n_atoms,
                r.e_model,
                r.e_spa,
                r.e_init,
                (r.e_spa - r.e_model).abs(),
                (r.e_spa - r.e_init).abs(),
                r.orthogonality
            );
            if self.warm.is_some() {
                match warm.get(&r.index) {
                    Some(w) => {
                        let _ = write!(out, ",{},{}", w.e_warm_pred, w.e_warm_givens);
                    }
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("n_atoms,count,mae_model,mae_init\n");
        for s in &self.sizes {
            let _ = writeln!(out, "{},{},{},{}", s.n_atoms, s.count, s.mae_model, s.mae_init);
        }
        let _ = writeln!(out, "all,{},{},{}", self.rows.len(), self.mae_model, self.mae_init);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveMode {
    Reference,
    Predicted,
    Warm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurveRow {
    pub spacing: f64,
    pub e_reference: Option<f64>,
    pub e_predicted: Option<f64>,
    pub e_warm: Option<f64>,
}

/// `steps` evenly spaced values from `a` to `b` inclusive, parsed from
/// `a:b:steps`.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::invalid(format!("grid '{spec}' is not of the form a:b:steps"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let b: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let steps: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if steps == 0 || !(a.is_finite() && b.is_finite()) || (steps > 1 && b <= a) {
        return Err(bad());
    }
    if steps == 1 {
        return Ok(vec![a]);
    }
    Ok((0..steps)
        .map(|k| a + (b - a) * k as f64 / (steps - 1) as f64)
        .collect())
}

/// Energies along a structured family as the spacing varies. Predicted and
/// warm modes need a checkpoint.
pub fn energy_curve(
    family: Family,
    n: usize,
    grid: &[f64],
    modes: &[CurveMode],
    ck: Option<&Checkpoint>,
) -> Result<Vec<CurveRow>> {
    if !matches!(family, Family::LinearEquidistant | Family::Ring) {
        return Err(Error::invalid(format!("energy curves support linear_equidistant and ring, not {family}")));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("spacing grid must be strictly increasing"));
    }
    if let Some(&d) = grid.iter().find(|&&d| !(d > 0.5 && d < 4.0)) {
        return Err(Error::invalid(format!("spacing {d} outside (0.5, 4.0) Å")));
    }
    let wants = |m: CurveMode| modes.contains(&m);
    let needs_model = wants(CurveMode::Predicted) || wants(CurveMode::Warm);
    if needs_model && ck.is_none() {
        return Err(Error::invalid("predicted and warm curves need a checkpoint"));
    }
    grid.par_iter()
        .map(|&spacing| {
            let geom = equidistant_geometry(family, n, spacing)?;
            let matching = min_weight_matching(&geom)?;
            let ps = matching.pair_structure();
            let ints = IntegralSet::native(&geom)?;
            let e_reference = if wants(CurveMode::Reference) {
                let guess = givens_guess(&matching, n)?;
                Some(optimize_orbitals(&ints, &ps, &guess)?.e_spa)
            } else {
                None
            };
            let (mut e_predicted, mut e_warm) = (None, None);
            if let (true, Some(ck)) = (needs_model, ck) {
                let m = predict_orbitals(ck, &geom, &matching)?.m_pred;
                if wants(CurveMode::Predicted) {
                    e_predicted = Some(energy_with_orbitals(&ints, &ps, &m)?.1);
                }
                if wants(CurveMode::Warm) {
                    let step = match warm_start_step(&ints, &ps, &m) {
                        Err(Error::OrbitalConvergence(r)) => *r,
                        other => other?,
                    };
                    e_warm = Some(step.e_spa);
                }
            }
            Ok(CurveRow {
                spacing,
                e_reference,
                e_predicted,
                e_warm,
            })
        })
        .collect()
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("spacing,e_reference,e_predicted,e_warm\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.spacing,
            cell(r.e_reference),
            cell(r.e_predicted),
            cell(r.e_warm)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_records, write_dataset, DatasetSpec};

    fn h4_records(count: usize, seed: u64) -> Vec<DatasetRecord> {
        let spec = DatasetSpec {
            family: Family::Random3d,
            n: 4,
            count,
            seed,
        };
        generate_records(&spec).unwrap().0
    }

    fn tiny_config(datasets: Vec<PathBuf>) -> TrainConfig {
        TrainConfig {
            lr0: 3e-3,
            epochs: 4,
            batch_size: 4,
            model: ModelConfig {
                hidden_dim: 6,
                gnn_layers: 2,
                proj_dim: 4,
                kernel_hidden: 3,
                readout_hidden: 8,
                seed: 5,
                ..ModelConfig::default()
            },
            datasets,
            val_fraction: 0.25,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (t, v) = split_indices(20, 0.1, 3).unwrap();
        assert_eq!((t.len(), v.len()), (18, 2));
        assert_eq!(split_indices(20, 0.1, 3).unwrap(), (t.clone(), v.clone()));
        assert_ne!(split_indices(20, 0.1, 4).unwrap().1, v);
        let mut all: Vec<usize> = t.into_iter().chain(v).collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(split_indices(3, 0.01, 0).unwrap().1.len(), 1);
        assert!(split_indices(1, 0.5, 0).is_err());
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0.6:2.0:15").unwrap();
        assert_eq!(g.len(), 15);
        assert_eq!((g[0], g[14]), (0.6, 2.0));
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(parse_grid("1.5:1.5:1").unwrap(), vec![1.5]);
        for bad in ["1:2", "2:1:3", "a:2:3", "1:2:0"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn config_json_uses_field_names() {
        let cfg = TrainConfig::default();
        let v: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
        for key in ["lr0", "epochs", "batch_size", "weights", "model", "datasets", "val_fraction", "seed"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let partial: TrainConfig = serde_json::from_str(r#"{"epochs": 7}"#).unwrap();
        assert_eq!(partial.epochs, 7);
        assert_eq!(partial.lr0, 1e-4);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 7}"#).is_err());
        assert!(TrainConfig { val_fraction: 1.0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { lr0: 0.0, ..cfg }.validate().is_err());
        assert_eq!(TrainConfig::full_schedule().epochs, 1000);
    }

    #[test]
    fn metrics_round_trip() {
        let p = LossParts { huber: 0.1, det: 0.2, orb: 1.0 / 3.0, total: 0.4 };
        let h = vec![
            EpochMetrics { epoch: 1, train: p, val: Some(p) },
            EpochMetrics { epoch: 2, train: p, val: None },
        ];
        assert_eq!(parse_metrics_csv(&metrics_csv(&h)).unwrap(), h);
        assert!(parse_metrics_csv("nope\n").is_err());
    }

    #[test]
    fn oracle_injection_reproduces_references() {
        let records = h4_records(6, 40);
        let report = evaluate_with(&records, |r| Ok(r.m_oo.clone())).unwrap();
        assert!(report.mae_model < 1e-8, "{}", report.mae_model);
        for row in &report.rows {
            assert!(row.e_init >= row.e_model - 1e-9);
            assert!(row.e_model >= row.e_spa - 1e-9);
            assert!(row.orthogonality < 1e-12);
        }
        let recomputed = report.rows.iter().map(|r| (r.e_spa - r.e_init).abs()).sum::<f64>() / 6.0;
        assert!((recomputed - report.mae_init).abs() < 1e-12);
        assert_eq!(report.sizes.len(), 1);
        assert_eq!(report.sizes[0].count, 6);
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 7);
        assert!(report.summary_csv().starts_with("n_atoms,count,mae_model,mae_init\n4,6,"));
    }

    #[test]
    fn single_record_mae_is_the_absolute_error() {
        let records = h4_records(1, 77);
        let guess = givens_guess(&records[0].matching, 4).unwrap();
        let report = evaluate_with(&records, |_| Ok(guess.clone())).unwrap();
        let row = report.rows[0];
        assert_eq!(report.mae_model, (row.e_spa - row.e_model).abs());
        assert!((row.e_model - row.e_init).abs() < 1e-12);
    }

    #[test]
    fn warm_start_from_reference_stays_put() {
        let records = h4_records(4, 3);
        let w = warm_start_eval_with(&records, |r| Ok(r.m_oo.clone())).unwrap();
        for row in &w.rows {
            assert!((row.e_warm_pred - row.e_spa).abs() < 1e-6);
            assert!(row.e_warm_pred <= row.e_model);
            assert!(row.e_warm_givens >= row.e_spa - 1e-9);
        }
        assert_eq!(w.fraction_pred_not_worse, 1.0);
    }

    #[test]
    fn curve_rows_follow_the_grid() {
        let grid = parse_grid("0.6:3.0:15").unwrap();
        let rows = energy_curve(Family::LinearEquidistant, 2, &grid, &[CurveMode::Reference], None).unwrap();
        assert_eq!(rows.len(), 15);
        assert!(rows.windows(2).all(|w| w[1].spacing > w[0].spacing));
        assert!(rows.iter().all(|r| r.e_reference.is_some() && r.e_predicted.is_none()));
        let csv = curve_csv(&rows);
        assert_eq!(csv.lines().count(), 16);
        assert!(energy_curve(Family::Random3d, 4, &grid, &[CurveMode::Reference], None).is_err());
        assert!(energy_curve(Family::Ring, 4, &[0.4], &[CurveMode::Reference], None).is_err());
        assert!(energy_curve(Family::Ring, 4, &[1.0], &[CurveMode::Warm], None).is_err());
    }

    #[test]
    fn curve_modes_with_a_model() {
        let cfg = tiny_config(Vec::new());
        let ck = Checkpoint {
            config: cfg.model,
            params: init_params(&cfg.model).unwrap(),
            train: None,
        };
        let modes = [CurveMode::Reference, CurveMode::Predicted, CurveMode::Warm];
        let rows = energy_curve(Family::Ring, 4, &[0.9, 1.4, 2.2], &modes, Some(&ck)).unwrap();
        for r in rows {
            let (re, pr, wa) = (r.e_reference.unwrap(), r.e_predicted.unwrap(), r.e_warm.unwrap());
            assert!(pr >= re - 1e-9);
            assert!(wa <= pr);
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let dir = tempfile::tempdir().unwrap();
        let data_path = dir.path().join("h4.jsonl");
        write_dataset(&data_path, &h4_records(10, 1)).unwrap();
        let cfg = tiny_config(vec![data_path]);

        let full = dir.path().join("full");
        let outcome = train(&cfg, &full).unwrap();
        assert_eq!(outcome.history.len(), 4);
        let again = dir.path().join("again");
        train(&cfg, &again).unwrap();
        for f in [METRICS_FILE, LAST_CHECKPOINT, BEST_CHECKPOINT] {
            assert_eq!(
                std::fs::read(full.join(f)).unwrap(),
                std::fs::read(again.join(f)).unwrap(),
                "{f}"
            );
        }

        let split = dir.path().join("split");
        train(&TrainConfig { epochs: 2, ..cfg.clone() }, &split).unwrap();
        let resumed = resume_training(&cfg, &split).unwrap();
        assert_eq!(resumed.params, outcome.params);
        assert_eq!(resumed.best_epoch, outcome.best_epoch);
        for f in [METRICS_FILE, LAST_CHECKPOINT, BEST_CHECKPOINT] {
            assert_eq!(
                std::fs::read(full.join(f)).unwrap(),
                std::fs::read(split.join(f)).unwrap(),
                "{f}"
            );
        }
        assert!(resume_training(&TrainConfig { seed: 1, ..cfg.clone() }, &split).is_err());

        let ck = Checkpoint::load(&full.join(LAST_CHECKPOINT)).unwrap();
        assert_eq!(ck.params, outcome.params);
        let best = Checkpoint::load(&full.join(BEST_CHECKPOINT)).unwrap();
        assert_eq!(best.params, outcome.best_params);
        let rec = &read_dataset(&cfg.datasets[0]).unwrap()[0];
        let a = predict_orbitals(&ck, &rec.geometry, &rec.matching).unwrap();
        let b = predict_orbitals(&ck, &rec.geometry, &rec.matching).unwrap();
        assert_eq!((a.m_pred.clone(), a.a_upper.clone()), (b.m_pred, b.a_upper));
        assert!(orthogonality_residual(a.m_pred.matrix()) < 1e-10);
    }

    #[test]
    fn training_reduces_loss() {
        let records = h4_records(8, 21);
        let cfg = TrainConfig { epochs: 30, lr0: 1e-2, ..tiny_config(Vec::new()) };
        let data = prepare_records(&records, &cfg.model).unwrap();
        let ids: Vec<usize> = (0..8).collect();
        let out = train_prepared(&cfg, &data, &ids, &[], None, None).unwrap();
        let first = out.history[0].train.total;
        let last = out.history.last().unwrap().train.total;
        assert!(last < 0.5 * first, "{first} -> {last}");
        assert!(out.history.iter().all(|m| m.val.is_none()));
    }
}
