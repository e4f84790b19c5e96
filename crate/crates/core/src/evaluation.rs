//! Robustness reports, a synthetic corruption sweep and per-epoch curves.
//!
//! Reports serialize as JSON lines, one record per row. Field names:
//! `name`, `row` (`standard`, `attack`, `corruption`,
//! `average_excluding_standard` or `average_including_standard`), `accuracy`, `correct`, `n_samples`,
//! `attack`, `threat`, `corruption`, `seed`, `checkpoint`, `max_samples`.
//! The wall-clock timestamp is kept out of the file so identical runs produce
//! identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array4, ArrayD, Axis, Ix4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attacks::{check_budget, run_attack, AttackKind, ThreatModel};
use crate::classifier::{ClassifierModel, TargetSpec};
use crate::data::{write_atomic, TensorDataset};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::real::Real;
use crate::rng::rng_for;
use crate::training::{EpochMetrics, TrainState};

/// Samples per forward or attack call during evaluation.
pub const EVAL_CHUNK: usize = 256;

pub const CURVE_HEADER: [&str; 4] = ["epoch", "train_loss", "std_acc", "robust_acc"];

pub fn predictions<T: Real>(model: &ClassifierModel<T>, x: &ArrayD<T>) -> Result<Vec<usize>> {
    model.check_input(x)?;
    let mut out = Vec::with_capacity(x.shape()[0]);
    for chunk in x.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
        out.extend(model.predict(&chunk.to_owned())?);
    }
    Ok(out)
}

fn count_correct(pred: &[usize], labels: &[usize]) -> usize {
    pred.iter().zip(labels).filter(|(p, y)| p == y).count()
}

pub fn accuracy<T: Real>(model: &ClassifierModel<T>, x: &ArrayD<T>, labels: &[usize]) -> Result<f64> {
    let pred = predictions(model, x)?;
    Ok(count_correct(&pred, labels) as f64 / labels.len().max(1) as f64)
}

/// Predictions on the attacked inputs. Every chunk is checked against the
/// threat model's budget and the pixel range.
pub fn attacked_predictions<T: Real, R: Rng + ?Sized>(
    kind: AttackKind,
    model: &ClassifierModel<T>,
    flow: Option<&FlowModel<T>>,
    x: &ArrayD<T>,
    labels: &[usize],
    threat: &ThreatModel,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(labels.len());
    for (i, chunk) in x.axis_chunks_iter(Axis(0), EVAL_CHUNK).enumerate() {
        let y = &labels[i * EVAL_CHUNK..i * EVAL_CHUNK + chunk.shape()[0]];
        let adv = run_attack(kind, model, flow, &chunk.to_owned(), &TargetSpec::hard(y), threat, rng)?;
        check_budget(&adv, threat)?;
        out.extend(model.predict(&adv.x_adv)?);
    }
    Ok(out)
}

pub fn attacked_accuracy<T: Real, R: Rng + ?Sized>(
    kind: AttackKind,
    model: &ClassifierModel<T>,
    flow: Option<&FlowModel<T>>,
    x: &ArrayD<T>,
    labels: &[usize],
    threat: &ThreatModel,
    rng: &mut R,
) -> Result<f64> {
    let pred = attacked_predictions(kind, model, flow, x, labels, threat, rng)?;
    Ok(count_correct(&pred, labels) as f64 / labels.len().max(1) as f64)
}

/// One named attack in a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteEntry {
    pub name: String,
    pub attack: AttackKind,
    pub threat: ThreatModel,
}

impl SuiteEntry {
    pub fn new(name: impl Into<String>, attack: AttackKind, threat: ThreatModel) -> Self {
        Self {
            name: name.into(),
            attack,
            threat,
        }
    }
}

/// PGD-20, L2-PGD-20, OM-PGD-50 and JSA-50 at image budget `eps` and
/// latent budget `eta`.
pub fn default_suite(eps: f64, eta: f64) -> Vec<SuiteEntry> {
    let l2_eps = eps * 8.0;
    vec![
        SuiteEntry::new("pgd20", AttackKind::Pgd, ThreatModel::pgd(eps, eps / 4.0, 20)),
        SuiteEntry::new("l2_pgd20", AttackKind::L2Pgd, ThreatModel::l2(l2_eps, l2_eps / 4.0, 20)),
        SuiteEntry::new("om_pgd50", AttackKind::OmPgd, ThreatModel::latent(eta, eta / 4.0, 50)),
        SuiteEntry::new(
            "jsa50",
            AttackKind::Jsa,
            ThreatModel::joint(eps, eps / 4.0, eta, eta / 4.0, 50),
        ),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Standard,
    Attack,
    Corruption,
    AverageExcludingStandard,
    AverageIncludingStandard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub name: String,
    pub row: RowKind,
    pub accuracy: f64,
    pub correct: usize,
    pub n_samples: usize,
    #[serde(default)]
    pub attack: Option<AttackKind>,
    #[serde(default)]
    pub threat: Option<ThreatModel>,
    #[serde(default)]
    pub corruption: Option<CorruptionSpec>,
    pub seed: u64,
    pub checkpoint: String,
    #[serde(default)]
    pub max_samples: Option<usize>,
}

/// Per-attack (or per-corruption) accuracy table.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub checkpoint: String,
    pub seed: u64,
    pub max_samples: Option<usize>,
    pub standard_accuracy: f64,
    /// Standard row first, then one row per suite entry, then the two
    /// averages (pooled over rows, which is the simple mean when every row
    /// has the same sample count).
    pub rows: Vec<ReportRow>,
    /// Set by callers that want one; never written to the record file.
    pub timestamp: Option<String>,
}

/// Provenance shared by every row of a report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalOptions {
    pub seed: u64,
    /// Cap on evaluated samples; the first `max_samples` are used.
    pub max_samples: Option<usize>,
    pub checkpoint: String,
}

impl EvalOptions {
    fn row(&self, name: &str, row: RowKind, correct: usize, n: usize) -> ReportRow {
        ReportRow {
            name: name.into(),
            row,
            accuracy: correct as f64 / n as f64,
            correct,
            n_samples: n,
            attack: None,
            threat: None,
            corruption: None,
            seed: self.seed,
            checkpoint: self.checkpoint.clone(),
            max_samples: self.max_samples,
        }
    }

    fn report(&self, rows: Vec<ReportRow>) -> EvalReport {
        let standard_accuracy = rows[0].accuracy;
        EvalReport {
            checkpoint: self.checkpoint.clone(),
            seed: self.seed,
            max_samples: self.max_samples,
            standard_accuracy,
            rows,
            timestamp: None,
        }
    }

    fn capped<T: Real>(&self, data: &TensorDataset<T>) -> Result<TensorDataset<T>> {
        match self.max_samples {
            Some(0) => Err(Error::Config("max_samples must be at least 1".into())),
            Some(n) => data.take(n),
            None => Ok(data.clone()),
        }
    }
}

fn push_averages(opts: &EvalOptions, rows: &mut Vec<ReportRow>, kind: RowKind) {
    let pooled = |pick: &dyn Fn(&ReportRow) -> bool| {
        rows.iter()
            .filter(|r| pick(r))
            .fold((0, 0), |(c, n), r| (c + r.correct, n + r.n_samples))
    };
    let (c, n) = pooled(&|r| r.row == kind);
    let excl = opts.row("average_excluding_standard", RowKind::AverageExcludingStandard, c, n);
    let (c, n) = pooled(&|r| r.row == kind || r.row == RowKind::Standard);
    let incl = opts.row("average_including_standard", RowKind::AverageIncludingStandard, c, n);
    rows.push(excl);
    rows.push(incl);
}

/// Runs every suite entry on `data` (capped by `opts.max_samples`). Entry
/// `i` draws its random start from stream `("eval", i)` of `opts.seed`.
pub fn evaluate_robustness<T: Real>(
    model: &ClassifierModel<T>,
    flow: Option<&FlowModel<T>>,
    data: &TensorDataset<T>,
    suite: &[SuiteEntry],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if suite.is_empty() {
        return Err(Error::Empty("attack suite".into()));
    }
    for entry in suite {
        entry.threat.validate()?;
        if entry.attack.needs_flow() && flow.is_none() {
            return Err(Error::Config(format!("suite entry `{}` needs a flow model", entry.name)));
        }
    }
    let data = opts.capped(data)?;
    let (x, y) = (data.images(), data.labels());
    let n = y.len();
    let mut rows = vec![opts.row(
        "standard",
        RowKind::Standard,
        count_correct(&predictions(model, x)?, y),
        n,
    )];
    for (i, entry) in suite.iter().enumerate() {
        let mut rng = rng_for(opts.seed, "eval", i as u64);
        let pred = attacked_predictions(entry.attack, model, flow, x, y, &entry.threat, &mut rng)?;
        let mut row = opts.row(&entry.name, RowKind::Attack, count_correct(&pred, y), n);
        row.attack = Some(entry.attack);
        row.threat = Some(entry.threat.clone());
        rows.push(row);
    }
    push_averages(opts, &mut rows, RowKind::Attack);
    Ok(opts.report(rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    GaussianBlur,
    Contrast,
    Pixelate,
    SaltPepper,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
        CorruptionKind::SaltPepper,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::SaltPepper => "salt_pepper",
        }
    }

    /// Magnitude at severity 0..=5 (index 0 is the identity):
    /// - gaussian_noise: noise std,
    /// - gaussian_blur: kernel std in pixels,
    /// - contrast: fraction of the deviation from the per-image mean removed,
    /// - pixelate: fraction of the side length removed before upsampling,
    /// - salt_pepper: fraction of pixels replaced by 0 or 1.
    pub fn magnitude(self, severity: u8) -> f64 {
        let table: [f64; 6] = match self {
            CorruptionKind::GaussianNoise => [0.0, 0.04, 0.08, 0.12, 0.18, 0.26],
            CorruptionKind::GaussianBlur => [0.0, 0.4, 0.6, 0.8, 1.0, 1.5],
            CorruptionKind::Contrast => [0.0, 0.25, 0.5, 0.6, 0.7, 0.8],
            CorruptionKind::Pixelate => [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            CorruptionKind::SaltPepper => [0.0, 0.02, 0.05, 0.1, 0.15, 0.25],
        };
        table[severity as usize]
    }
}

/// One corruption cell; severity 0 leaves images untouched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    #[serde(default)]
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Self {
        Self { kind, severity, seed }
    }

    pub fn name(&self) -> String {
        format!("{}@{}", self.kind.name(), self.severity)
    }

    pub fn validate(&self) -> Result<()> {
        if self.severity > 5 {
            return Err(Error::Config(format!("severity {} outside 0..=5", self.severity)));
        }
        Ok(())
    }

    /// Corrupted copy of `x` `[n, c, h, w]`; outputs stay in `[0, 1]`.
    pub fn apply<T: Real>(&self, x: &ArrayD<T>) -> Result<ArrayD<T>> {
        self.validate()?;
        if x.ndim() != 4 {
            return Err(Error::shape("[n, c, h, w]", x.shape()));
        }
        if self.severity == 0 {
            return Ok(x.clone());
        }
        let m = self.kind.magnitude(self.severity);
        let mut rng = rng_for(self.seed, self.kind.name(), self.severity as u64);
        let mut out = x.mapv(|v| v.as_f64()).into_dimensionality::<Ix4>().expect("checked rank");
        match self.kind {
            CorruptionKind::GaussianNoise => {
                let normal = Normal::new(0.0, m).expect("positive std");
                out.mapv_inplace(|v| v + normal.sample(&mut rng));
            }
            CorruptionKind::GaussianBlur => blur(&mut out, m),
            CorruptionKind::Contrast => {
                for mut img in out.outer_iter_mut() {
                    let mean = img.mean().unwrap_or(0.0);
                    img.mapv_inplace(|v| mean + (1.0 - m) * (v - mean));
                }
            }
            CorruptionKind::Pixelate => pixelate(&mut out, 1.0 - m),
            CorruptionKind::SaltPepper => {
                out.mapv_inplace(|v| {
                    if rng.random::<f64>() < m {
                        if rng.random::<bool>() {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        v
                    }
                });
            }
        }
        Ok(out.mapv(|v| T::of(v.clamp(0.0, 1.0))).into_dyn())
    }
}

/// Separable Gaussian blur with clamped borders.
fn blur(x: &mut Array4<f64>, sigma: f64) {
    let radius = (2.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (x.shape()[2] as isize, x.shape()[3] as isize);
    let tap = |c: isize, k: usize, len: isize| (c + k as isize - radius).clamp(0, len - 1) as usize;
    let src = x.clone();
    for ((n, c, i, j), v) in x.indexed_iter_mut() {
        *v = kernel.iter().enumerate().map(|(k, wk)| wk * src[[n, c, tap(i as isize, k, h), j]]).sum();
    }
    let src = x.clone();
    for ((n, c, i, j), v) in x.indexed_iter_mut() {
        *v = kernel.iter().enumerate().map(|(k, wk)| wk * src[[n, c, i, tap(j as isize, k, w)]]).sum();
    }
}

/// Averages pixels over `round(side * keep)` cells per side and writes each
/// cell mean back to its pixels.
fn pixelate(x: &mut Array4<f64>, keep: f64) {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let cells = |side: usize| ((side as f64 * keep).round() as usize).clamp(1, side);
    let (ch, cw) = (cells(h), cells(w));
    let cell_of = |i: usize, side: usize, n: usize| i * n / side;
    for mut img in x.outer_iter_mut() {
        for mut plane in img.outer_iter_mut() {
            let mut sums = vec![0.0; ch * cw];
            let mut counts = vec![0usize; ch * cw];
            for ((i, j), v) in plane.indexed_iter() {
                let c = cell_of(i, h, ch) * cw + cell_of(j, w, cw);
                sums[c] += v;
                counts[c] += 1;
            }
            for ((i, j), v) in plane.indexed_iter_mut() {
                let c = cell_of(i, h, ch) * cw + cell_of(j, w, cw);
                *v = sums[c] / counts[c] as f64;
            }
        }
    }
}

/// Accuracy per corruption cell. The first row is clean accuracy.
pub fn evaluate_corruptions<T: Real>(
    model: &ClassifierModel<T>,
    data: &TensorDataset<T>,
    specs: &[CorruptionSpec],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if specs.is_empty() {
        return Err(Error::Empty("corruption list".into()));
    }
    for s in specs {
        s.validate()?;
    }
    let data = opts.capped(data)?;
    let (x, y) = (data.images(), data.labels());
    let n = y.len();
    let mut rows = vec![opts.row(
        "standard",
        RowKind::Standard,
        count_correct(&predictions(model, x)?, y),
        n,
    )];
    for spec in specs {
        let xc = spec.apply(x)?;
        let mut row = opts.row(&spec.name(), RowKind::Corruption, count_correct(&predictions(model, &xc)?, y), n);
        row.corruption = Some(*spec);
        rows.push(row);
    }
    push_averages(opts, &mut rows, RowKind::Corruption);
    Ok(opts.report(rows))
}

impl EvalReport {
    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ReportRow>, _>>()?;
        let first = rows.first().ok_or_else(|| Error::Empty("report".into()))?;
        if first.row != RowKind::Standard {
            return Err(Error::Config("report must start with the standard row".into()));
        }
        Ok(Self {
            checkpoint: first.checkpoint.clone(),
            seed: first.seed,
            max_samples: first.max_samples,
            standard_accuracy: first.accuracy,
            rows,
            timestamp: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    /// Fixed-width table for terminals.
    pub fn render_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(8);
        let mut s = String::new();
        let _ = writeln!(s, "checkpoint {}  seed {}", self.checkpoint, self.seed);
        if let Some(t) = &self.timestamp {
            let _ = writeln!(s, "timestamp {t}");
        }
        let _ = writeln!(s, "{:<width$}  {:>8}  {:>12}", "row", "accuracy", "correct/n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>7.2}%  {:>12}",
                r.name,
                100.0 * r.accuracy,
                format!("{}/{}", r.correct, r.n_samples)
            );
        }
        s
    }
}

/// One line of a curve file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub std_acc: f64,
    pub robust_acc: f64,
}

impl From<&EpochMetrics> for CurvePoint {
    fn from(m: &EpochMetrics) -> Self {
        Self {
            epoch: m.epoch,
            train_loss: m.train_loss,
            std_acc: m.std_acc,
            robust_acc: m.robust_acc,
        }
    }
}

pub fn curves_to_csv(points: &[CurvePoint]) -> Result<Vec<u8>> {
    if points.is_empty() {
        return Err(Error::Empty("training curve".into()));
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CURVE_HEADER)?;
    for p in points {
        w.serialize(p)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Writes one row per completed epoch of `state`.
pub fn track_training_curves<T: Real>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let points: Vec<CurvePoint> = state.metrics.iter().map(CurvePoint::from).collect();
    write_atomic(path, &curves_to_csv(&points)?)
}

pub fn read_curves(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != CURVE_HEADER {
        return Err(Error::format(path, format!("curve header {header:?}")));
    }
    r.deserialize().map(|p| p.map_err(Error::from)).collect()
}
