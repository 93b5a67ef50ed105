//! Longitudinal panels with monotone dropout.
//!
//! Each subject contributes a chain `(X_t, A_t, Y_t, R_t)` for `t = 1..T`
//! plus a final retention flag `R_{T+1}`. Time indices in the public API are
//! 1-based. A subject observed at `t` (`R_t = 1`) has covariates and a
//! treatment at `t`; its outcome `Y_t` can only be observed if it is still
//! retained at `t + 1`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    subject_id: String,
    covariates: Vec<Option<Vec<f64>>>,
    treatments: Vec<Option<bool>>,
    outcomes: Vec<Option<f64>>,
    retention: Vec<bool>,
}

impl Trajectory {
    /// Build a trajectory over `T = treatments.len()` timepoints.
    ///
    /// `retention` has length `T + 1`. Presence of covariates and treatments
    /// must match `R_t`; an outcome at `t` may only be present when
    /// `R_{t+1} = 1`. Monotonicity of `retention` is checked at the dataset
    /// level (see [`validate_monotonicity`]).
    pub fn new(
        subject_id: impl Into<String>,
        covariates: Vec<Option<Vec<f64>>>,
        treatments: Vec<Option<bool>>,
        outcomes: Vec<Option<f64>>,
        retention: Vec<bool>,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        let horizon = treatments.len();
        if horizon == 0 {
            return Err(Error::Data(format!("subject {subject_id}: no timepoints")));
        }
        if covariates.len() != horizon || outcomes.len() != horizon {
            return Err(Error::Data(format!(
                "subject {subject_id}: covariate/treatment/outcome lengths differ"
            )));
        }
        if retention.len() != horizon + 1 {
            return Err(Error::Data(format!(
                "subject {subject_id}: retention must have T + 1 = {} entries",
                horizon + 1
            )));
        }
        if !retention[0] {
            return Err(Error::Data(format!("subject {subject_id}: R_1 must be 1")));
        }
        let mut dim = None;
        for t in 0..horizon {
            let observed = retention[t];
            if covariates[t].is_some() != observed || treatments[t].is_some() != observed {
                return Err(Error::Data(format!(
                    "subject {subject_id}, t={}: covariates and treatment must be present iff R_t = 1",
                    t + 1
                )));
            }
            if outcomes[t].is_some() && !retention[t + 1] {
                return Err(Error::Data(format!(
                    "subject {subject_id}, t={}: outcome recorded but R_{} = 0",
                    t + 1,
                    t + 2
                )));
            }
            if let Some(x) = &covariates[t] {
                match dim {
                    None => dim = Some(x.len()),
                    Some(d) if d != x.len() => {
                        return Err(Error::Data(format!(
                            "subject {subject_id}: covariate dimension changes over time"
                        )))
                    }
                    _ => {}
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data(format!(
                        "subject {subject_id}, t={}: non-finite covariate",
                        t + 1
                    )));
                }
            }
            if let Some(y) = outcomes[t] {
                if !y.is_finite() {
                    return Err(Error::Data(format!(
                        "subject {subject_id}, t={}: non-finite outcome",
                        t + 1
                    )));
                }
            }
        }
        Ok(Self {
            subject_id,
            covariates,
            treatments,
            outcomes,
            retention,
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn horizon(&self) -> usize {
        self.treatments.len()
    }

    /// Covariate dimension (taken from `X_1`, which is always observed).
    pub fn dim(&self) -> usize {
        self.covariates[0].as_ref().map_or(0, Vec::len)
    }

    /// `R_t` for `t = 1..=T+1`.
    pub fn retained(&self, t: usize) -> bool {
        t >= 1 && t <= self.retention.len() && self.retention[t - 1]
    }

    pub fn covariates(&self, t: usize) -> Option<&[f64]> {
        self.covariates.get(t.checked_sub(1)?)?.as_deref()
    }

    pub fn treatment(&self, t: usize) -> Option<bool> {
        *self.treatments.get(t.checked_sub(1)?)?
    }

    pub fn outcome(&self, t: usize) -> Option<f64> {
        *self.outcomes.get(t.checked_sub(1)?)?
    }

    pub fn retention(&self) -> &[bool] {
        &self.retention
    }

    /// Last `t` with `R_t = 1` (assumes monotone retention).
    pub fn last_observed(&self) -> usize {
        self.retention[..self.horizon()]
            .iter()
            .take_while(|r| **r)
            .count()
    }
}

/// One monotonicity violation: `R_t = 1` after an earlier `R_s = 0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub subject_id: String,
    pub t: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

/// List every subject and time at which retention re-enters after dropout.
pub fn validate_monotonicity(trajectories: &[Trajectory]) -> ValidationReport {
    let mut violations = Vec::new();
    for tr in trajectories {
        let mut dropped = false;
        for (idx, &r) in tr.retention.iter().enumerate() {
            if !r {
                dropped = true;
            } else if dropped {
                violations.push(Violation {
                    subject_id: tr.subject_id.clone(),
                    t: idx + 1,
                });
            }
        }
    }
    ValidationReport { violations }
}

/// An immutable collection of trajectories sharing `d` and `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    trajectories: Vec<Trajectory>,
    dim: usize,
    horizon: usize,
    /// `recorded_outcomes[s-1]` is true when `Y_s` is recorded for every
    /// subject with `R_{s+1} = 1`.
    recorded_outcomes: Vec<bool>,
}

impl PanelDataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::Data("dataset has no subjects".into()))?;
        let dim = first.dim();
        let horizon = first.horizon();
        let mut ids = HashMap::new();
        for tr in &trajectories {
            if tr.horizon() != horizon || tr.dim() != dim {
                return Err(Error::Data(format!(
                    "subject {}: (d, T) = ({}, {}) differs from dataset ({dim}, {horizon})",
                    tr.subject_id,
                    tr.dim(),
                    tr.horizon()
                )));
            }
            if ids.insert(tr.subject_id.as_str(), ()).is_some() {
                return Err(Error::Data(format!("duplicate subject id {}", tr.subject_id)));
            }
        }
        let report = validate_monotonicity(&trajectories);
        if let Some(v) = report.violations.first() {
            return Err(Error::Data(format!(
                "retention is not monotone for subject {} at t={} ({} violations)",
                v.subject_id,
                v.t,
                report.violations.len()
            )));
        }
        let mut recorded_outcomes = Vec::with_capacity(horizon);
        for s in 1..=horizon {
            let eligible = trajectories.iter().filter(|tr| tr.retained(s + 1));
            let (with, without) = eligible.fold((0usize, 0usize), |(w, wo), tr| {
                if tr.outcome(s).is_some() {
                    (w + 1, wo)
                } else {
                    (w, wo + 1)
                }
            });
            if with > 0 && without > 0 {
                return Err(Error::Data(format!(
                    "outcome Y_{s} is recorded for {with} retained subjects but missing for {without}"
                )));
            }
            recorded_outcomes.push(with > 0);
        }
        drop(ids);
        Ok(Self {
            trajectories,
            dim,
            horizon,
            recorded_outcomes,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Whether `Y_s` is recorded (for all subjects retained at `s + 1`).
    pub fn outcome_recorded(&self, s: usize) -> bool {
        s >= 1 && s <= self.horizon && self.recorded_outcomes[s - 1]
    }

    /// Fraction of subjects with `R_{t+1} = 0`.
    pub fn dropout_fraction(&self, t: usize) -> f64 {
        let dropped = self
            .trajectories
            .iter()
            .filter(|tr| !tr.retained(t + 1))
            .count();
        dropped as f64 / self.len() as f64
    }

    /// Subset of subjects by position, preserving order.
    pub fn subset(&self, keep: impl Fn(&Trajectory) -> bool) -> Result<Self> {
        let trajectories: Vec<_> = self.trajectories.iter().filter(|tr| keep(tr)).cloned().collect();
        Self::new(trajectories)
    }

    /// Layout of flattened history features at time `t`.
    pub fn layout(&self, t: usize) -> FeatureLayout {
        FeatureLayout {
            dim: self.dim,
            t,
            prior_outcomes: (1..t).filter(|&s| self.outcome_recorded(s)).count(),
        }
    }

    pub fn metadata(&self) -> DatasetMetadata {
        let mut buf = Vec::new();
        write_long_csv_to(self, &mut buf).expect("writing to a Vec cannot fail");
        DatasetMetadata {
            n: self.len(),
            horizon: self.horizon,
            dim: self.dim,
            content_hash: hex::encode(Sha256::digest(&buf)),
        }
    }
}

/// Sidecar metadata written next to a panel CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub n: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub dim: usize,
    /// SHA-256 of the canonical CSV rendering.
    pub content_hash: String,
}

/// Fold labels for sample splitting; `labels[i]` is the 0-based fold of the
/// `i`-th subject of the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    labels: Vec<usize>,
    folds: usize,
    seed: u64,
}

impl FoldAssignment {
    pub fn fold_of(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn folds(&self) -> usize {
        self.folds
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn members(&self, fold: usize) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(move |(_, &f)| f == fold)
            .map(|(i, _)| i)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.folds];
        for &f in &self.labels {
            sizes[f] += 1;
        }
        sizes
    }

    /// A single-fold assignment (everyone in fold 0), used for fits without
    /// sample splitting.
    pub fn single(n: usize) -> Self {
        Self {
            labels: vec![0; n],
            folds: 1,
            seed: 0,
        }
    }

    /// Explicit assignment; every fold in `0..folds` must be non-empty.
    pub fn from_labels(labels: Vec<usize>, folds: usize) -> Result<Self> {
        if folds == 0 || labels.iter().any(|&l| l >= folds) {
            return Err(Error::Config(format!("fold labels must lie in 0..{folds}")));
        }
        if (0..folds).any(|k| !labels.contains(&k)) {
            return Err(Error::Config("every fold needs at least one subject".into()));
        }
        Ok(Self { labels, folds, seed: 0 })
    }
}

/// Randomly partition subjects into `k` folds whose sizes differ by at most one.
pub fn split_folds(ds: &PanelDataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    split_indices(ds.len(), k, seed)
}

pub(crate) fn split_indices(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > n {
        return Err(Error::Config(format!("fold count K={k} must satisfy 2 <= K <= n={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = crate::rng::stream(seed, 0x5EED_F01D);
    order.shuffle(&mut rng);
    let mut labels = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        labels[i] = pos % k;
    }
    Ok(FoldAssignment {
        labels,
        folds: k,
        seed,
    })
}

/// Observed history `H_t = (X̄_t, Ā_{t-1}, Ȳ_{t-1})` of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryView {
    pub t: usize,
    pub x_hist: Vec<Vec<f64>>,
    pub a_hist: Vec<bool>,
    /// Recorded prior outcomes as `(s, Y_s)`.
    pub y_hist: Vec<(usize, f64)>,
}

impl HistoryView {
    /// Flattened feature vector: `X_1, ..., X_t` (each of length `d`), then
    /// `A_1, ..., A_{t-1}` as 0/1, then the recorded `Y_s`, `s < t`, in time
    /// order.
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.x_hist.len() * self.x_hist[0].len() + 2 * self.t);
        self.write_features(&mut out);
        out
    }

    pub fn write_features(&self, out: &mut Vec<f64>) {
        for x in &self.x_hist {
            out.extend_from_slice(x);
        }
        out.extend(self.a_hist.iter().map(|&a| if a { 1.0 } else { 0.0 }));
        out.extend(self.y_hist.iter().map(|&(_, y)| y));
    }
}

pub fn history_at(tr: &Trajectory, t: usize) -> Result<HistoryView> {
    if t == 0 || t > tr.horizon() {
        return Err(Error::Precondition(format!(
            "t={t} outside 1..={}",
            tr.horizon()
        )));
    }
    if !tr.retained(t) {
        return Err(Error::Precondition(format!(
            "subject {} is not observed at t={t}",
            tr.subject_id
        )));
    }
    let x_hist = (1..=t)
        .map(|s| tr.covariates(s).map(<[f64]>::to_vec))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Invariant("missing covariates on an observed path".into()))?;
    let a_hist = (1..t)
        .map(|s| tr.treatment(s))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Invariant("missing treatment on an observed path".into()))?;
    let y_hist = (1..t)
        .filter_map(|s| tr.outcome(s).map(|y| (s, y)))
        .collect();
    Ok(HistoryView {
        t,
        x_hist,
        a_hist,
        y_hist,
    })
}

/// Feature vector of `H_t`, optionally followed by a treatment value
/// (the `(H_t, a)` inputs of the missingness and outcome regressions).
pub fn features_at(tr: &Trajectory, t: usize, treatment: Option<bool>) -> Result<Vec<f64>> {
    let h = history_at(tr, t)?;
    let mut out = h.features();
    if let Some(a) = treatment {
        out.push(if a { 1.0 } else { 0.0 });
    }
    Ok(out)
}

/// Index map of the flattened history vector at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    pub dim: usize,
    pub t: usize,
    pub prior_outcomes: usize,
}

impl FeatureLayout {
    /// Length of the `H_t` part.
    pub fn history_len(&self) -> usize {
        self.dim * self.t + (self.t - 1) + self.prior_outcomes
    }

    pub fn covariates<'a>(&self, features: &'a [f64], s: usize) -> &'a [f64] {
        &features[(s - 1) * self.dim..s * self.dim]
    }

    /// `A_s` for `s < t`.
    pub fn treatment(&self, features: &[f64], s: usize) -> bool {
        features[self.dim * self.t + (s - 1)] > 0.5
    }

    /// The trailing `A_t` appended by [`features_at`], if present.
    pub fn current_treatment(&self, features: &[f64]) -> Option<bool> {
        features.get(self.history_len()).map(|&a| a > 0.5)
    }
}

/// Column names of the long CSV format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub id: String,
    pub time: String,
    pub covariate_prefix: String,
    pub treatment: String,
    pub outcome: String,
    pub retention: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            id: "id".into(),
            time: "time".into(),
            covariate_prefix: "x".into(),
            treatment: "a".into(),
            outcome: "y".into(),
            retention: "r".into(),
        }
    }
}

struct Columns {
    id: usize,
    time: usize,
    x: Vec<usize>,
    a: usize,
    y: usize,
    r: usize,
}

fn resolve_columns(header: &csv::StringRecord, schema: &CsvSchema) -> Result<Columns> {
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("missing column '{name}'"),
            })
    };
    let mut x = Vec::new();
    for j in 1.. {
        match header
            .iter()
            .position(|h| h.trim() == format!("{}{j}", schema.covariate_prefix))
        {
            Some(pos) => x.push(pos),
            None => break,
        }
    }
    Ok(Columns {
        id: find(&schema.id)?,
        time: find(&schema.time)?,
        x,
        a: find(&schema.treatment)?,
        y: find(&schema.outcome)?,
        r: find(&schema.retention)?,
    })
}

struct Row {
    line: usize,
    x: Option<Vec<f64>>,
    a: Option<bool>,
    y: Option<f64>,
    r: bool,
}

fn parse_binary(field: &str, what: &str, line: usize) -> Result<bool> {
    match field.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Data(format!(
            "line {line}: {what} must be 0 or 1, got '{other}'"
        ))),
    }
}

fn parse_real(field: &str, what: &str, line: usize) -> Result<Option<f64>> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    field.parse::<f64>().map(Some).map_err(|_| Error::Parse {
        line,
        message: format!("{what}: cannot parse '{field}' as a number"),
    })
}

/// Parse a long-format panel without enforcing monotone retention.
///
/// Subjects keep the order of their first row. `R_{T+1}` is read from the
/// presence of `Y_T`; times after a subject's last row are `R_t = 0`.
pub fn parse_long_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Vec<Trajectory>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let cols = resolve_columns(&header, schema)?;
    let d = cols.x.len();

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, HashMap<usize, Row>> = HashMap::new();
    let mut horizon = 0usize;
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let id = rec[cols.id].trim().to_string();
        let time: usize = rec[cols.time].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("time: cannot parse '{}' as a positive integer", &rec[cols.time]),
        })?;
        if time == 0 {
            return Err(Error::Parse {
                line,
                message: "time is 1-based".into(),
            });
        }
        let r = parse_binary(&rec[cols.r], "r", line)?;
        let a_field = rec[cols.a].trim();
        let a = if a_field.is_empty() {
            None
        } else {
            Some(parse_binary(a_field, "a", line)?)
        };
        let mut xs = Vec::with_capacity(d);
        for &c in &cols.x {
            xs.push(parse_real(&rec[c], "covariate", line)?);
        }
        let x = if xs.iter().all(Option::is_some) {
            Some(xs.into_iter().map(Option::unwrap).collect::<Vec<_>>())
        } else if xs.iter().all(Option::is_none) {
            None
        } else {
            return Err(Error::Data(format!("line {line}: partially missing covariates")));
        };
        let y = parse_real(&rec[cols.y], "y", line)?;
        if r && (x.is_none() || a.is_none()) {
            return Err(Error::Data(format!(
                "line {line}: observed row (r=1) needs covariates and treatment"
            )));
        }
        if !r && (x.is_some() || a.is_some() || y.is_some()) {
            return Err(Error::Data(format!(
                "line {line}: unobserved row (r=0) must leave x, a and y empty"
            )));
        }
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        let per_subject = rows.entry(id.clone()).or_default();
        if per_subject.contains_key(&time) {
            return Err(Error::Data(format!(
                "line {line}: duplicate row for subject {id} at time {time}"
            )));
        }
        horizon = horizon.max(time);
        per_subject.insert(time, Row { line, x, a, y, r });
    }
    if order.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }

    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let per_subject = &rows[&id];
        let observed = |t: usize| per_subject.get(&t).is_some_and(|row| row.r);
        let mut covariates = Vec::with_capacity(horizon);
        let mut treatments = Vec::with_capacity(horizon);
        let mut outcomes = Vec::with_capacity(horizon);
        let mut retention = Vec::with_capacity(horizon + 1);
        for t in 1..=horizon {
            match per_subject.get(&t) {
                Some(row) if row.r => {
                    covariates.push(row.x.clone());
                    treatments.push(row.a);
                    outcomes.push(row.y);
                    retention.push(true);
                }
                _ => {
                    covariates.push(None);
                    treatments.push(None);
                    outcomes.push(None);
                    retention.push(false);
                }
            }
        }
        // R_{T+1} is carried by the presence of Y_T.
        retention.push(observed(horizon) && outcomes[horizon - 1].is_some());
        for t in 1..horizon {
            if outcomes[t - 1].is_some() && !retention[t] {
                let line = per_subject[&t].line;
                return Err(Error::Data(format!(
                    "line {line}: outcome recorded for subject {id} at t={t} but the subject is not observed at t={}",
                    t + 1
                )));
            }
        }
        out.push(Trajectory::new(id, covariates, treatments, outcomes, retention)?);
    }
    Ok(out)
}

pub fn read_long_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<PanelDataset> {
    PanelDataset::new(parse_long_csv(reader, schema)?)
}

pub fn load_long_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<PanelDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_long_csv(std::io::BufReader::new(file), schema)
}

/// Write the canonical long CSV: one row per observed `(subject, t)`.
pub fn write_long_csv_to<W: Write>(ds: &PanelDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "time".to_string()];
    header.extend((1..=ds.dim()).map(|j| format!("x{j}")));
    header.extend(["a", "y", "r"].map(String::from));
    w.write_record(&header).map_err(csv_io)?;
    for tr in ds.trajectories() {
        for t in 1..=tr.last_observed() {
            let mut rec = vec![tr.subject_id().to_string(), t.to_string()];
            let x = tr.covariates(t).expect("observed row has covariates");
            rec.extend(x.iter().map(|v| format_value(*v)));
            rec.push(if tr.treatment(t) == Some(true) { "1" } else { "0" }.to_string());
            rec.push(tr.outcome(t).map(format_value).unwrap_or_default());
            rec.push("1".to_string());
            w.write_record(&rec).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_long_csv(ds: &PanelDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_long_csv_to(ds, std::io::BufWriter::new(file))
}

/// Shortest decimal that round-trips to the same `f64`.
fn format_value(v: f64) -> String {
    format!("{v:?}")
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_csv(body: &str) -> String {
        format!("id,time,x1,x2,a,y,r\n{body}")
    }

    fn load(body: &str) -> Result<PanelDataset> {
        read_long_csv(toy_csv(body).as_bytes(), &CsvSchema::default())
    }

    #[test]
    fn fully_observed_panel() {
        let ds = load(
            "1,1,0.1,0.2,1,,1\n1,2,0.3,0.4,0,2.5,1\n\
             2,1,0.5,0.6,0,,1\n2,2,0.7,0.8,1,3.5,1\n\
             3,1,0.9,1.0,1,,1\n3,2,1.1,1.2,1,4.5,1\n",
        )
        .unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.horizon(), 2);
        assert_eq!(ds.dim(), 2);
        for tr in ds.trajectories() {
            assert!(tr.retention().iter().all(|&r| r));
        }
    }

    #[test]
    fn missing_later_row_means_dropout() {
        let ds = load("1,1,0,0,1,,1\n1,2,1,1,0,5.0,1\n2,1,0,0,1,,1\n").unwrap();
        let tr = &ds.trajectories()[1];
        assert!(!tr.retained(2));
        assert!(!tr.retained(3));
        assert_eq!(tr.outcome(1), None);
    }

    #[test]
    fn non_monotone_retention_rejected() {
        let err = load("1,1,0,0,1,,1\n1,2,,,,,0\n1,3,0,0,1,1.0,1\n").unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = load("1,1,0,0,1,,1\n1,2,zz,0,1,1.0,1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = load("1,1,0,0,2,,1\n").unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        let err = load("1,1,0,0,1,,1\n1,1,0,0,1,,1\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"));
        let err = load("1,1,0,0,1,,7\n").unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn missing_column_is_parse_error() {
        let err = read_long_csv("id,time,x1,a,y\n1,1,0,1,2\n".as_bytes(), &CsvSchema::default())
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    fn traj(id: &str, retention: &[bool]) -> Trajectory {
        let horizon = retention.len() - 1;
        let cov = (0..horizon).map(|t| retention[t].then(|| vec![0.0])).collect();
        let trt = (0..horizon).map(|t| retention[t].then_some(false)).collect();
        let out = vec![None; horizon];
        Trajectory::new(id, cov, trt, out, retention.to_vec()).unwrap()
    }

    #[test]
    fn monotonicity_report() {
        assert!(validate_monotonicity(&[traj("a", &[true, true, true, true])]).is_empty());
        assert!(validate_monotonicity(&[traj("a", &[true, true, false, false])]).is_empty());
        let report = validate_monotonicity(&[traj("a", &[true, false, true, false])]);
        assert_eq!(
            report.violations,
            vec![Violation {
                subject_id: "a".into(),
                t: 3
            }]
        );
    }

    fn n_subjects(n: usize) -> PanelDataset {
        PanelDataset::new((0..n).map(|i| traj(&i.to_string(), &[true, true])).collect()).unwrap()
    }

    #[test]
    fn folds_balanced_and_deterministic() {
        let ds = n_subjects(10);
        let f = split_folds(&ds, 2, 42).unwrap();
        assert_eq!(f.sizes(), vec![5, 5]);
        assert_eq!(f, split_folds(&ds, 2, 42).unwrap());
        let mut sizes = split_folds(&n_subjects(5), 2, 1).unwrap().sizes();
        sizes.sort();
        assert_eq!(sizes, vec![2, 3]);
        assert!(split_folds(&ds, 1, 0).is_err());
        assert!(split_folds(&ds, 11, 0).is_err());
    }

    #[test]
    fn history_views() {
        let ds = load(
            "1,1,1,2,1,,1\n1,2,3,4,0,9.0,1\n\
             2,1,5,6,0,,1\n",
        )
        .unwrap();
        let tr = &ds.trajectories()[0];
        assert_eq!(history_at(tr, 1).unwrap().features(), vec![1.0, 2.0]);
        assert_eq!(history_at(tr, 2).unwrap().features(), vec![1.0, 2.0, 3.0, 4.0, 1.0]);
        let censored = &ds.trajectories()[1];
        assert!(matches!(history_at(censored, 2), Err(Error::Precondition(_))));
        assert!(matches!(history_at(tr, 3), Err(Error::Precondition(_))));
    }

    #[test]
    fn history_includes_recorded_intermediate_outcomes() {
        let ds = load(
            "1,1,1,2,1,7.5,1\n1,2,3,4,0,9.0,1\n\
             2,1,5,6,0,,1\n",
        )
        .unwrap();
        let tr = &ds.trajectories()[0];
        assert_eq!(
            history_at(tr, 2).unwrap().features(),
            vec![1.0, 2.0, 3.0, 4.0, 1.0, 7.5]
        );
        assert_eq!(ds.layout(2).history_len(), 6);
    }

    #[test]
    fn mixed_intermediate_outcome_recording_rejected() {
        let err = load(
            "1,1,1,2,1,7.5,1\n1,2,3,4,0,9.0,1\n\
             2,1,5,6,0,,1\n2,2,3,4,0,9.0,1\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("Y_1"));
    }

    #[test]
    fn round_trip_preserves_dataset() {
        let ds = load(
            "1,1,0.1,-2.5e-3,1,,1\n1,2,0.3,0.4,0,2.25,1\n\
             2,1,0.5,0.6,0,,1\n",
        )
        .unwrap();
        let mut buf = Vec::new();
        write_long_csv_to(&ds, &mut buf).unwrap();
        let back = read_long_csv(buf.as_slice(), &CsvSchema::default()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.metadata(), ds.metadata());
    }
}
