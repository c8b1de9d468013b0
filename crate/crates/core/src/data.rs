//! Cohort ingestion, preprocessing, stratified splitting, and a synthetic
//! clinical-style cohort generator with known generative structure.
//!
//! The generator stands in for a cardiac imaging cohort: one latent
//! severity factor drives both the three-level risk label and the binary
//! downstream-test label, with per-modality feature groups loading on it at
//! configurable strengths. Segment-style readings carry the dominant weight
//! (they summarize the disease directly), while a decoy group carries none.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::encoding::FeatureSchema;
use crate::error::{Error, Result};
use crate::rng;

/// Three-level risk stratum, ordered low < medium < high.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskLabel {
    Low,
    Medium,
    High,
}

impl RiskLabel {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            RiskLabel::Low => 0,
            RiskLabel::Medium => 1,
            RiskLabel::High => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<RiskLabel> {
        match i {
            0 => Some(RiskLabel::Low),
            1 => Some(RiskLabel::Medium),
            2 => Some(RiskLabel::High),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RiskLabel::Low => "low",
            RiskLabel::Medium => "medium",
            RiskLabel::High => "high",
        }
    }

    pub fn parse(s: &str) -> Option<RiskLabel> {
        match s {
            "low" => Some(RiskLabel::Low),
            "medium" => Some(RiskLabel::Medium),
            "high" => Some(RiskLabel::High),
            _ => None,
        }
    }
}

/// Next-step recommendation after the index scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownstreamLabel {
    Functional,
    Invasive,
}

impl DownstreamLabel {
    pub const COUNT: usize = 2;

    pub fn index(self) -> usize {
        match self {
            DownstreamLabel::Functional => 0,
            DownstreamLabel::Invasive => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<DownstreamLabel> {
        match i {
            0 => Some(DownstreamLabel::Functional),
            1 => Some(DownstreamLabel::Invasive),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DownstreamLabel::Functional => "functional",
            DownstreamLabel::Invasive => "invasive",
        }
    }

    pub fn parse(s: &str) -> Option<DownstreamLabel> {
        match s {
            "functional" => Some(DownstreamLabel::Functional),
            "invasive" => Some(DownstreamLabel::Invasive),
            _ => None,
        }
    }
}

/// Typed cohort rows with per-cell missing flags and both targets present on
/// every row (patients without follow-up outcomes never enter the table).
#[derive(Debug, Clone, PartialEq)]
pub struct CohortTable {
    pub schema: FeatureSchema,
    /// Row-major categorical cells: level index into the declared levels.
    pub cat: Vec<Vec<Option<usize>>>,
    /// Row-major continuous cells.
    pub cont: Vec<Vec<Option<f64>>>,
    pub risk: Vec<RiskLabel>,
    pub downstream: Vec<DownstreamLabel>,
}

impl CohortTable {
    pub fn n_rows(&self) -> usize {
        self.risk.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let n = self.n_rows();
        if self.cat.len() != n || self.cont.len() != n || self.downstream.len() != n {
            return Err(Error::Validation("column lengths disagree".into()));
        }
        for (r, row) in self.cat.iter().enumerate() {
            if row.len() != self.schema.categorical.len() {
                return Err(Error::Validation(format!(
                    "row {r} has {} categorical cells, schema declares {}",
                    row.len(),
                    self.schema.categorical.len()
                )));
            }
            for (j, cell) in row.iter().enumerate() {
                if let Some(v) = cell {
                    let card = self.schema.categorical[j].cardinality();
                    if *v >= card {
                        return Err(Error::Validation(format!(
                            "row {r}, feature '{}': level {v} out of range (cardinality {card})",
                            self.schema.categorical[j].name
                        )));
                    }
                }
            }
        }
        for (r, row) in self.cont.iter().enumerate() {
            if row.len() != self.schema.continuous.len() {
                return Err(Error::Validation(format!(
                    "row {r} has {} continuous cells, schema declares {}",
                    row.len(),
                    self.schema.continuous.len()
                )));
            }
            for (j, cell) in row.iter().enumerate() {
                if let Some(v) = cell {
                    if !v.is_finite() {
                        return Err(Error::Validation(format!(
                            "row {r}, feature '{}': non-finite value",
                            self.schema.continuous[j].name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Rows picked by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> CohortTable {
        CohortTable {
            schema: self.schema.clone(),
            cat: idx.iter().map(|&i| self.cat[i].clone()).collect(),
            cont: idx.iter().map(|&i| self.cont[i].clone()).collect(),
            risk: idx.iter().map(|&i| self.risk[i]).collect(),
            downstream: idx.iter().map(|&i| self.downstream[i]).collect(),
        }
    }

    /// Table restricted to the features named in `keep`.
    pub fn subset_features(&self, keep: &[String]) -> Result<CohortTable> {
        let schema = self.schema.subset(keep)?;
        let cat_idx: Vec<usize> = self
            .schema
            .categorical
            .iter()
            .enumerate()
            .filter(|(_, f)| keep.contains(&f.name))
            .map(|(j, _)| j)
            .collect();
        let cont_idx: Vec<usize> = self
            .schema
            .continuous
            .iter()
            .enumerate()
            .filter(|(_, f)| keep.contains(&f.name))
            .map(|(j, _)| j)
            .collect();
        Ok(CohortTable {
            schema,
            cat: self
                .cat
                .iter()
                .map(|row| cat_idx.iter().map(|&j| row[j]).collect())
                .collect(),
            cont: self
                .cont
                .iter()
                .map(|row| cont_idx.iter().map(|&j| row[j]).collect())
                .collect(),
            risk: self.risk.clone(),
            downstream: self.downstream.clone(),
        })
    }

    /// Table with one modality group removed (for ablation runs).
    pub fn without_group(&self, group: &str) -> Result<CohortTable> {
        let keep: Vec<String> = self
            .schema
            .categorical
            .iter()
            .map(|f| (f.name.clone(), f.group.clone()))
            .chain(
                self.schema
                    .continuous
                    .iter()
                    .map(|f| (f.name.clone(), f.group.clone())),
            )
            .filter(|(_, g)| g != group)
            .map(|(n, _)| n)
            .collect();
        if keep.len() == self.schema.categorical.len() + self.schema.continuous.len() {
            return Err(Error::Usage(format!("no features in group '{group}'")));
        }
        self.subset_features(&keep)
    }

    /// Missing fraction per feature, in (categorical, continuous) schema order.
    pub fn missing_fractions(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_rows().max(1) as f64;
        let cat = (0..self.schema.categorical.len())
            .map(|j| self.cat.iter().filter(|r| r[j].is_none()).count() as f64 / n)
            .collect();
        let cont = (0..self.schema.continuous.len())
            .map(|j| self.cont.iter().filter(|r| r[j].is_none()).count() as f64 / n)
            .collect();
        (cat, cont)
    }

    pub fn risk_targets(&self) -> Vec<usize> {
        self.risk.iter().map(|l| l.index()).collect()
    }

    pub fn downstream_targets(&self) -> Vec<usize> {
        self.downstream.iter().map(|l| l.index()).collect()
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

const RISK_COLUMN: &str = "risk";
const DOWNSTREAM_COLUMN: &str = "downstream";

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell == "NA"
}

/// Reads a comma-separated UTF-8 file with a header row into a typed table.
/// Empty cells and "NA" set the missing flag; target columns must parse.
pub fn load_csv(path: &Path, schema: &FeatureSchema) -> Result<CohortTable> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Schema(format!("cannot open {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Schema(format!("bad header row: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();

    let mut declared: Vec<&str> = vec![RISK_COLUMN, DOWNSTREAM_COLUMN];
    declared.extend(schema.categorical.iter().map(|f| f.name.as_str()));
    declared.extend(schema.continuous.iter().map(|f| f.name.as_str()));
    for h in &headers {
        if !declared.contains(&h.as_str()) {
            return Err(Error::Schema(format!("undeclared column '{h}'")));
        }
    }
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    let cat_cols: Vec<usize> = schema
        .categorical
        .iter()
        .map(|f| col(&f.name))
        .collect::<Result<_>>()?;
    let cont_cols: Vec<usize> = schema
        .continuous
        .iter()
        .map(|f| col(&f.name))
        .collect::<Result<_>>()?;
    let risk_col = col(RISK_COLUMN)?;
    let downstream_col = col(DOWNSTREAM_COLUMN)?;

    let mut table = CohortTable {
        schema: schema.clone(),
        cat: Vec::new(),
        cont: Vec::new(),
        risk: Vec::new(),
        downstream: Vec::new(),
    };
    for (r, record) in reader.records().enumerate() {
        let row = r + 1; // 1-based data row for error reporting
        let record = record.map_err(|e| Error::Load {
            row,
            column: "<record>".into(),
            message: e.to_string(),
        })?;
        let cell = |c: usize, name: &str| -> Result<&str> {
            record.get(c).ok_or_else(|| Error::Load {
                row,
                column: name.into(),
                message: "row has too few cells".into(),
            })
        };
        let mut cat_row = Vec::with_capacity(cat_cols.len());
        for (f, &c) in schema.categorical.iter().zip(&cat_cols) {
            let raw = cell(c, &f.name)?;
            if is_missing(raw) {
                cat_row.push(None);
            } else {
                let level = f.levels.iter().position(|l| l == raw).ok_or_else(|| {
                    Error::Load {
                        row,
                        column: f.name.clone(),
                        message: format!("unknown level '{raw}'"),
                    }
                })?;
                cat_row.push(Some(level));
            }
        }
        let mut cont_row = Vec::with_capacity(cont_cols.len());
        for (f, &c) in schema.continuous.iter().zip(&cont_cols) {
            let raw = cell(c, &f.name)?;
            if is_missing(raw) {
                cont_row.push(None);
            } else {
                let v: f64 = raw.parse().map_err(|_| Error::Load {
                    row,
                    column: f.name.clone(),
                    message: format!("unparseable number '{raw}'"),
                })?;
                cont_row.push(Some(v));
            }
        }
        let risk_raw = cell(risk_col, RISK_COLUMN)?;
        let risk = RiskLabel::parse(risk_raw).ok_or_else(|| Error::Load {
            row,
            column: RISK_COLUMN.into(),
            message: format!("unknown risk label '{risk_raw}'"),
        })?;
        let ds_raw = cell(downstream_col, DOWNSTREAM_COLUMN)?;
        let downstream = DownstreamLabel::parse(ds_raw).ok_or_else(|| Error::Load {
            row,
            column: DOWNSTREAM_COLUMN.into(),
            message: format!("unknown downstream label '{ds_raw}'"),
        })?;
        table.cat.push(cat_row);
        table.cont.push(cont_row);
        table.risk.push(risk);
        table.downstream.push(downstream);
    }
    table.validate()?;
    Ok(table)
}

/// Writes the table back out in the same CSV dialect `load_csv` reads
/// (missing cells as "NA", full float precision).
pub fn save_csv(table: &CohortTable, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = table
        .schema
        .categorical
        .iter()
        .map(|f| f.name.clone())
        .chain(table.schema.continuous.iter().map(|f| f.name.clone()))
        .collect();
    header.push(RISK_COLUMN.into());
    header.push(DOWNSTREAM_COLUMN.into());
    writer.write_record(&header)?;
    for r in 0..table.n_rows() {
        let mut record: Vec<String> = Vec::with_capacity(header.len());
        for (j, f) in table.schema.categorical.iter().enumerate() {
            record.push(match table.cat[r][j] {
                Some(level) => f.levels[level].clone(),
                None => "NA".into(),
            });
        }
        for j in 0..table.schema.continuous.len() {
            record.push(match table.cont[r][j] {
                Some(v) => format!("{v}"),
                None => "NA".into(),
            });
        }
        record.push(table.risk[r].as_str().into());
        record.push(table.downstream[r].as_str().into());
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Removes features with a missing fraction strictly above `threshold`
/// ("more than" read as strict inequality; exactly-at-threshold is kept).
pub fn drop_sparse_features(table: &CohortTable, threshold: f64) -> (CohortTable, Vec<String>) {
    let (cat_frac, cont_frac) = table.missing_fractions();
    let mut dropped = Vec::new();
    let mut keep = Vec::new();
    for (f, frac) in table.schema.categorical.iter().zip(&cat_frac) {
        if *frac > threshold {
            dropped.push(f.name.clone());
        } else {
            keep.push(f.name.clone());
        }
    }
    for (f, frac) in table.schema.continuous.iter().zip(&cont_frac) {
        if *frac > threshold {
            dropped.push(f.name.clone());
        } else {
            keep.push(f.name.clone());
        }
    }
    let kept = table
        .subset_features(&keep)
        .expect("kept names come from the schema");
    (kept, dropped)
}

/// Ridge strength for the per-feature imputation regressions; small enough
/// that exact linear relations are recovered to well below the convergence
/// tolerance, large enough to keep collinear one-hot blocks solvable.
const RIDGE_LAMBDA: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationReport {
    /// Round-robin iterations actually run (0 when nothing was missing).
    pub iterations: usize,
    /// Max absolute cell change per iteration, in order.
    pub deltas: Vec<f64>,
}

/// Solves `a x = b` (row-major square `a`) by Gaussian elimination with
/// partial pivoting. Returns None on a numerically singular system.
fn solve_linear(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if a[pivot * n + col].abs() < 1e-12 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        for i in col + 1..n {
            let factor = a[i * n + col] / a[col * n + col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[i * n + k] -= factor * a[col * n + k];
            }
            b[i] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = b[i];
        for k in i + 1..n {
            acc -= a[i * n + k] * x[k];
        }
        x[i] = acc / a[i * n + i];
    }
    Some(x)
}

/// Ridge regression via normal equations; the first column (intercept) is
/// left unpenalized. `x` is row-major n×p.
fn ridge_fit(x: &[f64], y: &[f64], n: usize, p: usize) -> Option<Vec<f64>> {
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    for r in 0..n {
        let row = &x[r * p..(r + 1) * p];
        for i in 0..p {
            xty[i] += row[i] * y[r];
            for j in i..p {
                xtx[i * p + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            xtx[i * p + j] = xtx[j * p + i];
        }
    }
    for i in 1..p {
        xtx[i * p + i] += RIDGE_LAMBDA;
    }
    xtx[0] += RIDGE_LAMBDA * 1e-6; // keep the intercept solvable on tiny data
    solve_linear(xtx, xty)
}

/// Chained-equations imputation: initialize missing cells with the column
/// mean (continuous) or mode (categorical), then cycle features, regressing
/// each on all the others over its observed rows and re-predicting its
/// missing cells, until the largest cell change drops below 1e-3 or
/// `max_iters` passes complete. A categorical cell counts as a change of 1
/// when its class flips. Observed cells are never altered. The seed fixes
/// the (otherwise arbitrary) visiting order of features within a pass.
pub fn impute_round_robin(
    table: &CohortTable,
    max_iters: usize,
    seed: u64,
) -> Result<(CohortTable, ImputationReport)> {
    table.validate()?;
    let n = table.n_rows();
    let n_cat = table.schema.categorical.len();
    let n_cont = table.schema.continuous.len();

    // Precondition: something observed in every feature.
    for j in 0..n_cat {
        if table.cat.iter().all(|r| r[j].is_none()) {
            return Err(Error::Validation(format!(
                "feature '{}' has no observed values",
                table.schema.categorical[j].name
            )));
        }
    }
    for j in 0..n_cont {
        if table.cont.iter().all(|r| r[j].is_none()) {
            return Err(Error::Validation(format!(
                "feature '{}' has no observed values",
                table.schema.continuous[j].name
            )));
        }
    }

    let cat_missing: Vec<Vec<bool>> = (0..n_cat)
        .map(|j| table.cat.iter().map(|r| r[j].is_none()).collect())
        .collect();
    let cont_missing: Vec<Vec<bool>> = (0..n_cont)
        .map(|j| table.cont.iter().map(|r| r[j].is_none()).collect())
        .collect();
    let any_missing = cat_missing.iter().flatten().any(|&m| m)
        || cont_missing.iter().flatten().any(|&m| m);
    if !any_missing {
        return Ok((
            table.clone(),
            ImputationReport {
                iterations: 0,
                deltas: Vec::new(),
            },
        ));
    }

    // Working copies, initialized mean/mode.
    let mut cat = vec![vec![0usize; n_cat]; n];
    for j in 0..n_cat {
        let card = table.schema.categorical[j].cardinality();
        let mut counts = vec![0usize; card];
        for r in 0..n {
            if let Some(v) = table.cat[r][j] {
                counts[v] += 1;
            }
        }
        let mode = counts
            .iter()
            .enumerate()
            .max_by_key(|&(_, c)| *c)
            .map(|(i, _)| i)
            .unwrap();
        for r in 0..n {
            cat[r][j] = table.cat[r][j].unwrap_or(mode);
        }
    }
    let mut cont = vec![vec![0.0f64; n_cont]; n];
    for j in 0..n_cont {
        let (mut sum, mut count) = (0.0, 0usize);
        for r in 0..n {
            if let Some(v) = table.cont[r][j] {
                sum += v;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        for r in 0..n {
            cont[r][j] = table.cont[r][j].unwrap_or(mean);
        }
    }

    // Feature visiting order: continuous are indices 0..n_cont, categorical
    // follow; shuffled once per call.
    enum Target {
        Cont(usize),
        Cat(usize),
    }
    let mut order: Vec<Target> = (0..n_cont)
        .map(Target::Cont)
        .chain((0..n_cat).map(Target::Cat))
        .collect();
    {
        use rand::seq::SliceRandom;
        let mut r = rng::stream(seed, "impute");
        order.shuffle(&mut r);
    }

    // Predictor row for the regression targeting one feature: intercept,
    // every other continuous value raw, every other categorical one-hot.
    let cards: Vec<usize> = table
        .schema
        .categorical
        .iter()
        .map(|f| f.cardinality())
        .collect();
    let p_full = 1 + n_cont + cards.iter().sum::<usize>();
    let fill_predictors = |row: usize,
                           skip_cont: Option<usize>,
                           skip_cat: Option<usize>,
                           out: &mut Vec<f64>,
                           cont: &[Vec<f64>],
                           cat: &[Vec<usize>]| {
        out.push(1.0);
        for j in 0..n_cont {
            if Some(j) != skip_cont {
                out.push(cont[row][j]);
            }
        }
        for j in 0..n_cat {
            if Some(j) != skip_cat {
                for level in 0..cards[j] {
                    out.push(if cat[row][j] == level { 1.0 } else { 0.0 });
                }
            }
        }
    };

    let mut report = ImputationReport {
        iterations: 0,
        deltas: Vec::new(),
    };
    for _ in 0..max_iters {
        let mut max_delta: f64 = 0.0;
        for target in &order {
            match *target {
                Target::Cont(j) => {
                    if !cont_missing[j].contains(&true) {
                        continue;
                    }
                    let p = p_full - 1;
                    let observed: Vec<usize> =
                        (0..n).filter(|&r| !cont_missing[j][r]).collect();
                    let mut x = Vec::with_capacity(observed.len() * p);
                    let mut y = Vec::with_capacity(observed.len());
                    for &r in &observed {
                        fill_predictors(r, Some(j), None, &mut x, &cont, &cat);
                        y.push(cont[r][j]);
                    }
                    let Some(beta) = ridge_fit(&x, &y, observed.len(), p) else {
                        continue;
                    };
                    let mut xr = Vec::with_capacity(p);
                    for r in 0..n {
                        if !cont_missing[j][r] {
                            continue;
                        }
                        xr.clear();
                        fill_predictors(r, Some(j), None, &mut xr, &cont, &cat);
                        let pred: f64 = xr.iter().zip(&beta).map(|(a, b)| a * b).sum();
                        max_delta = max_delta.max((pred - cont[r][j]).abs());
                        cont[r][j] = pred;
                    }
                }
                Target::Cat(j) => {
                    if !cat_missing[j].contains(&true) {
                        continue;
                    }
                    let p = p_full - cards[j];
                    let observed: Vec<usize> =
                        (0..n).filter(|&r| !cat_missing[j][r]).collect();
                    let mut x = Vec::with_capacity(observed.len() * p);
                    for &r in &observed {
                        fill_predictors(r, None, Some(j), &mut x, &cont, &cat);
                    }
                    // One linear scorer per class; impute the argmax class.
                    let mut betas = Vec::with_capacity(cards[j]);
                    let mut solvable = true;
                    for level in 0..cards[j] {
                        let y: Vec<f64> = observed
                            .iter()
                            .map(|&r| if cat[r][j] == level { 1.0 } else { 0.0 })
                            .collect();
                        match ridge_fit(&x, &y, observed.len(), p) {
                            Some(b) => betas.push(b),
                            None => {
                                solvable = false;
                                break;
                            }
                        }
                    }
                    if !solvable {
                        continue;
                    }
                    let mut xr = Vec::with_capacity(p);
                    for r in 0..n {
                        if !cat_missing[j][r] {
                            continue;
                        }
                        xr.clear();
                        fill_predictors(r, None, Some(j), &mut xr, &cont, &cat);
                        let best = betas
                            .iter()
                            .map(|b| xr.iter().zip(b).map(|(a, w)| a * w).sum::<f64>())
                            .enumerate()
                            .max_by(|a, b| a.1.total_cmp(&b.1))
                            .map(|(i, _)| i)
                            .unwrap();
                        if best != cat[r][j] {
                            max_delta = max_delta.max(1.0);
                            cat[r][j] = best;
                        }
                    }
                }
            }
        }
        report.iterations += 1;
        report.deltas.push(max_delta);
        if max_delta < 1e-3 {
            break;
        }
    }

    let mut out = table.clone();
    for r in 0..n {
        for j in 0..n_cat {
            out.cat[r][j] = Some(cat[r][j]);
        }
        for j in 0..n_cont {
            out.cont[r][j] = Some(cont[r][j]);
        }
    }
    Ok((out, report))
}

// ---------------------------------------------------------------------------
// Stratified splitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train, self.validation, self.test];
        if fracs.iter().any(|&f| f <= 0.0) {
            return Err(Error::Split("all three fractions must be positive".into()));
        }
        if (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Split("fractions must sum to 1".into()));
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.6,
            validation: 0.2,
            test: 0.2,
            seed: 0,
        }
    }
}

/// Largest-remainder apportionment of `n` items to the given fractions.
fn apportion(n: usize, fracs: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fracs.iter().map(|f| f * n as f64).collect();
    let mut counts: [usize; 3] = [0; 3];
    let mut assigned = 0;
    for (i, q) in quotas.iter().enumerate() {
        counts[i] = q.floor() as usize;
        assigned += counts[i];
    }
    let mut rema: Vec<(usize, f64)> = quotas
        .iter()
        .enumerate()
        .map(|(i, q)| (i, q - q.floor()))
        .collect();
    rema.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for k in 0..n - assigned {
        counts[rema[k].0] += 1;
    }
    counts
}

/// Stratified train/validation/test split by the risk label: per stratum,
/// rows are shuffled deterministically and apportioned by largest remainder,
/// so split proportions stay within one row of the requested fractions.
pub fn split(
    table: &CohortTable,
    spec: &SplitSpec,
) -> Result<(CohortTable, CohortTable, CohortTable)> {
    spec.validate()?;
    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for class in 0..RiskLabel::COUNT {
        let mut stratum: Vec<usize> = (0..table.n_rows())
            .filter(|&r| table.risk[r].index() == class)
            .collect();
        if stratum.is_empty() {
            continue;
        }
        if stratum.len() < 3 {
            return Err(Error::Split(format!(
                "risk stratum '{}' has only {} rows (need at least 3)",
                RiskLabel::from_index(class).unwrap().as_str(),
                stratum.len()
            )));
        }
        use rand::seq::SliceRandom;
        let mut r = rng::stream(spec.seed, &format!("split.{class}"));
        stratum.shuffle(&mut r);
        let counts = apportion(stratum.len(), &[spec.train, spec.validation, spec.test]);
        let mut offset = 0;
        for (part, &count) in parts.iter_mut().zip(&counts) {
            part.extend_from_slice(&stratum[offset..offset + count]);
            offset += count;
        }
    }
    for part in &mut parts {
        part.sort_unstable();
    }
    Ok((
        table.select_rows(&parts[0]),
        table.select_rows(&parts[1]),
        table.select_rows(&parts[2]),
    ))
}

// ---------------------------------------------------------------------------
// Synthetic cohort generator
// ---------------------------------------------------------------------------

/// Class priors matching the reported cohort composition.
pub const RISK_PRIORS: [f64; 3] = [0.255, 0.208, 0.537];
pub const DOWNSTREAM_PRIORS: [f64; 2] = [0.27, 0.73];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub rows: usize,
    /// Number of independent latent factors; the label-driving severity
    /// score is their normalized sum, and features load round-robin on
    /// individual factors.
    pub latent_factors: usize,
    /// Correlation strength between the two tasks: the downstream score is
    /// rho * severity + (1 - rho) * independent noise.
    pub rho: f64,
    /// Fraction of risk labels resampled from the marginal prior.
    pub risk_label_noise: f64,
    /// Fraction of downstream labels resampled from the marginal prior.
    pub downstream_label_noise: f64,
    /// Per-cell probability of masking a feature value.
    pub missing_rate: f64,
    /// Signal weight per modality group; unlisted groups get 0.
    pub group_signal: BTreeMap<String, f64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let group_signal = BTreeMap::from(
            [
                ("demographics", 0.4),
                ("vital_signs", 0.4),
                ("medications", 0.3),
                ("comorbidity_history", 0.5),
                ("segment_readings", 2.0),
                ("decoy", 0.0),
            ]
            .map(|(k, v)| (k.to_string(), v)),
        );
        SyntheticConfig {
            rows: 1000,
            latent_factors: 1,
            rho: 0.8,
            risk_label_noise: 0.0,
            downstream_label_noise: 0.0,
            missing_rate: 0.0,
            group_signal,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.latent_factors == 0 {
            return Err(Error::Config(
                "rows and latent_factors must be positive".into(),
            ));
        }
        for (name, v) in [
            ("rho", self.rho),
            ("risk_label_noise", self.risk_label_noise),
            ("downstream_label_noise", self.downstream_label_noise),
            ("missing_rate", self.missing_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        Ok(())
    }

    /// The fixed clinical-style feature layout the generator emits.
    pub fn schema() -> FeatureSchema {
        use crate::encoding::{CatFeature, ContFeature, MissingPolicy};
        let cat = |name: &str, levels: &[&str], group: &str| CatFeature {
            name: name.into(),
            levels: levels.iter().map(|s| s.to_string()).collect(),
            group: group.into(),
            missing: MissingPolicy::Impute,
        };
        let cont = |name: &str, group: &str| ContFeature {
            name: name.into(),
            group: group.into(),
            missing: MissingPolicy::Impute,
        };
        let yes_no = ["no", "yes"];
        FeatureSchema {
            categorical: vec![
                cat("sex", &["female", "male"], "demographics"),
                cat("statin", &yes_no, "medications"),
                cat("aspirin", &yes_no, "medications"),
                cat("beta_blocker", &yes_no, "medications"),
                cat("diabetes", &yes_no, "comorbidity_history"),
                cat("hypertension", &yes_no, "comorbidity_history"),
                cat(
                    "smoking",
                    &["never", "former", "current"],
                    "comorbidity_history",
                ),
                cat("prior_mi", &yes_no, "comorbidity_history"),
            ],
            continuous: vec![
                cont("age", "demographics"),
                cont("bmi", "demographics"),
                cont("systolic_bp", "vital_signs"),
                cont("diastolic_bp", "vital_signs"),
                cont("heart_rate", "vital_signs"),
                cont("segment_1", "segment_readings"),
                cont("segment_2", "segment_readings"),
                cont("segment_3", "segment_readings"),
                cont("segment_4", "segment_readings"),
                cont("segment_5", "segment_readings"),
                cont("segment_6", "segment_readings"),
                cont("segment_7", "segment_readings"),
                cont("segment_8", "segment_readings"),
                cont("noise_1", "decoy"),
                cont("noise_2", "decoy"),
                cont("noise_3", "decoy"),
            ],
        }
    }
}

/// Per-row generative record for oracle-based tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub row: usize,
    /// The latent severity score that drives both labels.
    pub z: f64,
    pub risk: RiskLabel,
    pub downstream: DownstreamLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub rows: Vec<GroundTruthRow>,
    /// Population AUC of the latent severity score against the downstream
    /// label under this config (Monte-Carlo estimate, n = 200,000).
    pub bayes_auc_downstream: f64,
    /// Macro one-vs-rest AUC of the per-class Bayes-optimal scores against
    /// the risk label, same estimate.
    pub bayes_auc_risk_macro: f64,
}

struct LabelModel {
    risk_cuts: [f64; 2],
    downstream_cut: f64,
    rho: f64,
    noise_scale: f64,
    risk_noise: f64,
    downstream_noise: f64,
}

impl LabelModel {
    fn new(config: &SyntheticConfig) -> LabelModel {
        let normal = Normal::standard();
        let sigma_u = (config.rho * config.rho
            + (1.0 - config.rho) * (1.0 - config.rho))
            .sqrt();
        LabelModel {
            risk_cuts: [
                normal.inverse_cdf(RISK_PRIORS[0]),
                normal.inverse_cdf(RISK_PRIORS[0] + RISK_PRIORS[1]),
            ],
            downstream_cut: normal.inverse_cdf(DOWNSTREAM_PRIORS[0]) * sigma_u,
            rho: config.rho,
            noise_scale: 1.0 - config.rho,
            risk_noise: config.risk_label_noise,
            downstream_noise: config.downstream_label_noise,
        }
    }

    fn draw(&self, s: f64, rng: &mut impl Rng) -> (RiskLabel, DownstreamLabel) {
        let risk = if rng.gen::<f64>() < self.risk_noise {
            sample_prior_risk(rng)
        } else if s < self.risk_cuts[0] {
            RiskLabel::Low
        } else if s < self.risk_cuts[1] {
            RiskLabel::Medium
        } else {
            RiskLabel::High
        };
        let eps: f64 = rng.sample(StandardNormal);
        let u = self.rho * s + self.noise_scale * eps;
        let downstream = if rng.gen::<f64>() < self.downstream_noise {
            sample_prior_downstream(rng)
        } else if u < self.downstream_cut {
            DownstreamLabel::Functional
        } else {
            DownstreamLabel::Invasive
        };
        (risk, downstream)
    }
}

fn sample_prior_risk(rng: &mut impl Rng) -> RiskLabel {
    let u: f64 = rng.gen();
    if u < RISK_PRIORS[0] {
        RiskLabel::Low
    } else if u < RISK_PRIORS[0] + RISK_PRIORS[1] {
        RiskLabel::Medium
    } else {
        RiskLabel::High
    }
}

fn sample_prior_downstream(rng: &mut impl Rng) -> DownstreamLabel {
    if rng.gen::<f64>() < DOWNSTREAM_PRIORS[0] {
        DownstreamLabel::Functional
    } else {
        DownstreamLabel::Invasive
    }
}

const BAYES_MC_SAMPLES: usize = 200_000;

/// Draws a synthetic cohort. Pure in (config, seed): identical tables and
/// ground truth for identical inputs.
pub fn generate_synthetic_cohort(
    config: &SyntheticConfig,
    seed: u64,
) -> Result<(CohortTable, GroundTruth)> {
    config.validate()?;
    let schema = SyntheticConfig::schema();
    let model = LabelModel::new(config);
    let normal = Normal::standard();
    let k = config.latent_factors;
    let weight = |group: &str| config.group_signal.get(group).copied().unwrap_or(0.0);

    let mut rng = rng::stream(seed, "synthetic");
    let mut table = CohortTable {
        schema: schema.clone(),
        cat: Vec::with_capacity(config.rows),
        cont: Vec::with_capacity(config.rows),
        risk: Vec::with_capacity(config.rows),
        downstream: Vec::with_capacity(config.rows),
    };
    let mut truth_rows = Vec::with_capacity(config.rows);

    for row in 0..config.rows {
        let z: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let s = z.iter().sum::<f64>() / (k as f64).sqrt();

        // Features load round-robin on individual factors; the raw score is
        // weight * factor + unit noise, so its scale is sqrt(weight^2 + 1).
        let mut cat_row = Vec::with_capacity(schema.categorical.len());
        for (j, f) in schema.categorical.iter().enumerate() {
            let w = weight(&f.group);
            let eps: f64 = rng.sample(StandardNormal);
            let v = w * z[j % k] + eps;
            let scale = (w * w + 1.0).sqrt();
            let card = f.cardinality();
            let mut level = 0;
            for t in 1..card {
                if v >= normal.inverse_cdf(t as f64 / card as f64) * scale {
                    level = t;
                }
            }
            cat_row.push(Some(level));
        }
        let mut cont_row = Vec::with_capacity(schema.continuous.len());
        for (j, f) in schema.continuous.iter().enumerate() {
            let w = weight(&f.group);
            let eps: f64 = rng.sample(StandardNormal);
            cont_row.push(Some(w * z[(schema.categorical.len() + j) % k] + eps));
        }

        let (risk, downstream) = model.draw(s, &mut rng);

        if config.missing_rate > 0.0 {
            for cell in cat_row.iter_mut() {
                if rng.gen::<f64>() < config.missing_rate {
                    *cell = None;
                }
            }
            for cell in cont_row.iter_mut() {
                if rng.gen::<f64>() < config.missing_rate {
                    *cell = None;
                }
            }
        }

        table.cat.push(cat_row);
        table.cont.push(cont_row);
        table.risk.push(risk);
        table.downstream.push(downstream);
        truth_rows.push(GroundTruthRow {
            row,
            z: s,
            risk,
            downstream,
        });
    }
    table.validate()?;

    // Population-level Bayes AUCs by Monte Carlo on a separate stream.
    let mut mc = rng::stream(seed, "synthetic.bayes");
    let mut scores = Vec::with_capacity(BAYES_MC_SAMPLES);
    let mut ds_flags = Vec::with_capacity(BAYES_MC_SAMPLES);
    let mut risk_labels = Vec::with_capacity(BAYES_MC_SAMPLES);
    for _ in 0..BAYES_MC_SAMPLES {
        let s = (0..k)
            .map(|_| mc.sample::<f64, _>(StandardNormal))
            .sum::<f64>()
            / (k as f64).sqrt();
        let (risk, downstream) = model.draw(s, &mut mc);
        scores.push(s);
        ds_flags.push(downstream == DownstreamLabel::Invasive);
        risk_labels.push(risk.index());
    }
    let bayes_auc_downstream = crate::metrics::roc_auc(&scores, &ds_flags).unwrap_or(0.5);
    // Per class the Bayes-optimal score is monotone in the posterior, which
    // for the band model is two-valued: use the band indicator.
    let mut class_aucs = Vec::new();
    for class in 0..RiskLabel::COUNT {
        let band: Vec<f64> = scores
            .iter()
            .map(|&s| {
                let in_band = match class {
                    0 => s < model.risk_cuts[0],
                    1 => s >= model.risk_cuts[0] && s < model.risk_cuts[1],
                    _ => s >= model.risk_cuts[1],
                };
                in_band as u8 as f64
            })
            .collect();
        let flags: Vec<bool> = risk_labels.iter().map(|&l| l == class).collect();
        if let Ok(a) = crate::metrics::roc_auc(&band, &flags) {
            class_aucs.push(a);
        }
    }
    let bayes_auc_risk_macro =
        class_aucs.iter().sum::<f64>() / class_aucs.len().max(1) as f64;

    Ok((
        table,
        GroundTruth {
            rows: truth_rows,
            bayes_auc_downstream,
            bayes_auc_risk_macro,
        },
    ))
}

#[cfg(test)]
mod tests;
