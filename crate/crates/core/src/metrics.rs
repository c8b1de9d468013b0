//! Evaluation statistics: discrimination (AUC with bootstrap CIs),
//! operating-point metrics, Brier calibration, and the comparison tests
//! (paired t, chi-square, one-way ANOVA).

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor, StudentsT};

use crate::error::{Error, Result};
use crate::rng;

/// Mann-Whitney AUC: probability a random positive outscores a random
/// negative, ties counted one half. Computed with exact integer pair
/// counting so it matches a pairwise brute force bit for bit.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Usage("scores/labels length mismatch".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut wins: u64 = 0; // positive strictly above negative
    let mut ties: u64 = 0; // positive tied with negative
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut group_pos: u64 = 0;
        let mut group_neg: u64 = 0;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                group_pos += 1;
            } else {
                group_neg += 1;
            }
            j += 1;
        }
        wins += group_pos * neg_below;
        ties += group_pos * group_neg;
        neg_below += group_neg;
        i = j;
    }
    Ok((2 * wins + ties) as f64 / (2 * pos * neg) as f64)
}

/// Stratified percentile bootstrap CI for the AUC. Positives and negatives
/// are resampled separately, preserving class counts; the interval is
/// widened, if necessary, to contain the point estimate.
pub fn auc_bootstrap_ci(
    scores: &[f64],
    labels: &[bool],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let point = roc_auc(scores, labels)?;
    let pos_idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg_idx: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let mut rng = rng::stream(seed, "bootstrap");
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut s = Vec::with_capacity(labels.len());
        let mut l = Vec::with_capacity(labels.len());
        for _ in 0..pos_idx.len() {
            s.push(scores[pos_idx[rng.gen_range(0..pos_idx.len())]]);
            l.push(true);
        }
        for _ in 0..neg_idx.len() {
            s.push(scores[neg_idx[rng.gen_range(0..neg_idx.len())]]);
            l.push(false);
        }
        stats.push(roc_auc(&s, &l)?);
    }
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let lo = crate::encoding::quantile(&stats, alpha);
    let hi = crate::encoding::quantile(&stats, 1.0 - alpha);
    Ok((lo.min(point), hi.max(point)))
}

/// One-vs-rest AUC per class from probability rows; `None` where a class is
/// absent from the labels.
pub fn multiclass_ovr_auc(probs: &[Vec<f64>], labels: &[usize]) -> Result<Vec<Option<f64>>> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::Usage("probs/labels length mismatch".into()));
    }
    let classes = probs[0].len();
    let mut out = Vec::with_capacity(classes);
    for c in 0..classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let flags: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        out.push(roc_auc(&scores, &flags).ok());
    }
    Ok(out)
}

/// Macro average of the defined one-vs-rest class AUCs.
pub fn macro_ovr_auc(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let per_class = multiclass_ovr_auc(probs, labels)?;
    let defined: Vec<f64> = per_class.into_iter().flatten().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric(
            "no class has both positives and negatives".into(),
        ));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Class assignment: the class with the highest probability.
pub fn argmax_assign(probs: &[Vec<f64>]) -> Vec<usize> {
    probs
        .iter()
        .map(|p| {
            p.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub npv: Option<f64>,
}

/// Sensitivity/specificity/precision/NPV of assignments against labels for
/// one positive class. Zero-denominator cells are undefined, not zero.
pub fn confusion_metrics(assigned: &[usize], labels: &[usize], positive: usize) -> ConfusionMetrics {
    let (mut tp, mut fp, mut tn, mut fnn) = (0u64, 0u64, 0u64, 0u64);
    for (&a, &l) in assigned.iter().zip(labels) {
        match (a == positive, l == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fnn += 1,
        }
    }
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    ConfusionMetrics {
        sensitivity: ratio(tp, tp + fnn),
        specificity: ratio(tn, tn + fp),
        precision: ratio(tp, tp + fp),
        npv: ratio(tn, tn + fnn),
    }
}

/// Multi-category Brier score: mean over rows of the squared distance
/// between the probability row and the one-hot outcome.
pub fn brier(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        for (c, &pc) in p.iter().enumerate() {
            let o = if c == y { 1.0 } else { 0.0 };
            total += (pc - o) * (pc - o);
        }
    }
    total / probs.len() as f64
}

/// Binary one-vs-rest Brier score for a single class probability column.
pub fn brier_binary(scores: &[f64], flags: &[bool]) -> f64 {
    scores
        .iter()
        .zip(flags)
        .map(|(&p, &y)| {
            let o = if y { 1.0 } else { 0.0 };
            (p - o) * (p - o)
        })
        .sum::<f64>()
        / scores.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub test: String,
    pub statistic: f64,
    pub p_value: f64,
    pub dof: Option<f64>,
}

/// Classic paired-sample t test with a two-sided p-value.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<ComparisonResult> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Usage(
            "paired t test needs equal lengths >= 2".into(),
        ));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(Error::DegenerateTest(
            "zero variance of paired differences".into(),
        ));
    }
    let t = mean / (var / n).sqrt();
    let dof = n - 1.0;
    let dist = StudentsT::new(0.0, 1.0, dof).expect("valid dof");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(ComparisonResult {
        test: "paired t-test".into(),
        statistic: t,
        p_value: p.clamp(0.0, 1.0),
        dof: Some(dof),
    })
}

/// Pearson chi-square test of independence on a contingency table of counts.
pub fn chi_square(table: &[Vec<f64>]) -> Result<ComparisonResult> {
    let r = table.len();
    let c = table.first().map_or(0, Vec::len);
    if r < 2 || c < 2 || table.iter().any(|row| row.len() != c) {
        return Err(Error::Usage("contingency table must be at least 2x2".into()));
    }
    let row_sums: Vec<f64> = table.iter().map(|row| row.iter().sum()).collect();
    let col_sums: Vec<f64> = (0..c).map(|j| table.iter().map(|row| row[j]).sum()).collect();
    let total: f64 = row_sums.iter().sum();
    let mut stat = 0.0;
    for i in 0..r {
        for j in 0..c {
            let expected = row_sums[i] * col_sums[j] / total;
            if expected <= 0.0 {
                return Err(Error::Usage(format!(
                    "zero expected count in cell ({i}, {j})"
                )));
            }
            let d = table[i][j] - expected;
            stat += d * d / expected;
        }
    }
    let dof = ((r - 1) * (c - 1)) as f64;
    let dist = ChiSquared::new(dof).expect("valid dof");
    let p = 1.0 - dist.cdf(stat);
    Ok(ComparisonResult {
        test: "chi-square".into(),
        statistic: stat,
        p_value: p.clamp(0.0, 1.0),
        dof: Some(dof),
    })
}

/// One-way ANOVA F test across groups of continuous values.
pub fn one_way_anova(groups: &[Vec<f64>]) -> Result<ComparisonResult> {
    if groups.len() < 2 || groups.iter().any(|g| g.len() < 2) {
        return Err(Error::Usage(
            "ANOVA needs >= 2 groups with >= 2 values each".into(),
        ));
    }
    let k = groups.len() as f64;
    let n: f64 = groups.iter().map(|g| g.len() as f64).sum();
    let grand: f64 = groups.iter().flatten().sum::<f64>() / n;
    let ss_between: f64 = groups
        .iter()
        .map(|g| {
            let m = g.iter().sum::<f64>() / g.len() as f64;
            g.len() as f64 * (m - grand) * (m - grand)
        })
        .sum();
    let ss_within: f64 = groups
        .iter()
        .map(|g| {
            let m = g.iter().sum::<f64>() / g.len() as f64;
            g.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
        })
        .sum();
    let df_between = k - 1.0;
    let df_within = n - k;
    if ss_within <= 0.0 {
        return Err(Error::DegenerateTest(
            "zero within-group variance".into(),
        ));
    }
    let f = (ss_between / df_between) / (ss_within / df_within);
    let dist = FisherSnedecor::new(df_between, df_within).expect("valid dofs");
    let p = 1.0 - dist.cdf(f);
    Ok(ComparisonResult {
        test: "one-way ANOVA".into(),
        statistic: f,
        p_value: p.clamp(0.0, 1.0),
        dof: Some(df_between),
    })
}

/// One evaluated target row in the Table-2 style report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub target: String,
    pub auc: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub npv: Option<f64>,
    /// One-vs-rest binary Brier for this target's probability column.
    pub brier: f64,
}

/// Full evaluation report: per-class rows for the 3-class risk task, one row
/// for the binary downstream task, and task-level multiclass Brier scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub targets: Vec<TargetReport>,
    pub risk_brier: Option<f64>,
    pub downstream_brier: Option<f64>,
    pub ci_method: String,
}

pub const RISK_CLASS_NAMES: [&str; 3] = ["low", "medium", "high"];
pub const BOOTSTRAP_RESAMPLES: usize = 2000;

fn target_report(
    name: &str,
    scores: &[f64],
    flags: &[bool],
    assigned: &[usize],
    labels: &[usize],
    positive: usize,
    seed: u64,
) -> TargetReport {
    let auc = roc_auc(scores, flags).ok();
    let ci = auc.and_then(|_| {
        auc_bootstrap_ci(scores, flags, BOOTSTRAP_RESAMPLES, 0.95, seed).ok()
    });
    let cm = confusion_metrics(assigned, labels, positive);
    TargetReport {
        target: name.into(),
        auc,
        ci,
        sensitivity: cm.sensitivity,
        specificity: cm.specificity,
        precision: cm.precision,
        npv: cm.npv,
        brier: brier_binary(scores, flags),
    }
}

impl MetricsReport {
    /// Score the configured tasks; either may be absent for single-task
    /// model variants.
    pub fn compute(
        risk: Option<(&[Vec<f64>], &[usize])>,
        downstream: Option<(&[Vec<f64>], &[usize])>,
        seed: u64,
    ) -> Result<Self> {
        let n = risk
            .map(|(_, l)| l.len())
            .or_else(|| downstream.map(|(_, l)| l.len()))
            .ok_or_else(|| Error::Usage("no task predictions to report".into()))?;
        let mut targets = Vec::new();
        let mut risk_brier = None;
        if let Some((risk_probs, risk_labels)) = risk {
            let assigned = argmax_assign(risk_probs);
            for (c, name) in RISK_CLASS_NAMES.iter().enumerate() {
                let scores: Vec<f64> = risk_probs.iter().map(|p| p[c]).collect();
                let flags: Vec<bool> = risk_labels.iter().map(|&l| l == c).collect();
                targets.push(target_report(
                    name,
                    &scores,
                    &flags,
                    &assigned,
                    risk_labels,
                    c,
                    rng::derive(seed, "ci", c as u64),
                ));
            }
            risk_brier = Some(brier(risk_probs, risk_labels));
        }
        let mut downstream_brier = None;
        if let Some((probs, labels)) = downstream {
            let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
            let flags: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            let assigned = argmax_assign(probs);
            targets.push(target_report(
                "invasive test",
                &scores,
                &flags,
                &assigned,
                labels,
                1,
                rng::derive(seed, "ci", 3),
            ));
            downstream_brier = Some(brier(probs, labels));
        }
        Ok(MetricsReport {
            n,
            targets,
            risk_brier,
            downstream_brier,
            ci_method: format!(
                "stratified percentile bootstrap, {BOOTSTRAP_RESAMPLES} resamples"
            ),
        })
    }

    /// Aligned-column text table mirroring the report layout.
    pub fn to_text_table(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.3}"));
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14} {:<22} {:>11} {:>11} {:>11} {:>11} {:>11}\n",
            "Target", "AUC (95% CI)", "Sensitivity", "Specificity", "Precision", "NPV", "Brier"
        ));
        for t in &self.targets {
            let auc_ci = match (t.auc, t.ci) {
                (Some(a), Some((lo, hi))) => format!("{a:.3} ({lo:.3}, {hi:.3})"),
                (Some(a), None) => format!("{a:.3}"),
                _ => "undefined".to_string(),
            };
            out.push_str(&format!(
                "{:<14} {:<22} {:>11} {:>11} {:>11} {:>11} {:>11.3}\n",
                t.target,
                auc_ci,
                fmt_opt(t.sensitivity),
                fmt_opt(t.specificity),
                fmt_opt(t.precision),
                fmt_opt(t.npv),
                t.brier
            ));
        }
        out.push_str(&format!(
            "n = {}{}{}\nCI: {}\n",
            self.n,
            self.risk_brier
                .map_or(String::new(), |b| format!(", risk multiclass Brier = {b:.3}")),
            self.downstream_brier
                .map_or(String::new(), |b| format!(", downstream Brier = {b:.3}")),
            self.ci_method
        ));
        out
    }
}

#[cfg(test)]
mod tests;
