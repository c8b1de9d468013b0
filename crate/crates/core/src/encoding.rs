//! Feature encodings: trainable per-category embedding tables for
//! categorical columns and quantile-binned piecewise-linear encodings for
//! continuous columns, both projected to a shared embedding dimension.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};

/// What the pipeline does with a missing cell for a feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Fill by round-robin multivariate imputation (the default).
    #[default]
    Impute,
    /// Reject tables that have this feature missing anywhere.
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatFeature {
    pub name: String,
    /// Category level names; cell values index into this list.
    pub levels: Vec<String>,
    /// Feature-modality group for ablation studies.
    #[serde(default)]
    pub group: String,
    #[serde(default)]
    pub missing: MissingPolicy,
}

impl CatFeature {
    pub fn cardinality(&self) -> usize {
        self.levels.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContFeature {
    pub name: String,
    #[serde(default)]
    pub group: String,
    #[serde(default)]
    pub missing: MissingPolicy,
}

/// Declaration of the cohort table's feature columns.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeatureSchema {
    #[serde(default)]
    pub categorical: Vec<CatFeature>,
    #[serde(default)]
    pub continuous: Vec<ContFeature>,
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        if self.categorical.is_empty() && self.continuous.is_empty() {
            return Err(Error::Schema("schema declares no features".into()));
        }
        let mut names: Vec<&str> = self
            .categorical
            .iter()
            .map(|f| f.name.as_str())
            .chain(self.continuous.iter().map(|f| f.name.as_str()))
            .collect();
        names.sort_unstable();
        for w in names.windows(2) {
            if w[0] == w[1] {
                return Err(Error::Schema(format!("duplicate feature name '{}'", w[0])));
            }
        }
        for f in &self.categorical {
            if f.levels.len() < 2 {
                return Err(Error::Schema(format!(
                    "categorical feature '{}' needs at least 2 levels",
                    f.name
                )));
            }
        }
        Ok(())
    }

    /// Distinct modality group names, in declaration order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for g in self
            .categorical
            .iter()
            .map(|f| f.group.clone())
            .chain(self.continuous.iter().map(|f| f.group.clone()))
        {
            if !out.contains(&g) {
                out.push(g);
            }
        }
        out
    }

    /// Schema restricted to the named features, preserving order.
    pub fn subset(&self, keep: &[String]) -> Result<FeatureSchema> {
        for name in keep {
            if !self.categorical.iter().any(|f| &f.name == name)
                && !self.continuous.iter().any(|f| &f.name == name)
            {
                return Err(Error::Schema(format!("unknown feature '{name}'")));
            }
        }
        Ok(FeatureSchema {
            categorical: self
                .categorical
                .iter()
                .filter(|f| keep.contains(&f.name))
                .cloned()
                .collect(),
            continuous: self
                .continuous
                .iter()
                .filter(|f| keep.contains(&f.name))
                .cloned()
                .collect(),
        })
    }
}

// ---------------------------------------------------------------------------
// Piecewise-linear encoding
// ---------------------------------------------------------------------------

/// Quantile bin boundaries for one continuous feature: `T` bins need `T + 1`
/// strictly ascending boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub boundaries: Vec<f64>,
}

impl BinSpec {
    pub fn bin_count(&self) -> usize {
        self.boundaries.len() - 1
    }
}

/// Empirical quantile with linear interpolation between order statistics.
/// `sorted` must be ascending and nonempty.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Fit quantile bins: boundaries at levels t/T, duplicates merged so the
/// resulting bin count is at most `requested` and at least 1. The bin count
/// is also capped at (distinct value count - 1).
pub fn fit_bins(values: &[f64], requested: usize) -> Result<BinSpec> {
    if requested == 0 {
        return Err(Error::Usage("requested bin count must be >= 1".into()));
    }
    let mut finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    finite.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut distinct = 0usize;
    for i in 0..finite.len() {
        if i == 0 || finite[i] != finite[i - 1] {
            distinct += 1;
        }
    }
    if distinct < 2 {
        return Err(Error::Schema(
            "all values identical: treat the feature as categorical or drop it".into(),
        ));
    }
    let t = requested.min(distinct - 1).max(1);
    let mut boundaries = Vec::with_capacity(t + 1);
    for k in 0..=t {
        let b = quantile(&finite, k as f64 / t as f64);
        if boundaries.last().map_or(true, |&last| b > last) {
            boundaries.push(b);
        }
    }
    debug_assert!(boundaries.len() >= 2);
    Ok(BinSpec { boundaries })
}

/// Piecewise-linear encoding of `x`: one coordinate per bin, each giving the
/// fractional position of `x` within that bin. Out-of-range values
/// extrapolate linearly in the first/last bin.
pub fn ple_encode(x: f64, spec: &BinSpec) -> Result<Vec<f64>> {
    if !x.is_finite() {
        return Err(Error::Validation(format!(
            "non-finite continuous value {x}"
        )));
    }
    let t_count = spec.bin_count();
    let b = &spec.boundaries;
    let mut e = Vec::with_capacity(t_count);
    for t in 1..=t_count {
        let (lo, hi) = (b[t - 1], b[t]);
        let v = if t > 1 && x < lo {
            0.0
        } else if t < t_count && x >= hi {
            1.0
        } else {
            (x - lo) / (hi - lo)
        };
        e.push(v);
    }
    Ok(e)
}

/// Trainable weights turning a PLE vector into a `D`-dimensional embedding:
/// `v0 + sum_t e_t * v_t`.
#[derive(Debug, Clone)]
pub struct PleEmbedding {
    pub spec: BinSpec,
    /// T x D bin weight vectors.
    pub weights: ParamId,
    /// 1 x D bias.
    pub bias: ParamId,
    pub dim: usize,
}

impl PleEmbedding {
    pub fn build(
        params: &mut ParamSet,
        name: &str,
        spec: BinSpec,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let t = spec.bin_count();
        let weights = params.add(
            format!("{name}.v"),
            vec![t, dim],
            init_uniform(t * dim, dim, rng),
        );
        let bias = params.add_no_decay(
            format!("{name}.v0"),
            vec![1, dim],
            init_uniform(dim, dim, rng),
        );
        PleEmbedding {
            spec,
            weights,
            bias,
            dim,
        }
    }

    /// Embed an already-encoded PLE vector; gradient of the output w.r.t.
    /// `v_t` is exactly `e_t`.
    pub fn embed_encoded(&self, tape: &mut Tape, params: &ParamSet, e: &[f64]) -> Result<Var> {
        let t = self.spec.bin_count();
        if e.len() != t {
            return Err(Error::Validation(format!(
                "PLE vector length {} does not match bin count {t}",
                e.len()
            )));
        }
        let ev = tape.constant(1, t, e.to_vec());
        let w = tape.param(self.weights, params);
        let b = tape.param(self.bias, params);
        let wx = tape.matmul(ev, w)?;
        tape.add(wx, b)
    }

    pub fn embed(&self, tape: &mut Tape, params: &ParamSet, x: f64) -> Result<Var> {
        let e = ple_encode(x, &self.spec)?;
        self.embed_encoded(tape, params, &e)
    }
}

// ---------------------------------------------------------------------------
// Categorical embedding
// ---------------------------------------------------------------------------

/// Per-feature embedding tables. Each table has one row per category level
/// plus a dedicated trainable row for categories unseen at training time.
#[derive(Debug, Clone)]
pub struct CategoricalEmbedding {
    pub tables: Vec<ParamId>,
    pub cardinalities: Vec<usize>,
    pub dim: usize,
}

impl CategoricalEmbedding {
    pub fn build(
        params: &mut ParamSet,
        schema: &FeatureSchema,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut tables = Vec::new();
        let mut cardinalities = Vec::new();
        for f in &schema.categorical {
            let rows = f.cardinality() + 1; // final row: unknown category
            tables.push(params.add(
                format!("embed.cat.{}", f.name),
                vec![rows, dim],
                init_uniform(rows * dim, dim, rng),
            ));
            cardinalities.push(f.cardinality());
        }
        CategoricalEmbedding {
            tables,
            cardinalities,
            dim,
        }
    }

    /// Embed one row of category indices into an M x D matrix. `None` maps
    /// to the unknown-category row; no positional encoding is added.
    pub fn embed_row(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        row: &[Option<usize>],
    ) -> Result<Var> {
        if row.len() != self.tables.len() {
            return Err(Error::Validation(format!(
                "expected {} categorical values, got {}",
                self.tables.len(),
                row.len()
            )));
        }
        let mut parts = Vec::with_capacity(row.len());
        for (i, value) in row.iter().enumerate() {
            let card = self.cardinalities[i];
            let idx = match value {
                Some(v) if *v < card => *v,
                Some(v) => {
                    return Err(Error::Validation(format!(
                        "category index {v} out of range for cardinality {card} in feature {i}"
                    )))
                }
                None => card, // unknown row
            };
            let table = tape.param(self.tables[i], params);
            parts.push(tape.gather_rows(table, &[idx])?);
        }
        tape.concat_rows(&parts)
    }
}

/// Zero-mean uniform init with half-width 1/sqrt(dim), keeping initial
/// attention logits O(1).
pub(crate) fn init_uniform(n: usize, dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let half = 1.0 / (dim as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-half..half)).collect()
}
