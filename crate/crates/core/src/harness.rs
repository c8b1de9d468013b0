//! Experiment harness: dataset generation, training, seeded random
//! hyperparameter search, modality ablation, evaluation, prediction, and
//! paired model comparison. Every command is a pure function of (config,
//! seed) to output files; all randomness flows from one root seed through
//! named derived streams, and files are written atomically.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    drop_sparse_features, generate_synthetic_cohort, impute_round_robin, load_csv, save_csv,
    split, CohortTable, DownstreamLabel, ImputationReport, RiskLabel, SplitSpec, SyntheticConfig,
};
use crate::encoding::FeatureSchema;
use crate::metrics::{paired_t_test, ComparisonResult, MetricsReport};
use crate::model::{Architecture, HeadType, ModelConfig, TabPerceiver, TrainState};
use crate::rng;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Model variants
// ---------------------------------------------------------------------------

/// The five benchmarked model rows: single-task and multitask latent
/// cross-attention models with either head, plus the dense baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    TabperceiverDecoder,
    TabperceiverMlp,
    MlTabperceiverDecoder,
    MlTabperceiverMlp,
    MlpBaseline,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::TabperceiverDecoder,
        Variant::TabperceiverMlp,
        Variant::MlTabperceiverDecoder,
        Variant::MlTabperceiverMlp,
        Variant::MlpBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TabperceiverDecoder => "tabperceiver-decoder",
            Variant::TabperceiverMlp => "tabperceiver-mlp",
            Variant::MlTabperceiverDecoder => "ml-tabperceiver-decoder",
            Variant::MlTabperceiverMlp => "ml-tabperceiver-mlp",
            Variant::MlpBaseline => "mlp-baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown variant '{s}' (expected one of: {})",
                    Variant::ALL.map(|v| v.name()).join(", ")
                ))
            })
    }

    /// Whether this variant trains both tasks jointly.
    pub fn multitask(self) -> bool {
        matches!(
            self,
            Variant::MlTabperceiverDecoder | Variant::MlTabperceiverMlp
        )
    }

    /// Rewrite a model config to this variant. Single-task variants keep
    /// only the primary (first) task; multitask variants require at least
    /// two configured tasks.
    pub fn apply(self, model: &mut ModelConfig) -> Result<()> {
        model.architecture = match self {
            Variant::MlpBaseline => Architecture::MlpBaseline,
            _ => Architecture::Perceiver,
        };
        model.head_type = match self {
            Variant::TabperceiverMlp | Variant::MlTabperceiverMlp => HeadType::Mlp,
            _ => HeadType::Decoder,
        };
        if self.multitask() {
            if model.tasks.len() < 2 {
                return Err(Error::Config(format!(
                    "variant '{}' is multitask but only {} task is configured",
                    self.name(),
                    model.tasks.len()
                )));
            }
        } else if !matches!(self, Variant::MlpBaseline) {
            model.tasks.truncate(1);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

/// One experiment: a model variant, its hyperparameters, the preprocessing
/// and split policy, and (for generated data) the synthetic cohort recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub variant: Variant,
    /// Seeds for multi-seed comparisons; empty means five derived from the
    /// root seed.
    pub seeds: Vec<u64>,
    /// Optional feature include-list applied before any other preprocessing.
    pub feature_include: Option<Vec<String>>,
    /// Schema file for externally supplied CSV cohorts; defaults to the
    /// synthetic generator's schema.
    pub schema: Option<PathBuf>,
    /// Round-robin imputation iteration cap.
    pub impute_max_iters: usize,
    /// Features missing in more than this fraction of rows are dropped.
    pub sparse_threshold: f64,
    pub model: ModelConfig,
    pub split: SplitSpec,
    pub synthetic: SyntheticConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            variant: Variant::MlTabperceiverDecoder,
            seeds: Vec::new(),
            feature_include: None,
            schema: None,
            impute_max_iters: 20,
            sparse_threshold: 0.5,
            model: ModelConfig::default(),
            split: SplitSpec::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)?;
        let config: ExperimentConfig = toml::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.impute_max_iters == 0 {
            return Err(Error::Config("impute_max_iters must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.sparse_threshold) {
            return Err(Error::Config("sparse_threshold must be in [0, 1]".into()));
        }
        self.split.validate()?;
        self.synthetic.validate()?;
        // Variant compatibility and the resulting model config.
        self.model_for_run(0)?;
        Ok(())
    }

    /// The concrete model config for one run: variant applied, seeded.
    pub fn model_for_run(&self, seed: u64) -> Result<ModelConfig> {
        let mut model = self.model.clone();
        self.variant.apply(&mut model)?;
        model.seed = seed;
        model.validate()?;
        Ok(model)
    }

    /// Read the feature schema for external CSVs.
    pub fn load_schema(&self) -> Result<FeatureSchema> {
        match &self.schema {
            Some(path) => {
                let schema: FeatureSchema = toml::from_str(&fs::read_to_string(path)?)?;
                schema.validate()?;
                Ok(schema)
            }
            None => Ok(SyntheticConfig::schema()),
        }
    }
}

// ---------------------------------------------------------------------------
// Atomic file output
// ---------------------------------------------------------------------------

fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Write-then-rename so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_sibling(path);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn save_csv_atomic(table: &CohortTable, path: &Path) -> Result<()> {
    let tmp = tmp_sibling(path);
    save_csv(table, &tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Data preparation
// ---------------------------------------------------------------------------

/// Preprocessed cohort: sparse-feature drop, chained-equations imputation
/// over the whole cohort, then a stratified split.
pub struct PreparedData {
    pub train: CohortTable,
    pub validation: CohortTable,
    pub test: CohortTable,
    pub dropped: Vec<String>,
    pub imputation: ImputationReport,
}

/// Load (or synthesize) the cohort and run the preprocessing pipeline.
/// The split seed is derived from the root so one root seed fixes the run.
pub fn prepare(
    config: &ExperimentConfig,
    data: Option<&Path>,
    root_seed: u64,
) -> Result<PreparedData> {
    let table = match data {
        Some(path) => load_csv(path, &config.load_schema()?)?,
        None => generate_synthetic_cohort(&config.synthetic, rng::derive(root_seed, "data", 0))?.0,
    };
    let table = match &config.feature_include {
        Some(keep) => table.subset_features(keep)?,
        None => table,
    };
    let (table, dropped) = drop_sparse_features(&table, config.sparse_threshold);
    let (table, imputation) = impute_round_robin(
        &table,
        config.impute_max_iters,
        rng::derive(root_seed, "impute", 0),
    )?;
    let spec = SplitSpec {
        seed: rng::derive(root_seed, "split", 0),
        ..config.split
    };
    let (train, validation, test) = split(&table, &spec)?;
    Ok(PreparedData {
        train,
        validation,
        test,
        dropped,
        imputation,
    })
}

/// Score a fitted model on a table, routing each configured task's
/// probabilities to the right report slot.
pub fn evaluate(model: &TabPerceiver, table: &CohortTable, seed: u64) -> Result<MetricsReport> {
    let probs = model.predict_proba(table)?;
    let mut risk: Option<(Vec<Vec<f64>>, Vec<usize>)> = None;
    let mut downstream: Option<(Vec<Vec<f64>>, Vec<usize>)> = None;
    for (t, task) in model.config.tasks.iter().enumerate() {
        match task.name.as_str() {
            "risk" => risk = Some((probs[t].clone(), table.risk_targets())),
            "downstream" => downstream = Some((probs[t].clone(), table.downstream_targets())),
            other => return Err(Error::Usage(format!("unknown task '{other}'"))),
        }
    }
    MetricsReport::compute(
        risk.as_ref().map(|(p, l)| (p.as_slice(), l.as_slice())),
        downstream.as_ref().map(|(p, l)| (p.as_slice(), l.as_slice())),
        seed,
    )
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

/// Write a synthetic cohort: cohort.csv, ground_truth.json, schema.toml.
pub fn cmd_generate(config: &SyntheticConfig, seed: u64, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let (table, truth) = generate_synthetic_cohort(config, seed)?;
    save_csv_atomic(&table, &out_dir.join("cohort.csv"))?;
    write_json(&out_dir.join("ground_truth.json"), &truth)?;
    write_atomic(
        &out_dir.join("schema.toml"),
        toml::to_string_pretty(&SyntheticConfig::schema())?.as_bytes(),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub struct TrainOutcome {
    pub report: MetricsReport,
    pub state: TrainState,
    pub checkpoint: PathBuf,
}

/// Preprocess, fit, and evaluate on the held-out test split. Writes
/// checkpoint.tabp, report.json, report.txt, train_state.json, and the
/// test split itself (test.csv) so `eval` can reproduce the report.
pub fn cmd_train(
    config: &ExperimentConfig,
    data: Option<&Path>,
    root_seed: u64,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir)?;
    let prep = prepare(config, data, root_seed)?;
    let model_config = config.model_for_run(root_seed)?;
    let mut model = TabPerceiver::new(model_config, &prep.train)?;
    let state = model.fit(&prep.train, &prep.validation)?;

    let checkpoint = out_dir.join("checkpoint.tabp");
    let tmp = tmp_sibling(&checkpoint);
    model.save(&tmp)?;
    fs::rename(&tmp, &checkpoint)?;
    // Score the reloaded checkpoint, not the in-memory model, so a later
    // `eval` on the saved test split reproduces this report exactly.
    let model = TabPerceiver::load(&checkpoint)?;
    let report = evaluate(&model, &prep.test, rng::derive(root_seed, "bootstrap", 0))?;
    save_csv_atomic(&prep.test, &out_dir.join("test.csv"))?;
    write_json(&out_dir.join("report.json"), &report)?;
    write_atomic(&out_dir.join("report.txt"), report.to_text_table().as_bytes())?;
    write_json(&out_dir.join("train_state.json"), &state)?;
    Ok(TrainOutcome {
        report,
        state,
        checkpoint,
    })
}

// ---------------------------------------------------------------------------
// tune
// ---------------------------------------------------------------------------

/// Per-knob candidate values for the seeded random search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub learning_rate: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub bins: Vec<usize>,
    pub heads_cross: Vec<usize>,
    pub heads_self: Vec<usize>,
    pub num_blocks: Vec<usize>,
    pub num_latents: Vec<usize>,
    pub latent_channels: Vec<usize>,
    pub self_layers_per_block: Vec<usize>,
    pub weight_decay: Vec<f64>,
    pub label_smoothing: Vec<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            learning_rate: vec![3e-4, 1e-3, 3e-3],
            batch_size: vec![16, 32, 64],
            bins: vec![50, 100, 150],
            heads_cross: vec![2, 4],
            heads_self: vec![2, 4],
            num_blocks: vec![1, 2],
            num_latents: vec![4, 8, 16],
            latent_channels: vec![16, 32],
            self_layers_per_block: vec![2, 4],
            weight_decay: vec![0.0, 0.01],
            label_smoothing: vec![0.0, 0.1, 0.3],
        }
    }
}

impl SearchSpace {
    pub fn load(path: &Path) -> Result<SearchSpace> {
        let space: SearchSpace = toml::from_str(&fs::read_to_string(path)?)?;
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        let lens = [
            self.learning_rate.len(),
            self.batch_size.len(),
            self.bins.len(),
            self.heads_cross.len(),
            self.heads_self.len(),
            self.num_blocks.len(),
            self.num_latents.len(),
            self.latent_channels.len(),
            self.self_layers_per_block.len(),
            self.weight_decay.len(),
            self.label_smoothing.len(),
        ];
        if lens.contains(&0) {
            return Err(Error::Config("every search-space knob needs at least one candidate".into()));
        }
        Ok(())
    }

    /// Draw one candidate config from the base, one knob at a time.
    pub fn sample(&self, base: &ModelConfig, rng: &mut impl Rng) -> ModelConfig {
        fn pick<T: Copy>(choices: &[T], rng: &mut impl Rng) -> T {
            choices[rng.gen_range(0..choices.len())]
        }
        let mut config = base.clone();
        config.learning_rate = pick(&self.learning_rate, rng);
        config.batch_size = pick(&self.batch_size, rng);
        config.bins = pick(&self.bins, rng);
        config.latent.heads_cross = pick(&self.heads_cross, rng);
        config.latent.heads_self = pick(&self.heads_self, rng);
        config.latent.num_blocks = pick(&self.num_blocks, rng);
        config.latent.num_latents = pick(&self.num_latents, rng);
        config.latent.latent_channels = pick(&self.latent_channels, rng);
        config.latent.self_layers_per_block = pick(&self.self_layers_per_block, rng);
        config.weight_decay = pick(&self.weight_decay, rng);
        config.label_smoothing = pick(&self.label_smoothing, rng);
        config
    }
}

/// One search trial; `val_auc` is None when the sampled combination fails
/// config validation (e.g. a head count not dividing the channel width).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub trials: Vec<TrialRecord>,
    pub best_index: usize,
    pub best_val_auc: f64,
    pub best_model: ModelConfig,
}

/// Seeded random search over the space, selecting by validation
/// primary-task macro AUC. Trial t draws everything from a seed derived as
/// (root, "search", t), so results for the first k trials do not depend on
/// the budget and the best score is monotone in it. Writes trials.json and
/// best_config.toml.
pub fn cmd_tune(
    config: &ExperimentConfig,
    space: &SearchSpace,
    budget: usize,
    data: Option<&Path>,
    root_seed: u64,
    out_dir: &Path,
) -> Result<TuneOutcome> {
    if budget == 0 {
        return Err(Error::Usage("tuning budget must be at least 1".into()));
    }
    space.validate()?;
    fs::create_dir_all(out_dir)?;
    let prep = prepare(config, data, root_seed)?;
    let base = config.model_for_run(root_seed)?;
    let mut trials = Vec::with_capacity(budget);
    for index in 0..budget {
        let trial_seed = rng::derive(root_seed, "search", index as u64);
        let mut sampler = rng::stream(trial_seed, "sample");
        let mut model = space.sample(&base, &mut sampler);
        model.seed = trial_seed;
        let val_auc = match model.validate() {
            Ok(()) => {
                let mut fitted = TabPerceiver::new(model.clone(), &prep.train)?;
                Some(fitted.fit(&prep.train, &prep.validation)?.best_val_auc)
            }
            Err(_) => None,
        };
        trials.push(TrialRecord {
            index,
            seed: trial_seed,
            model,
            val_auc,
        });
    }
    let best_index = trials
        .iter()
        .filter(|t| t.val_auc.is_some())
        .max_by(|a, b| {
            a.val_auc
                .unwrap()
                .total_cmp(&b.val_auc.unwrap())
                .then(b.index.cmp(&a.index))
        })
        .map(|t| t.index)
        .ok_or_else(|| Error::Config("no sampled configuration was valid".into()))?;
    let outcome = TuneOutcome {
        best_index,
        best_val_auc: trials[best_index].val_auc.unwrap(),
        best_model: trials[best_index].model.clone(),
        trials,
    };
    write_json(&out_dir.join("trials.json"), &outcome)?;
    let best_experiment = ExperimentConfig {
        model: outcome.best_model.clone(),
        ..config.clone()
    };
    write_atomic(
        &out_dir.join("best_config.toml"),
        toml::to_string_pretty(&best_experiment)?.as_bytes(),
    )?;
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub excluded: String,
    /// Held-out AUC per report target with this modality removed.
    pub auc: BTreeMap<String, Option<f64>>,
    /// AUC minus the all-feature run's AUC, per target.
    pub delta: BTreeMap<String, Option<f64>>,
    /// Mean delta over targets with defined AUCs.
    pub mean_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub baseline_auc: BTreeMap<String, Option<f64>>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text_table(&self) -> String {
        let targets: Vec<&String> = self.baseline_auc.keys().collect();
        let mut out = format!("{:<22}", "excluded group");
        for t in &targets {
            out.push_str(&format!(" {:>16}", format!("Δ {t}")));
        }
        out.push_str(&format!(" {:>10}\n", "mean Δ"));
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:+.3}"));
        for row in &self.rows {
            out.push_str(&format!("{:<22}", row.excluded));
            for t in &targets {
                out.push_str(&format!(" {:>16}", fmt(row.delta[*t])));
            }
            out.push_str(&format!(" {:>10}\n", fmt(row.mean_delta)));
        }
        out
    }
}

fn target_aucs(report: &MetricsReport) -> BTreeMap<String, Option<f64>> {
    report
        .targets
        .iter()
        .map(|t| (t.target.clone(), t.auc))
        .collect()
}

fn train_eval(
    config: &ExperimentConfig,
    train: &CohortTable,
    validation: &CohortTable,
    test: &CohortTable,
    root_seed: u64,
) -> Result<MetricsReport> {
    let mut model = TabPerceiver::new(config.model_for_run(root_seed)?, train)?;
    model.fit(train, validation)?;
    evaluate(&model, test, rng::derive(root_seed, "bootstrap", 0))
}

/// One full train/eval per excluded modality group, all sharing the
/// identical split and seed: k groups cost exactly k+1 training runs.
/// Writes ablation.json and ablation.txt.
pub fn cmd_ablate(
    config: &ExperimentConfig,
    groups: &[String],
    data: Option<&Path>,
    root_seed: u64,
    out_dir: &Path,
) -> Result<AblationTable> {
    fs::create_dir_all(out_dir)?;
    let prep = prepare(config, data, root_seed)?;
    let baseline = train_eval(config, &prep.train, &prep.validation, &prep.test, root_seed)?;
    let baseline_auc = target_aucs(&baseline);
    let mut rows = Vec::with_capacity(groups.len());
    for group in groups {
        let train = prep.train.without_group(group)?;
        let validation = prep.validation.without_group(group)?;
        let test = prep.test.without_group(group)?;
        let report = train_eval(config, &train, &validation, &test, root_seed)?;
        let auc = target_aucs(&report);
        let delta: BTreeMap<String, Option<f64>> = baseline_auc
            .iter()
            .map(|(t, base)| {
                let d = match (auc.get(t).copied().flatten(), base) {
                    (Some(a), Some(b)) => Some(a - b),
                    _ => None,
                };
                (t.clone(), d)
            })
            .collect();
        let defined: Vec<f64> = delta.values().filter_map(|d| *d).collect();
        let mean_delta = if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        };
        rows.push(AblationRow {
            excluded: group.clone(),
            auc,
            delta,
            mean_delta,
        });
    }
    let table = AblationTable { baseline_auc, rows };
    write_json(&out_dir.join("ablation.json"), &table)?;
    write_atomic(&out_dir.join("ablation.txt"), table.to_text_table().as_bytes())?;
    Ok(table)
}

// ---------------------------------------------------------------------------
// eval / predict
// ---------------------------------------------------------------------------

fn check_schema(model: &TabPerceiver, table: &CohortTable) -> Result<()> {
    if model.schema == table.schema {
        return Ok(());
    }
    let names = |s: &FeatureSchema| -> Vec<String> {
        s.categorical
            .iter()
            .map(|f| f.name.clone())
            .chain(s.continuous.iter().map(|f| f.name.clone()))
            .collect()
    };
    let model_names = names(&model.schema);
    let data_names = names(&table.schema);
    for n in &model_names {
        if !data_names.contains(n) {
            return Err(Error::Schema(format!(
                "dataset is missing feature '{n}' expected by the checkpoint"
            )));
        }
    }
    for n in &data_names {
        if !model_names.contains(n) {
            return Err(Error::Schema(format!(
                "dataset feature '{n}' is unknown to the checkpoint"
            )));
        }
    }
    Err(Error::Schema(
        "dataset schema differs from the checkpoint's (same names, different declarations)".into(),
    ))
}

/// Metrics only, no parameter updates. With the training run's root seed
/// and its saved test.csv this reproduces cmd_train's report bytes.
pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    root_seed: u64,
    out_dir: &Path,
) -> Result<MetricsReport> {
    fs::create_dir_all(out_dir)?;
    let model = TabPerceiver::load(checkpoint)?;
    let table = load_csv(data, &model.schema)?;
    check_schema(&model, &table)?;
    let report = evaluate(&model, &table, rng::derive(root_seed, "bootstrap", 0))?;
    write_json(&out_dir.join("report.json"), &report)?;
    write_atomic(&out_dir.join("report.txt"), report.to_text_table().as_bytes())?;
    Ok(report)
}

/// Per-row class probabilities and assigned labels, written as
/// predictions.csv.
pub fn cmd_predict(checkpoint: &Path, data: &Path, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let model = TabPerceiver::load(checkpoint)?;
    let table = load_csv(data, &model.schema)?;
    check_schema(&model, &table)?;
    let probs = model.predict_proba(&table)?;

    let mut header: Vec<String> = vec!["row".into()];
    for task in &model.config.tasks {
        let class_names: Vec<String> = match task.name.as_str() {
            "risk" => (0..RiskLabel::COUNT)
                .map(|i| RiskLabel::from_index(i).unwrap().as_str().to_string())
                .collect(),
            "downstream" => (0..DownstreamLabel::COUNT)
                .map(|i| DownstreamLabel::from_index(i).unwrap().as_str().to_string())
                .collect(),
            _ => (0..task.classes).map(|c| format!("class_{c}")).collect(),
        };
        for name in &class_names {
            header.push(format!("p_{}_{}", task.name, name));
        }
        header.push(format!("{}_assigned", task.name));
    }

    let tmp = tmp_sibling(&out_dir.join("predictions.csv"));
    let mut writer = csv::Writer::from_path(&tmp)?;
    writer.write_record(&header)?;
    for r in 0..table.n_rows() {
        let mut record: Vec<String> = vec![r.to_string()];
        for (t, task) in model.config.tasks.iter().enumerate() {
            let row = &probs[t][r];
            let mut best = 0;
            for (c, p) in row.iter().enumerate() {
                record.push(format!("{p}"));
                if *p > row[best] {
                    best = c;
                }
            }
            let assigned = match task.name.as_str() {
                "risk" => RiskLabel::from_index(best).unwrap().as_str().to_string(),
                "downstream" => DownstreamLabel::from_index(best)
                    .unwrap()
                    .as_str()
                    .to_string(),
                _ => format!("class_{best}"),
            };
            record.push(assigned);
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    drop(writer);
    fs::rename(&tmp, out_dir.join("predictions.csv"))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTarget {
    pub target: String,
    pub auc_a: Vec<f64>,
    pub auc_b: Vec<f64>,
    pub mean_a: f64,
    pub mean_b: f64,
    /// Paired t over per-seed AUCs; None when the test is degenerate
    /// (e.g. identical scores on every seed).
    pub test: Option<ComparisonResult>,
    pub note: Option<String>,
    /// First-seed bootstrap CIs for each model.
    pub ci_a: Option<(f64, f64)>,
    pub ci_b: Option<(f64, f64)>,
    pub ci_overlap: Option<bool>,
    /// Dual criterion: p < 0.05 and non-overlapping 95% CIs.
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub variant_a: Variant,
    pub variant_b: Variant,
    pub seeds: Vec<u64>,
    pub targets: Vec<CompareTarget>,
}

impl CompareReport {
    pub fn to_text_table(&self) -> String {
        let mut out = format!(
            "A = {}, B = {}, {} seeds\n{:<14} {:>8} {:>8} {:>9} {:>9} {:>11} {:>12}\n",
            self.variant_a.name(),
            self.variant_b.name(),
            self.seeds.len(),
            "Target",
            "mean A",
            "mean B",
            "t",
            "p-value",
            "CI overlap",
            "verdict"
        );
        for t in &self.targets {
            let (stat, p) = match &t.test {
                Some(r) => (format!("{:.3}", r.statistic), format!("{:.4}", r.p_value)),
                None => ("-".into(), "-".into()),
            };
            let overlap = match t.ci_overlap {
                Some(true) => "yes",
                Some(false) => "no",
                None => "-",
            };
            out.push_str(&format!(
                "{:<14} {:>8.3} {:>8.3} {:>9} {:>9} {:>11} {:>12}\n",
                t.target,
                t.mean_a,
                t.mean_b,
                stat,
                p,
                overlap,
                if t.significant {
                    "significant"
                } else {
                    "not significant"
                }
            ));
        }
        out
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn overlaps(a: (f64, f64), b: (f64, f64)) -> bool {
    !(a.1 < b.0 || b.1 < a.0)
}

/// Train configs A and B over the shared seed list (identical splits per
/// seed, so scores are paired), then run a paired t-test per target and
/// apply the dual significance criterion. Writes compare.json/compare.txt.
pub fn cmd_compare(
    config_a: &ExperimentConfig,
    config_b: &ExperimentConfig,
    data: Option<&Path>,
    root_seed: u64,
    out_dir: &Path,
) -> Result<CompareReport> {
    fs::create_dir_all(out_dir)?;
    let seeds: Vec<u64> = if config_a.seeds.is_empty() {
        (0..5).map(|i| rng::derive(root_seed, "compare", i)).collect()
    } else {
        config_a.seeds.clone()
    };

    let mut per_seed: Vec<(MetricsReport, MetricsReport)> = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let prep_a = prepare(config_a, data, seed)?;
        let report_a = train_eval(config_a, &prep_a.train, &prep_a.validation, &prep_a.test, seed)?;
        let prep_b = prepare(config_b, data, seed)?;
        let report_b = train_eval(config_b, &prep_b.train, &prep_b.validation, &prep_b.test, seed)?;
        per_seed.push((report_a, report_b));
    }

    let names_a: Vec<&str> = per_seed[0].0.targets.iter().map(|t| t.target.as_str()).collect();
    let names_b: Vec<&str> = per_seed[0].1.targets.iter().map(|t| t.target.as_str()).collect();
    if names_a != names_b {
        return Err(Error::Usage(format!(
            "mismatched targets: A reports [{}], B reports [{}]",
            names_a.join(", "),
            names_b.join(", ")
        )));
    }

    let mut targets = Vec::with_capacity(names_a.len());
    for (i, name) in names_a.iter().enumerate() {
        let auc_a: Vec<f64> = per_seed
            .iter()
            .map(|(a, _)| a.targets[i].auc.ok_or_else(|| {
                Error::UndefinedMetric(format!("target '{name}' has no AUC on some seed"))
            }))
            .collect::<Result<_>>()?;
        let auc_b: Vec<f64> = per_seed
            .iter()
            .map(|(_, b)| b.targets[i].auc.ok_or_else(|| {
                Error::UndefinedMetric(format!("target '{name}' has no AUC on some seed"))
            }))
            .collect::<Result<_>>()?;
        let (test, note) = match paired_t_test(&auc_a, &auc_b) {
            Ok(r) => (Some(r), None),
            Err(Error::DegenerateTest(msg)) => (None, Some(msg)),
            Err(e) => return Err(e),
        };
        let ci_a = per_seed[0].0.targets[i].ci;
        let ci_b = per_seed[0].1.targets[i].ci;
        let ci_overlap = match (ci_a, ci_b) {
            (Some(a), Some(b)) => Some(overlaps(a, b)),
            _ => None,
        };
        let significant = test.as_ref().map_or(false, |r| r.p_value < 0.05)
            && ci_overlap == Some(false);
        targets.push(CompareTarget {
            target: name.to_string(),
            mean_a: mean(&auc_a),
            mean_b: mean(&auc_b),
            auc_a,
            auc_b,
            test,
            note,
            ci_a,
            ci_b,
            ci_overlap,
            significant,
        });
    }
    let report = CompareReport {
        variant_a: config_a.variant,
        variant_b: config_b.variant,
        seeds,
        targets,
    };
    write_json(&out_dir.join("compare.json"), &report)?;
    write_atomic(&out_dir.join("compare.txt"), report.to_text_table().as_bytes())?;
    Ok(report)
}

/// Re-read a written report, e.g. for comparing runs across processes.
pub fn load_report(path: &Path) -> Result<MetricsReport> {
    read_json(path)
}

#[cfg(test)]
mod tests;
