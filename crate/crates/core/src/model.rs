//! Model assembly and training: single-task and multitask tabular perceiver
//! (decoder or MLP head), the plain MLP baseline, the uncertainty-weighted
//! multitask loss, the AdamW training loop, and checkpoint files.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::data::CohortTable;
use crate::encoding::{fit_bins, BinSpec, CategoricalEmbedding, FeatureSchema, PleEmbedding};
use crate::error::{Error, Result};
use crate::metrics;
use crate::perceiver::{concat_latents, Decoder, LatentConfig, Linear, MlpHead, PerceiverEncoder};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub classes: usize,
}

impl TaskSpec {
    pub fn new(name: &str, classes: usize) -> TaskSpec {
        TaskSpec {
            name: name.into(),
            classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadType {
    #[default]
    Decoder,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Dual-stream perceiver over embedded features.
    #[default]
    Perceiver,
    /// Feed-forward baseline over one-hot + standardized inputs.
    MlpBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Input embedding dimension D, shared by both streams.
    pub embed_dim: usize,
    pub latent: LatentConfig,
    pub head_type: HeadType,
    /// The first task is primary: early stopping tracks its validation AUC.
    pub tasks: Vec<TaskSpec>,
    /// Requested quantile bins per continuous feature.
    pub bins: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Early-stopping patience in epochs without validation improvement.
    pub patience: usize,
    /// Hidden widths of the MLP head variant (empty = affine).
    pub mlp_head_hidden: Vec<usize>,
    /// Hidden widths of the baseline trunk.
    pub baseline_hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::Perceiver,
            embed_dim: 128,
            latent: LatentConfig {
                num_latents: 8,
                latent_channels: 32,
                self_layers_per_block: 4,
                heads_cross: 4,
                heads_self: 4,
                num_blocks: 2,
            },
            head_type: HeadType::Decoder,
            tasks: vec![TaskSpec::new("risk", 3), TaskSpec::new("downstream", 2)],
            bins: 150,
            dropout: 0.0,
            label_smoothing: 0.3,
            weight_decay: 0.01,
            batch_size: 16,
            learning_rate: 1e-3,
            epochs: 100,
            patience: 20,
            mlp_head_hidden: vec![64],
            baseline_hidden: vec![64, 32],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task must be configured".into()));
        }
        let mut names: Vec<&str> = self.tasks.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate task name".into()));
        }
        if self.tasks.iter().any(|t| t.classes < 2) {
            return Err(Error::Config("every task needs at least 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.bins == 0 {
            return Err(Error::Config(
                "batch_size, epochs, and bins must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "learning_rate must be positive and weight_decay non-negative".into(),
            ));
        }
        if self.architecture == Architecture::Perceiver {
            self.latent.validate(self.embed_dim)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Batch-mean label-smoothed cross-entropy of stacked logit rows.
pub fn loss_single(tape: &mut Tape, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
    tape.cross_entropy(logits, targets, smoothing)
}

/// Uncertainty-weighted multitask total: sum_i exp(-s_i) * L_i + s_i, with
/// one trainable log-variance scalar s_i per task. Frozen at s_i = 0 this is
/// exactly the unweighted sum of task losses.
pub fn loss_multitask(
    tape: &mut Tape,
    params: &ParamSet,
    losses: &[Var],
    scales: &[ParamId],
) -> Result<Var> {
    if losses.is_empty() || losses.len() != scales.len() {
        return Err(Error::Usage(
            "need one loss and one scale per task".into(),
        ));
    }
    let mut total: Option<Var> = None;
    for (loss, &sid) in losses.iter().zip(scales) {
        let s = tape.param(sid, params);
        let neg_s = tape.neg(s);
        let w = tape.exp(neg_s);
        let weighted = tape.mul(w, *loss)?;
        let term = tape.add(weighted, s)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adaptive-moment optimizer with decoupled weight decay. Entries flagged
/// no_decay (biases, norm gains, loss scales) skip the decay term.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for e in params.iter_mut() {
            let Some(grad) = e.tensor.grad.take() else {
                continue;
            };
            for (i, &g) in grad.iter().enumerate() {
                e.m[i] = self.beta1 * e.m[i] + (1.0 - self.beta1) * g;
                e.v[i] = self.beta2 * e.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = e.m[i] / bc1;
                let v_hat = e.v[i] / bc2;
                let mut update = m_hat / (v_hat.sqrt() + self.eps);
                if !e.no_decay {
                    update += self.weight_decay * e.tensor.data[i];
                }
                e.tensor.data[i] -= self.lr * update;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Head {
    Decoder(Decoder),
    Mlp(MlpHead),
}

#[derive(Debug, Clone)]
enum Arch {
    Perceiver {
        cat_embed: Option<CategoricalEmbedding>,
        cont_embeds: Vec<PleEmbedding>,
        cat_encoder: Option<PerceiverEncoder>,
        cont_encoder: Option<PerceiverEncoder>,
    },
    Baseline {
        /// (mean, std) per continuous feature, fitted on training data.
        standardization: Vec<(f64, f64)>,
        trunk: Vec<Linear>,
    },
}

/// Per-epoch training record; reproducible from (config, seed, dataset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Best primary-task validation macro AUC seen.
    pub best_val_auc: f64,
    /// Mean training loss per epoch (computed before each update).
    pub train_losses: Vec<f64>,
    /// Primary-task validation macro AUC per epoch.
    pub val_aucs: Vec<f64>,
    pub parameter_count: usize,
}

pub struct TabPerceiver {
    pub config: ModelConfig,
    pub schema: FeatureSchema,
    pub params: ParamSet,
    arch: Arch,
    heads: Vec<Head>,
    /// Trainable log-variance s_i per task.
    pub task_scales: Vec<ParamId>,
    bins: Vec<BinSpec>,
}

impl TabPerceiver {
    /// Build a model for the given training table: fits quantile bins
    /// (perceiver) or standardization statistics (baseline) from it and
    /// initializes parameters from the config seed.
    pub fn new(config: ModelConfig, train: &CohortTable) -> Result<TabPerceiver> {
        config.validate()?;
        train.validate()?;
        let schema = train.schema.clone();
        let (bins, standardization) = match config.architecture {
            Architecture::Perceiver => (fit_feature_bins(train, config.bins)?, Vec::new()),
            Architecture::MlpBaseline => (Vec::new(), fit_standardization(train)),
        };
        let (params, arch, heads, task_scales) =
            assemble(&config, &schema, &bins, standardization)?;
        Ok(TabPerceiver {
            config,
            schema,
            params,
            arch,
            heads,
            task_scales,
            bins,
        })
    }

    /// The MLP baseline with the identical fit/predict contract.
    pub fn mlp_baseline(mut config: ModelConfig, train: &CohortTable) -> Result<TabPerceiver> {
        config.architecture = Architecture::MlpBaseline;
        TabPerceiver::new(config, train)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total_scalars()
    }

    /// Forward one row: per-task logits (1 x classes each).
    pub fn forward_row(
        &self,
        tape: &mut Tape,
        cat_row: &[Option<usize>],
        cont_row: &[Option<f64>],
        dropout: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Vec<Var>> {
        if cat_row.len() != self.schema.categorical.len()
            || cont_row.len() != self.schema.continuous.len()
        {
            return Err(Error::Validation(format!(
                "row has {}/{} cells, schema declares {}/{}",
                cat_row.len(),
                cont_row.len(),
                self.schema.categorical.len(),
                self.schema.continuous.len()
            )));
        }
        let trunk = match &self.arch {
            Arch::Perceiver {
                cat_embed,
                cont_embeds,
                cat_encoder,
                cont_encoder,
            } => {
                let (n, i) = (
                    self.config.latent.num_latents,
                    self.config.latent.latent_channels,
                );
                let cat_latent = match (cat_embed, cat_encoder) {
                    (Some(embed), Some(encoder)) => {
                        let tokens = embed.embed_row(tape, &self.params, cat_row)?;
                        encoder.encode(tape, &self.params, tokens, dropout, rng)?
                    }
                    // absent stream contributes a zero latent
                    _ => tape.constant(n, i, vec![0.0; n * i]),
                };
                let cont_latent = match cont_encoder {
                    Some(encoder) => {
                        let mut tokens = Vec::with_capacity(cont_embeds.len());
                        for (j, embed) in cont_embeds.iter().enumerate() {
                            let x = cont_row[j].ok_or_else(|| {
                                Error::Validation(format!(
                                    "missing value in continuous feature '{}'; impute first",
                                    self.schema.continuous[j].name
                                ))
                            })?;
                            tokens.push(embed.embed(tape, &self.params, x)?);
                        }
                        let tokens = tape.concat_rows(&tokens)?;
                        encoder.encode(tape, &self.params, tokens, dropout, rng)?
                    }
                    None => tape.constant(n, i, vec![0.0; n * i]),
                };
                concat_latents(tape, cat_latent, cont_latent)?
            }
            Arch::Baseline {
                standardization,
                trunk,
            } => {
                let mut features = Vec::new();
                for (j, f) in self.schema.categorical.iter().enumerate() {
                    let mut one_hot = vec![0.0; f.cardinality()];
                    if let Some(level) = cat_row[j] {
                        if level >= f.cardinality() {
                            return Err(Error::Validation(format!(
                                "level {level} out of range for feature '{}'",
                                f.name
                            )));
                        }
                        one_hot[level] = 1.0;
                    }
                    features.extend(one_hot);
                }
                for (j, &(mean, std)) in standardization.iter().enumerate() {
                    // missing continuous values sit at the standardized mean
                    features.push(cont_row[j].map_or(0.0, |x| (x - mean) / std));
                }
                let len = features.len();
                let mut h = tape.constant(1, len, features);
                for (l, layer) in trunk.iter().enumerate() {
                    h = layer.apply(tape, &self.params, h)?;
                    if l + 1 < trunk.len() {
                        h = tape.gelu(h);
                        h = tape.dropout(h, dropout, rng);
                    }
                }
                h
            }
        };
        let mut logits = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            logits.push(match head {
                Head::Decoder(d) => d.decode(tape, &self.params, trunk, dropout, rng)?,
                Head::Mlp(m) => m.apply(tape, &self.params, trunk, dropout, rng)?,
            });
        }
        Ok(logits)
    }

    /// Forward a batch of table rows: per-task stacked logits (k x classes).
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        table: &CohortTable,
        rows: &[usize],
        dropout: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Vec<Var>> {
        let mut per_task: Vec<Vec<Var>> = vec![Vec::with_capacity(rows.len()); self.heads.len()];
        for &r in rows {
            let logits = self.forward_row(tape, &table.cat[r], &table.cont[r], dropout, rng)?;
            for (t, l) in logits.into_iter().enumerate() {
                per_task[t].push(l);
            }
        }
        per_task
            .into_iter()
            .map(|vars| tape.concat_rows(&vars))
            .collect()
    }

    /// Target columns for the configured tasks, resolved by task name.
    pub fn targets_for(&self, table: &CohortTable) -> Result<Vec<Vec<usize>>> {
        self.config
            .tasks
            .iter()
            .map(|task| {
                let (targets, classes) = match task.name.as_str() {
                    "risk" => (table.risk_targets(), 3),
                    "downstream" => (table.downstream_targets(), 2),
                    other => {
                        return Err(Error::Usage(format!(
                            "unknown task '{other}' (expected 'risk' or 'downstream')"
                        )))
                    }
                };
                if task.classes != classes {
                    return Err(Error::Config(format!(
                        "task '{}' declares {} classes, target has {classes}",
                        task.name, task.classes
                    )));
                }
                Ok(targets)
            })
            .collect()
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        table: &CohortTable,
        rows: &[usize],
        targets: &[Vec<usize>],
        dropout: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Var> {
        let logits = self.forward_batch(tape, table, rows, dropout, rng)?;
        let mut losses = Vec::with_capacity(logits.len());
        for (t, stacked) in logits.into_iter().enumerate() {
            let batch_targets: Vec<usize> = rows.iter().map(|&r| targets[t][r]).collect();
            losses.push(loss_single(
                tape,
                stacked,
                &batch_targets,
                self.config.label_smoothing,
            )?);
        }
        loss_multitask(tape, &self.params, &losses, &self.task_scales)
    }

    /// Multitask training loss of the listed rows at the current parameters,
    /// deterministic and dropout-free. With `accumulate`, a backward pass
    /// adds gradients to the parameter set; callers verifying them against
    /// finite differences should zero the gradients first.
    pub fn training_loss(
        &mut self,
        table: &CohortTable,
        rows: &[usize],
        accumulate: bool,
    ) -> Result<f64> {
        let targets = self.targets_for(table)?;
        let mut rng = rng::stream(self.config.seed, "inference");
        let mut tape = Tape::new();
        let loss = self.batch_loss(&mut tape, table, rows, &targets, 0.0, &mut rng)?;
        let value = tape.value_scalar(loss);
        if accumulate {
            tape.backward(loss)?;
            tape.accumulate_param_grads(&mut self.params);
        }
        Ok(value)
    }

    /// Mini-batch AdamW training with early stopping on the primary task's
    /// validation macro AUC; the best-epoch parameters are restored at the
    /// end. Deterministic under a fixed config seed.
    pub fn fit(&mut self, train: &CohortTable, val: &CohortTable) -> Result<TrainState> {
        if train.n_rows() == 0 || val.n_rows() == 0 {
            return Err(Error::Usage("empty train or validation split".into()));
        }
        if train.schema != self.schema || val.schema != self.schema {
            return Err(Error::Validation("split schema differs from the model's".into()));
        }
        let targets = self.targets_for(train)?;
        let val_targets = self.targets_for(val)?;
        let mut optimizer = AdamW::new(self.config.learning_rate, self.config.weight_decay);
        let mut batch_rng = rng::stream(self.config.seed, "batching");
        let mut dropout_rng = rng::stream(self.config.seed, "dropout");

        let mut state = TrainState {
            epochs_run: 0,
            best_epoch: 0,
            best_val_auc: f64::NEG_INFINITY,
            train_losses: Vec::new(),
            val_aucs: Vec::new(),
            parameter_count: self.parameter_count(),
        };
        let mut best_snapshot = self.params.snapshot();
        let mut epochs_since_best = 0usize;

        for epoch in 0..self.config.epochs {
            let mut order: Vec<usize> = (0..train.n_rows()).collect();
            order.shuffle(&mut batch_rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let mut tape = Tape::new();
                let loss = self.batch_loss(
                    &mut tape,
                    train,
                    chunk,
                    &targets,
                    self.config.dropout,
                    &mut dropout_rng,
                )?;
                let value = tape.value_scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        message: format!("loss diverged to {value}"),
                    });
                }
                epoch_loss += value * chunk.len() as f64;
                tape.backward(loss)?;
                self.params.zero_grads();
                tape.accumulate_param_grads(&mut self.params);
                optimizer.step(&mut self.params);
            }
            state.epochs_run = epoch + 1;
            state.train_losses.push(epoch_loss / train.n_rows() as f64);

            let probs = self.predict_proba(val)?;
            let auc = metrics::macro_ovr_auc(&probs[0], &val_targets[0]).unwrap_or(0.5);
            state.val_aucs.push(auc);
            if auc > state.best_val_auc {
                state.best_val_auc = auc;
                state.best_epoch = epoch;
                best_snapshot = self.params.snapshot();
                epochs_since_best = 0;
            } else {
                epochs_since_best += 1;
                if epochs_since_best >= self.config.patience {
                    break;
                }
            }
        }
        self.params.restore(&best_snapshot);
        Ok(state)
    }

    /// Per-task class probabilities, `[task][row][class]`, rows summing to 1.
    pub fn predict_proba(&self, table: &CohortTable) -> Result<Vec<Vec<Vec<f64>>>> {
        if table.schema != self.schema {
            return Err(Error::Validation("table schema differs from the model's".into()));
        }
        // dropout 0 draws nothing from this stream
        let mut rng = rng::stream(self.config.seed, "inference");
        let mut out: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(table.n_rows()); self.heads.len()];
        for r in 0..table.n_rows() {
            let mut tape = Tape::new();
            let logits = self.forward_row(&mut tape, &table.cat[r], &table.cont[r], 0.0, &mut rng)?;
            for (t, l) in logits.into_iter().enumerate() {
                let probs = tape.softmax_rows(l);
                out[t].push(tape.value(probs).to_vec());
            }
        }
        Ok(out)
    }

    // ---- checkpoints -----------------------------------------------------

    /// Writes the documented checkpoint container: magic "TABP", format
    /// version, JSON metadata (config, schema, bins, standardization), then
    /// named little-endian f32 parameter blocks with shape headers.
    pub fn save(&self, path: &Path) -> Result<()> {
        let standardization = match &self.arch {
            Arch::Baseline {
                standardization, ..
            } => Some(standardization.clone()),
            Arch::Perceiver { .. } => None,
        };
        let meta = CheckpointMeta {
            config: self.config.clone(),
            schema: self.schema.clone(),
            bins: self.bins.clone(),
            standardization,
        };
        let meta_json = serde_json::to_vec(&meta)
            .map_err(|e| Error::CheckpointFormat(format!("metadata serialization: {e}")))?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(meta_json.len() as u64).to_le_bytes())?;
        w.write_all(&meta_json)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (_, entry) in self.params.iter() {
            let name = entry.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(entry.tensor.shape.len() as u32).to_le_bytes())?;
            for &d in &entry.tensor.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &x in &entry.tensor.data {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a checkpoint: rebuilds the architecture from the stored
    /// metadata and overwrites every parameter from its named block.
    pub fn load(path: &Path) -> Result<TabPerceiver> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointFormat(format!(
                "bad magic bytes {magic:?}"
            )));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointFormat(format!(
                "unsupported format version {version}"
            )));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let mut meta_json = vec![0u8; meta_len];
        r.read_exact(&mut meta_json)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta_json)
            .map_err(|e| Error::CheckpointFormat(format!("metadata: {e}")))?;
        let (mut params, arch, heads, task_scales) = assemble(
            &meta.config,
            &meta.schema,
            &meta.bins,
            meta.standardization.clone().unwrap_or_default(),
        )?;

        let count = read_u32(&mut r)? as usize;
        if count != params.len() {
            return Err(Error::CheckpointFormat(format!(
                "checkpoint has {count} parameter blocks, architecture expects {}",
                params.len()
            )));
        }
        let ids: Vec<ParamId> = params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::CheckpointFormat("non-UTF8 parameter name".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut r)? as usize);
            }
            let entry = params.get_mut(id);
            if entry.name != name || entry.tensor.shape != shape {
                return Err(Error::CheckpointFormat(format!(
                    "parameter block '{name}' {shape:?} does not match expected '{}' {:?}",
                    entry.name, entry.tensor.shape
                )));
            }
            for x in entry.tensor.data.iter_mut() {
                let mut buf = [0u8; 4];
                r.read_exact(&mut buf)?;
                *x = f32::from_le_bytes(buf) as f64;
            }
        }
        Ok(TabPerceiver {
            config: meta.config,
            schema: meta.schema,
            params,
            arch,
            heads,
            task_scales,
            bins: meta.bins,
        })
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TABP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    schema: FeatureSchema,
    bins: Vec<BinSpec>,
    standardization: Option<Vec<(f64, f64)>>,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Quantile bins per continuous feature from the observed training values.
pub fn fit_feature_bins(table: &CohortTable, requested: usize) -> Result<Vec<BinSpec>> {
    table
        .schema
        .continuous
        .iter()
        .enumerate()
        .map(|(j, f)| {
            let values: Vec<f64> = table.cont.iter().filter_map(|row| row[j]).collect();
            fit_bins(&values, requested).map_err(|e| {
                Error::Schema(format!("feature '{}': {e}", f.name))
            })
        })
        .collect()
}

fn fit_standardization(table: &CohortTable) -> Vec<(f64, f64)> {
    (0..table.schema.continuous.len())
        .map(|j| {
            let values: Vec<f64> = table.cont.iter().filter_map(|row| row[j]).collect();
            if values.is_empty() {
                return (0.0, 1.0);
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            (mean, if std > 0.0 { std } else { 1.0 })
        })
        .collect()
}

fn assemble(
    config: &ModelConfig,
    schema: &FeatureSchema,
    bins: &[BinSpec],
    standardization: Vec<(f64, f64)>,
) -> Result<(ParamSet, Arch, Vec<Head>, Vec<ParamId>)> {
    let mut params = ParamSet::new();
    let mut rng = rng::stream(config.seed, "init");
    let (arch, head_in) = match config.architecture {
        Architecture::Perceiver => {
            if bins.len() != schema.continuous.len() {
                return Err(Error::Config(format!(
                    "{} bin specs for {} continuous features",
                    bins.len(),
                    schema.continuous.len()
                )));
            }
            let cat_embed = (!schema.categorical.is_empty())
                .then(|| CategoricalEmbedding::build(&mut params, schema, config.embed_dim, &mut rng));
            let cont_embeds: Vec<PleEmbedding> = schema
                .continuous
                .iter()
                .zip(bins)
                .map(|(f, spec)| {
                    PleEmbedding::build(
                        &mut params,
                        &format!("embed.cont.{}", f.name),
                        spec.clone(),
                        config.embed_dim,
                        &mut rng,
                    )
                })
                .collect();
            let cat_encoder = cat_embed.is_some().then(|| {
                PerceiverEncoder::build(
                    &mut params,
                    "encoder.cat",
                    config.embed_dim,
                    &config.latent,
                    &mut rng,
                )
            });
            let cont_encoder = (!cont_embeds.is_empty()).then(|| {
                PerceiverEncoder::build(
                    &mut params,
                    "encoder.cont",
                    config.embed_dim,
                    &config.latent,
                    &mut rng,
                )
            });
            let head_in =
                2 * config.latent.num_latents * config.latent.latent_channels;
            (
                Arch::Perceiver {
                    cat_embed,
                    cont_embeds,
                    cat_encoder,
                    cont_encoder,
                },
                head_in,
            )
        }
        Architecture::MlpBaseline => {
            if standardization.len() != schema.continuous.len() {
                return Err(Error::Config(
                    "standardization statistics do not match the schema".into(),
                ));
            }
            let in_dim: usize = schema
                .categorical
                .iter()
                .map(|f| f.cardinality())
                .sum::<usize>()
                + schema.continuous.len();
            let mut trunk = Vec::with_capacity(config.baseline_hidden.len());
            let mut dim = in_dim;
            for (l, &h) in config.baseline_hidden.iter().enumerate() {
                trunk.push(Linear::build(
                    &mut params,
                    &format!("baseline.h{l}"),
                    dim,
                    h,
                    &mut rng,
                ));
                dim = h;
            }
            (
                Arch::Baseline {
                    standardization,
                    trunk,
                },
                dim,
            )
        }
    };

    let mut heads = Vec::with_capacity(config.tasks.len());
    for task in &config.tasks {
        let name = format!("head.{}", task.name);
        let head = match (config.architecture, config.head_type) {
            (Architecture::MlpBaseline, _) => Head::Mlp(MlpHead::build(
                &mut params,
                &name,
                head_in,
                &[],
                task.classes,
                &mut rng,
            )),
            (_, HeadType::Decoder) => Head::Decoder(Decoder::build(
                &mut params,
                &name,
                config.latent.latent_channels,
                task.classes,
                config.latent.heads_self,
                &mut rng,
            )),
            (_, HeadType::Mlp) => Head::Mlp(MlpHead::build(
                &mut params,
                &name,
                head_in,
                &config.mlp_head_hidden,
                task.classes,
                &mut rng,
            )),
        };
        heads.push(head);
    }
    let task_scales = config
        .tasks
        .iter()
        .map(|t| params.add_no_decay(format!("loss.scale.{}", t.name), vec![1, 1], vec![0.0]))
        .collect();
    Ok((params, arch, heads, task_scales))
}
