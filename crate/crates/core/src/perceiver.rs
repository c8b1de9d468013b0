//! Attention machinery: QKV cross-attention into a learned latent array,
//! latent self-attention blocks, the perceiver encoder and decoder, and the
//! MLP head alternative.
//!
//! Blocks use pre-normalization, GELU feed-forward sublayers of hidden width
//! 4x, and attention logits scaled by 1/sqrt(head_dim). Reductions over the
//! key axis are order-canonical, so encoder output is bitwise invariant to
//! permutations of the input feature rows.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::encoding::init_uniform;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Latent array and block-structure hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentConfig {
    /// Latent index dimension N.
    pub num_latents: usize,
    /// Latent channel dimension I.
    pub latent_channels: usize,
    /// Self-attention layers per block (L).
    pub self_layers_per_block: usize,
    pub heads_cross: usize,
    pub heads_self: usize,
    /// Repetitions of (cross-attend + self-attend stack).
    pub num_blocks: usize,
}

impl LatentConfig {
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        let ok = self.num_latents >= 1
            && self.latent_channels >= 1
            && self.self_layers_per_block >= 1
            && self.heads_cross >= 1
            && self.heads_self >= 1
            && self.num_blocks >= 1;
        if !ok {
            return Err(Error::Config(
                "latent dimensions, layer and head counts must all be >= 1".into(),
            ));
        }
        if self.latent_channels % self.heads_self != 0 {
            return Err(Error::Config(format!(
                "latent_channels {} not divisible by heads_self {}",
                self.latent_channels, self.heads_self
            )));
        }
        if embed_dim % self.heads_cross != 0 {
            return Err(Error::Config(format!(
                "embed_dim {embed_dim} not divisible by heads_cross {}",
                self.heads_cross
            )));
        }
        Ok(())
    }
}

/// Affine map with optional bias.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn build(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = params.add(
            format!("{name}.w"),
            vec![in_dim, out_dim],
            init_uniform(in_dim * out_dim, in_dim, rng),
        );
        let b = params.add_no_decay(format!("{name}.b"), vec![1, out_dim], vec![0.0; out_dim]);
        Linear {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(self.w, params);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let bv = tape.param(b, params);
                tape.add_row(y, bv)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn build(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: params.add_no_decay(format!("{name}.gain"), vec![1, dim], vec![1.0; dim]),
            bias: params.add_no_decay(format!("{name}.bias"), vec![1, dim], vec![0.0; dim]),
        }
    }

    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let g = tape.param(self.gain, params);
        let b = tape.param(self.bias, params);
        tape.layer_norm_rows(x, g, b, LN_EPS)
    }
}

/// Multi-head QKV attention. Queries come from one stream, keys/values from
/// another; `inner` is the total attention width split across heads.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub inner: usize,
}

impl MultiHeadAttention {
    pub fn build(
        params: &mut ParamSet,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        inner: usize,
        out_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(inner % heads, 0, "attention width not divisible by heads");
        MultiHeadAttention {
            wq: Linear::build(params, &format!("{name}.wq"), q_dim, inner, rng),
            wk: Linear::build(params, &format!("{name}.wk"), kv_dim, inner, rng),
            wv: Linear::build(params, &format!("{name}.wv"), kv_dim, inner, rng),
            wo: Linear::build(params, &format!("{name}.wo"), inner, out_dim, rng),
            heads,
            inner,
        }
    }

    /// softmax(QK^T / sqrt(d_head)) V per head, heads concatenated and
    /// projected to the output width.
    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, q_in: Var, kv_in: Var) -> Result<Var> {
        let q = self.wq.apply(tape, params, q_in)?;
        let k = self.wk.apply(tape, params, kv_in)?;
        let v = self.wv.apply(tape, params, kv_in)?;
        let head_dim = self.inner / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut heads_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.narrow_cols(q, h * head_dim, head_dim)?;
            let kh = tape.narrow_cols(k, h * head_dim, head_dim)?;
            let vh = tape.narrow_cols(v, h * head_dim, head_dim)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scaled);
            heads_out.push(tape.matmul_canonical(weights, vh)?);
        }
        let concat = tape.concat_cols(&heads_out)?;
        self.wo.apply(tape, params, concat)
    }
}

/// Pre-norm cross-attention with residual, followed by a pre-norm GELU
/// feed-forward with residual.
#[derive(Debug, Clone)]
pub struct CrossAttendBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl CrossAttendBlock {
    pub fn build(
        params: &mut ParamSet,
        name: &str,
        latent_channels: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let i = latent_channels;
        CrossAttendBlock {
            ln_q: LayerNorm::build(params, &format!("{name}.ln_q"), i),
            ln_kv: LayerNorm::build(params, &format!("{name}.ln_kv"), kv_dim),
            attn: MultiHeadAttention::build(
                params,
                &format!("{name}.attn"),
                i,
                kv_dim,
                kv_dim,
                i,
                heads,
                rng,
            ),
            ln_ff: LayerNorm::build(params, &format!("{name}.ln_ff"), i),
            ff1: Linear::build(params, &format!("{name}.ff1"), i, 4 * i, rng),
            ff2: Linear::build(params, &format!("{name}.ff2"), 4 * i, i, rng),
        }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        latent: Var,
        context: Var,
        dropout: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Var> {
        let qn = self.ln_q.apply(tape, params, latent)?;
        let kvn = self.ln_kv.apply(tape, params, context)?;
        let attended = self.attn.apply(tape, params, qn, kvn)?;
        let attended = tape.dropout(attended, dropout, rng);
        let x = tape.add(latent, attended)?;
        let ffn = self.ln_ff.apply(tape, params, x)?;
        let h = self.ff1.apply(tape, params, ffn)?;
        let h = tape.gelu(h);
        let h = self.ff2.apply(tape, params, h)?;
        let h = tape.dropout(h, dropout, rng);
        tape.add(x, h)
    }
}

/// Pre-norm multi-head self-attention with residual, then pre-norm
/// feed-forward (hidden width 4I, GELU) with residual.
#[derive(Debug, Clone)]
pub struct SelfAttendBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl SelfAttendBlock {
    pub fn build(
        params: &mut ParamSet,
        name: &str,
        latent_channels: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let i = latent_channels;
        SelfAttendBlock {
            ln_attn: LayerNorm::build(params, &format!("{name}.ln_attn"), i),
            attn: MultiHeadAttention::build(
                params,
                &format!("{name}.attn"),
                i,
                i,
                i,
                i,
                heads,
                rng,
            ),
            ln_ff: LayerNorm::build(params, &format!("{name}.ln_ff"), i),
            ff1: Linear::build(params, &format!("{name}.ff1"), i, 4 * i, rng),
            ff2: Linear::build(params, &format!("{name}.ff2"), 4 * i, i, rng),
        }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        latent: Var,
        dropout: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Var> {
        let n = self.ln_attn.apply(tape, params, latent)?;
        let attended = self.attn.apply(tape, params, n, n)?;
        let attended = tape.dropout(attended, dropout, rng);
        let x = tape.add(latent, attended)?;
        let ffn = self.ln_ff.apply(tape, params, x)?;
        let h = self.ff1.apply(tape, params, ffn)?;
        let h = tape.gelu(h);
        let h = self.ff2.apply(tape, params, h)?;
        let h = tape.dropout(h, dropout, rng);
        tape.add(x, h)
    }
}

/// Learned N x I latent array refined by alternating cross-attention into
/// the input embeddings and stacks of latent self-attention. Output shape is
/// independent of the number of input rows M.
#[derive(Debug, Clone)]
pub struct PerceiverEncoder {
    pub latent: ParamId,
    pub blocks: Vec<(CrossAttendBlock, Vec<SelfAttendBlock>)>,
    pub config: LatentConfig,
}

impl PerceiverEncoder {
    pub fn build(
        params: &mut ParamSet,
        name: &str,
        embed_dim: usize,
        config: &LatentConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let (n, i) = (config.num_latents, config.latent_channels);
        let latent = params.add(
            format!("{name}.latent"),
            vec![n, i],
            init_uniform(n * i, i, rng),
        );
        // cross-attend blocks are not weight-shared
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for b in 0..config.num_blocks {
            let cross = CrossAttendBlock::build(
                params,
                &format!("{name}.block{b}.cross"),
                i,
                embed_dim,
                config.heads_cross,
                rng,
            );
            let selfs = (0..config.self_layers_per_block)
                .map(|l| {
                    SelfAttendBlock::build(
                        params,
                        &format!("{name}.block{b}.self{l}"),
                        i,
                        config.heads_self,
                        rng,
                    )
                })
                .collect();
            blocks.push((cross, selfs));
        }
        PerceiverEncoder {
            latent,
            blocks,
            config: config.clone(),
        }
    }

    /// Encode an M x D embedding matrix into the N x I latent.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        embeddings: Var,
        dropout: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Var> {
        let mut latent = tape.param(self.latent, params);
        for (cross, selfs) in &self.blocks {
            latent = cross.apply(tape, params, latent, embeddings, dropout, rng)?;
            for block in selfs {
                latent = block.apply(tape, params, latent, dropout, rng)?;
            }
        }
        Ok(latent)
    }
}

/// Row-major flatten of both N x I latents, categorical stream first,
/// giving a 1 x 2NI vector.
pub fn concat_latents(tape: &mut Tape, cat_latent: Var, num_latent: Var) -> Result<Var> {
    if (cat_latent.rows, cat_latent.cols) != (num_latent.rows, num_latent.cols) {
        return Err(Error::Dimension(format!(
            "concat_latents: {}x{} vs {}x{}",
            cat_latent.rows, cat_latent.cols, num_latent.rows, num_latent.cols
        )));
    }
    let flat_cat = tape.reshape(cat_latent, 1, cat_latent.numel())?;
    let flat_num = tape.reshape(num_latent, 1, num_latent.numel())?;
    tape.concat_cols(&[flat_cat, flat_num])
}

/// Perceiver decoder for one task: a learned single query token
/// cross-attends into the 2N x I latent context, then a linear map produces
/// the class logits.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub query: ParamId,
    pub block: CrossAttendBlock,
    pub ln_out: LayerNorm,
    pub out: Linear,
    pub latent_channels: usize,
}

impl Decoder {
    pub fn build(
        params: &mut ParamSet,
        name: &str,
        latent_channels: usize,
        classes: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let i = latent_channels;
        Decoder {
            query: params.add(
                format!("{name}.query"),
                vec![1, i],
                init_uniform(i, i, rng),
            ),
            block: CrossAttendBlock::build(params, &format!("{name}.cross"), i, i, heads, rng),
            ln_out: LayerNorm::build(params, &format!("{name}.ln_out"), i),
            out: Linear::build(params, &format!("{name}.out"), i, classes, rng),
        latent_channels: i,
        }
    }

    /// Decode a 1 x 2NI latent vector into 1 x classes logits.
    pub fn decode(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        latent_vector: Var,
        dropout: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Var> {
        let i = self.latent_channels;
        if latent_vector.numel() % i != 0 {
            return Err(Error::Dimension(format!(
                "latent vector of {} elements is not a multiple of {i} channels",
                latent_vector.numel()
            )));
        }
        let rows = latent_vector.numel() / i;
        let context = tape.reshape(latent_vector, rows, i)?;
        let query = tape.param(self.query, params);
        let token = self
            .block
            .apply(tape, params, query, context, dropout, rng)?;
        let normed = self.ln_out.apply(tape, params, token)?;
        self.out.apply(tape, params, normed)
    }
}

/// Feed-forward alternative to the decoder: GELU MLP over the flattened
/// 2NI vector. Zero hidden layers degenerate to an affine map.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub layers: Vec<Linear>,
}

impl MlpHead {
    pub fn build(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut dim = in_dim;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Linear::build(params, &format!("{name}.h{i}"), dim, h, rng));
            dim = h;
        }
        layers.push(Linear::build(params, &format!("{name}.out"), dim, classes, rng));
        MlpHead { layers }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        dropout: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(tape, params, h)?;
            if i + 1 < self.layers.len() {
                h = tape.gelu(h);
                h = tape.dropout(h, dropout, rng);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests;
