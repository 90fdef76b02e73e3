//! T5-style encoder-decoder: pre-norm residual blocks with RMSNorm,
//! multi-head attention with bucketed relative position bias, and ReLU
//! feed-forward layers.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::numerics::{lit, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Number of reserved special token ids (PAD, BOS, EOS, SEP, UNK).
pub const N_SPECIAL_TOKENS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub vocab_size: usize,
    pub n_relpos_buckets: usize,
    pub max_relpos_distance: usize,
    pub rms_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            n_enc_layers: 2,
            n_dec_layers: 4,
            vocab_size: 256,
            n_relpos_buckets: 32,
            max_relpos_distance: 64,
            rms_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Parameter(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.vocab_size < N_SPECIAL_TOKENS {
            return Err(Error::Parameter(format!(
                "vocab_size {} smaller than the {N_SPECIAL_TOKENS} special tokens",
                self.vocab_size
            )));
        }
        if self.n_relpos_buckets < 2 || self.max_relpos_distance < 2 {
            return Err(Error::Parameter(
                "relative position needs at least 2 buckets and max distance >= 2".into(),
            ));
        }
        if !(self.rms_eps > 0.0) {
            return Err(Error::Parameter("rms_eps must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count of [`EncoderDecoderModel::new`].
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let enc_layer = 2 * d + 4 * d * d + 2 * d * self.d_ff;
        let dec_layer = 3 * d + 8 * d * d + 2 * d * self.d_ff;
        let relpos = 2 * self.n_relpos_buckets * self.n_heads;
        self.vocab_size * d
            + relpos
            + self.n_enc_layers * enc_layer
            + d
            + self.n_dec_layers * dec_layer
            + d
            + d * self.vocab_size
    }
}

fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0f64, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
}

/// Bucketed signed offset `key_pos - query_pos`, as in T5.
///
/// Half of the buckets hold non-positive offsets and half positive ones.
/// Within each half, small magnitudes get exact buckets and larger ones are
/// spaced logarithmically up to `max_distance`; everything farther shares
/// the last bucket of its sign.
pub fn relative_position_bucket(query_pos: usize, key_pos: usize, n_buckets: usize, max_distance: usize) -> usize {
    let half = (n_buckets / 2).max(1);
    let rel = key_pos as i64 - query_pos as i64;
    let base = if rel > 0 { half } else { 0 };
    let mag = rel.unsigned_abs() as usize;
    let max_exact = (half / 2).max(1);
    if mag < max_exact {
        return base + mag;
    }
    let span = half - max_exact;
    let ratio = (max_distance as f64 / max_exact as f64).ln();
    let large = if span == 0 || ratio <= 0.0 {
        half - 1
    } else {
        let scaled = (mag as f64 / max_exact as f64).ln() / ratio * span as f64;
        (max_exact + scaled as usize).min(half - 1)
    };
    base + large
}

pub fn relative_buckets(tq: usize, tk: usize, n_buckets: usize, max_distance: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(tq * tk);
    for i in 0..tq {
        for j in 0..tk {
            out.push(relative_position_bucket(i, j, n_buckets, max_distance));
        }
    }
    out
}

/// Bias-free linear map with an optional low-rank adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub adapter: Option<LoraAdapter>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = store.add(name, normal_tensor(rng, &[d_in, d_out], 1.0 / (d_in as f64).sqrt()))?;
        Ok(Self {
            weight,
            d_in,
            d_out,
            adapter: None,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        match &self.adapter {
            None => g.matmul(x, w),
            Some(a) => crate::lora::lora_forward(g, x, w, a),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, d: usize, n_heads: usize) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, rng, &format!("{prefix}.q"), d, d)?,
            key: Linear::new(store, rng, &format!("{prefix}.k"), d, d)?,
            value: Linear::new(store, rng, &format!("{prefix}.v"), d, d)?,
            output: Linear::new(store, rng, &format!("{prefix}.o"), d, d)?,
            n_heads,
        })
    }

    pub fn projections(&self) -> [&Linear; 4] {
        [&self.query, &self.key, &self.value, &self.output]
    }

    pub fn projections_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.query, &mut self.key, &mut self.value, &mut self.output]
    }
}

/// Projects queries and keys/values, attends per head, concatenates the
/// heads and applies the output projection.
///
/// `mask` is row-major `[tq × tk]`, `true` where attention is allowed.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    attn: &Attention,
    queries_in: Var,
    keys_values_in: Var,
    mask: &[bool],
    relpos_bias: Option<Var>,
) -> Result<Var> {
    let q = attn.query.forward(g, queries_in)?;
    let k = attn.key.forward(g, keys_values_in)?;
    let v = attn.value.forward(g, keys_values_in)?;
    let ctx = g.attention(q, k, v, relpos_bias, mask, attn.n_heads)?;
    attn.output.forward(g, ctx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, d: usize, d_ff: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, rng, &format!("{prefix}.w1"), d, d_ff)?,
            down: Linear::new(store, rng, &format!("{prefix}.w2"), d_ff, d)?,
        })
    }

    /// Position-wise `relu(x W1) W2`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.relu(h)?;
        self.down.forward(g, h)
    }
}

fn ones(store: &mut ParamStore, name: &str, d: usize) -> Result<ParamId> {
    store.add(name, Tensor::new(&[d], vec![1.0; d])?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub attn_norm: ParamId,
    pub self_attn: Attention,
    pub ffn_norm: ParamId,
    pub ffn: FeedForward,
}

/// Stack of self-attention encoder layers sharing one relative-position
/// bias table, followed by a final RMSNorm.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
    pub final_norm: ParamId,
    pub relpos: ParamId,
    pub n_heads: usize,
    pub n_buckets: usize,
    pub max_distance: usize,
    pub eps: f32,
}

/// Sizes of an [`EncoderStack`].
#[derive(Clone, Copy, Debug)]
pub struct StackDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_buckets: usize,
    pub max_distance: usize,
    pub eps: f32,
}

impl EncoderStack {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, dims: StackDims) -> Result<Self> {
        let d = dims.d_model;
        let relpos = store.add(
            format!("{prefix}.relpos"),
            normal_tensor(rng, &[dims.n_buckets, dims.n_heads], 0.1),
        )?;
        let mut layers = Vec::with_capacity(dims.n_layers);
        for i in 0..dims.n_layers {
            let p = format!("{prefix}.{i}");
            layers.push(EncoderLayer {
                attn_norm: ones(store, &format!("{p}.attn_norm"), d)?,
                self_attn: Attention::new(store, rng, &format!("{p}.attn"), d, dims.n_heads)?,
                ffn_norm: ones(store, &format!("{p}.ffn_norm"), d)?,
                ffn: FeedForward::new(store, rng, &format!("{p}.ffn"), d, dims.d_ff)?,
            });
        }
        let final_norm = ones(store, &format!("{prefix}.norm"), d)?;
        Ok(Self {
            layers,
            final_norm,
            relpos,
            n_heads: dims.n_heads,
            n_buckets: dims.n_buckets,
            max_distance: dims.max_distance,
            eps: dims.eps,
        })
    }

    /// Runs the stack over `[t × d]` inputs. `valid[j]` is false for pad
    /// positions, which are never attended to.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, input: Var, valid: &[bool]) -> Result<Var> {
        let t = g.shape(input)[0];
        if t == 0 || valid.len() != t {
            return Err(Error::Input(format!(
                "encoder input of {t} positions with mask of {}",
                valid.len()
            )));
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::Input("encoder input has no non-pad position".into()));
        }
        let eps: T = lit(f64::from(self.eps));
        let mask: Vec<bool> = (0..t).flat_map(|_| valid.iter().copied()).collect();
        let buckets = relative_buckets(t, t, self.n_buckets, self.max_distance);
        let table = g.param(self.relpos);
        let bias = g.relpos_bias(table, &buckets, t, t)?;
        let mut x = input;
        for layer in &self.layers {
            let gamma = g.param(layer.attn_norm);
            let h = g.rms_norm(x, gamma, eps)?;
            let a = multi_head_attention(g, &layer.self_attn, h, h, &mask, Some(bias))?;
            x = g.add(x, a)?;
            let gamma = g.param(layer.ffn_norm);
            let h = g.rms_norm(x, gamma, eps)?;
            let f = layer.ffn.forward(g, h)?;
            x = g.add(x, f)?;
        }
        let gamma = g.param(self.final_norm);
        g.rms_norm(x, gamma, eps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub self_norm: ParamId,
    pub self_attn: Attention,
    pub cross_norm: ParamId,
    pub cross_attn: Attention,
    pub ffn_norm: ParamId,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStack {
    pub layers: Vec<DecoderLayer>,
    pub final_norm: ParamId,
    pub relpos: ParamId,
}

/// The text encoder-decoder. Parameters live in a [`ParamStore`] under the
/// `llm.` prefix; this struct holds their ids and the architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderDecoderModel {
    pub config: ModelConfig,
    pub embed: ParamId,
    pub encoder: EncoderStack,
    pub decoder: DecoderStack,
    pub lm_head: ParamId,
    pub(crate) lora_injected: bool,
}

pub const LLM_PREFIX: &str = "llm";

impl EncoderDecoderModel {
    pub fn new(config: ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let embed = store.add(
            format!("{LLM_PREFIX}.embed"),
            normal_tensor(rng, &[config.vocab_size, d], 1.0),
        )?;
        let encoder = EncoderStack::new(
            store,
            rng,
            &format!("{LLM_PREFIX}.enc"),
            StackDims {
                d_model: d,
                n_heads: config.n_heads,
                d_ff: config.d_ff,
                n_layers: config.n_enc_layers,
                n_buckets: config.n_relpos_buckets,
                max_distance: config.max_relpos_distance,
                eps: config.rms_eps,
            },
        )?;
        let relpos = store.add(
            format!("{LLM_PREFIX}.dec.relpos"),
            normal_tensor(rng, &[config.n_relpos_buckets, config.n_heads], 0.1),
        )?;
        let mut layers = Vec::with_capacity(config.n_dec_layers);
        for i in 0..config.n_dec_layers {
            let p = format!("{LLM_PREFIX}.dec.{i}");
            layers.push(DecoderLayer {
                self_norm: ones(store, &format!("{p}.self_norm"), d)?,
                self_attn: Attention::new(store, rng, &format!("{p}.self"), d, config.n_heads)?,
                cross_norm: ones(store, &format!("{p}.cross_norm"), d)?,
                cross_attn: Attention::new(store, rng, &format!("{p}.cross"), d, config.n_heads)?,
                ffn_norm: ones(store, &format!("{p}.ffn_norm"), d)?,
                ffn: FeedForward::new(store, rng, &format!("{p}.ffn"), d, config.d_ff)?,
            });
        }
        let final_norm = ones(store, &format!("{LLM_PREFIX}.dec.norm"), d)?;
        let lm_head = store.add(
            format!("{LLM_PREFIX}.lm_head"),
            normal_tensor(rng, &[d, config.vocab_size], 1.0 / (d as f64).sqrt()),
        )?;
        Ok(Self {
            config,
            embed,
            encoder,
            decoder: DecoderStack {
                layers,
                final_norm,
                relpos,
            },
            lm_head,
            lora_injected: false,
        })
    }

    pub fn has_lora(&self) -> bool {
        self.lora_injected
    }

    /// Looks up token embeddings in the shared input table.
    pub fn embed_tokens<T: Scalar>(&self, g: &mut Graph<T>, ids: &[u32]) -> Result<Var> {
        let table = g.param(self.embed);
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        g.embedding(table, &ids)
    }

    pub fn encoder_forward<T: Scalar>(&self, g: &mut Graph<T>, input_embeddings: Var, valid: &[bool]) -> Result<Var> {
        self.encoder.forward(g, input_embeddings, valid)
    }

    /// Teacher-forced decoder pass; row `t` of the returned `[t × vocab]`
    /// logits depends only on `target_ids[..=t]` and the encoder states.
    pub fn decoder_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        target_ids: &[u32],
        encoder_states: Var,
        enc_valid: &[bool],
    ) -> Result<Var> {
        let t = target_ids.len();
        if t == 0 {
            return Err(Error::Input("decoder needs at least one input token".into()));
        }
        let s = g.shape(encoder_states)[0];
        if enc_valid.len() != s {
            return Err(Error::Shape {
                op: "decoder cross mask",
                lhs: vec![s],
                rhs: vec![enc_valid.len()],
            });
        }
        let cfg = &self.config;
        let eps: T = lit(f64::from(cfg.rms_eps));
        let causal: Vec<bool> = (0..t).flat_map(|i| (0..t).map(move |j| j <= i)).collect();
        let cross: Vec<bool> = (0..t).flat_map(|_| enc_valid.iter().copied()).collect();
        let buckets = relative_buckets(t, t, cfg.n_relpos_buckets, cfg.max_relpos_distance);
        let table = g.param(self.decoder.relpos);
        let bias = g.relpos_bias(table, &buckets, t, t)?;
        let mut x = self.embed_tokens(g, target_ids)?;
        for layer in &self.decoder.layers {
            let gamma = g.param(layer.self_norm);
            let h = g.rms_norm(x, gamma, eps)?;
            let a = multi_head_attention(g, &layer.self_attn, h, h, &causal, Some(bias))?;
            x = g.add(x, a)?;
            let gamma = g.param(layer.cross_norm);
            let h = g.rms_norm(x, gamma, eps)?;
            let c = multi_head_attention(g, &layer.cross_attn, h, encoder_states, &cross, None)?;
            x = g.add(x, c)?;
            let gamma = g.param(layer.ffn_norm);
            let h = g.rms_norm(x, gamma, eps)?;
            let f = layer.ffn.forward(g, h)?;
            x = g.add(x, f)?;
        }
        let gamma = g.param(self.decoder.final_norm);
        let h = g.rms_norm(x, gamma, eps)?;
        let head = g.param(self.lm_head);
        g.matmul(h, head)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_offset_is_bucket_zero_and_direction_matters() {
        for i in 0..20 {
            assert_eq!(relative_position_bucket(i, i, 32, 64), 0);
            assert_ne!(
                relative_position_bucket(i + 1, i, 32, 64),
                relative_position_bucket(i + 1, i + 2, 32, 64)
            );
        }
        // Smallest legal table still separates the two directions.
        assert_ne!(relative_position_bucket(3, 2, 2, 2), relative_position_bucket(3, 4, 2, 2));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            vocab_size: 4,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
