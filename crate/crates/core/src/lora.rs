//! Low-rank adapters on the attention projections of the text model.
//!
//! An adapter adds `(alpha / r) · x · down · up` to a frozen projection
//! `x · W`. `up` starts at zero so a fresh adapter is an exact no-op.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{lit, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::transformer::{Attention, EncoderDecoderModel, Linear, ModelConfig};

/// Name prefix of every adapter tensor in a [`ParamStore`] or checkpoint.
pub const LORA_PREFIX: &str = "lora.";

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    Query,
    Key,
    Value,
    Output,
}

impl Site {
    fn index(self) -> usize {
        match self {
            Site::Query => 0,
            Site::Key => 1,
            Site::Value => 2,
            Site::Output => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub alpha: f32,
}

impl LoraAdapter {
    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }
}

/// Which projections get adapters and at what rank.
///
/// Decoder cross-attention uses `cross_query_rank` for the query (and the
/// output projection, when selected) and `cross_kv_rank` for keys and values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub enc_self_rank: usize,
    pub dec_self_rank: usize,
    pub cross_query_rank: usize,
    pub cross_kv_rank: usize,
    pub enc_self_sites: Vec<Site>,
    pub dec_self_sites: Vec<Site>,
    pub cross_sites: Vec<Site>,
    /// Scaling numerator; `None` uses each adapter's rank (scale 1).
    pub alpha: Option<f32>,
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self::uniform(8)
    }
}

impl LoraSpec {
    /// Same rank everywhere; self-attention adapts {query, value}, cross
    /// attention {query, key, value}.
    pub fn uniform(rank: usize) -> Self {
        Self {
            enc_self_rank: rank,
            dec_self_rank: rank,
            cross_query_rank: rank,
            cross_kv_rank: rank,
            enc_self_sites: vec![Site::Query, Site::Value],
            dec_self_sites: vec![Site::Query, Site::Value],
            cross_sites: vec![Site::Query, Site::Key, Site::Value],
            alpha: None,
        }
    }

    /// Ranks 128 (self-attention), 32 (cross queries) and 64 (cross keys
    /// and values).
    pub fn large_model() -> Self {
        Self {
            enc_self_rank: 128,
            dec_self_rank: 128,
            cross_query_rank: 32,
            cross_kv_rank: 64,
            ..Self::uniform(128)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_self_sites.is_empty() && self.dec_self_sites.is_empty() && self.cross_sites.is_empty() {
            return Err(Error::Parameter("LoRA spec selects no projection sites".into()));
        }
        let ranks = [
            (!self.enc_self_sites.is_empty(), self.enc_self_rank),
            (!self.dec_self_sites.is_empty(), self.dec_self_rank),
            (self.cross_sites.contains(&Site::Query) || self.cross_sites.contains(&Site::Output), self.cross_query_rank),
            (self.cross_sites.contains(&Site::Key) || self.cross_sites.contains(&Site::Value), self.cross_kv_rank),
        ];
        if ranks.iter().any(|&(used, r)| used && r == 0) {
            return Err(Error::Parameter("every used LoRA rank must be positive".into()));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0) {
                return Err(Error::Parameter("LoRA alpha must be positive".into()));
            }
        }
        Ok(())
    }

    fn cross_rank(&self, site: Site) -> usize {
        match site {
            Site::Query | Site::Output => self.cross_query_rank,
            Site::Key | Site::Value => self.cross_kv_rank,
        }
    }
}

/// `x · W + (alpha / r) · (x · down) · up`.
pub fn lora_forward<T: Scalar>(g: &mut Graph<T>, x: Var, base_weight: Var, adapter: &LoraAdapter) -> Result<Var> {
    let base = g.matmul(x, base_weight)?;
    let down = g.param(adapter.down);
    let up = g.param(adapter.up);
    if g.shape(down)[1] != g.shape(up)[0] {
        return Err(Error::Shape {
            op: "lora rank",
            lhs: g.shape(down).to_vec(),
            rhs: g.shape(up).to_vec(),
        });
    }
    let low = g.matmul(x, down)?;
    let delta = g.matmul(low, up)?;
    let delta = g.scale(delta, lit(f64::from(adapter.scale())))?;
    g.add(base, delta)
}

/// Creates adapter tensors for one `d_in × d_out` projection.
pub fn new_adapter(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    d_in: usize,
    d_out: usize,
    rank: usize,
    alpha: Option<f32>,
) -> Result<LoraAdapter> {
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(Error::Parameter(format!(
            "LoRA rank {rank} must lie in 1..={} for {name}",
            d_in.min(d_out)
        )));
    }
    let dist = Normal::new(0.0f64, 0.02).expect("valid std");
    let down = Tensor::from_fn(&[d_in, rank], |_| dist.sample(rng) as f32);
    let down = store.add(format!("{LORA_PREFIX}{name}.down"), down)?;
    let up = store.add(format!("{LORA_PREFIX}{name}.up"), Tensor::zeros(&[rank, d_out]))?;
    Ok(LoraAdapter {
        down,
        up,
        rank,
        alpha: alpha.unwrap_or(rank as f32),
    })
}

fn adapt_attention(
    attn: &mut Attention,
    store: &mut ParamStore,
    rng: &mut impl Rng,
    sites: &[Site],
    rank_of: impl Fn(Site) -> usize,
    alpha: Option<f32>,
) -> Result<usize> {
    let mut added = 0;
    let mut sorted = sites.to_vec();
    sorted.sort();
    sorted.dedup();
    for site in sorted {
        let proj: &mut Linear = attn.projections_mut()[site.index()];
        let name = store.name(proj.weight).to_string();
        let rank = rank_of(site);
        let adapter = new_adapter(store, rng, &name, proj.d_in, proj.d_out, rank, alpha)?;
        added += rank * (proj.d_in + proj.d_out);
        proj.adapter = Some(adapter);
    }
    Ok(added)
}

/// Attaches adapters at the sites named by `spec` and returns the number of
/// parameters added.
pub fn inject_lora(
    model: &mut EncoderDecoderModel,
    store: &mut ParamStore,
    spec: &LoraSpec,
    rng: &mut impl Rng,
) -> Result<usize> {
    if model.lora_injected {
        return Err(Error::State("LoRA adapters are already injected".into()));
    }
    spec.validate()?;
    let mut added = 0;
    for layer in &mut model.encoder.layers {
        added += adapt_attention(&mut layer.self_attn, store, rng, &spec.enc_self_sites, |_| spec.enc_self_rank, spec.alpha)?;
    }
    for layer in &mut model.decoder.layers {
        added += adapt_attention(&mut layer.self_attn, store, rng, &spec.dec_self_sites, |_| spec.dec_self_rank, spec.alpha)?;
        added += adapt_attention(&mut layer.cross_attn, store, rng, &spec.cross_sites, |s| spec.cross_rank(s), spec.alpha)?;
    }
    model.lora_injected = true;
    Ok(added)
}

/// Closed-form count of the parameters [`inject_lora`] adds.
pub fn count_lora_params(spec: &LoraSpec, config: &ModelConfig) -> usize {
    let d = config.d_model;
    let uniq = |sites: &[Site]| {
        let mut s = sites.to_vec();
        s.sort();
        s.dedup();
        s
    };
    let per_site = |r: usize| r * (d + d);
    let enc: usize = uniq(&spec.enc_self_sites).len() * per_site(spec.enc_self_rank);
    let dec_self: usize = uniq(&spec.dec_self_sites).len() * per_site(spec.dec_self_rank);
    let cross: usize = uniq(&spec.cross_sites)
        .into_iter()
        .map(|s| per_site(spec.cross_rank(s)))
        .sum();
    config.n_enc_layers * enc + config.n_dec_layers * (dec_self + cross)
}

/// Encoder-side and decoder-side shares of [`count_lora_params`].
pub fn count_lora_params_split(spec: &LoraSpec, config: &ModelConfig) -> (usize, usize) {
    let enc_only = ModelConfig {
        n_dec_layers: 0,
        ..config.clone()
    };
    let enc = count_lora_params(spec, &enc_only);
    (enc, count_lora_params(spec, config) - enc)
}

/// `W + (alpha / r) · down · up`.
pub fn merge_lora(base_weight: &Tensor, down: &Tensor, up: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let (d_in, d_out) = (base_weight.shape()[0], base_weight.shape()[1]);
    if down.shape() != [d_in, adapter.rank] || up.shape() != [adapter.rank, d_out] {
        return Err(Error::Shape {
            op: "merge_lora",
            lhs: down.shape().to_vec(),
            rhs: up.shape().to_vec(),
        });
    }
    let mut delta = vec![0.0f32; d_in * d_out];
    crate::numerics::graph::gemm_acc(d_in, adapter.rank, d_out, down.data(), up.data(), &mut delta);
    let scale = adapter.scale();
    let merged = base_weight
        .data()
        .iter()
        .zip(&delta)
        .map(|(&w, &dw)| w + scale * dw)
        .collect();
    Tensor::new(base_weight.shape(), merged)
}

/// Folds every adapter of `model` into its base weight and removes it.
pub fn merge_all(model: &mut EncoderDecoderModel, store: &mut ParamStore) -> Result<()> {
    let mut attns: Vec<&mut Attention> = Vec::new();
    for l in &mut model.encoder.layers {
        attns.push(&mut l.self_attn);
    }
    for l in &mut model.decoder.layers {
        attns.push(&mut l.self_attn);
        attns.push(&mut l.cross_attn);
    }
    for attn in attns {
        for proj in attn.projections_mut() {
            if let Some(a) = proj.adapter.take() {
                let merged = merge_lora(store.get(proj.weight), store.get(a.down), store.get(a.up), &a)?;
                store.set_data(proj.weight, merged.into_data())?;
            }
        }
    }
    model.lora_injected = false;
    Ok(())
}
