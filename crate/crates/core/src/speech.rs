//! Synthetic speech frames and the trainable speech encoder whose output is
//! spliced into the text model's encoder input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::mix;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::transformer::{EncoderStack, Linear, StackDims};

pub const SPEECH_PREFIX: &str = "speech";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeechConfig {
    pub d_feat: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub downsample: usize,
    pub frames_per_token: usize,
    pub noise_sigma: f32,
    pub n_relpos_buckets: usize,
    pub max_relpos_distance: usize,
    /// Seed of the per-token prototype vectors.
    pub corpus_seed: u64,
}

impl Default for SpeechConfig {
    fn default() -> Self {
        Self {
            d_feat: 16,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            downsample: 2,
            frames_per_token: 4,
            noise_sigma: 0.3,
            n_relpos_buckets: 32,
            max_relpos_distance: 64,
            corpus_seed: 7,
        }
    }
}

impl SpeechConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_feat == 0 || self.n_heads == 0 || self.d_ff == 0 || self.downsample == 0 || self.frames_per_token == 0 {
            return Err(Error::Parameter("speech dimensions must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Parameter("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    /// Number of speech embeddings produced for `n_tokens` source words.
    pub fn output_len(&self, n_tokens: usize) -> usize {
        (n_tokens * self.frames_per_token).div_ceil(self.downsample)
    }
}

/// Frames standing in for the audio of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub frames: Tensor,
    pub frames_per_token: usize,
    pub n_tokens: usize,
}

/// Unit-norm prototype vector of a token id.
pub fn prototype(corpus_seed: u64, token: u32, d_feat: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(corpus_seed, u64::from(token) + 1));
    let v: Vec<f64> = (0..d_feat).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| (x / norm) as f32).collect()
}

/// Each token contributes `frames_per_token` copies of its prototype plus
/// i.i.d. Gaussian noise drawn from `seed`.
pub fn synthesize_frames(
    source: &[u32],
    config: &SpeechConfig,
    noise_sigma: f32,
    seed: u64,
) -> Result<FrameSequence> {
    if source.is_empty() {
        return Err(Error::Input("cannot synthesize frames for empty text".into()));
    }
    if config.frames_per_token == 0 || !(noise_sigma >= 0.0) {
        return Err(Error::Parameter("frames_per_token >= 1 and noise_sigma >= 0 required".into()));
    }
    let d = config.d_feat;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(source.len() * config.frames_per_token * d);
    for &tok in source {
        let proto = prototype(config.corpus_seed, tok, d);
        for _ in 0..config.frames_per_token {
            for &p in &proto {
                let n: f32 = if noise_sigma > 0.0 {
                    noise_sigma * rng.sample::<f32, _>(StandardNormal)
                } else {
                    0.0
                };
                data.push(p + n);
            }
        }
    }
    Ok(FrameSequence {
        frames: Tensor::new(&[source.len() * config.frames_per_token, d], data)?,
        frames_per_token: config.frames_per_token,
        n_tokens: source.len(),
    })
}

/// Input projection, transformer encoder stack, then mean pooling over
/// `downsample` consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechEncoder {
    pub config: SpeechConfig,
    pub d_model: usize,
    pub in_proj: Linear,
    pub stack: EncoderStack,
}

impl SpeechEncoder {
    pub fn new(config: SpeechConfig, d_model: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if d_model % config.n_heads != 0 {
            return Err(Error::Parameter(format!(
                "speech n_heads {} does not divide d_model {d_model}",
                config.n_heads
            )));
        }
        let in_proj = Linear::new(store, rng, &format!("{SPEECH_PREFIX}.in_proj"), config.d_feat, d_model)?;
        let stack = EncoderStack::new(
            store,
            rng,
            &format!("{SPEECH_PREFIX}.enc"),
            StackDims {
                d_model,
                n_heads: config.n_heads,
                d_ff: config.d_ff,
                n_layers: config.n_layers,
                n_buckets: config.n_relpos_buckets,
                max_distance: config.max_relpos_distance,
                eps: 1e-6,
            },
        )?;
        Ok(Self {
            config,
            d_model,
            in_proj,
            stack,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, frames: &FrameSequence) -> Result<Var> {
        if frames.frames.cols() != self.config.d_feat {
            return Err(Error::Shape {
                op: "speech frames",
                lhs: frames.frames.shape().to_vec(),
                rhs: vec![self.config.d_feat],
            });
        }
        let x = g.input(frames.frames.cast::<T>())?;
        let h = self.in_proj.forward(g, x)?;
        let valid = vec![true; frames.frames.rows()];
        let h = self.stack.forward(g, h, &valid)?;
        g.mean_pool_rows(h, self.config.downsample)
    }
}
