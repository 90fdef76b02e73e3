//! A complete translation system: optional speech encoder, text
//! encoder-decoder, tokenizer and prompt templates sharing one parameter
//! store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{inject_lora, LoraSpec, LORA_PREFIX};
use crate::numerics::{Graph, ParamStore, Scalar, Var};
use crate::prompt::{assemble_llm_input, AssembledInput, SpeechPlacement, TemplateSet, Tokenizer};
use crate::speech::{FrameSequence, SpeechConfig, SpeechEncoder, SPEECH_PREFIX};
use crate::transformer::{EncoderDecoderModel, ModelConfig};

/// Architecture of a system, enough to rebuild it from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub model: ModelConfig,
    /// `None` for text-only systems.
    pub speech: Option<SpeechConfig>,
    pub lora: Option<LoraSpec>,
    pub placement: SpeechPlacement,
}

#[derive(Clone, Debug)]
pub struct SpeechLlm {
    pub spec: SystemSpec,
    pub model: EncoderDecoderModel,
    pub speech: Option<SpeechEncoder>,
    pub store: ParamStore,
    pub tokenizer: Tokenizer,
    pub templates: TemplateSet,
}

impl SpeechLlm {
    /// Builds a randomly initialised system. The model vocabulary must match
    /// the tokenizer.
    pub fn new(spec: SystemSpec, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        if spec.model.vocab_size != tokenizer.vocab_size() {
            return Err(Error::ConfigMismatch(format!(
                "model vocab_size {} but tokenizer has {} tokens",
                spec.model.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let speech = spec
            .speech
            .clone()
            .map(|c| SpeechEncoder::new(c, spec.model.d_model, &mut store, &mut rng))
            .transpose()?;
        let mut model = EncoderDecoderModel::new(spec.model.clone(), &mut store, &mut rng)?;
        if let Some(lora) = &spec.lora {
            inject_lora(&mut model, &mut store, lora, &mut rng)?;
        }
        Ok(Self {
            spec,
            model,
            speech,
            store,
            tokenizer,
            templates: TemplateSet::default(),
        })
    }

    /// Adds adapters to a system built without them; returns the number of
    /// added parameters.
    pub fn add_lora(&mut self, lora: LoraSpec, seed: u64) -> Result<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = inject_lora(&mut self.model, &mut self.store, &lora, &mut rng)?;
        self.spec.lora = Some(lora);
        Ok(n)
    }

    pub fn is_text_only(&self) -> bool {
        self.speech.is_none()
    }

    pub fn is_adapter_param(name: &str) -> bool {
        name.starts_with(LORA_PREFIX) || name.starts_with(SPEECH_PREFIX)
    }

    /// Embeds the prompt, runs the speech encoder and joins both into the
    /// encoder input.
    pub fn assemble<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        prompt_ids: &[u32],
        frames: Option<&FrameSequence>,
    ) -> Result<AssembledInput> {
        let speech = match (&self.speech, frames) {
            (Some(enc), Some(f)) => Some(enc.forward(g, f)?),
            (None, None) => None,
            (Some(_), None) => return Err(Error::Input("speech system given no frames".into())),
            (None, Some(_)) => return Err(Error::Input("text-only system given speech frames".into())),
        };
        let table = g.param(self.model.embed);
        assemble_llm_input(g, prompt_ids, table, speech, self.spec.placement, &self.tokenizer)
    }

    /// Encoder states and their validity mask.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        prompt_ids: &[u32],
        frames: Option<&FrameSequence>,
    ) -> Result<(Var, Vec<bool>)> {
        let input = self.assemble(g, prompt_ids, frames)?;
        let states = self.model.encoder_forward(g, input.embedded, &input.pad_mask)?;
        Ok((states, input.pad_mask))
    }

    /// Teacher-forced logits: row `i` predicts `targets[i + 1]`.
    pub fn teacher_forced_logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        prompt_ids: &[u32],
        frames: Option<&FrameSequence>,
        targets: &[u32],
    ) -> Result<Var> {
        if targets.len() < 2 {
            return Err(Error::Input("targets need BOS and at least one more token".into()));
        }
        let (states, valid) = self.encode(g, prompt_ids, frames)?;
        self.model.decoder_forward(g, &targets[..targets.len() - 1], states, &valid)
    }
}
