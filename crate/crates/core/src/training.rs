//! Training modes, example construction and the optimisation loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::numerics::{adam_step, clip_global_norm, lr_at, Graph, LrSchedule, OptimizerState, ScheduleKind};
use crate::prompt::{render_prompt, PromptKind, BOS, EOS, SEP};
use crate::speech::{synthesize_frames, FrameSequence};
use crate::system::SpeechLlm;
use crate::transformer::LLM_PREFIX;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "sub_prob")]
pub enum AsrSource {
    GroundTruth,
    Hypothesis,
    Corrupted(f64),
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TrainingMode {
    #[default]
    Baseline,
    CotPrediction { asr_source: AsrSource, mask_asr_loss: bool },
    CotPrompting { asr_source: AsrSource },
}

impl TrainingMode {
    pub fn cot_prediction(asr_source: AsrSource) -> Result<Self> {
        let mode = TrainingMode::CotPrediction {
            asr_source,
            mask_asr_loss: asr_source == AsrSource::Hypothesis,
        };
        mode.validate()?;
        Ok(mode)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TrainingMode::CotPrediction {
                asr_source: AsrSource::GroundTruth,
                mask_asr_loss: true,
            } => Err(Error::Mode("ground-truth CoT prediction trains on the whole sequence".into())),
            TrainingMode::CotPrediction {
                asr_source: AsrSource::Hypothesis,
                mask_asr_loss: false,
            } => Err(Error::Mode("hypothesis CoT prediction must mask the transcript loss".into())),
            TrainingMode::CotPrediction {
                asr_source: AsrSource::Corrupted(_),
                ..
            } => Err(Error::Mode("CoT prediction takes ground-truth or hypothesis transcripts".into())),
            TrainingMode::CotPrompting {
                asr_source: AsrSource::Corrupted(p),
            } if !(0.0..=1.0).contains(&p) => Err(Error::Mode(format!("corruption probability {p} outside [0, 1]"))),
            _ => Ok(()),
        }
    }

    pub fn prompt_kind(&self) -> PromptKind {
        match self {
            TrainingMode::Baseline => PromptKind::Baseline,
            TrainingMode::CotPrediction { .. } => PromptKind::CotPrediction,
            TrainingMode::CotPrompting { .. } => PromptKind::CotPrompting,
        }
    }

    /// Whether examples need an externally supplied transcript.
    pub fn needs_transcript(&self) -> bool {
        matches!(
            self,
            TrainingMode::CotPrediction {
                asr_source: AsrSource::Hypothesis,
                ..
            } | TrainingMode::CotPrompting {
                asr_source: AsrSource::Hypothesis | AsrSource::Corrupted(_)
            }
        )
    }

    /// Whether examples need first-pass hypotheses of the training set.
    pub fn needs_hypotheses(&self) -> bool {
        matches!(
            self,
            TrainingMode::CotPrediction {
                asr_source: AsrSource::Hypothesis,
                ..
            } | TrainingMode::CotPrompting {
                asr_source: AsrSource::Hypothesis
            }
        )
    }

    pub fn tag(&self) -> String {
        match self {
            TrainingMode::Baseline => "baseline".into(),
            TrainingMode::CotPrediction { asr_source, .. } => format!("cot-prediction[{}]", source_tag(asr_source)),
            TrainingMode::CotPrompting { asr_source } => format!("cot-prompting[{}]", source_tag(asr_source)),
        }
    }
}

fn source_tag(s: &AsrSource) -> String {
    match s {
        AsrSource::GroundTruth => "gt".into(),
        AsrSource::Hypothesis => "hyp".into(),
        AsrSource::Corrupted(p) => format!("corrupted-{p}"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub utterance_id: String,
    pub prompt_ids: Vec<u32>,
    pub frames: Option<FrameSequence>,
    /// `BOS … EOS`.
    pub targets: Vec<u32>,
    /// Aligned with `targets`; position 0 is never predicted.
    pub loss_mask: Vec<bool>,
}

/// Frames for the source side of `utt`, keyed by tokenizer ids.
pub fn utterance_frames(sys: &SpeechLlm, utt: &Utterance) -> Result<Option<FrameSequence>> {
    let Some(enc) = &sys.speech else {
        return Ok(None);
    };
    let ids = encode_known(sys, &utt.source_text)?;
    synthesize_frames(&ids, &enc.config, enc.config.noise_sigma, utt.frames_seed).map(Some)
}

fn encode_known(sys: &SpeechLlm, text: &str) -> Result<Vec<u32>> {
    crate::prompt::split_words(text)
        .into_iter()
        .map(|w| {
            sys.tokenizer.id(w).ok_or_else(|| Error::OutOfVocabulary {
                word: w.to_string(),
                language: "tokenizer".into(),
            })
        })
        .collect()
}

/// Renders the prompt of `mode` for `utt` and tokenizes it.
pub fn prompt_ids(sys: &SpeechLlm, utt: &Utterance, kind: PromptKind, transcript: Option<&str>) -> Result<Vec<u32>> {
    let text = render_prompt(sys.templates.get(kind), &utt.source_lang, &utt.target_lang, transcript)?;
    Ok(sys.tokenizer.encode(&text))
}

/// `transcript` is the text the mode's ASR source resolves to for this
/// utterance; ground-truth modes ignore it and use the source text.
pub fn build_example(
    sys: &SpeechLlm,
    utt: &Utterance,
    mode: &TrainingMode,
    transcript: Option<&str>,
) -> Result<TrainingExample> {
    mode.validate()?;
    let asr = if mode.needs_transcript() {
        Some(transcript.ok_or_else(|| Error::Mode(format!("{} needs a transcript for {}", mode.tag(), utt.id)))?)
    } else {
        Some(utt.source_text.as_str())
    };
    let target_ids = encode_known(sys, &utt.target_text)?;
    let (prompt_transcript, targets, mask) = match mode {
        TrainingMode::Baseline => (None, wrap(&[&target_ids]), None),
        TrainingMode::CotPrompting { .. } => (asr, wrap(&[&target_ids]), None),
        TrainingMode::CotPrediction { mask_asr_loss, .. } => {
            let asr_ids = sys.tokenizer.encode(asr.unwrap_or_default());
            let targets = wrap(&[&asr_ids, &[SEP], &target_ids]);
            let cut = mask_asr_loss.then_some(asr_ids.len() + 2);
            (None, targets, cut)
        }
    };
    let loss_mask = (0..targets.len()).map(|i| mask.map_or(true, |cut| i >= cut)).collect();
    Ok(TrainingExample {
        utterance_id: utt.id.clone(),
        prompt_ids: prompt_ids(sys, utt, mode.prompt_kind(), prompt_transcript)?,
        frames: utterance_frames(sys, utt)?,
        targets,
        loss_mask,
    })
}

fn wrap(parts: &[&[u32]]) -> Vec<u32> {
    let mut v = vec![BOS];
    for p in parts {
        v.extend_from_slice(p);
    }
    v.push(EOS);
    v
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trainable {
    #[default]
    Full,
    LoraOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: ScheduleKind,
    pub peak_lr: f32,
    pub min_lr: f32,
    pub warmup_fraction: f64,
    pub clip_norm: f32,
    /// Learning-rate multiplier for the relative-position bias tables.
    pub relpos_lr_scale: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub seed: u64,
    pub trainable: Trainable,
    /// Keeps the token embedding table fixed during full fine-tuning.
    pub freeze_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2500,
            batch_size: 8,
            schedule: ScheduleKind::InverseSqrtAnnealing,
            peak_lr: 3e-3,
            min_lr: 1e-5,
            warmup_fraction: 0.05,
            clip_norm: 1.0,
            relpos_lr_scale: 30.0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            seed: 1,
            trainable: Trainable::Full,
            freeze_embeddings: false,
        }
    }
}

impl TrainConfig {
    /// Cosine schedule at a lower peak, as used for adapter runs.
    pub fn lora_defaults() -> Self {
        Self {
            schedule: ScheduleKind::CosineAnnealing,
            peak_lr: 1e-4,
            min_lr: 0.0,
            trainable: Trainable::LoraOnly,
            ..Self::default()
        }
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::with_warmup_fraction(self.schedule, self.peak_lr, self.steps, self.warmup_fraction, self.min_lr)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Mean loss of every step, in order.
    pub losses: Vec<f32>,
    pub optimizer: OptimizerState,
}

/// Marks the parameters `trainable` selects; the speech encoder is always
/// trained.
pub fn select_trainable(sys: &mut SpeechLlm, trainable: Trainable, freeze_embeddings: bool) -> Result<()> {
    match trainable {
        Trainable::Full => {
            let embed = format!("{LLM_PREFIX}.embed");
            sys.store.set_trainable_where(|n| !(freeze_embeddings && n == embed));
        }
        Trainable::LoraOnly => {
            if !sys.model.has_lora() {
                return Err(Error::Mode("adapter-only training on a model without adapters".into()));
            }
            sys.store.set_trainable_where(SpeechLlm::is_adapter_param);
        }
    }
    Ok(())
}

/// Mean next-token loss over the unmasked positions of `batch`, recorded on
/// `g`.
pub fn batch_loss(sys: &SpeechLlm, g: &mut Graph<'_, f32>, batch: &[&TrainingExample]) -> Result<crate::numerics::Var> {
    let mut logits = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for ex in batch {
        if ex.loss_mask.len() != ex.targets.len() {
            return Err(Error::Input(format!("loss mask length differs from targets for {}", ex.utterance_id)));
        }
        logits.push(sys.teacher_forced_logits(g, &ex.prompt_ids, ex.frames.as_ref(), &ex.targets)?);
        targets.extend(ex.targets[1..].iter().map(|&t| t as usize));
        mask.extend_from_slice(&ex.loss_mask[1..]);
    }
    let all = if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits)? };
    g.cross_entropy(all, &targets, &mask)
}

fn with_step(step: u64, e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
        other => other,
    }
}

/// Teacher-forced mini-batch training with Adam, global-norm clipping and the
/// configured schedule. Batches are drawn from per-epoch shuffles seeded by
/// `config.seed`. `on_step` sees `(step, loss)` after every update.
pub fn train_model(
    sys: &mut SpeechLlm,
    examples: &[TrainingExample],
    config: &TrainConfig,
    mut on_step: impl FnMut(u64, f32),
) -> Result<TrainOutcome> {
    if examples.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Parameter("batch_size must be positive".into()));
    }
    let schedule = config.schedule()?;
    select_trainable(sys, config.trainable, config.freeze_embeddings)?;
    let mut optimizer = OptimizerState::with_hyperparams(&sys.store, config.adam_beta1, config.adam_beta2, 1e-8);
    for id in sys.store.ids().collect::<Vec<_>>() {
        if sys.store.name(id).ends_with(".relpos") && sys.store.get(id).requires_grad() {
            optimizer.set_lr_scale(id, config.relpos_lr_scale)?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(config.steps as usize);
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(examples.len()) {
            if cursor == order.len() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&examples[order[cursor]]);
            cursor += 1;
        }
        sys.store.zero_grads();
        let (loss, grads) = {
            let mut g = Graph::new(&sys.store);
            let loss = batch_loss(sys, &mut g, &batch).map_err(|e| with_step(step, e))?;
            let value = g.scalar(loss);
            (value, g.backward(loss).map_err(|e| with_step(step, e))?)
        };
        grads.accumulate_into(&mut sys.store)?;
        drop(grads);
        clip_global_norm(&mut sys.store, config.clip_norm).map_err(|e| with_step(step, e))?;
        // a cosine schedule with min_lr = 0 ends at exactly zero
        let lr = lr_at(&schedule, step);
        if lr > 0.0 {
            adam_step(&mut sys.store, &mut optimizer, lr).map_err(|e| with_step(step, e))?;
        }
        losses.push(loss);
        on_step(step, loss);
    }
    Ok(TrainOutcome { losses, optimizer })
}
