//! Greedy decoding, the two-pass and cascade pipelines, and BLEU/WER.

use std::collections::HashMap;

use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};
use crate::prompt::{PromptKind, Tokenizer, BOS, EOS, SEP};
use crate::speech::FrameSequence;
use crate::system::SpeechLlm;
use crate::training::{prompt_ids, utterance_frames};

/// Anything that scores the next token given the tokens so far.
pub trait NextTokenModel {
    /// Logits over the vocabulary for the token following `prefix`, which
    /// always starts with BOS.
    fn next_token_logits(&mut self, prefix: &[u32]) -> Result<Vec<f32>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// Forced prefix and generated tokens, without BOS; ends with EOS unless
    /// the length limit was hit.
    pub ids: Vec<u32>,
    pub text: String,
    /// Winning logit of every generated step.
    pub chosen_logits: Vec<f32>,
}

fn argmax(logits: &[f32]) -> usize {
    // strict comparison keeps the lowest id on ties
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from `BOS ⊕ forced`. At most `max_len` ids are returned,
/// counting the forced ones.
pub fn greedy_decode(
    model: &mut impl NextTokenModel,
    forced: &[u32],
    max_len: usize,
    tokenizer: &Tokenizer,
) -> Result<DecodeResult> {
    if max_len == 0 || forced.len() >= max_len {
        return Err(Error::Parameter(format!(
            "max_len {max_len} leaves no room after {} forced tokens",
            forced.len()
        )));
    }
    let mut prefix = Vec::with_capacity(max_len + 1);
    prefix.push(BOS);
    prefix.extend_from_slice(forced);
    let mut chosen_logits = Vec::new();
    while prefix.len() - 1 < max_len {
        let logits = model.next_token_logits(&prefix)?;
        if logits.len() != tokenizer.vocab_size() {
            return Err(Error::Vocabulary {
                id: logits.len(),
                vocab: tokenizer.vocab_size(),
            });
        }
        let next = argmax(&logits);
        chosen_logits.push(logits[next]);
        prefix.push(next as u32);
        if next as u32 == EOS {
            break;
        }
    }
    let ids = prefix[1..].to_vec();
    let body: Vec<u32> = ids.iter().copied().filter(|&t| t != EOS).collect();
    Ok(DecodeResult {
        text: tokenizer.decode(&body),
        ids,
        chosen_logits,
    })
}

/// Decoder of one system with the encoder states of one input cached.
pub struct CachedDecoder<'a> {
    sys: &'a SpeechLlm,
    states: Tensor,
    valid: Vec<bool>,
}

impl<'a> CachedDecoder<'a> {
    pub fn new(sys: &'a SpeechLlm, prompt_ids: &[u32], frames: Option<&FrameSequence>) -> Result<Self> {
        let mut g = Graph::new(&sys.store);
        let (states, valid) = sys.encode(&mut g, prompt_ids, frames)?;
        Ok(Self {
            states: g.value(states),
            sys,
            valid,
        })
    }

    /// Encoder input length.
    pub fn input_len(&self) -> usize {
        self.valid.len()
    }
}

impl NextTokenModel for CachedDecoder<'_> {
    fn next_token_logits(&mut self, prefix: &[u32]) -> Result<Vec<f32>> {
        let mut g = Graph::new(&self.sys.store);
        let states = g.input(self.states.clone())?;
        let logits = self.sys.model.decoder_forward(&mut g, prefix, states, &self.valid)?;
        let v = self.sys.model.config.vocab_size;
        let data = g.data(logits);
        Ok(data[data.len() - v..].to_vec())
    }
}

/// Splits at the first SEP, which is dropped. Without SEP everything is
/// transcript. A trailing EOS is ignored.
pub fn split_cot_output(ids: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let ids: Vec<u32> = ids.iter().copied().take_while(|&t| t != EOS).collect();
    match ids.iter().position(|&t| t == SEP) {
        Some(i) => (ids[..i].to_vec(), ids[i + 1..].to_vec()),
        None => (ids, Vec::new()),
    }
}

pub const DEFAULT_MAX_LEN: usize = 64;

/// Decodes `sys` on `utt` with the prompt of `kind`.
pub fn decode_utterance(
    sys: &SpeechLlm,
    utt: &Utterance,
    kind: PromptKind,
    transcript: Option<&str>,
    forced: &[u32],
    max_len: usize,
) -> Result<DecodeResult> {
    let prompt = prompt_ids(sys, utt, kind, transcript)?;
    let frames = utterance_frames(sys, utt)?;
    let mut dec = CachedDecoder::new(sys, &prompt, frames.as_ref())?;
    greedy_decode(&mut dec, forced, max_len, &sys.tokenizer)
}

/// Output of a joint transcribe-then-translate decode.
#[derive(Clone, Debug, PartialEq)]
pub struct CotPredictionOutput {
    pub decode: DecodeResult,
    pub transcript: String,
    pub translation: String,
}

pub fn cot_prediction_decode(asr_model: &SpeechLlm, utt: &Utterance, max_len: usize) -> Result<CotPredictionOutput> {
    let decode = decode_utterance(asr_model, utt, PromptKind::CotPrediction, None, &[], max_len)?;
    let (asr, ast) = split_cot_output(&decode.ids);
    Ok(CotPredictionOutput {
        transcript: asr_model.tokenizer.decode(&asr),
        translation: asr_model.tokenizer.decode(&ast),
        decode,
    })
}

/// Translation of a joint model whose transcript part is fixed to
/// `transcript` and only the translation is generated.
pub fn cot_prediction_forced(model: &SpeechLlm, utt: &Utterance, transcript: &str, max_len: usize) -> Result<String> {
    let mut forced = model.tokenizer.encode(transcript);
    forced.push(SEP);
    let decode = decode_utterance(model, utt, PromptKind::CotPrediction, None, &forced, max_len.max(forced.len() + 1))?;
    let (_, ast) = split_cot_output(&decode.ids);
    Ok(model.tokenizer.decode(&ast))
}

fn check_compatible(a: &SpeechLlm, b: &SpeechLlm) -> Result<()> {
    if a.tokenizer != b.tokenizer {
        return Err(Error::Compatibility("pipeline stages use different vocabularies".into()));
    }
    Ok(())
}

/// Transcript source for the second pass.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TranscriptOverride {
    /// Decode the first-pass model.
    FirstPass,
    /// Skip the first pass and use the reference source text.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub transcript: String,
    pub translation: String,
}

/// First-pass transcripts cached per utterance id so that every second-pass
/// system sees identical input.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TranscriptCache {
    map: HashMap<String, String>,
}

impl TranscriptCache {
    pub fn get_or_decode(&mut self, asr_model: &SpeechLlm, utt: &Utterance, max_len: usize) -> Result<String> {
        if let Some(t) = self.map.get(&utt.id) {
            return Ok(t.clone());
        }
        let t = cot_prediction_decode(asr_model, utt, max_len)?.transcript;
        self.map.insert(utt.id.clone(), t.clone());
        Ok(t)
    }

    pub fn insert(&mut self, id: impl Into<String>, transcript: impl Into<String>) {
        self.map.insert(id.into(), transcript.into());
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.map.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Pass one transcribes with the joint model; pass two renders the CoT
/// prompt with that transcript and decodes `cot_model`.
pub fn two_pass_translate(
    asr_model: &SpeechLlm,
    cot_model: &SpeechLlm,
    utt: &Utterance,
    source: TranscriptOverride,
    cache: &mut TranscriptCache,
    max_len: usize,
) -> Result<PipelineOutput> {
    check_compatible(asr_model, cot_model)?;
    let transcript = match source {
        TranscriptOverride::GroundTruth => utt.source_text.clone(),
        TranscriptOverride::FirstPass => cache.get_or_decode(asr_model, utt, max_len)?,
    };
    let translation = decode_utterance(cot_model, utt, PromptKind::CotPrompting, Some(&transcript), &[], max_len)?.text;
    Ok(PipelineOutput { transcript, translation })
}

/// First-pass transcript followed by a text-only translation model.
pub fn cascade_translate(
    asr_model: &SpeechLlm,
    mt_model: &SpeechLlm,
    utt: &Utterance,
    cache: &mut TranscriptCache,
    max_len: usize,
) -> Result<PipelineOutput> {
    check_compatible(asr_model, mt_model)?;
    if !mt_model.is_text_only() {
        return Err(Error::Mode("cascade translation model must be text-only".into()));
    }
    let transcript = cache.get_or_decode(asr_model, utt, max_len)?;
    let translation = decode_utterance(mt_model, utt, PromptKind::CotPrompting, Some(&transcript), &[], max_len)?.text;
    Ok(PipelineOutput { transcript, translation })
}

fn ngram_counts<'a>(words: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 in `[0, 100]` over whitespace tokens. Precisions for
/// n ≥ 2 use add-one smoothing.
pub fn corpus_bleu(references: &[String], hypotheses: &[String]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Input("BLEU needs at least one hypothesis".into()));
    }
    if references.len() != hypotheses.len() {
        return Err(Error::Input(format!(
            "{} references for {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (r, h) in references.iter().zip(hypotheses) {
        let r: Vec<&str> = r.split_whitespace().collect();
        let h: Vec<&str> = h.split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(&r, n);
            for (g, c) in ngram_counts(&h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 1..4 {
        log_p += ((matches[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let bp = if hyp_len > ref_len {
        0.0
    } else {
        1.0 - ref_len as f64 / hyp_len as f64
    };
    Ok(100.0 * (log_p / 4.0 + bp).exp())
}

/// Word-level Levenshtein distance.
pub fn edit_distance(reference: &[&str], hypothesis: &[&str]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

pub fn word_error_rate(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    if r.is_empty() {
        return Err(Error::Input("WER reference is empty".into()));
    }
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    Ok(edit_distance(&r, &h) as f64 / r.len() as f64)
}

/// Total edits over total reference words.
pub fn corpus_wer(references: &[String], hypotheses: &[String]) -> Result<f64> {
    if references.len() != hypotheses.len() || references.is_empty() {
        return Err(Error::Input("WER needs equally many, non-zero references and hypotheses".into()));
    }
    let (mut edits, mut words) = (0usize, 0usize);
    for (r, h) in references.iter().zip(hypotheses) {
        let r: Vec<&str> = r.split_whitespace().collect();
        if r.is_empty() {
            return Err(Error::Input("WER reference is empty".into()));
        }
        let h: Vec<&str> = h.split_whitespace().collect();
        edits += edit_distance(&r, &h);
        words += r.len();
    }
    Ok(edits as f64 / words as f64)
}
