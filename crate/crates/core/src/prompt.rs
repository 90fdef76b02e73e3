//! Word-level tokenizer, prompt templates and assembly of the single
//! encoder input sequence (text prompt followed by speech embeddings).

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Var};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const UNK: u32 = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<sep>", "<unk>"];
const NEWLINE: &str = "\n";

/// Splits on spaces and keeps each newline as a token of its own.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for piece in text.split(' ') {
        let mut rest = piece;
        while let Some(pos) = rest.find('\n') {
            if pos > 0 {
                out.push(&rest[..pos]);
            }
            out.push(NEWLINE);
            rest = &rest[pos + 1..];
        }
        if !rest.is_empty() {
            out.push(rest);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Tokenizer {
    /// Vocabulary = specials, then every distinct word of `texts` in
    /// lexicographic order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut words = BTreeSet::new();
        let mut any = false;
        for t in texts {
            any = true;
            words.extend(split_words(t).into_iter().map(str::to_string));
        }
        if !any {
            return Err(Error::Input("tokenizer corpus is empty".into()));
        }
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Input("token list does not start with the reserved specials".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Input(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .into_iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Inverse of [`encode`](Self::encode) for in-vocabulary text. PAD, BOS
    /// and EOS are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut prev_newline = true;
        for &id in ids {
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            let tok = self.token(id).unwrap_or(SPECIALS[UNK as usize]);
            if tok == NEWLINE {
                out.push('\n');
                prev_newline = true;
                continue;
            }
            if !prev_newline {
                out.push(' ');
            }
            out.push_str(tok);
            prev_newline = false;
        }
        out
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptKind {
    Baseline,
    CotPrediction,
    CotPrompting,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: PromptKind,
    pub text: String,
}

pub const SOURCE_LANG: &str = "{source_lang}";
pub const TARGET_LANG: &str = "{target_lang}";
pub const ASR_TRANSCRIPT: &str = "{ASR_transcript}";

impl PromptTemplate {
    pub fn new(kind: PromptKind, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let has_transcript = text.contains(ASR_TRANSCRIPT);
        if has_transcript != (kind == PromptKind::CotPrompting) {
            return Err(Error::TemplateArity(format!(
                "{kind:?} template {} the transcript placeholder",
                if has_transcript { "must not contain" } else { "must contain" }
            )));
        }
        Ok(Self { kind, text })
    }

    pub fn builtin(kind: PromptKind) -> Self {
        let text = match kind {
            PromptKind::Baseline => include_str!("../templates/baseline.txt"),
            PromptKind::CotPrediction => include_str!("../templates/cot_prediction.txt"),
            PromptKind::CotPrompting => include_str!("../templates/cot_prompting.txt"),
        };
        Self::new(kind, text).expect("builtin templates are well-formed")
    }

    pub fn from_file(kind: PromptKind, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        Self::new(kind, text)
    }

    /// Template text with every placeholder removed, for vocabulary building.
    pub fn literal_text(&self) -> String {
        self.text
            .replace(SOURCE_LANG, "")
            .replace(TARGET_LANG, "")
            .replace(ASR_TRANSCRIPT, "")
    }
}

/// The three built-in templates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSet {
    pub baseline: PromptTemplate,
    pub cot_prediction: PromptTemplate,
    pub cot_prompting: PromptTemplate,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            baseline: PromptTemplate::builtin(PromptKind::Baseline),
            cot_prediction: PromptTemplate::builtin(PromptKind::CotPrediction),
            cot_prompting: PromptTemplate::builtin(PromptKind::CotPrompting),
        }
    }
}

impl TemplateSet {
    pub fn get(&self, kind: PromptKind) -> &PromptTemplate {
        match kind {
            PromptKind::Baseline => &self.baseline,
            PromptKind::CotPrediction => &self.cot_prediction,
            PromptKind::CotPrompting => &self.cot_prompting,
        }
    }

    pub fn literal_texts(&self) -> Vec<String> {
        [&self.baseline, &self.cot_prediction, &self.cot_prompting]
            .iter()
            .map(|t| t.literal_text())
            .collect()
    }
}

/// Substitutes the placeholders and nothing else.
pub fn render_prompt(
    template: &PromptTemplate,
    source_lang: &str,
    target_lang: &str,
    asr_transcript: Option<&str>,
) -> Result<String> {
    let text = template
        .text
        .replace(SOURCE_LANG, source_lang)
        .replace(TARGET_LANG, target_lang);
    match (template.kind, asr_transcript) {
        (PromptKind::CotPrompting, Some(t)) => Ok(text.replace(ASR_TRANSCRIPT, t)),
        (PromptKind::CotPrompting, None) => Err(Error::TemplateArity(
            "chain-of-thought prompt needs a transcript".into(),
        )),
        (kind, Some(_)) => Err(Error::TemplateArity(format!(
            "{kind:?} prompt takes no transcript"
        ))),
        (_, None) => Ok(text),
    }
}

/// Where speech embeddings go relative to the text prompt.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpeechPlacement {
    /// `[prompt tokens, speech]`.
    #[default]
    AfterPrompt,
    /// `[prompt tokens up to the final "A:" cue, speech, cue]`.
    BeforeAnswerCue,
}

/// Embedded encoder input plus where each part landed.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledInput {
    pub embedded: Var,
    /// `true` for real positions; assembled inputs carry no padding.
    pub pad_mask: Vec<bool>,
    pub prompt_span: Range<usize>,
    pub speech_span: Range<usize>,
    /// Trailing prompt tokens moved after the speech, if any.
    pub cue_span: Option<Range<usize>>,
}

impl AssembledInput {
    pub fn len(&self) -> usize {
        self.pad_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pad_mask.is_empty()
    }
}

fn answer_cue_len(prompt_ids: &[u32], newline: Option<u32>) -> usize {
    // "\n" followed by one cue token
    match (newline, prompt_ids.len()) {
        (Some(nl), n) if n >= 2 && prompt_ids[n - 2] == nl => 2,
        _ => 0,
    }
}

/// Embeds `prompt_ids` through `embedding_table` and joins them with the
/// speech embeddings into one sequence.
pub fn assemble_llm_input<T: Scalar>(
    g: &mut Graph<T>,
    prompt_ids: &[u32],
    embedding_table: Var,
    speech: Option<Var>,
    placement: SpeechPlacement,
    tokenizer: &Tokenizer,
) -> Result<AssembledInput> {
    let d = g.shape(embedding_table)[1];
    let speech_len = match speech {
        Some(s) => {
            let shape = g.shape(s);
            if shape.len() != 2 || shape[1] != d {
                return Err(Error::Shape {
                    op: "assemble_llm_input",
                    lhs: g.shape(embedding_table).to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            shape[0]
        }
        None => 0,
    };
    let cue = match placement {
        SpeechPlacement::AfterPrompt => 0,
        SpeechPlacement::BeforeAnswerCue if speech_len > 0 => answer_cue_len(prompt_ids, tokenizer.id(NEWLINE)),
        SpeechPlacement::BeforeAnswerCue => 0,
    };
    let head = &prompt_ids[..prompt_ids.len() - cue];
    let tail = &prompt_ids[prompt_ids.len() - cue..];
    let mut parts = Vec::new();
    let lookup = |g: &mut Graph<T>, ids: &[u32]| -> Result<Var> {
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        g.embedding(embedding_table, &ids)
    };
    if !head.is_empty() {
        parts.push(lookup(g, head)?);
    }
    if let Some(s) = speech {
        parts.push(s);
    }
    if !tail.is_empty() {
        parts.push(lookup(g, tail)?);
    }
    if parts.is_empty() {
        return Err(Error::Input("encoder input has neither prompt nor speech".into()));
    }
    let embedded = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
    let total = prompt_ids.len() + speech_len;
    Ok(AssembledInput {
        embedded,
        pad_mask: vec![true; total],
        prompt_span: 0..head.len(),
        speech_span: head.len()..head.len() + speech_len,
        cue_span: (cue > 0).then(|| head.len() + speech_len..total),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn newline_is_its_own_token() {
        assert_eq!(split_words("a b.\nA:"), vec!["a", "b.", "\n", "A:"]);
        let tok = Tokenizer::build(["a b.\nA:"]).unwrap();
        assert_eq!(tok.decode(&tok.encode("a b.\nA:")), "a b.\nA:");
    }

    #[test]
    fn oov_maps_to_unk() {
        let tok = Tokenizer::build(["a b"]).unwrap();
        assert_eq!(tok.encode("a zz"), vec![tok.id("a").unwrap(), UNK]);
    }

    #[test]
    fn template_arity_checked() {
        assert!(PromptTemplate::new(PromptKind::Baseline, "x {ASR_transcript}").is_err());
        assert!(PromptTemplate::new(PromptKind::CotPrompting, "x").is_err());
        let t = PromptTemplate::builtin(PromptKind::CotPrompting);
        assert!(matches!(render_prompt(&t, "a", "b", None), Err(Error::TemplateArity(_))));
        let t = PromptTemplate::builtin(PromptKind::Baseline);
        assert!(matches!(render_prompt(&t, "a", "b", Some("x")), Err(Error::TemplateArity(_))));
    }
}
