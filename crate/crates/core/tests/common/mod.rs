#![allow(dead_code)]

use cotprompt::data::{generate_corpus, make_toy_language, SplitSizes, ToyLanguagePair, Utterance};
use cotprompt::experiment::build_tokenizer;
use cotprompt::prompt::{SpeechPlacement, TemplateSet, Tokenizer};
use cotprompt::speech::SpeechConfig;
use cotprompt::system::{SpeechLlm, SystemSpec};
use cotprompt::transformer::ModelConfig;

pub fn pair() -> ToyLanguagePair {
    make_toy_language(("Alpha", "Beta"), 3, 8).unwrap()
}

pub fn tokenizer(pair: &ToyLanguagePair) -> Tokenizer {
    build_tokenizer(std::slice::from_ref(pair), &TemplateSet::default()).unwrap()
}

pub fn corpus(pair: &ToyLanguagePair, n: usize, seed: u64) -> Vec<Utterance> {
    let sizes = SplitSizes {
        train: n,
        dev: 0,
        test: 0,
    };
    generate_corpus(pair, sizes, (2, 4), seed).unwrap()
}

pub fn tiny_model(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        n_enc_layers: 1,
        n_dec_layers: 1,
        vocab_size: vocab,
        n_relpos_buckets: 8,
        max_relpos_distance: 16,
        rms_eps: 1e-6,
    }
}

pub fn tiny_speech() -> SpeechConfig {
    SpeechConfig {
        d_feat: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        frames_per_token: 2,
        ..SpeechConfig::default()
    }
}

pub fn system(pair: &ToyLanguagePair, speech: bool, seed: u64) -> SpeechLlm {
    let tok = tokenizer(pair);
    let spec = SystemSpec {
        model: tiny_model(tok.vocab_size()),
        speech: speech.then(tiny_speech),
        lora: None,
        placement: SpeechPlacement::AfterPrompt,
    };
    SpeechLlm::new(spec, tok, seed).unwrap()
}
