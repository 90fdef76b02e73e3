//! Injects adapters, trains only them for a few steps, then merges them into
//! the base weights and compares logits before and after merging.

use cotprompt::data::{generate_corpus, make_toy_language, SplitSizes};
use cotprompt::experiment::build_tokenizer;
use cotprompt::lora::{count_lora_params, merge_all, LoraSpec};
use cotprompt::numerics::Graph;
use cotprompt::prompt::{SpeechPlacement, TemplateSet};
use cotprompt::system::{SpeechLlm, SystemSpec};
use cotprompt::training::{build_example, train_model, AsrSource, TrainConfig, Trainable, TrainingMode};
use cotprompt::transformer::ModelConfig;

fn main() -> anyhow::Result<()> {
    let pair = make_toy_language(("Alpha", "Beta"), 1, 12)?;
    let tok = build_tokenizer(std::slice::from_ref(&pair), &TemplateSet::default())?;
    let model = ModelConfig {
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        n_enc_layers: 1,
        n_dec_layers: 2,
        vocab_size: tok.vocab_size(),
        ..ModelConfig::default()
    };
    let lora = LoraSpec::uniform(4);
    let spec = SystemSpec {
        model: model.clone(),
        speech: None,
        lora: Some(lora.clone()),
        placement: SpeechPlacement::AfterPrompt,
    };
    let mut sys = SpeechLlm::new(spec, tok, 3)?;
    let added: usize = sys.store.iter().filter(|(_, n, _)| n.starts_with("lora.")).map(|(_, _, t)| t.len()).sum();
    println!("adapter parameters: {added} (closed form {})", count_lora_params(&lora, &model));

    let corpus = generate_corpus(&pair, SplitSizes { train: 64, dev: 0, test: 0 }, (2, 5), 4)?;
    let mode = TrainingMode::CotPrompting { asr_source: AsrSource::GroundTruth };
    let examples = corpus.iter().map(|u| build_example(&sys, u, &mode, None)).collect::<cotprompt::Result<Vec<_>>>()?;
    let config = TrainConfig {
        steps: 100,
        peak_lr: 1e-2,
        trainable: Trainable::LoraOnly,
        ..TrainConfig::lora_defaults()
    };
    let out = train_model(&mut sys, &examples, &config, |_, _| {})?;
    println!("loss {:.3} -> {:.3}", out.losses[0], out.losses.last().unwrap());

    let ex = &examples[0];
    let logits = |sys: &SpeechLlm| -> cotprompt::Result<Vec<f32>> {
        let mut g = Graph::new(&sys.store);
        let l = sys.teacher_forced_logits(&mut g, &ex.prompt_ids, None, &ex.targets)?;
        Ok(g.value(l).data().to_vec())
    };
    let before = logits(&sys)?;
    let mut merged = sys.clone();
    merge_all(&mut merged.model, &mut merged.store)?;
    let after = logits(&merged)?;
    let diff = before.iter().zip(&after).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    println!("max |logit difference| after merging: {diff:e}");
    Ok(())
}
