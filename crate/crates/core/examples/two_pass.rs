//! Trains a small joint transcribe-then-translate model and a
//! chain-of-thought prompting model on one direction, then runs the two-pass
//! pipeline and the cascade on a few test utterances.
//!
//! `cargo run --release --example two_pass`

use cotprompt::data::{generate_corpus, make_toy_language, Split, SplitSizes};
use cotprompt::eval::{cascade_translate, cot_prediction_decode, two_pass_translate, TranscriptCache, TranscriptOverride};
use cotprompt::experiment::build_tokenizer;
use cotprompt::prompt::{SpeechPlacement, TemplateSet};
use cotprompt::speech::SpeechConfig;
use cotprompt::system::{SpeechLlm, SystemSpec};
use cotprompt::training::{build_example, train_model, AsrSource, TrainConfig, TrainingMode};
use cotprompt::transformer::ModelConfig;

fn main() -> anyhow::Result<()> {
    let pair = make_toy_language(("Alpha", "Beta"), 1, 16)?;
    let tok = build_tokenizer(std::slice::from_ref(&pair), &TemplateSet::default())?;
    let corpus = generate_corpus(&pair, SplitSizes { train: 600, dev: 0, test: 5 }, (3, 6), 2)?;
    let (train, test): (Vec<_>, Vec<_>) = corpus.into_iter().partition(|u| u.split == Split::Train);
    let spec = |speech: bool| SystemSpec {
        model: ModelConfig {
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            n_enc_layers: 1,
            n_dec_layers: 2,
            vocab_size: tok.vocab_size(),
            ..ModelConfig::default()
        },
        speech: speech.then(|| SpeechConfig {
            n_layers: 1,
            d_ff: 64,
            ..SpeechConfig::default()
        }),
        lora: None,
        placement: SpeechPlacement::AfterPrompt,
    };
    let config = TrainConfig {
        steps: 600,
        ..TrainConfig::default()
    };
    let gt_prompt = TrainingMode::CotPrompting { asr_source: AsrSource::GroundTruth };
    let fit = |speech: bool, mode: TrainingMode, seed: u64| -> anyhow::Result<SpeechLlm> {
        let mut sys = SpeechLlm::new(spec(speech), tok.clone(), seed)?;
        let ex = train.iter().map(|u| build_example(&sys, u, &mode, None)).collect::<cotprompt::Result<Vec<_>>>()?;
        let out = train_model(&mut sys, &ex, &config, |_, _| {})?;
        eprintln!("{:<24} final loss {:.3}", mode.tag(), out.losses.last().unwrap());
        Ok(sys)
    };
    let asr = fit(true, TrainingMode::cot_prediction(AsrSource::GroundTruth)?, 1)?;
    let cot = fit(true, gt_prompt, 2)?;
    let mt = fit(false, gt_prompt, 3)?;

    let mut cache = TranscriptCache::default();
    for u in &test {
        let joint = cot_prediction_decode(&asr, u, 32)?;
        let two = two_pass_translate(&asr, &cot, u, TranscriptOverride::FirstPass, &mut cache, 32)?;
        let casc = cascade_translate(&asr, &mt, u, &mut cache, 32)?;
        println!("{}", u.id);
        println!("  source      {}", u.source_text);
        println!("  transcript  {}", two.transcript);
        println!("  reference   {}", u.target_text);
        println!("  joint       {}", joint.translation);
        println!("  two-pass    {}", two.translation);
        println!("  cascade     {}", casc.translation);
    }
    Ok(())
}
