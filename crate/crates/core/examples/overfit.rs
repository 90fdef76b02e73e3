//! Memorises 16 utterances in every training mode.

use cotprompt::data::{generate_corpus, make_toy_language, SplitSizes};
use cotprompt::experiment::build_tokenizer;
use cotprompt::numerics::ScheduleKind;
use cotprompt::prompt::{SpeechPlacement, TemplateSet};
use cotprompt::speech::SpeechConfig;
use cotprompt::system::{SpeechLlm, SystemSpec};
use cotprompt::training::{build_example, train_model, AsrSource, TrainConfig, TrainingMode};
use cotprompt::transformer::ModelConfig;

fn main() -> anyhow::Result<()> {
    let pair = make_toy_language(("Alpha", "Beta"), 3, 8)?;
    let tok = build_tokenizer(std::slice::from_ref(&pair), &TemplateSet::default())?;
    let corpus = generate_corpus(&pair, SplitSizes { train: 16, dev: 0, test: 0 }, (2, 4), 5)?;
    let spec = SystemSpec {
        model: ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            n_enc_layers: 1,
            n_dec_layers: 1,
            vocab_size: tok.vocab_size(),
            n_relpos_buckets: 8,
            max_relpos_distance: 16,
            rms_eps: 1e-6,
        },
        speech: Some(SpeechConfig {
            d_feat: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            frames_per_token: 2,
            ..SpeechConfig::default()
        }),
        lora: None,
        placement: SpeechPlacement::AfterPrompt,
    };
    let config = TrainConfig {
        steps: 300,
        batch_size: 16,
        schedule: ScheduleKind::CosineAnnealing,
        peak_lr: 1e-2,
        min_lr: 1e-4,
        ..TrainConfig::default()
    };
    let modes = [
        TrainingMode::Baseline,
        TrainingMode::cot_prediction(AsrSource::GroundTruth)?,
        TrainingMode::CotPrompting { asr_source: AsrSource::GroundTruth },
    ];
    for mode in modes {
        let mut sys = SpeechLlm::new(spec.clone(), tok.clone(), 6)?;
        let examples = corpus
            .iter()
            .map(|u| build_example(&sys, u, &mode, None))
            .collect::<cotprompt::Result<Vec<_>>>()?;
        let out = train_model(&mut sys, &examples, &config, |_, _| {})?;
        println!(
            "{:<24} loss {:.3} -> {:.4}",
            mode.tag(),
            out.losses[0],
            out.losses.last().copied().unwrap_or(f32::NAN)
        );
    }
    Ok(())
}
