//! Saves a freshly initialised system, reloads it and checks every tensor
//! survives bit for bit.

use cotprompt::checkpoint::{load_checkpoint, read_header, save_checkpoint, Checkpoint};
use cotprompt::data::make_toy_language;
use cotprompt::experiment::build_tokenizer;
use cotprompt::prompt::{SpeechPlacement, TemplateSet};
use cotprompt::speech::SpeechConfig;
use cotprompt::system::{SpeechLlm, SystemSpec};
use cotprompt::training::TrainingMode;
use cotprompt::transformer::ModelConfig;

fn main() -> anyhow::Result<()> {
    let pair = make_toy_language(("Alpha", "Beta"), 1, 10)?;
    let tok = build_tokenizer(std::slice::from_ref(&pair), &TemplateSet::default())?;
    let spec = SystemSpec {
        model: ModelConfig {
            vocab_size: tok.vocab_size(),
            ..ModelConfig::default()
        },
        speech: Some(SpeechConfig::default()),
        lora: None,
        placement: SpeechPlacement::AfterPrompt,
    };
    let sys = SpeechLlm::new(spec, tok, 9)?;
    let dir = std::env::temp_dir().join(format!("cotprompt-ckpt-{}", std::process::id()));
    let path = dir.join("model.ckpt");
    save_checkpoint(&Checkpoint::from_system(&sys, TrainingMode::Baseline, 0, false, None)?, &path)?;
    let header = read_header(&path)?;
    println!("{}: {} tensors, {} bytes", path.display(), header.tensors.len(), std::fs::metadata(&path)?.len());
    let back = load_checkpoint(&path)?.to_system()?;
    let same = sys.store.iter().zip(back.store.iter()).all(|((_, a, x), (_, b, y))| a == b && x.data() == y.data());
    println!("round trip exact: {same}");
    std::fs::remove_dir_all(&dir)?;
    anyhow::ensure!(same, "checkpoint round trip changed a tensor");
    Ok(())
}
