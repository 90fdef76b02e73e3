//! Renders the three prompt templates and shows how the chain-of-thought
//! prompt tokenises.

use cotprompt::prompt::{render_prompt, PromptKind, TemplateSet, Tokenizer};

fn main() -> anyhow::Result<()> {
    let templates = TemplateSet::default();
    let transcript = "gemeke mudafi rimuli";
    for kind in [PromptKind::Baseline, PromptKind::CotPrediction, PromptKind::CotPrompting] {
        let t = (kind == PromptKind::CotPrompting).then_some(transcript);
        let text = render_prompt(templates.get(kind), "Alpha", "Beta", t)?;
        println!("--- {kind:?}\n{text}");
    }
    let rendered = render_prompt(templates.get(PromptKind::CotPrompting), "Alpha", "Beta", Some(transcript))?;
    let tok = Tokenizer::build([rendered.as_str()])?;
    let ids = tok.encode(&rendered);
    println!("--- {} tokens, vocabulary {}", ids.len(), tok.vocab_size());
    println!("{ids:?}");
    assert_eq!(tok.decode(&ids), rendered);
    Ok(())
}
