//! A toy language pair, a few utterances, and transcript corruption at
//! several substitution rates.
//!
//! `cargo run --example toy_corpus -- [out_dir]` also writes the manifests.

use cotprompt::data::{corrupt_transcript, translate_oracle, DataConfig, Split};
use cotprompt::eval::corpus_wer;

fn main() -> anyhow::Result<()> {
    let config = DataConfig::default();
    let corpora = config.generate()?;
    let (pair, corpus) = &corpora[0];
    println!("{}: {} utterances", pair.id(), corpus.len());
    for u in corpus.iter().filter(|u| u.split == Split::Test).take(3) {
        println!("  {}\n    {}\n    {}", u.id, u.source_text, u.target_text);
        assert_eq!(translate_oracle(&u.source_text, pair)?, u.target_text);
    }
    let refs: Vec<String> = corpus.iter().take(2000).map(|u| u.source_text.clone()).collect();
    for p in [0.0, 0.1, 0.3, 0.5] {
        let hyps = refs
            .iter()
            .enumerate()
            .map(|(i, r)| corrupt_transcript(r, p, &pair.source, i as u64))
            .collect::<cotprompt::Result<Vec<_>>>()?;
        println!("sub_prob {p:.1}: wer {:.3}  e.g. {}", corpus_wer(&refs, &hyps)?, hyps[0]);
    }
    if let Some(dir) = std::env::args().nth(1) {
        let paths = config.write_all(dir.as_ref())?;
        println!("wrote {} manifests", paths.len());
    }
    Ok(())
}
