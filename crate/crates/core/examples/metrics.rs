//! Corpus BLEU and word error rate on a few hand-made hypotheses.

use cotprompt::eval::{corpus_bleu, corpus_wer, word_error_rate};

fn main() -> anyhow::Result<()> {
    let refs: Vec<String> = ["the cat sat on the mat", "a dog barks at night"].map(String::from).to_vec();
    for hyps in [
        refs.clone(),
        vec!["the cat sat on a mat".into(), "a dog barks at night".into()],
        vec!["cat the".into(), "dog".into()],
    ] {
        println!(
            "bleu {:>6.2}  wer {:.3}  {:?}",
            corpus_bleu(&refs, &hyps)?,
            corpus_wer(&refs, &hyps)?,
            hyps
        );
    }
    println!("single-utterance wer: {}", word_error_rate("a b c d", "a x c")?);
    Ok(())
}
