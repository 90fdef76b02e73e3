mod common;

use std::collections::BTreeMap;

use cotprompt::data::translate_oracle;
use cotprompt::eval::{
    cascade_translate, corpus_bleu, corpus_wer, cot_prediction_decode, decode_utterance, greedy_decode,
    split_cot_output, two_pass_translate, word_error_rate, CachedDecoder, NextTokenModel, TranscriptCache,
    TranscriptOverride,
};
use cotprompt::experiment::{ReportRow, Suite};
use cotprompt::prompt::{render_prompt, PromptKind, Tokenizer, EOS, SEP};
use cotprompt::training::prompt_ids;
use cotprompt::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Emits a fixed script, then EOS forever.
struct Script {
    vocab: usize,
    script: Vec<u32>,
}

impl NextTokenModel for Script {
    fn next_token_logits(&mut self, prefix: &[u32]) -> cotprompt::Result<Vec<f32>> {
        let step = prefix.len() - 1;
        let want = self.script.get(step).copied().unwrap_or(EOS);
        let mut l = vec![0.0; self.vocab];
        l[want as usize] = 1.0;
        Ok(l)
    }
}

fn toy_tokenizer() -> Tokenizer {
    Tokenizer::build(["a b c d e"]).unwrap()
}

#[test]
fn eos_first_gives_empty_output() {
    let tok = toy_tokenizer();
    let mut m = Script { vocab: tok.vocab_size(), script: vec![] };
    let out = greedy_decode(&mut m, &[], 10, &tok).unwrap();
    assert_eq!(out.ids, vec![EOS]);
    assert_eq!(out.text, "");
}

#[test]
fn scripted_token_then_eos() {
    let tok = toy_tokenizer();
    let t = tok.id("c").unwrap();
    let mut m = Script { vocab: tok.vocab_size(), script: vec![t] };
    let a = greedy_decode(&mut m, &[], 10, &tok).unwrap();
    assert_eq!(a.ids, vec![t, EOS]);
    assert_eq!(a.text, "c");
    assert_eq!(a, greedy_decode(&mut m, &[], 10, &tok).unwrap());
}

#[test]
fn decoding_stops_at_max_len() {
    let tok = toy_tokenizer();
    let a = tok.id("a").unwrap();
    let mut m = Script { vocab: tok.vocab_size(), script: vec![a; 100] };
    let out = greedy_decode(&mut m, &[], 7, &tok).unwrap();
    assert_eq!(out.ids.len(), 7);
    assert!(!out.ids.contains(&EOS));
    assert!(greedy_decode(&mut m, &[], 0, &tok).is_err());
}

#[test]
fn ties_go_to_the_lowest_id() {
    struct Flat(usize);
    impl NextTokenModel for Flat {
        fn next_token_logits(&mut self, prefix: &[u32]) -> cotprompt::Result<Vec<f32>> {
            let mut l = vec![0.5; self.0];
            if prefix.len() > 1 {
                l[EOS as usize] = 1.0;
            }
            l[0] = 0.0;
            Ok(l)
        }
    }
    let tok = toy_tokenizer();
    let out = greedy_decode(&mut Flat(tok.vocab_size()), &[], 5, &tok).unwrap();
    assert_eq!(out.ids, vec![1, EOS]);
}

#[test]
fn oracle_model_reproduces_the_oracle() {
    let pair = common::pair();
    let tok = common::tokenizer(&pair);
    for u in common::corpus(&pair, 10, 3) {
        let ids = tok.encode(&translate_oracle(&u.source_text, &pair).unwrap());
        let mut m = Script { vocab: tok.vocab_size(), script: ids };
        assert_eq!(greedy_decode(&mut m, &[], 64, &tok).unwrap().text, u.target_text);
    }
}

#[test]
fn split_examples() {
    let (a, b, x, y) = (10, 11, 12, 13);
    assert_eq!(split_cot_output(&[a, b, SEP, x, y]), (vec![a, b], vec![x, y]));
    assert_eq!(split_cot_output(&[SEP, x]), (vec![], vec![x]));
    assert_eq!(split_cot_output(&[a, b]), (vec![a, b], vec![]));
    assert_eq!(split_cot_output(&[a, SEP, x, EOS]), (vec![a], vec![x]));
}

#[test]
fn pipelines_share_first_pass_transcripts() {
    let pair = common::pair();
    let asr = common::system(&pair, true, 1);
    let cot = common::system(&pair, true, 2);
    let mt = common::system(&pair, false, 3);
    let mut cache = TranscriptCache::default();
    for u in common::corpus(&pair, 3, 4) {
        let pass1 = cot_prediction_decode(&asr, &u, 12).unwrap();
        let (t_ids, _) = split_cot_output(&pass1.decode.ids);
        assert_eq!(pass1.transcript, asr.tokenizer.decode(&t_ids));
        let two = two_pass_translate(&asr, &cot, &u, TranscriptOverride::FirstPass, &mut cache, 12).unwrap();
        let casc = cascade_translate(&asr, &mt, &u, &mut cache, 12).unwrap();
        assert_eq!(two.transcript, pass1.transcript);
        assert_eq!(casc.transcript.as_bytes(), two.transcript.as_bytes());
        let direct = decode_utterance(&cot, &u, PromptKind::CotPrompting, Some(&two.transcript), &[], 12).unwrap();
        assert_eq!(two.translation, direct.text);
    }
    assert_eq!(cache.len(), 3);
}

#[test]
fn ground_truth_override_skips_the_first_pass() {
    let pair = common::pair();
    let asr = common::system(&pair, true, 1);
    let cot = common::system(&pair, true, 2);
    let u = &common::corpus(&pair, 1, 5)[0];
    let mut cache = TranscriptCache::default();
    let out = two_pass_translate(&asr, &cot, u, TranscriptOverride::GroundTruth, &mut cache, 12).unwrap();
    assert!(cache.is_empty());
    assert_eq!(out.transcript, u.source_text);
    let direct = decode_utterance(&cot, u, PromptKind::CotPrompting, Some(&u.source_text), &[], 12).unwrap();
    assert_eq!(out.translation, direct.text);
}

#[test]
fn empty_transcript_still_runs_the_second_pass() {
    let pair = common::pair();
    let asr = common::system(&pair, true, 1);
    let cot = common::system(&pair, true, 2);
    let u = &common::corpus(&pair, 1, 6)[0];
    let mut cache = TranscriptCache::default();
    cache.insert(u.id.clone(), "");
    let out = two_pass_translate(&asr, &cot, u, TranscriptOverride::FirstPass, &mut cache, 12).unwrap();
    assert_eq!(out.transcript, "");
    let rendered = render_prompt(cot.templates.get(PromptKind::CotPrompting), "Alpha", "Beta", Some("")).unwrap();
    assert!(rendered.contains("The source text is: \nA:"));
}

#[test]
fn cascade_rejects_speech_mt_and_foreign_vocabularies() {
    let pair = common::pair();
    let asr = common::system(&pair, true, 1);
    let speech_mt = common::system(&pair, true, 2);
    let u = &common::corpus(&pair, 1, 7)[0];
    let mut cache = TranscriptCache::default();
    assert!(matches!(cascade_translate(&asr, &speech_mt, u, &mut cache, 8), Err(Error::Mode(_))));

    let other_pair = cotprompt::data::make_toy_language(("Delta", "Beta"), 1, 8).unwrap();
    let foreign = common::system(&other_pair, true, 3);
    let err = two_pass_translate(&asr, &foreign, u, TranscriptOverride::GroundTruth, &mut cache, 8).unwrap_err();
    assert!(matches!(err, Error::Compatibility(_)));
}

#[test]
fn text_only_inputs_have_no_speech_span() {
    let pair = common::pair();
    let mt = common::system(&pair, false, 3);
    let u = &common::corpus(&pair, 1, 8)[0];
    let ids = prompt_ids(&mt, u, PromptKind::CotPrompting, Some(&u.source_text)).unwrap();
    let dec = CachedDecoder::new(&mt, &ids, None).unwrap();
    assert_eq!(dec.input_len(), ids.len());
}

// Independent BLEU: every n-gram compared position by position.
fn oracle_bleu(refs: &[Vec<&str>], hyps: &[Vec<&str>]) -> f64 {
    let mut m = [0f64; 4];
    let mut t = [0f64; 4];
    let (mut c, mut r) = (0f64, 0f64);
    for (rf, hy) in refs.iter().zip(hyps) {
        c += hy.len() as f64;
        r += rf.len() as f64;
        for n in 1..=4usize {
            if hy.len() < n {
                continue;
            }
            let mut used = vec![false; rf.len().saturating_sub(n - 1)];
            for i in 0..=hy.len() - n {
                t[n - 1] += 1.0;
                if rf.len() < n {
                    continue;
                }
                for j in 0..=rf.len() - n {
                    if !used[j] && (0..n).all(|k| hy[i + k] == rf[j + k]) {
                        used[j] = true;
                        m[n - 1] += 1.0;
                        break;
                    }
                }
            }
        }
    }
    if c == 0.0 || m[0] == 0.0 {
        return 0.0;
    }
    let mut p = m[0] / t[0];
    for n in 1..4 {
        p *= (m[n] + 1.0) / (t[n] + 1.0);
    }
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    100.0 * bp * p.powf(0.25)
}

fn random_sentence(rng: &mut impl Rng, max: usize) -> Vec<&'static str> {
    const WORDS: [&str; 5] = ["a", "b", "c", "d", "e"];
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect()
}

#[test]
fn bleu_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..200 {
        let k = rng.gen_range(1..4);
        let refs: Vec<Vec<&str>> = (0..k)
            .map(|_| {
                let mut s = random_sentence(&mut rng, 8);
                if s.is_empty() {
                    s.push("a");
                }
                s
            })
            .collect();
        let hyps: Vec<Vec<&str>> = (0..k).map(|_| random_sentence(&mut rng, 8)).collect();
        let join = |v: &[Vec<&str>]| v.iter().map(|s| s.join(" ")).collect::<Vec<_>>();
        let got = corpus_bleu(&join(&refs), &join(&hyps)).unwrap();
        let want = oracle_bleu(&refs, &hyps);
        assert!((got - want).abs() < 1e-6, "case {case}: {got} vs {want}");
    }
}

#[test]
fn bleu_fixed_cases() {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let refs = s(&["a b c d", "e f g"]);
    assert_eq!(corpus_bleu(&refs, &refs).unwrap(), 100.0);
    assert_eq!(corpus_bleu(&s(&["a b c"]), &s(&["x y z"])).unwrap(), 0.0);
    let got = corpus_bleu(&s(&["a b c d"]), &s(&["a b d c"])).unwrap();
    let want = oracle_bleu(&[vec!["a", "b", "c", "d"]], &[vec!["a", "b", "d", "c"]]);
    assert!((got - want).abs() < 1e-6);
    assert!(matches!(corpus_bleu(&[], &[]), Err(Error::Input(_))));
}

// Full-table Levenshtein, written separately from the rolling-row version.
fn oracle_wer(r: &[&str], h: &[&str]) -> f64 {
    let mut d = vec![vec![0usize; h.len() + 1]; r.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=h.len() {
        d[0][j] = j;
    }
    for i in 1..=r.len() {
        for j in 1..=h.len() {
            let cost = if r[i - 1] == h[j - 1] { 0 } else { 1 };
            d[i][j] = (d[i - 1][j - 1] + cost).min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[r.len()][h.len()] as f64 / r.len() as f64
}

#[test]
fn wer_matches_dynamic_programming_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let mut r = random_sentence(&mut rng, 8);
        if r.is_empty() {
            r.push("e");
        }
        let h = random_sentence(&mut rng, 8);
        let got = word_error_rate(&r.join(" "), &h.join(" ")).unwrap();
        assert!((got - oracle_wer(&r, &h)).abs() < 1e-12);
    }
    assert_eq!(word_error_rate("a b c", "a b c").unwrap(), 0.0);
    assert!((word_error_rate("a b c", "a x c").unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!(matches!(word_error_rate("", "a"), Err(Error::Input(_))));
    let refs = vec!["a b".to_string(), "c d e f".to_string()];
    let hyps = vec!["a".to_string(), "c d e f".to_string()];
    assert!((corpus_wer(&refs, &hyps).unwrap() - 1.0 / 6.0).abs() < 1e-12);
}

#[test]
fn report_average_is_the_arithmetic_mean() {
    let values: BTreeMap<String, f64> = [("alpha-beta".to_string(), 31.25), ("beta-alpha".to_string(), 40.5)].into();
    let row = ReportRow::new(Suite::Table2, "baseline", "bleu", Some(1), values);
    assert!((row.avg - 35.875).abs() < 1e-6);
}
