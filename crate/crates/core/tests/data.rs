use std::collections::HashSet;

use cotprompt::data::{
    corrupt_transcript, generate_corpus, make_toy_language, manifest_path, read_manifest, translate_oracle,
    write_manifest, DataConfig, Language, Split, SplitSizes, ToyLanguagePair,
};
use cotprompt::eval::corpus_wer;
use cotprompt::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn hand_pair() -> ToyLanguagePair {
    let lang = |name: &str, words: &[&str]| Language {
        name: name.into(),
        words: words.iter().map(|w| w.to_string()).collect(),
    };
    ToyLanguagePair {
        source: lang("Src", &["aa", "bb", "cc", "dd"]),
        target: lang("Tgt", &["xx", "yy", "zz", "ww"]),
        lexicon: vec![0, 1, 2, 3],
    }
}

fn sizes(train: usize, dev: usize, test: usize) -> SplitSizes {
    SplitSizes { train, dev, test }
}

#[test]
fn oracle_examples() {
    let p = hand_pair();
    assert_eq!(translate_oracle("aa bb", &p).unwrap(), "yy xx");
    assert_eq!(translate_oracle("aa", &p).unwrap(), "xx");
    assert_eq!(translate_oracle("aa bb cc", &p).unwrap(), "yy xx zz");
    let err = translate_oracle("aa qq", &p).unwrap_err();
    assert!(matches!(err, Error::OutOfVocabulary { ref word, .. } if word == "qq"));
}

#[test]
fn small_vocabularies_are_rejected() {
    assert!(matches!(make_toy_language(("A", "B"), 1, 3), Err(Error::Parameter(_))));
}

#[test]
fn pairs_are_deterministic_bijective_and_disjoint() {
    let a = make_toy_language(("Alpha", "Beta"), 11, 50).unwrap();
    assert_eq!(a, make_toy_language(("Alpha", "Beta"), 11, 50).unwrap());
    let mut seen = a.lexicon.clone();
    seen.sort_unstable();
    assert_eq!(seen, (0..50).collect::<Vec<_>>());
    let back = a.reversed();
    for i in 0..50 {
        assert_eq!(back.lexicon[a.lexicon[i]], i);
    }
    let src: HashSet<_> = a.source.words.iter().collect();
    assert!(a.target.words.iter().all(|w| !src.contains(w)));
}

#[test]
fn different_seeds_give_different_lexicons() {
    for s in 0..20u64 {
        let a = make_toy_language(("Alpha", "Beta"), 2 * s, 50).unwrap();
        let b = make_toy_language(("Alpha", "Beta"), 2 * s + 1, 50).unwrap();
        assert_ne!(a.lexicon, b.lexicon, "seeds {} and {}", 2 * s, 2 * s + 1);
    }
}

fn reswap(text: &str) -> Vec<&str> {
    let mut w: Vec<&str> = text.split(' ').collect();
    w.chunks_mut(2).for_each(<[&str]>::reverse);
    w
}

#[test]
fn inverse_lexicon_recovers_the_source() {
    let pair = make_toy_language(("Alpha", "Beta"), 5, 50).unwrap();
    let corpus = generate_corpus(&pair, sizes(100, 0, 0), (1, 12), 6).unwrap();
    for u in &corpus {
        let back: Vec<&str> = reswap(&u.target_text)
            .into_iter()
            .map(|w| {
                let t = pair.target.index_of(w).unwrap();
                let s = pair.lexicon.iter().position(|&x| x == t).unwrap();
                pair.source.words[s].as_str()
            })
            .collect();
        assert_eq!(back.join(" "), u.source_text);
        assert_eq!(translate_oracle(&u.target_text, &pair.reversed()).unwrap(), u.source_text);
    }
}

#[test]
fn manifests_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let pair = make_toy_language(("Alpha", "Beta"), 1, 20).unwrap();
    let mut bytes = Vec::new();
    for run in 0..2 {
        let c = generate_corpus(&pair, sizes(90, 5, 5), (3, 12), 7).unwrap();
        let path = dir.path().join(format!("{run}.manifest"));
        write_manifest(&path, &c).unwrap();
        bytes.push(std::fs::read(&path).unwrap());
        assert_eq!(read_manifest(&path).unwrap(), c);
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn ids_are_unique_and_targets_come_from_the_oracle() {
    let pair = make_toy_language(("Alpha", "Gamma"), 2, 30).unwrap();
    let c = generate_corpus(&pair, sizes(300, 20, 20), (3, 12), 3).unwrap();
    let ids: HashSet<_> = c.iter().map(|u| u.id.as_str()).collect();
    assert_eq!(ids.len(), c.len());
    for u in &c {
        assert_eq!(u.target_text, translate_oracle(&u.source_text, &pair).unwrap());
    }
    assert_eq!(c.iter().filter(|u| u.split == Split::Dev).count(), 20);
}

#[test]
fn duplicate_ids_are_refused() {
    let pair = make_toy_language(("Alpha", "Beta"), 1, 10).unwrap();
    let mut c = generate_corpus(&pair, sizes(2, 0, 0), (3, 4), 1).unwrap();
    c[1].id = c[0].id.clone();
    let dir = tempfile::tempdir().unwrap();
    assert!(write_manifest(&dir.path().join("x.manifest"), &c).is_err());
}

#[test]
fn bad_corpus_parameters_are_rejected() {
    let pair = make_toy_language(("Alpha", "Beta"), 1, 10).unwrap();
    assert!(generate_corpus(&pair, sizes(0, 0, 0), (3, 4), 1).is_err());
    assert!(generate_corpus(&pair, sizes(1, 0, 0), (0, 4), 1).is_err());
    assert!(generate_corpus(&pair, sizes(1, 0, 0), (5, 4), 1).is_err());
}

#[test]
fn mean_length_is_near_the_midpoint() {
    let pair = make_toy_language(("Alpha", "Beta"), 1, 50).unwrap();
    let c = generate_corpus(&pair, sizes(10_000, 0, 0), (3, 12), 9).unwrap();
    let mean = c.iter().map(|u| u.source_text.split(' ').count()).sum::<usize>() as f64 / c.len() as f64;
    assert!((mean - 7.5).abs() <= 0.75, "mean {mean}");
}

#[test]
fn write_all_uses_the_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    let config = DataConfig {
        sizes: sizes(10, 2, 2),
        ..DataConfig::default()
    };
    let paths = config.write_all(dir.path()).unwrap();
    assert_eq!(paths.len(), 4 * 3);
    let p = manifest_path(dir.path(), "beta-alpha", Split::Test);
    assert!(p.ends_with("ast/beta-alpha/test.manifest"));
    assert_eq!(read_manifest(&p).unwrap().len(), 2);
}

fn sentence(lang: &Language, n: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| lang.words[rng.gen_range(0..lang.words.len())].as_str()).collect::<Vec<_>>().join(" ")
}

#[test]
fn corruption_extremes() {
    let pair = make_toy_language(("Alpha", "Beta"), 1, 50).unwrap();
    let text = sentence(&pair.source, 200, 1);
    assert_eq!(corrupt_transcript(&text, 0.0, &pair.source, 3).unwrap(), text);
    let all = corrupt_transcript(&text, 1.0, &pair.source, 3).unwrap();
    for (a, b) in text.split(' ').zip(all.split(' ')) {
        assert_ne!(a, b);
        assert!(pair.source.index_of(b).is_some());
    }
    assert!(corrupt_transcript(&text, 1.5, &pair.source, 3).is_err());
    assert_eq!(
        corrupt_transcript(&text, 0.4, &pair.source, 8).unwrap(),
        corrupt_transcript(&text, 0.4, &pair.source, 8).unwrap()
    );
}

#[test]
fn corruption_rate_and_wer_match_probability() {
    let pair = make_toy_language(("Alpha", "Beta"), 1, 50).unwrap();
    let refs: Vec<String> = (0..1000).map(|i| sentence(&pair.source, 10, i)).collect();
    let hyps: Vec<String> = refs
        .iter()
        .enumerate()
        .map(|(i, r)| corrupt_transcript(r, 0.3, &pair.source, 1000 + i as u64).unwrap())
        .collect();
    let changed: usize = refs
        .iter()
        .zip(&hyps)
        .map(|(r, h)| r.split(' ').zip(h.split(' ')).filter(|(a, b)| a != b).count())
        .sum();
    let rate = changed as f64 / 10_000.0;
    assert!((rate - 0.3).abs() <= 0.02, "rate {rate}");
    let wer = corpus_wer(&refs, &hyps).unwrap();
    assert!((wer - 0.3).abs() <= 0.02, "wer {wer}");
}

proptest! {
    #[test]
    fn oracle_preserves_length_and_inverts(seed in 0u64..1000, n in 1usize..15) {
        let pair = make_toy_language(("Alpha", "Beta"), seed, 12).unwrap();
        let src = sentence(&pair.source, n, seed);
        let tgt = translate_oracle(&src, &pair).unwrap();
        prop_assert_eq!(tgt.split(' ').count(), n);
        prop_assert_eq!(translate_oracle(&tgt, &pair.reversed()).unwrap(), src);
    }
}
