//! Synthetic translation tasks: toy languages, a deterministic translation
//! oracle, corpus manifests and controlled transcript corruption.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const SYLLABLES_PER_WORD: usize = 3;

pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01B3))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Language {
    pub name: String,
    pub words: Vec<String>,
}

impl Language {
    /// Word forms are a function of the name only, so a language keeps its
    /// vocabulary across every pair it takes part in. Words in `exclude` are
    /// never produced.
    pub fn generate(name: &str, vocab_size: usize, exclude: &HashSet<String>) -> Result<Self> {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Parameter(format!("language name {name:?} must be one non-empty word")));
        }
        let space = (CONSONANTS.len() * VOWELS.len()).pow(SYLLABLES_PER_WORD as u32);
        if vocab_size + exclude.len() > space / 2 {
            return Err(Error::Parameter(format!("vocab_size {vocab_size} too large")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(name_hash(name));
        let mut seen = HashSet::new();
        let mut words = Vec::with_capacity(vocab_size);
        while words.len() < vocab_size {
            let mut w = String::with_capacity(2 * SYLLABLES_PER_WORD);
            for _ in 0..SYLLABLES_PER_WORD {
                w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
                w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
            }
            if !exclude.contains(&w) && seen.insert(w.clone()) {
                words.push(w);
            }
        }
        Ok(Self {
            name: name.to_string(),
            words,
        })
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }
}

/// Source and target language with a bijective word lexicon. Translation
/// substitutes words and then swaps adjacent pairs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLanguagePair {
    pub source: Language,
    pub target: Language,
    /// `lexicon[i]` is the target index of source word `i`.
    pub lexicon: Vec<usize>,
}

pub fn make_toy_language(names: (&str, &str), seed: u64, vocab_size: usize) -> Result<ToyLanguagePair> {
    if vocab_size < 4 {
        return Err(Error::Parameter(format!("vocab_size must be at least 4, got {vocab_size}")));
    }
    if names.0 == names.1 {
        return Err(Error::Parameter("a pair needs two distinct language names".into()));
    }
    let source = Language::generate(names.0, vocab_size, &HashSet::new())?;
    let taken: HashSet<String> = source.words.iter().cloned().collect();
    let target = Language::generate(names.1, vocab_size, &taken)?;
    let mut lexicon: Vec<usize> = (0..vocab_size).collect();
    lexicon.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, name_hash(names.0) ^ name_hash(names.1).rotate_left(17))));
    Ok(ToyLanguagePair { source, target, lexicon })
}

impl ToyLanguagePair {
    /// The opposite direction, with the inverse lexicon.
    pub fn reversed(&self) -> Self {
        let mut inverse = vec![0; self.lexicon.len()];
        for (s, &t) in self.lexicon.iter().enumerate() {
            inverse[t] = s;
        }
        Self {
            source: self.target.clone(),
            target: self.source.clone(),
            lexicon: inverse,
        }
    }

    pub fn id(&self) -> String {
        format!("{}-{}", self.source.name.to_lowercase(), self.target.name.to_lowercase())
    }
}

pub fn translate_oracle(source_text: &str, pair: &ToyLanguagePair) -> Result<String> {
    let mut out = source_text
        .split_whitespace()
        .map(|w| {
            pair.source
                .index_of(w)
                .map(|i| pair.target.words[pair.lexicon[i]].as_str())
                .ok_or_else(|| Error::OutOfVocabulary {
                    word: w.to_string(),
                    language: pair.source.name.clone(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    for chunk in out.chunks_mut(2) {
        chunk.reverse();
    }
    Ok(out.join(" "))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::Corruption(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub source_text: String,
    pub target_text: String,
    pub frames_seed: u64,
    pub pair_id: String,
    pub source_lang: String,
    pub target_lang: String,
    pub split: Split,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 8000,
            dev: 500,
            test: 500,
        }
    }
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.dev + self.test
    }
}

/// Draws sentences of uniformly random length in `length_range` from uniformly
/// random source words. Splits are consecutive blocks: train, dev, test.
pub fn generate_corpus(
    pair: &ToyLanguagePair,
    sizes: SplitSizes,
    length_range: (usize, usize),
    seed: u64,
) -> Result<Vec<Utterance>> {
    let (lo, hi) = length_range;
    if sizes.total() == 0 || lo == 0 || lo > hi {
        return Err(Error::Parameter(format!(
            "need n >= 1 and 1 <= min <= max, got n={} range={lo}..={hi}",
            sizes.total()
        )));
    }
    let pair_id = pair.id();
    let stream = mix(seed, name_hash(&pair_id));
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let mut out = Vec::with_capacity(sizes.total());
    for split in Split::ALL {
        for i in 0..sizes.get(split) {
            let len = rng.gen_range(lo..=hi);
            let words: Vec<&str> = (0..len)
                .map(|_| pair.source.words[rng.gen_range(0..pair.source.words.len())].as_str())
                .collect();
            let source_text = words.join(" ");
            let target_text = translate_oracle(&source_text, pair)?;
            out.push(Utterance {
                id: format!("{pair_id}-{}-{i:05}", split.as_str()),
                source_text,
                target_text,
                frames_seed: mix(stream, out.len() as u64),
                pair_id: pair_id.clone(),
                source_lang: pair.source.name.clone(),
                target_lang: pair.target.name.clone(),
                split,
            });
        }
    }
    Ok(out)
}

fn escape(v: &str) -> Result<&str> {
    if v.contains(['\t', '\n', '=']) {
        return Err(Error::Input(format!("manifest value {v:?} contains a reserved character")));
    }
    Ok(v)
}

pub fn manifest_line(u: &Utterance) -> Result<String> {
    let mut s = String::new();
    write!(
        s,
        "id={}\tsource_lang={}\ttarget_lang={}\tsplit={}\tframes_seed={}\tpair={}\tsource={}\ttarget={}",
        escape(&u.id)?,
        escape(&u.source_lang)?,
        escape(&u.target_lang)?,
        u.split.as_str(),
        u.frames_seed,
        escape(&u.pair_id)?,
        escape(&u.source_text)?,
        escape(&u.target_text)?,
    )
    .expect("writing to a String");
    Ok(s)
}

pub fn parse_manifest_line(line: &str) -> Result<Utterance> {
    let fields: BTreeMap<&str, &str> = line
        .split('\t')
        .map(|kv| kv.split_once('=').ok_or_else(|| Error::Corruption(format!("manifest field without '=': {kv:?}"))))
        .collect::<Result<_>>()?;
    let get = |k: &str| {
        fields
            .get(k)
            .map(|v| v.to_string())
            .ok_or_else(|| Error::Corruption(format!("manifest record lacks {k}")))
    };
    Ok(Utterance {
        id: get("id")?,
        source_text: get("source")?,
        target_text: get("target")?,
        frames_seed: get("frames_seed")?
            .parse()
            .map_err(|e| Error::Corruption(format!("bad frames_seed: {e}")))?,
        pair_id: get("pair")?,
        source_lang: get("source_lang")?,
        target_lang: get("target_lang")?,
        split: Split::parse(&get("split")?)?,
    })
}

pub fn write_manifest(path: &Path, utterances: &[Utterance]) -> Result<()> {
    let mut ids = HashSet::new();
    let mut text = String::new();
    for u in utterances {
        if !ids.insert(u.id.as_str()) {
            return Err(Error::Input(format!("duplicate utterance id {}", u.id)));
        }
        text.push_str(&manifest_line(u)?);
        text.push('\n');
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::storage(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<Utterance>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
    text.lines().filter(|l| !l.is_empty()).map(parse_manifest_line).collect()
}

/// `{root}/ast/{pair_id}/{split}.manifest`.
pub fn manifest_path(root: &Path, pair_id: &str, split: Split) -> PathBuf {
    root.join("ast").join(pair_id).join(format!("{}.manifest", split.as_str()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Unordered language pairs; each yields both directions.
    pub pairs: Vec<(String, String)>,
    pub vocab_size: usize,
    pub sizes: SplitSizes,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pairs: vec![("Alpha".into(), "Beta".into()), ("Alpha".into(), "Gamma".into())],
            vocab_size: 50,
            sizes: SplitSizes::default(),
            min_len: 3,
            max_len: 12,
            seed: 1,
        }
    }
}

impl DataConfig {
    /// Every translation direction, forward pairs first.
    pub fn directions(&self) -> Result<Vec<ToyLanguagePair>> {
        let mut out = Vec::new();
        for (a, b) in &self.pairs {
            let pair = make_toy_language((a, b), self.seed, self.vocab_size)?;
            let rev = pair.reversed();
            out.push(pair);
            out.push(rev);
        }
        Ok(out)
    }

    /// Corpora of every direction, keyed by pair id.
    pub fn generate(&self) -> Result<Vec<(ToyLanguagePair, Vec<Utterance>)>> {
        self.directions()?
            .into_iter()
            .map(|p| {
                let c = generate_corpus(&p, self.sizes, (self.min_len, self.max_len), self.seed)?;
                Ok((p, c))
            })
            .collect()
    }

    /// Writes all manifests under `root` and returns their paths.
    pub fn write_all(&self, root: &Path) -> Result<Vec<PathBuf>> {
        let mut paths = Vec::new();
        for (pair, corpus) in self.generate()? {
            for split in Split::ALL {
                let part: Vec<Utterance> = corpus.iter().filter(|u| u.split == split).cloned().collect();
                let path = manifest_path(root, &pair.id(), split);
                write_manifest(&path, &part)?;
                paths.push(path);
            }
        }
        Ok(paths)
    }
}

/// Replaces each word, with probability `sub_prob`, by a different word of
/// `vocabulary` drawn uniformly.
pub fn corrupt_transcript(text: &str, sub_prob: f64, vocabulary: &Language, seed: u64) -> Result<String> {
    if !(0.0..=1.0).contains(&sub_prob) {
        return Err(Error::Parameter(format!("sub_prob must lie in [0, 1], got {sub_prob}")));
    }
    if vocabulary.words.len() < 2 {
        return Err(Error::Parameter("corruption needs at least two vocabulary words".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = vocabulary.words.len();
    let words: Vec<&str> = text
        .split_whitespace()
        .map(|w| {
            if rng.gen_bool(sub_prob) {
                let own = vocabulary.index_of(w);
                let pick = match own {
                    Some(i) => {
                        let j = rng.gen_range(0..n - 1);
                        if j >= i {
                            j + 1
                        } else {
                            j
                        }
                    }
                    None => rng.gen_range(0..n),
                };
                vocabulary.words[pick].as_str()
            } else {
                w
            }
        })
        .collect();
    Ok(words.join(" "))
}
