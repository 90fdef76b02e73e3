//! Run configuration files, dotted overrides and process exit codes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{corrupt_transcript, manifest_path, mix, read_manifest, DataConfig, Split, ToyLanguagePair, Utterance};
use crate::error::{Error, Result};
use crate::eval::{cascade_translate, cot_prediction_decode, decode_utterance, two_pass_translate, TranscriptCache, TranscriptOverride, DEFAULT_MAX_LEN};
use crate::experiment::{build_tokenizer, copy_text_model, EvalReport};
use crate::lora::{count_lora_params, LoraSpec, LORA_PREFIX};
use crate::prompt::{PromptKind, SpeechPlacement, TemplateSet, Tokenizer};
use crate::speech::SpeechConfig;
use crate::system::{SpeechLlm, SystemSpec};
use crate::training::{build_example, train_model, AsrSource, TrainConfig, TrainingExample, TrainingMode};
use crate::transformer::ModelConfig;

/// Environment variable naming the default run directory.
pub const RUN_DIR_ENV: &str = "COTPROMPT_RUN_DIR";
pub const DEFAULT_RUN_DIR: &str = "runs";
pub const RESOLVED_CONFIG: &str = "resolved-config.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.txt";

/// Settings of one training run. `model.vocab_size` is replaced by the
/// tokenizer's size; the corpus settings come from the data directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Pair ids to train on; empty means every direction of the corpus.
    pub directions: Vec<String>,
    pub train_per_direction: Option<usize>,
    pub speech_input: bool,
    pub model: ModelConfig,
    pub speech: SpeechConfig,
    pub placement: SpeechPlacement,
    pub train: TrainConfig,
    pub mode: TrainingMode,
    pub lora: Option<LoraSpec>,
    pub max_decode_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            directions: Vec::new(),
            train_per_direction: None,
            speech_input: true,
            model: ModelConfig {
                n_enc_layers: 1,
                n_dec_layers: 2,
                ..ModelConfig::default()
            },
            speech: SpeechConfig::default(),
            placement: SpeechPlacement::AfterPrompt,
            train: TrainConfig::default(),
            mode: TrainingMode::Baseline,
            lora: None,
            max_decode_len: DEFAULT_MAX_LEN,
        }
    }
}

pub mod exit {
    pub const OTHER: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const RESOLUTION: i32 = 3;
    pub const NUMERIC: i32 = 4;
    pub const IO: i32 = 5;
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Mode(_) | Error::TemplateArity(_) | Error::Parameter(_) => exit::USAGE,
        Error::Resolution(_) | Error::Compatibility(_) | Error::ConfigMismatch(_) => exit::RESOLUTION,
        Error::Numeric(_) | Error::TrainingLoop(_) | Error::AttentionDegeneracy { .. } => exit::NUMERIC,
        Error::Storage { .. } | Error::Corruption(_) | Error::Version { .. } => exit::IO,
        _ => exit::OTHER,
    }
}

/// Parses one `a.b.c=value` override. The value is read as a TOML literal
/// and falls back to a plain string.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override key {key:?} has an empty segment")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(root: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = root;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path crosses non-table key {p:?}")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Recursive merge. A table whose `kind` changes replaces the old one, so
/// fields of a previous enum variant do not leak into the new one.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) if b.get("kind") == t.get("kind") || t.get("kind").is_none() => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Defaults, then the file, then `overrides` in order.
pub fn resolve_config<T>(file: Option<&Path>, overrides: &[String]) -> Result<T>
where
    T: Default + Serialize + DeserializeOwned,
{
    let mut table = Table::try_from(T::default()).map_err(|e| Error::Config(format!("default config: {e}")))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        let top: Table = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut table, top);
    }
    for o in overrides {
        let (path, value) = parse_override(o)?;
        let mut top = Table::new();
        set_path(&mut top, &path, value)?;
        merge(&mut table, top);
    }
    Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("invalid configuration: {e}")))
}

pub fn write_resolved(dir: &Path, config: &impl Serialize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    let text = toml::to_string_pretty(config).map_err(|e| Error::Config(format!("serialising config: {e}")))?;
    let path = dir.join(RESOLVED_CONFIG);
    std::fs::write(&path, text).map_err(|e| Error::storage(&path, e))
}

/// Refuses a non-empty `dir` unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    let non_empty = match std::fs::read_dir(dir) {
        Ok(mut it) => it.next().is_some(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => false,
        Err(e) => return Err(Error::storage(dir, e)),
    };
    if non_empty && !force {
        return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", dir.display())));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))
}

/// Writes the resolved data configuration and every manifest under `out`.
pub fn generate_data(out: &Path, config: &DataConfig, force: bool) -> Result<Vec<PathBuf>> {
    config.directions()?;
    prepare_out_dir(out, force)?;
    let ast = out.join("ast");
    if ast.exists() {
        std::fs::remove_dir_all(&ast).map_err(|e| Error::storage(&ast, e))?;
    }
    write_resolved(out, config)?;
    config.write_all(out)
}

/// A generated corpus on disk.
pub struct Corpus {
    pub config: DataConfig,
    pub pairs: Vec<ToyLanguagePair>,
    pub tokenizer: Tokenizer,
    pub root: PathBuf,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Self> {
        let cfg_path = root.join(RESOLVED_CONFIG);
        if !cfg_path.is_file() {
            return Err(Error::Resolution(format!("no corpus at {} (missing {RESOLVED_CONFIG})", root.display())));
        }
        let config: DataConfig = resolve_config(Some(&cfg_path), &[])?;
        let pairs = config.directions()?;
        let tokenizer = build_tokenizer(&pairs, &TemplateSet::default())?;
        Ok(Self {
            config,
            pairs,
            tokenizer,
            root: root.to_path_buf(),
        })
    }

    pub fn pair(&self, id: &str) -> Result<&ToyLanguagePair> {
        self.pairs
            .iter()
            .find(|p| p.id() == id)
            .ok_or_else(|| Error::Resolution(format!("no direction {id} in corpus {}", self.root.display())))
    }

    pub fn split(&self, pair_id: &str, split: Split) -> Result<Vec<Utterance>> {
        self.pair(pair_id)?;
        let path = manifest_path(&self.root, pair_id, split);
        if !path.is_file() {
            return Err(Error::Resolution(format!("missing manifest {}", path.display())));
        }
        read_manifest(&path)
    }

    pub fn find(&self, id: &str) -> Result<Utterance> {
        for p in &self.pairs {
            for split in Split::ALL {
                if let Some(u) = self.split(&p.id(), split)?.into_iter().find(|u| u.id == id) {
                    return Ok(u);
                }
            }
        }
        Err(Error::Resolution(format!("no utterance {id:?} in {}", self.root.display())))
    }
}

pub struct TrainRequest<'a> {
    pub data_dir: &'a Path,
    pub out: &'a Path,
    pub config: &'a RunConfig,
    /// First-pass model that transcribes the training set for
    /// hypothesis-transcript modes.
    pub asr_checkpoint: Option<&'a Path>,
    /// Checkpoint whose text model initialises the new system.
    pub init_from: Option<&'a Path>,
    pub force: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub examples: usize,
    pub final_loss: f32,
    pub trainable_params: usize,
    /// Parameters the adapters add, counted in the store and in closed form.
    pub lora_params: Option<(usize, usize)>,
}

/// Trains one system and writes `model.ckpt`, `loss.txt` and the resolved
/// configuration into `out`.
pub fn train_run(req: &TrainRequest<'_>, log: &mut dyn FnMut(&str)) -> Result<TrainSummary> {
    let cfg = req.config;
    cfg.mode.validate()?;
    let corpus = Corpus::open(req.data_dir)?;
    let directions: Vec<String> = if cfg.directions.is_empty() {
        corpus.pairs.iter().map(ToyLanguagePair::id).collect()
    } else {
        cfg.directions.clone()
    };
    let mut train = Vec::new();
    for d in &directions {
        let part = corpus.split(d, Split::Train)?;
        train.extend(part.into_iter().take(cfg.train_per_direction.unwrap_or(usize::MAX)));
    }
    let asr = match (cfg.mode.needs_hypotheses(), req.asr_checkpoint) {
        (true, None) => return Err(Error::Config("hypothesis transcripts need --asr-checkpoint".into())),
        (true, Some(p)) => Some(load_checkpoint(p)?.to_system()?),
        (false, _) => None,
    };
    prepare_out_dir(req.out, req.force)?;
    write_resolved(req.out, cfg)?;

    let spec = SystemSpec {
        model: ModelConfig {
            vocab_size: corpus.tokenizer.vocab_size(),
            ..cfg.model.clone()
        },
        speech: cfg.speech_input.then(|| cfg.speech.clone()),
        lora: cfg.lora.clone(),
        placement: cfg.placement,
    };
    let mut sys = SpeechLlm::new(spec, corpus.tokenizer.clone(), mix(cfg.train.seed, 0x5eed))?;
    if let Some(p) = req.init_from {
        let base = load_checkpoint(p)?.to_system()?;
        copy_text_model(&base, &mut sys)?;
        log(&format!("text model initialised from {}", p.display()));
    }
    let lora_params = cfg.lora.as_ref().map(|l| {
        let counted = sys.store.iter().filter(|(_, n, _)| n.starts_with(LORA_PREFIX)).map(|(_, _, t)| t.len()).sum();
        (counted, count_lora_params(l, &sys.spec.model))
    });

    let transcripts = transcripts_for(&cfg.mode, &train, &corpus, asr.as_ref(), cfg.max_decode_len, log)?;
    let examples = train
        .iter()
        .map(|u| build_example(&sys, u, &cfg.mode, transcripts.get(&u.id).map(String::as_str)))
        .collect::<Result<Vec<TrainingExample>>>()?;
    log(&format!("{} examples, mode {}", examples.len(), cfg.mode.tag()));
    let every = (cfg.train.steps / 20).max(1);
    let outcome = train_model(&mut sys, &examples, &cfg.train, |step, loss| {
        if step % every == 0 || step == 1 {
            log(&format!("step {step:>6} loss {loss:.4}"));
        }
    })?;
    let trainable_params = sys.store.iter().filter(|(_, _, t)| t.requires_grad()).map(|(_, _, t)| t.len()).sum();

    let checkpoint = req.out.join(CHECKPOINT_FILE);
    save_checkpoint(
        &Checkpoint::from_system(&sys, cfg.mode, cfg.train.steps, false, Some(&outcome.optimizer))?,
        &checkpoint,
    )?;
    let curve: String = outcome.losses.iter().enumerate().map(|(i, l)| format!("{} {l}\n", i + 1)).collect();
    let lp = req.out.join(LOSS_FILE);
    std::fs::write(&lp, curve).map_err(|e| Error::storage(&lp, e))?;
    Ok(TrainSummary {
        checkpoint,
        examples: examples.len(),
        final_loss: outcome.losses.last().copied().unwrap_or(f32::NAN),
        trainable_params,
        lora_params,
    })
}

fn transcripts_for(
    mode: &TrainingMode,
    train: &[Utterance],
    corpus: &Corpus,
    asr: Option<&SpeechLlm>,
    max_len: usize,
    log: &mut dyn FnMut(&str),
) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    match (mode, asr) {
        (
            TrainingMode::CotPrompting {
                asr_source: AsrSource::Corrupted(p),
            },
            _,
        ) => {
            for u in train {
                let pair = corpus.pair(&u.pair_id)?;
                out.insert(u.id.clone(), corrupt_transcript(&u.source_text, *p, &pair.source, mix(u.frames_seed, p.to_bits()))?);
            }
        }
        (_, Some(asr)) if mode.needs_hypotheses() => {
            log(&format!("transcribing {} training utterances", train.len()));
            for u in train {
                out.insert(u.id.clone(), cot_prediction_decode(asr, u, max_len)?.transcript);
            }
        }
        _ => {}
    }
    Ok(out)
}

/// Transcript and translation of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub utterance: Utterance,
    pub transcript: Option<String>,
    pub translation: String,
}

/// Decodes utterance `id` with `checkpoint`. Prompting systems take their
/// transcript from `transcript` or else from the first-pass `asr_checkpoint`.
pub fn decode_one(
    data_dir: &Path,
    id: &str,
    checkpoint: &Path,
    asr_checkpoint: Option<&Path>,
    transcript: Option<&str>,
    max_len: usize,
) -> Result<DecodeOutput> {
    let corpus = Corpus::open(data_dir)?;
    let utt = corpus.find(id)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let sys = ckpt.to_system()?;
    let asr = asr_checkpoint.map(|p| load_checkpoint(p).and_then(|c| c.to_system())).transpose()?;
    let (transcript, translation) = match ckpt.mode.prompt_kind() {
        PromptKind::Baseline => (None, decode_utterance(&sys, &utt, PromptKind::Baseline, None, &[], max_len)?.text),
        PromptKind::CotPrediction => {
            let o = cot_prediction_decode(&sys, &utt, max_len)?;
            (Some(o.transcript), o.translation)
        }
        PromptKind::CotPrompting => match (transcript, &asr) {
            (Some(t), _) => (Some(t.to_string()), decode_utterance(&sys, &utt, PromptKind::CotPrompting, Some(t), &[], max_len)?.text),
            (None, Some(asr)) => {
                let mut cache = TranscriptCache::default();
                let o = if sys.is_text_only() {
                    cascade_translate(asr, &sys, &utt, &mut cache, max_len)?
                } else {
                    two_pass_translate(asr, &sys, &utt, TranscriptOverride::FirstPass, &mut cache, max_len)?
                };
                (Some(o.transcript), o.translation)
            }
            (None, None) => return Err(Error::Config("a prompting system needs --asr-checkpoint or --transcript".into())),
        },
    };
    Ok(DecodeOutput {
        utterance: utt,
        transcript,
        translation,
    })
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
    EvalReport::from_jsonl(&text)
}

/// Side-by-side seed-mean averages of two reports, with `b - a`.
pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> String {
    let mut keys: Vec<(&str, &str, &str)> = Vec::new();
    for r in a.rows.iter().chain(&b.rows).filter(|r| r.seed.is_none()) {
        let k = (r.suite.as_str(), r.system.as_str(), r.metric.as_str());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let find = |rep: &EvalReport, k: (&str, &str, &str)| {
        rep.rows
            .iter()
            .find(|r| r.seed.is_none() && (r.suite.as_str(), r.system.as_str(), r.metric.as_str()) == k)
            .map(|r| r.avg)
    };
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
    let mut out = String::new();
    let _ = writeln!(out, "{:<8} {:<34} {:>6} {:>9} {:>9} {:>9}", "suite", "system", "metric", "a", "b", "b-a");
    for k in keys {
        let (va, vb) = (find(a, k), find(b, k));
        let delta = va.zip(vb).map(|(x, y)| y - x);
        let _ = writeln!(out, "{:<8} {:<34} {:>6} {:>9} {:>9} {:>9}", k.0, k.1, k.2, fmt(va), fmt(vb), fmt(delta));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::AsrSource;

    #[test]
    fn overrides_parse_literals_and_strings() {
        let (p, v) = parse_override("train.steps=10").unwrap();
        assert_eq!(p, ["train", "steps"]);
        assert_eq!(v, Value::Integer(10));
        assert_eq!(parse_override("a=hello").unwrap().1, Value::String("hello".into()));
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        std::fs::write(&f, "[train]\nsteps = 7\nbatch_size = 3\n[mode]\nkind = \"cot-prompting\"\nasr_source = { kind = \"corrupted\", sub_prob = 0.2 }\n").unwrap();
        let c: RunConfig = resolve_config(Some(&f), &["train.steps=9".into()]).unwrap();
        assert_eq!((c.train.steps, c.train.batch_size), (9, 3));
        assert_eq!(c.mode, TrainingMode::CotPrompting { asr_source: AsrSource::Corrupted(0.2) });
        assert_eq!(c.model, RunConfig::default().model);
    }

    #[test]
    fn resolved_config_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig {
            lora: Some(LoraSpec::uniform(4)),
            ..RunConfig::default()
        };
        write_resolved(dir.path(), &c).unwrap();
        let back: RunConfig = resolve_config(Some(&dir.path().join(RESOLVED_CONFIG)), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = resolve_config::<RunConfig>(None, &["train.nonsense=1".into()]).unwrap_err();
        assert_eq!(exit_code(&e), exit::USAGE);
    }
}
