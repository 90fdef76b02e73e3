//! End-to-end experiments: train the systems a suite needs, decode the test
//! sets and tabulate BLEU and WER.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{corrupt_transcript, mix, DataConfig, Split, ToyLanguagePair, Utterance};
use crate::error::{Error, Result};
use crate::eval::{
    cascade_translate, corpus_bleu, corpus_wer, cot_prediction_decode, two_pass_translate, TranscriptCache,
    TranscriptOverride,
};
use crate::lora::LoraSpec;
use crate::prompt::{SpeechPlacement, TemplateSet, Tokenizer};
use crate::speech::SpeechConfig;
use crate::system::{SpeechLlm, SystemSpec};
use crate::training::{build_example, train_model, AsrSource, TrainConfig, Trainable, TrainingExample, TrainingMode};
use crate::transformer::{ModelConfig, LLM_PREFIX};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Table2,
    Table3,
    Table4,
    Table5,
    Table6,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Table2 => "table2",
            Suite::Table3 => "table3",
            Suite::Table4 => "table4",
            Suite::Table5 => "table5",
            Suite::Table6 => "table6",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "table2" => Ok(Suite::Table2),
            "table3" => Ok(Suite::Table3),
            "table4" => Ok(Suite::Table4),
            "table5" => Ok(Suite::Table5),
            "table6" => Ok(Suite::Table6),
            _ => Err(Error::Config(format!("unknown suite {s:?}; expected table2..table6"))),
        }
    }

    fn title(self) -> &'static str {
        match self {
            Suite::Table2 => "speech-only prompt vs chain-of-thought prompt",
            Suite::Table3 => "transcript source in the chain-of-thought prompt",
            Suite::Table4 => "joint transcribe-then-translate decoding vs chain-of-thought prompt",
            Suite::Table5 => "full fine-tuning vs adapter-only training",
            Suite::Table6 => "cascade vs chain-of-thought prompt",
        }
    }
}

/// Transcripts the chain-of-thought prompting model is trained on.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "sub_prob")]
pub enum CotTrainTranscripts {
    GroundTruth,
    Corrupted(f64),
    /// Corruption at the first-pass word error rate measured on dev.
    MatchFirstPassWer,
    /// First-pass hypotheses of the training set itself.
    FirstPass,
}

/// Whether systems are trained, reused from disk, or must already exist.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointPolicy {
    #[default]
    Train,
    Reuse,
    LoadOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub suites: Vec<Suite>,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    /// Pair ids (`alpha-beta`, …) to train and evaluate; empty means all.
    pub directions: Vec<String>,
    pub train_per_direction: Option<usize>,
    pub dev_per_direction: usize,
    pub test_per_direction: usize,
    /// `vocab_size` is replaced by the tokenizer's size.
    pub model: ModelConfig,
    pub speech: SpeechConfig,
    pub placement: SpeechPlacement,
    pub train: TrainConfig,
    /// Text-only translation model of the cascade.
    pub mt_train: TrainConfig,
    pub lora: LoraSpec,
    pub lora_train: TrainConfig,
    pub cot_transcripts: CotTrainTranscripts,
    /// Start every speech system's text model from the trained text-only
    /// translation model.
    pub pretrained_llm: bool,
    /// Start the prompting model from every weight of the trained first-pass
    /// model instead of from scratch or the text-only model.
    pub cot_from_first_pass: bool,
    pub corruption_probs: Vec<f64>,
    pub max_decode_len: usize,
    pub checkpoints: CheckpointPolicy,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            suites: vec![Suite::Table2, Suite::Table3, Suite::Table4, Suite::Table6],
            seeds: vec![1, 2, 3],
            data: DataConfig::default(),
            directions: vec!["beta-alpha".into(), "alpha-beta".into()],
            train_per_direction: None,
            dev_per_direction: 100,
            test_per_direction: 200,
            model: ModelConfig {
                n_enc_layers: 1,
                n_dec_layers: 2,
                ..ModelConfig::default()
            },
            speech: SpeechConfig::default(),
            placement: SpeechPlacement::AfterPrompt,
            train: TrainConfig::default(),
            mt_train: TrainConfig {
                steps: 1500,
                ..TrainConfig::default()
            },
            lora: LoraSpec::default(),
            lora_train: TrainConfig::lora_defaults(),
            cot_transcripts: CotTrainTranscripts::MatchFirstPassWer,
            pretrained_llm: false,
            cot_from_first_pass: true,
            corruption_probs: vec![0.0, 0.1, 0.3, 0.5],
            max_decode_len: crate::eval::DEFAULT_MAX_LEN,
            checkpoints: CheckpointPolicy::Train,
        }
    }
}

/// One line of a report table: a system's metric on every evaluated
/// direction and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub suite: String,
    pub system: String,
    pub metric: String,
    /// `None` for the mean over seeds.
    pub seed: Option<u64>,
    pub values: BTreeMap<String, f64>,
    pub avg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub suites: Vec<Suite>,
    pub seeds: Vec<u64>,
    pub directions: Vec<String>,
    pub checkpoints: Vec<String>,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub rows: Vec<ReportRow>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl ReportRow {
    pub fn new(suite: Suite, system: &str, metric: &str, seed: Option<u64>, values: BTreeMap<String, f64>) -> Self {
        let avg = mean(values.values().copied());
        Self {
            suite: suite.name().into(),
            system: system.into(),
            metric: metric.into(),
            seed,
            values,
            avg,
        }
    }
}

impl EvalReport {
    /// The seed-mean row of `system` in `suite`.
    pub fn mean_row(&self, suite: Suite, system: &str, metric: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.suite == suite.name() && r.system == system && r.metric == metric && r.seed.is_none())
    }

    pub fn avg(&self, suite: Suite, system: &str) -> Option<f64> {
        self.mean_row(suite, system, "bleu").map(|r| r.avg)
    }

    /// One JSON record per line: the metadata first, then every row.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = json(&self.meta)?;
        out.push('\n');
        for r in &self.rows {
            out.push_str(&json(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for suite in &self.meta.suites {
            let _ = writeln!(out, "== {} : {}", suite.name(), suite.title());
            let rows: Vec<&ReportRow> = self.rows.iter().filter(|r| r.suite == suite.name()).collect();
            let dirs = &self.meta.directions;
            let _ = write!(out, "{:<34} {:>6} {:>6}", "system", "metric", "seed");
            for d in dirs {
                let _ = write!(out, " {d:>12}");
            }
            let _ = writeln!(out, " {:>8}", "avg");
            for r in rows {
                let seed = r.seed.map_or("mean".to_string(), |s| s.to_string());
                let _ = write!(out, "{:<34} {:>6} {:>6}", r.system, r.metric, seed);
                for d in dirs {
                    let v = r.values.get(d).copied().unwrap_or(f64::NAN);
                    let _ = write!(out, " {v:>12.2}");
                }
                let _ = writeln!(out, " {:>8.2}", r.avg);
            }
            out.push('\n');
        }
        out
    }

    /// Inverse of [`EvalReport::to_jsonl`].
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let parse_err = |e: serde_json::Error| Error::Input(format!("report line: {e}"));
        let meta = serde_json::from_str(lines.next().ok_or_else(|| Error::Input("empty report".into()))?).map_err(parse_err)?;
        let rows = lines.map(|l| serde_json::from_str(l).map_err(parse_err)).collect::<Result<Vec<_>>>()?;
        Ok(Self { meta, rows })
    }

    /// Writes `report.jsonl` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
        let j = dir.join("report.jsonl");
        std::fs::write(&j, self.to_jsonl()?).map_err(|e| Error::storage(&j, e))?;
        let t = dir.join("report.txt");
        std::fs::write(&t, self.to_text()).map_err(|e| Error::storage(&t, e))
    }
}

fn json(value: &impl Serialize) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Input(format!("report serialisation: {e}")))
}

/// System names used in reports and checkpoint file names.
pub mod systems {
    pub const COT_PREDICTION: &str = "cot-prediction";
    pub const BASELINE: &str = "baseline";
    pub const COT_PROMPTING: &str = "cot-prompting";
    pub const TEXT_MT: &str = "text-mt";
    pub const COT_PROMPTING_LORA: &str = "cot-prompting-lora";
}

/// Shared inputs of every seed.
pub struct Workspace {
    pub tokenizer: Tokenizer,
    pub pairs: HashMap<String, ToyLanguagePair>,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub directions: Vec<String>,
}

/// Vocabulary: every word of every language, the language names and the
/// template literals.
pub fn build_tokenizer(pairs: &[ToyLanguagePair], templates: &TemplateSet) -> Result<Tokenizer> {
    let mut texts: Vec<String> = templates.literal_texts();
    for p in pairs {
        for lang in [&p.source, &p.target] {
            texts.push(lang.name.clone());
            texts.push(lang.words.join(" "));
        }
    }
    Tokenizer::build(texts.iter().map(String::as_str))
}

impl Workspace {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let corpora = config.data.generate()?;
        let all_pairs: Vec<ToyLanguagePair> = corpora.iter().map(|(p, _)| p.clone()).collect();
        let tokenizer = build_tokenizer(&all_pairs, &TemplateSet::default())?;
        let directions: Vec<String> = if config.directions.is_empty() {
            all_pairs.iter().map(ToyLanguagePair::id).collect()
        } else {
            config.directions.clone()
        };
        let mut ws = Self {
            tokenizer,
            pairs: HashMap::new(),
            train: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
            directions: directions.clone(),
        };
        for d in &directions {
            let (pair, corpus) = corpora
                .iter()
                .find(|(p, _)| &p.id() == d)
                .ok_or_else(|| Error::Resolution(format!("no direction {d} in the data configuration")))?;
            let take = |split: Split, n: Option<usize>| {
                corpus
                    .iter()
                    .filter(|u| u.split == split)
                    .take(n.unwrap_or(usize::MAX))
                    .cloned()
                    .collect::<Vec<_>>()
            };
            ws.train.extend(take(Split::Train, config.train_per_direction));
            ws.dev.extend(take(Split::Dev, Some(config.dev_per_direction)));
            ws.test.extend(take(Split::Test, Some(config.test_per_direction)));
            ws.pairs.insert(d.clone(), pair.clone());
        }
        Ok(ws)
    }

    pub fn corrupt(&self, utt: &Utterance, text: &str, p: f64) -> Result<String> {
        let pair = self
            .pairs
            .get(&utt.pair_id)
            .ok_or_else(|| Error::Resolution(format!("unknown pair {}", utt.pair_id)))?;
        corrupt_transcript(text, p, &pair.source, mix(utt.frames_seed, p.to_bits()))
    }
}

type Log<'a> = &'a mut dyn FnMut(&str);

struct SeedRun<'a> {
    config: &'a ExperimentConfig,
    ws: &'a Workspace,
    seed: u64,
    dir: Option<PathBuf>,
    checkpoints: Vec<String>,
}

impl SeedRun<'_> {
    fn spec(&self, speech: bool, lora: Option<LoraSpec>) -> SystemSpec {
        SystemSpec {
            model: ModelConfig {
                vocab_size: self.ws.tokenizer.vocab_size(),
                ..self.config.model.clone()
            },
            speech: speech.then(|| self.config.speech.clone()),
            lora,
            placement: self.config.placement,
        }
    }

    fn system_seed(&self, name: &str) -> u64 {
        mix(self.seed, name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b))))
    }

    fn ckpt_path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("seed-{}", self.seed)).join(format!("{name}.ckpt")))
    }

    fn try_load(&mut self, name: &str) -> Result<Option<SpeechLlm>> {
        let path = self.ckpt_path(name);
        match (self.config.checkpoints, &path) {
            (CheckpointPolicy::Train, _) => Ok(None),
            (CheckpointPolicy::LoadOnly, None) => Err(Error::Resolution("checkpoint loading needs a run directory".into())),
            (_, Some(p)) if p.exists() => {
                let ckpt = load_checkpoint(p)?;
                let sys = ckpt.to_system()?;
                if sys.tokenizer != self.ws.tokenizer {
                    return Err(Error::Compatibility(format!("{} was trained with another vocabulary", p.display())));
                }
                self.checkpoints.push(format!("{}:{}", name, p.display()));
                Ok(Some(sys))
            }
            (CheckpointPolicy::LoadOnly, Some(p)) => Err(Error::Resolution(format!("missing checkpoint {}", p.display()))),
            _ => Ok(None),
        }
    }

    fn finish(&mut self, name: &str, sys: &SpeechLlm, mode: TrainingMode, steps: u64, losses: &[f32], adapters_only: bool) -> Result<()> {
        if let Some(p) = self.ckpt_path(name) {
            save_checkpoint(&Checkpoint::from_system(sys, mode, steps, adapters_only, None)?, &p)?;
            let curve: String = losses.iter().map(|l| format!("{l}\n")).collect();
            let lp = p.with_extension("loss");
            std::fs::write(&lp, curve).map_err(|e| Error::storage(&lp, e))?;
            self.checkpoints.push(format!("{}:{}", name, p.display()));
        } else {
            self.checkpoints.push(name.to_string());
        }
        Ok(())
    }

    fn train(
        &mut self,
        name: &str,
        spec: SystemSpec,
        mode: TrainingMode,
        transcripts: Option<&HashMap<String, String>>,
        train_cfg: &TrainConfig,
        init: Option<Init<'_>>,
        log: Log,
    ) -> Result<SpeechLlm> {
        if let Some(sys) = self.try_load(name)? {
            log(&format!("seed {} {name}: loaded", self.seed));
            return Ok(sys);
        }
        let mut sys = SpeechLlm::new(spec, self.ws.tokenizer.clone(), self.system_seed(name))?;
        match init {
            Some(Init::Text(base)) => copy_text_model(base, &mut sys)?,
            Some(Init::Whole(base)) => copy_params(base, &mut sys)?,
            None => {}
        }
        let examples = self.examples(&sys, &mode, transcripts)?;
        let cfg = TrainConfig {
            seed: self.system_seed(name),
            ..train_cfg.clone()
        };
        let outcome = train_model(&mut sys, &examples, &cfg, |_, _| {})?;
        log(&format!(
            "seed {} {name}: {} steps, final loss {:.4}",
            self.seed,
            cfg.steps,
            outcome.losses.last().copied().unwrap_or(f32::NAN)
        ));
        self.finish(name, &sys, mode, cfg.steps, &outcome.losses, false)?;
        Ok(sys)
    }

    fn examples(
        &self,
        sys: &SpeechLlm,
        mode: &TrainingMode,
        transcripts: Option<&HashMap<String, String>>,
    ) -> Result<Vec<TrainingExample>> {
        self.ws
            .train
            .iter()
            .map(|u| build_example(sys, u, mode, transcripts.and_then(|t| t.get(&u.id)).map(String::as_str)))
            .collect()
    }

    fn bleu_by_direction(&self, outputs: &[(String, String)]) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        for d in &self.ws.directions {
            let (refs, hyps): (Vec<String>, Vec<String>) = self
                .ws
                .test
                .iter()
                .zip(outputs)
                .filter(|(u, _)| &u.pair_id == d)
                .map(|(u, (_, h))| (u.target_text.clone(), h.clone()))
                .unzip();
            out.insert(d.clone(), corpus_bleu(&refs, &hyps)?);
        }
        Ok(out)
    }

    fn wer_by_direction(&self, transcripts: &[String]) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        for d in &self.ws.directions {
            let (refs, hyps): (Vec<String>, Vec<String>) = self
                .ws
                .test
                .iter()
                .zip(transcripts)
                .filter(|(u, _)| &u.pair_id == d)
                .map(|(u, h)| (u.source_text.clone(), h.clone()))
                .unzip();
            out.insert(d.clone(), corpus_wer(&refs, &hyps)?);
        }
        Ok(out)
    }
}

/// Trains (or loads) and evaluates every system the configured suites need.
/// With `run_dir`, checkpoints and loss curves land in
/// `run_dir/seed-{s}/`.
pub fn run_experiment(config: &ExperimentConfig, run_dir: Option<&Path>, log: Log) -> Result<EvalReport> {
    if config.seeds.is_empty() || config.suites.is_empty() {
        return Err(Error::Config("experiment needs at least one seed and one suite".into()));
    }
    let ws = Workspace::new(config)?;
    let suites: BTreeSet<Suite> = config.suites.iter().copied().collect();
    let need_baseline = suites.contains(&Suite::Table2);
    let need_mt = config.pretrained_llm || suites.contains(&Suite::Table5) || suites.contains(&Suite::Table6);
    let mut rows: Vec<ReportRow> = Vec::new();
    let mut checkpoints = Vec::new();
    let max_len = config.max_decode_len;
    for &seed in &config.seeds {
        let mut run = SeedRun {
            config,
            ws: &ws,
            seed,
            dir: run_dir.map(Path::to_path_buf),
            checkpoints: Vec::new(),
        };
        let mut add = |suite: Suite, system: &str, metric: &str, values: BTreeMap<String, f64>| {
            if suites.contains(&suite) {
                rows.push(ReportRow::new(suite, system, metric, Some(seed), values));
            }
        };

        let mt = if need_mt {
            let mt_mode = TrainingMode::CotPrompting { asr_source: AsrSource::GroundTruth };
            Some(run.train(systems::TEXT_MT, run.spec(false, None), mt_mode, None, &config.mt_train, None, log)?)
        } else {
            None
        };
        let init = mt.as_ref().filter(|_| config.pretrained_llm).map(Init::Text);

        let pred_mode = TrainingMode::cot_prediction(AsrSource::GroundTruth)?;
        let asr = run.train(systems::COT_PREDICTION, run.spec(true, None), pred_mode, None, &config.train, init, log)?;
        let mut cache = TranscriptCache::default();
        let mut pass1 = Vec::with_capacity(ws.test.len());
        for u in &ws.test {
            let out = cot_prediction_decode(&asr, u, max_len)?;
            cache.insert(u.id.clone(), out.transcript.clone());
            pass1.push((out.transcript, out.translation));
        }
        let transcripts: Vec<String> = pass1.iter().map(|(t, _)| t.clone()).collect();
        let wer = run.wer_by_direction(&transcripts)?;
        let pred_bleu = run.bleu_by_direction(&pass1)?;
        log(&format!("seed {seed} first pass: wer {:.4}", mean(wer.values().copied())));
        add(Suite::Table3, "first-pass transcript", "wer", wer.clone());
        add(Suite::Table2, systems::COT_PREDICTION, "bleu", pred_bleu.clone());
        add(Suite::Table4, systems::COT_PREDICTION, "bleu", pred_bleu);

        if need_baseline {
            let base = run.train(systems::BASELINE, run.spec(true, None), TrainingMode::Baseline, None, &config.train, init, log)?;
            let outs = ws
                .test
                .iter()
                .map(|u| {
                    crate::eval::decode_utterance(&base, u, crate::prompt::PromptKind::Baseline, None, &[], max_len)
                        .map(|d| (String::new(), d.text))
                })
                .collect::<Result<Vec<_>>>()?;
            add(Suite::Table2, systems::BASELINE, "bleu", run.bleu_by_direction(&outs)?);
        }

        let train_p = match config.cot_transcripts {
            CotTrainTranscripts::GroundTruth | CotTrainTranscripts::FirstPass => None,
            CotTrainTranscripts::Corrupted(p) => Some(p),
            CotTrainTranscripts::MatchFirstPassWer => {
                let (refs, hyps): (Vec<String>, Vec<String>) = ws
                    .dev
                    .iter()
                    .map(|u| Ok((u.source_text.clone(), cot_prediction_decode(&asr, u, max_len)?.transcript)))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .unzip();
                Some(corpus_wer(&refs, &hyps)?.min(1.0))
            }
        };
        let (cot_mode, cot_transcripts) = match train_p {
            None if config.cot_transcripts == CotTrainTranscripts::FirstPass => {
                let map = ws
                    .train
                    .iter()
                    .map(|u| Ok((u.id.clone(), cot_prediction_decode(&asr, u, max_len)?.transcript)))
                    .collect::<Result<HashMap<_, _>>>()?;
                (TrainingMode::CotPrompting { asr_source: AsrSource::Hypothesis }, Some(map))
            }
            None => (TrainingMode::CotPrompting { asr_source: AsrSource::GroundTruth }, None),
            Some(p) => {
                let map = ws
                    .train
                    .iter()
                    .map(|u| Ok((u.id.clone(), ws.corrupt(u, &u.source_text, p)?)))
                    .collect::<Result<HashMap<_, _>>>()?;
                (TrainingMode::CotPrompting { asr_source: AsrSource::Corrupted(p) }, Some(map))
            }
        };
        log(&format!("seed {seed} prompting model trains on {}", cot_mode.tag()));
        let cot = run.train(
            systems::COT_PROMPTING,
            run.spec(true, None),
            cot_mode,
            cot_transcripts.as_ref(),
            &config.train,
            if config.cot_from_first_pass { Some(Init::Whole(&asr)) } else { init },
            log,
        )?;
        let decode_cot = |source: TranscriptOverride, cache: &mut TranscriptCache| {
            ws.test
                .iter()
                .map(|u| two_pass_translate(&asr, &cot, u, source, cache, max_len).map(|o| (o.transcript, o.translation)))
                .collect::<Result<Vec<_>>>()
        };
        let hyp_out = decode_cot(TranscriptOverride::FirstPass, &mut cache)?;
        let hyp_bleu = run.bleu_by_direction(&hyp_out)?;
        add(Suite::Table2, systems::COT_PROMPTING, "bleu", hyp_bleu.clone());
        add(Suite::Table4, systems::COT_PROMPTING, "bleu", hyp_bleu.clone());
        add(Suite::Table6, systems::COT_PROMPTING, "bleu", hyp_bleu.clone());
        add(Suite::Table3, "cot-prompting/hypothesis", "bleu", hyp_bleu.clone());
        if suites.contains(&Suite::Table3) {
            let gt = decode_cot(TranscriptOverride::GroundTruth, &mut cache)?;
            add(Suite::Table3, "cot-prompting/ground-truth", "bleu", run.bleu_by_direction(&gt)?);
            for &p in &config.corruption_probs {
                let mut outs = Vec::with_capacity(ws.test.len());
                let mut corrupted = Vec::with_capacity(ws.test.len());
                for u in &ws.test {
                    let t = ws.corrupt(u, &u.source_text, p)?;
                    let d = crate::eval::decode_utterance(&cot, u, crate::prompt::PromptKind::CotPrompting, Some(&t), &[], max_len)?;
                    corrupted.push(t.clone());
                    outs.push((t, d.text));
                }
                add(Suite::Table3, &format!("cot-prompting/corrupted-{p}"), "bleu", run.bleu_by_direction(&outs)?);
                add(Suite::Table3, &format!("corrupted-{p} transcript"), "wer", run.wer_by_direction(&corrupted)?);
            }
        }

        if let Some(mt) = &mt {
            let outs = ws
                .test
                .iter()
                .map(|u| cascade_translate(&asr, mt, u, &mut cache, max_len).map(|o| (o.transcript, o.translation)))
                .collect::<Result<Vec<_>>>()?;
            add(Suite::Table6, "cascade", "bleu", run.bleu_by_direction(&outs)?);

            if suites.contains(&Suite::Table5) {
                let lora = train_lora_from_base(&mut run, mt, cot_mode, cot_transcripts.as_ref(), log)?;
                let outs = ws
                    .test
                    .iter()
                    .map(|u| two_pass_translate(&asr, &lora, u, TranscriptOverride::FirstPass, &mut cache, max_len).map(|o| (o.transcript, o.translation)))
                    .collect::<Result<Vec<_>>>()?;
                add(Suite::Table5, systems::COT_PROMPTING, "bleu", hyp_bleu.clone());
                add(Suite::Table5, systems::COT_PROMPTING_LORA, "bleu", run.bleu_by_direction(&outs)?);
            }
        }
        checkpoints.extend(run.checkpoints);
    }
    rows.extend(seed_means(&rows));
    rows.sort_by(|a, b| {
        (config.suites.iter().position(|s| s.name() == a.suite), a.seed.is_none(), a.seed)
            .cmp(&(config.suites.iter().position(|s| s.name() == b.suite), b.seed.is_none(), b.seed))
    });
    Ok(EvalReport {
        meta: ReportMeta {
            suites: config.suites.clone(),
            seeds: config.seeds.clone(),
            directions: ws.directions.clone(),
            checkpoints,
            config: config.clone(),
        },
        rows,
    })
}

/// Adapter-only training of a speech system whose text model starts from
/// the text-only translation model.
fn train_lora_from_base(
    run: &mut SeedRun<'_>,
    base: &SpeechLlm,
    mode: TrainingMode,
    transcripts: Option<&HashMap<String, String>>,
    log: Log,
) -> Result<SpeechLlm> {
    let name = systems::COT_PROMPTING_LORA;
    let spec = run.spec(true, Some(run.config.lora.clone()));
    let mut sys = SpeechLlm::new(spec, run.ws.tokenizer.clone(), run.system_seed(name))?;
    copy_text_model(base, &mut sys)?;
    let examples = run.examples(&sys, &mode, transcripts)?;
    let cfg = TrainConfig {
        seed: run.system_seed(name),
        trainable: Trainable::LoraOnly,
        ..run.config.lora_train.clone()
    };
    let outcome = train_model(&mut sys, &examples, &cfg, |_, _| {})?;
    log(&format!(
        "seed {} {name}: {} steps, final loss {:.4}",
        run.seed,
        cfg.steps,
        outcome.losses.last().copied().unwrap_or(f32::NAN)
    ));
    run.finish(name, &sys, mode, cfg.steps, &outcome.losses, false)?;
    Ok(sys)
}

#[derive(Copy, Clone)]
enum Init<'a> {
    Text(&'a SpeechLlm),
    Whole(&'a SpeechLlm),
}

/// Copies every tensor of `from` into the same-named tensor of `to`.
pub fn copy_params(from: &SpeechLlm, to: &mut SpeechLlm) -> Result<()> {
    if from.spec != to.spec || from.tokenizer != to.tokenizer {
        return Err(Error::ConfigMismatch("systems differ in architecture or vocabulary".into()));
    }
    for (_, name, t) in from.store.iter() {
        let id = to
            .store
            .id(name)
            .ok_or_else(|| Error::ConfigMismatch(format!("target lacks {name}")))?;
        to.store.set_data(id, t.data().to_vec())?;
    }
    Ok(())
}

/// Copies every text-model tensor of `from` into `to` by name.
pub fn copy_text_model(from: &SpeechLlm, to: &mut SpeechLlm) -> Result<()> {
    if from.spec.model != to.spec.model || from.tokenizer != to.tokenizer {
        return Err(Error::ConfigMismatch("text models differ in architecture or vocabulary".into()));
    }
    let prefix = format!("{LLM_PREFIX}.");
    for (_, name, t) in from.store.iter().filter(|(_, n, _)| n.starts_with(&prefix)) {
        let id = to
            .store
            .id(name)
            .ok_or_else(|| Error::ConfigMismatch(format!("target lacks {name}")))?;
        to.store.set_data(id, t.data().to_vec())?;
    }
    Ok(())
}

fn seed_means(rows: &[ReportRow]) -> Vec<ReportRow> {
    let mut groups: Vec<((String, String, String), Vec<&ReportRow>)> = Vec::new();
    for r in rows.iter().filter(|r| r.seed.is_some()) {
        let key = (r.suite.clone(), r.system.clone(), r.metric.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((suite, system, metric), rs)| {
            let keys: BTreeSet<&String> = rs.iter().flat_map(|r| r.values.keys()).collect();
            let values: BTreeMap<String, f64> = keys
                .into_iter()
                .map(|k| (k.clone(), mean(rs.iter().filter_map(|r| r.values.get(k).copied()))))
                .collect();
            let avg = mean(values.values().copied());
            ReportRow {
                suite,
                system,
                metric,
                seed: None,
                values,
                avg,
            }
        })
        .collect()
}
