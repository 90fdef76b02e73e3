//! One pass/fail line per acceptance criterion.
//!
//! Criteria 6 to 9 share a single three-seed experiment with the library
//! defaults, which takes a while on one core.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use cotprompt::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use cotprompt::data::{SplitSizes, Utterance};
use cotprompt::eval::{corpus_bleu, word_error_rate};
use cotprompt::experiment::{run_experiment, EvalReport, ExperimentConfig, Suite};
use cotprompt::lora::{count_lora_params, count_lora_params_split, inject_lora, merge_all, LoraSpec, Site, LORA_PREFIX};
use cotprompt::numerics::{grad_check, GradCheckOptions, Graph, ParamStore, ScheduleKind, Tensor, Var};
use cotprompt::prompt::{render_prompt, PromptKind, TemplateSet};
use cotprompt::training::{build_example, train_model, AsrSource, TrainConfig, TrainingMode};
use cotprompt::transformer::{EncoderDecoderModel, ModelConfig};
use cotprompt::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = std::result::Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut experiment: Option<std::result::Result<EvalReport, String>> = None;
    let mut failed = 0;
    for id in 1..=11u8 {
        let t = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(|| match id {
            1 => gradients(),
            2 => lora_algebra(),
            3 => metric_oracles(),
            4 => prompt_fidelity(),
            5 => masking(),
            6..=9 => {
                let report = experiment.get_or_insert_with(|| {
                    eprintln!("running the three-seed experiment");
                    run_experiment(&ExperimentConfig::default(), None, &mut |m| eprintln!("  {m}")).map_err(|e| e.to_string())
                });
                match report {
                    Ok(r) => orderings(id, r),
                    Err(e) => Err(format!("experiment failed: {e}")),
                }
            }
            10 => determinism(),
            _ => overfit(),
        }))
        .unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let (tag, detail) = match verdict {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id:>2} {tag} {} ({:.1}s): {detail}", name(id), t.elapsed().as_secs_f64());
    }
    println!("{} of 11 criteria passed in {:.0}s", 11 - failed, start.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn name(id: u8) -> &'static str {
    match id {
        1 => "gradient correctness",
        2 => "lora algebra",
        3 => "metric oracles",
        4 => "prompt fidelity",
        5 => "loss masking",
        6 => "cot prompting beats the speech-only prompt",
        7 => "transcript quality ordering",
        8 => "cot prompting vs joint decoding",
        9 => "cot prompting vs cascade",
        10 => "determinism and persistence",
        _ => "overfit smoke test",
    }
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        n_enc_layers: 1,
        n_dec_layers: 2,
        vocab_size: 11,
        n_relpos_buckets: 8,
        max_relpos_distance: 16,
        rms_eps: 1e-6,
    }
}

fn gradients() -> Verdict {
    let opts = GradCheckOptions {
        perturbation: 1e-6,
        max_coords_per_param: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", rand_tensor(&mut rng, &[4, 6])).unwrap();
    let y = store.add("y", rand_tensor(&mut rng, &[4, 6])).unwrap();
    let w = store.add("w", rand_tensor(&mut rng, &[6, 6])).unwrap();
    let gamma = store.add("gamma", rand_tensor(&mut rng, &[6])).unwrap();
    let table = store.add("table", rand_tensor(&mut rng, &[7, 6])).unwrap();
    let rel = store.add("rel", rand_tensor(&mut rng, &[5, 2])).unwrap();

    type Case = Box<dyn Fn(&mut Graph<f64>) -> Result<Var>>;
    let cases: Vec<(&str, Case)> = vec![
        ("add", Box::new(move |g| { let (a, b) = (g.param(x), g.param(y)); let s = g.add(a, b)?; let s = g.mul(s, s)?; g.sum(s) })),
        ("mul", Box::new(move |g| { let (a, b) = (g.param(x), g.param(y)); let s = g.mul(a, b)?; g.sum(s) })),
        ("scale", Box::new(move |g| { let a = g.param(x); let s = g.scale(a, 0.37)?; let s = g.mul(s, s)?; g.sum(s) })),
        ("relu", Box::new(move |g| { let a = g.param(x); let r = g.relu(a)?; let b = g.param(y); let s = g.mul(r, b)?; g.sum(s) })),
        ("softmax", Box::new(move |g| { let a = g.param(x); let s = g.softmax(a)?; let b = g.param(y); let s = g.mul(s, b)?; g.sum(s) })),
        ("rms_norm", Box::new(move |g| { let (a, gm) = (g.param(x), g.param(gamma)); let n = g.rms_norm(a, gm, 1e-6)?; let b = g.param(y); let s = g.mul(n, b)?; g.sum(s) })),
        ("embedding", Box::new(move |g| { let t = g.param(table); let e = g.embedding(t, &[3, 0, 3, 6])?; let b = g.param(y); let s = g.mul(e, b)?; g.sum(s) })),
        ("transpose", Box::new(move |g| { let a = g.param(x); let t = g.transpose(a)?; let m = g.matmul(t, a)?; let w = g.param(w); let s = g.mul(m, w)?; g.sum(s) })),
        ("reshape", Box::new(move |g| { let a = g.param(x); let r = g.reshape(a, &[6, 4])?; let r = g.reshape(r, &[4, 6])?; let b = g.param(y); let s = g.mul(r, b)?; g.sum(s) })),
        ("concat_rows", Box::new(move |g| { let (a, b) = (g.param(x), g.param(y)); let c = g.concat_rows(&[a, b, a])?; let w = g.param(w); let m = g.matmul(c, w)?; let m = g.mul(m, m)?; g.sum(m) })),
        ("mean_pool", Box::new(move |g| { let a = g.param(x); let c = g.concat_rows(&[a, a])?; let c = g.reshape(c, &[8, 6])?; let c = g.mean_pool_rows(c, 3)?; let c = g.mul(c, c)?; g.sum(c) })),
        ("cross_entropy", Box::new(move |g| { let (a, w) = (g.param(x), g.param(w)); let l = g.matmul(a, w)?; g.cross_entropy(l, &[1, 4, 0, 5], &[true, false, true, true]) })),
        ("attention", Box::new(move |g| {
            let (a, b, w) = (g.param(x), g.param(y), g.param(w));
            let q = g.matmul(a, w)?;
            let mask: Vec<bool> = (0..16).map(|i| i % 4 <= i / 4).collect();
            let o = g.attention(q, b, a, None, &mask, 2)?;
            let o = g.mul(o, o)?;
            g.sum(o)
        })),
        ("attention_relpos", Box::new(move |g| {
            let (a, b, r) = (g.param(x), g.param(y), g.param(rel));
            let buckets: Vec<usize> = (0..12).map(|i| (i * 7) % 5).collect();
            let bias = g.relpos_bias(r, &buckets, 4, 3)?;
            let keys = g.reshape(b, &[4, 6])?;
            let k3 = g.embedding(keys, &[0, 1, 3])?;
            let mask = vec![true; 12];
            let o = g.attention(a, k3, k3, Some(bias), &mask, 2)?;
            let o = g.mul(o, o)?;
            g.sum(o)
        })),
    ];
    let mut worst_op: f64 = 0.0;
    for (name, f) in cases {
        let r = grad_check(f, &mut store, &opts).map_err(|e| format!("{name}: {e}"))?;
        if r.max_rel_error >= 1e-4 {
            return Err(format!("{name}: max relative error {:e}", r.max_rel_error));
        }
        worst_op = worst_op.max(r.max_rel_error);
    }

    let mut fstore = ParamStore::new();
    let model = EncoderDecoderModel::new(small_model(), &mut fstore, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut mstore = fstore.cast::<f64>();
    let (prompt, targets) = ([5u32, 6, 7, 8], [1u32, 9, 10, 2]);
    let full = grad_check(
        |g| {
            let x = model.embed_tokens(g, &prompt)?;
            let enc = model.encoder_forward(g, x, &[true; 4])?;
            let logits = model.decoder_forward(g, &targets[..3], enc, &[true; 4])?;
            let t: Vec<usize> = targets[1..].iter().map(|&t| t as usize).collect();
            g.cross_entropy(logits, &t, &[true; 3])
        },
        &mut mstore,
        &GradCheckOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    check(
        full.max_rel_error < 1e-3,
        format!("ops max rel err {worst_op:.1e} (< 1e-4), full model {:.1e} (< 1e-3)", full.max_rel_error),
    )
}

fn lora_logits(model: &EncoderDecoderModel, store: &ParamStore) -> Tensor {
    let mut g = Graph::new(store);
    let x = model.embed_tokens(&mut g, &[5, 6, 7, 8, 9]).unwrap();
    let enc = model.encoder_forward(&mut g, x, &[true; 5]).unwrap();
    let out = model.decoder_forward(&mut g, &[1, 10, 3, 4], enc, &[true; 5]).unwrap();
    g.value(out)
}

fn lora_algebra() -> Verdict {
    let config = ModelConfig {
        vocab_size: 13,
        ..small_model()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let mut m = EncoderDecoderModel::new(config.clone(), &mut store, &mut rng).unwrap();
    let before = lora_logits(&m, &store);
    inject_lora(&mut m, &mut store, &LoraSpec::uniform(4), &mut rng).unwrap();
    if lora_logits(&m, &store) != before {
        return Err("fresh adapters changed the logits".into());
    }
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(LORA_PREFIX)).collect();
    for id in ids {
        let n = store.get(id).len();
        store.set_data(id, (0..n).map(|_| rng.gen_range(-0.3f32..0.3)).collect()).unwrap();
    }
    let adapted = lora_logits(&m, &store);
    merge_all(&mut m, &mut store).unwrap();
    let merge_diff = adapted.max_abs_diff(&lora_logits(&m, &store));
    if merge_diff >= 1e-5 {
        return Err(format!("merge differs by {merge_diff:e}"));
    }

    let pair = common::pair();
    let mut sys = common::system(&pair, true, 4);
    sys.add_lora(LoraSpec::uniform(2), 5).unwrap();
    let base = sys.store.clone();
    let examples: Vec<_> = common::corpus(&pair, 8, 6)
        .iter()
        .map(|u| build_example(&sys, u, &TrainingMode::Baseline, None).unwrap())
        .collect();
    let cfg = TrainConfig {
        steps: 5,
        batch_size: 4,
        peak_lr: 1e-2,
        ..TrainConfig::lora_defaults()
    };
    train_model(&mut sys, &examples, &cfg, |_, _| {}).map_err(|e| e.to_string())?;
    for (id, name, t) in sys.store.iter() {
        if name.starts_with("llm.") && t.data() != base.get(id).data() {
            return Err(format!("frozen {name} moved"));
        }
    }

    let all = [Site::Query, Site::Key, Site::Value, Site::Output];
    let mut checked = 0;
    while checked < 20 {
        let heads = rng.gen_range(1..4);
        let cfg = ModelConfig {
            d_model: heads * rng.gen_range(2..6),
            n_heads: heads,
            n_enc_layers: rng.gen_range(1..4),
            n_dec_layers: rng.gen_range(1..4),
            ..common::tiny_model(9)
        };
        let mut sites = || all.iter().copied().filter(|_| rng.gen_bool(0.5)).collect::<Vec<_>>();
        let (es, ds, cs) = (sites(), sites(), sites());
        let r = cfg.d_model;
        let spec = LoraSpec {
            enc_self_rank: rng.gen_range(1..=r),
            dec_self_rank: rng.gen_range(1..=r),
            cross_query_rank: rng.gen_range(1..=r),
            cross_kv_rank: rng.gen_range(1..=r),
            enc_self_sites: es,
            dec_self_sites: ds,
            cross_sites: cs,
            alpha: None,
        };
        if spec.validate().is_err() {
            continue;
        }
        let mut s = ParamStore::new();
        let mut mm = EncoderDecoderModel::new(cfg.clone(), &mut s, &mut rng).unwrap();
        inject_lora(&mut mm, &mut s, &spec, &mut rng).unwrap();
        let counted: usize = s.iter().filter(|(_, n, _)| n.starts_with(LORA_PREFIX)).map(|(_, _, t)| t.len()).sum();
        if counted != count_lora_params(&spec, &cfg) {
            return Err(format!("closed form {} vs injected {counted}", count_lora_params(&spec, &cfg)));
        }
        checked += 1;
    }

    let large = ModelConfig {
        d_model: 1280,
        n_heads: 20,
        d_ff: 5120,
        n_enc_layers: 12,
        n_dec_layers: 24,
        ..ModelConfig::default()
    };
    let (enc, _) = count_lora_params_split(&LoraSpec::large_model(), &large);
    check(
        enc == 7_864_320,
        format!("zero-init exact, merge diff {merge_diff:.1e}, base frozen, 20 specs counted, encoder count {enc}"),
    )
}

fn oracle_bleu(refs: &[Vec<&str>], hyps: &[Vec<&str>]) -> f64 {
    let (mut m, mut t) = ([0f64; 4], [0f64; 4]);
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
                if let Some(j) = (0..=rf.len() - n).find(|&j| !used[j] && hy[i..i + n] == rf[j..j + n]) {
                    used[j] = true;
                    m[n - 1] += 1.0;
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
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[r.len()][h.len()] as f64 / r.len() as f64
}

fn sentence(rng: &mut impl Rng, min: usize) -> Vec<&'static str> {
    const WORDS: [&str; 5] = ["a", "b", "c", "d", "e"];
    let n = rng.gen_range(min..=8);
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect()
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let join = |v: &[Vec<&str>]| v.iter().map(|s| s.join(" ")).collect::<Vec<_>>();
    let (mut bleu_err, mut wer_err) = (0f64, 0f64);
    for _ in 0..200 {
        let k = rng.gen_range(1..4);
        let refs: Vec<Vec<&str>> = (0..k).map(|_| sentence(&mut rng, 1)).collect();
        let hyps: Vec<Vec<&str>> = (0..k).map(|_| sentence(&mut rng, 0)).collect();
        let got = corpus_bleu(&join(&refs), &join(&hyps)).map_err(|e| e.to_string())?;
        bleu_err = bleu_err.max((got - oracle_bleu(&refs, &hyps)).abs());
        let (r, h) = (sentence(&mut rng, 1), sentence(&mut rng, 0));
        let got = word_error_rate(&r.join(" "), &h.join(" ")).map_err(|e| e.to_string())?;
        wer_err = wer_err.max((got - oracle_wer(&r, &h)).abs());
    }
    let same = vec!["a b c d".to_string(), "e a b".to_string()];
    let bleu_id = corpus_bleu(&same, &same).unwrap();
    let wer_id = word_error_rate("a b c", "a b c").unwrap();
    check(
        bleu_err < 1e-6 && wer_err < 1e-6 && bleu_id == 100.0 && wer_id == 0.0,
        format!("bleu err {bleu_err:.1e}, wer err {wer_err:.1e}, identity {bleu_id} / {wer_id}"),
    )
}

fn prompt_fidelity() -> Verdict {
    let set = TemplateSet::default();
    let transcript = "Verschandeln Sie die Stätte nicht durch Anbringen oder Einkratzen von Graffiti.";
    for (kind, t, file) in [
        (PromptKind::Baseline, None, "baseline_de_en.txt"),
        (PromptKind::CotPrediction, None, "cot_prediction_de_en.txt"),
        (PromptKind::CotPrompting, Some(transcript), "cot_prompting_de_en.txt"),
    ] {
        let path = format!("{}/templates/golden/{file}", env!("CARGO_MANIFEST_DIR"));
        let want = std::fs::read(&path).map_err(|e| format!("{path}: {e}"))?;
        let got = render_prompt(set.get(kind), "German", "English", t).map_err(|e| e.to_string())?;
        if got.as_bytes() != want {
            return Err(format!("{file} differs"));
        }
    }
    Ok("3 golden files byte-exact".into())
}

fn masking() -> Verdict {
    let pair = common::pair();
    let sys = common::system(&pair, true, 8);
    let mode = TrainingMode::cot_prediction(AsrSource::Hypothesis).map_err(|e| e.to_string())?;
    let v = sys.tokenizer.vocab_size();
    let (mut masked_rows, mut live_rows) = (0, 0);
    for u in common::corpus(&pair, 6, 9) {
        let ex = build_example(&sys, &u, &mode, Some(&u.source_text)).map_err(|e| e.to_string())?;
        let mut g = Graph::new(&sys.store);
        let logits = sys.teacher_forced_logits(&mut g, &ex.prompt_ids, ex.frames.as_ref(), &ex.targets).unwrap();
        let t: Vec<usize> = ex.targets[1..].iter().map(|&t| t as usize).collect();
        let loss = g.cross_entropy(logits, &t, &ex.loss_mask[1..]).unwrap();
        let grads = g.backward(loss).unwrap();
        let grad = grads.node(logits).unwrap();
        for (row, &on) in ex.loss_mask[1..].iter().enumerate() {
            let r = &grad[row * v..(row + 1) * v];
            if on {
                live_rows += 1;
            } else {
                masked_rows += 1;
                if r.iter().any(|&x| x != 0.0) {
                    return Err(format!("masked row {row} of {} has a non-zero gradient", u.id));
                }
            }
        }
    }
    check(
        masked_rows > 0 && live_rows > 0,
        format!("{masked_rows} masked positions exactly zero, {live_rows} live"),
    )
}

fn orderings(id: u8, r: &EvalReport) -> Verdict {
    let avg = |suite: Suite, system: &str| -> std::result::Result<f64, String> {
        r.avg(suite, system).ok_or_else(|| format!("no {system} row in {}", suite.name()))
    };
    match id {
        6 => {
            let (cot, base) = (avg(Suite::Table2, "cot-prompting")?, avg(Suite::Table2, "baseline")?);
            check(cot >= base + 1.0, format!("cot prompting {cot:.2} vs baseline {base:.2} (need +1.0)"))
        }
        7 => {
            let (gt, hyp) = (avg(Suite::Table3, "cot-prompting/ground-truth")?, avg(Suite::Table3, "cot-prompting/hypothesis")?);
            let sweep = [0.0, 0.1, 0.3, 0.5]
                .iter()
                .map(|p| avg(Suite::Table3, &format!("cot-prompting/corrupted-{p}")))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let monotone = sweep.windows(2).all(|w| w[1] <= w[0] + 0.5);
            let shown: Vec<String> = sweep.iter().map(|b| format!("{b:.2}")).collect();
            check(
                gt >= hyp && monotone,
                format!("ground truth {gt:.2} vs hypothesis {hyp:.2}; p sweep [{}]", shown.join(", ")),
            )
        }
        8 => {
            let (cot, pred) = (avg(Suite::Table4, "cot-prompting")?, avg(Suite::Table4, "cot-prediction")?);
            check(cot >= pred, format!("cot prompting {cot:.2} vs joint decoding {pred:.2}"))
        }
        _ => {
            let (cot, casc) = (avg(Suite::Table6, "cot-prompting")?, avg(Suite::Table6, "cascade")?);
            check(cot >= casc - 0.5, format!("cot prompting {cot:.2} vs cascade {casc:.2} (allow -0.5)"))
        }
    }
}

fn mini_config() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        suites: vec![Suite::Table2, Suite::Table3, Suite::Table4, Suite::Table6],
        seeds: vec![4],
        directions: vec!["alpha-beta".into()],
        train_per_direction: Some(48),
        dev_per_direction: 8,
        test_per_direction: 8,
        max_decode_len: 16,
        ..ExperimentConfig::default()
    };
    c.data.sizes = SplitSizes { train: 48, dev: 8, test: 8 };
    c.data.vocab_size = 10;
    c.model.d_model = 16;
    c.model.n_heads = 2;
    c.model.d_ff = 32;
    c.speech.n_layers = 1;
    c.speech.n_heads = 2;
    c.speech.d_ff = 32;
    for t in [&mut c.train, &mut c.mt_train, &mut c.lora_train] {
        t.steps = 20;
    }
    c
}

fn determinism() -> Verdict {
    let config = mini_config();
    let a = run_experiment(&config, None, &mut |_| {}).map_err(|e| e.to_string())?.to_jsonl().unwrap();
    let b = run_experiment(&config, None, &mut |_| {}).map_err(|e| e.to_string())?.to_jsonl().unwrap();
    if a != b {
        return Err("reports differ between identical runs".into());
    }
    let pair = common::pair();
    let mut sys = common::system(&pair, true, 10);
    let examples: Vec<_> = common::corpus(&pair, 8, 11)
        .iter()
        .map(|u| build_example(&sys, u, &TrainingMode::Baseline, None).unwrap())
        .collect();
    let cfg = TrainConfig {
        steps: 5,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let out = train_model(&mut sys, &examples, &cfg, |_, _| {}).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let ckpt = Checkpoint::from_system(&sys, TrainingMode::Baseline, 5, false, Some(&out.optimizer)).unwrap();
    save_checkpoint(&ckpt, &p1).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&p1).map_err(|e| e.to_string())?;
    let back = loaded.to_system().map_err(|e| e.to_string())?;
    let same = sys.store.iter().zip(back.store.iter()).all(|((_, n, x), (_, m, y))| n == m && x.data() == y.data());
    save_checkpoint(&loaded, &p2).map_err(|e| e.to_string())?;
    let bytes_equal = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();
    check(
        same && bytes_equal && loaded == ckpt,
        format!("{} report bytes identical across runs; checkpoint round trip exact", a.len()),
    )
}

fn overfit() -> Verdict {
    let pair = common::pair();
    let corpus: Vec<Utterance> = common::corpus(&pair, 16, 12);
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
        TrainingMode::cot_prediction(AsrSource::GroundTruth).unwrap(),
        TrainingMode::cot_prediction(AsrSource::Hypothesis).unwrap(),
        TrainingMode::CotPrompting { asr_source: AsrSource::GroundTruth },
        TrainingMode::CotPrompting { asr_source: AsrSource::Hypothesis },
        TrainingMode::CotPrompting { asr_source: AsrSource::Corrupted(0.2) },
    ];
    let mut worst: f32 = 0.0;
    for mode in modes {
        let mut sys = common::system(&pair, true, 13);
        let examples = corpus
            .iter()
            .map(|u| build_example(&sys, u, &mode, mode.needs_transcript().then_some(u.source_text.as_str())))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        let out = train_model(&mut sys, &examples, &config, |_, _| {}).map_err(|e| e.to_string())?;
        let last = *out.losses.last().unwrap();
        if !(last < 0.05) {
            return Err(format!("{} ends at loss {last:.4}", mode.tag()));
        }
        worst = worst.max(last);
    }
    Ok(format!("6 modes, worst final loss {worst:.4} after 300 steps"))
}
