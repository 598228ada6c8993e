//! Acceptance gate. Runs every criterion in order, prints one PASS/FAIL line
//! each and exits non-zero if any fails.

use std::path::PathBuf;
use std::time::Instant;

use polyavsr::autograd::Graph;
use polyavsr::checkpoint;
use polyavsr::classifier::class_loss_node;
use polyavsr::corpus::{generate, Corpus, CorpusConfig};
use polyavsr::decoder::{
    attention_loss_node, beam_decode, greedy_decode, score_sequence, teacher_forcing, BeamConfig, CtcPrefixScorer,
};
use polyavsr::encoder::PromptEmbedding;
use polyavsr::eval::{evaluate, EvalOptions, MetricReport};
use polyavsr::gradcheck::{grad_check, GradCheckOptions};
use polyavsr::losses::{balance_weights, ctc::ctc_loss, ObjectiveWeights};
use polyavsr::metrics::wer;
use polyavsr::model::{AvsrModel, ModelConfig};
use polyavsr::train::{
    batch_objective, load_samples, train, train_model, ObjectiveOptions, Phase, Precision, RunConfig, Sample,
};
use polyavsr::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    corpus: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path().to_path_buf();
        let corpus = root.join("corpus");
        generate(&CorpusConfig::default(), &corpus).expect("corpus");
        Self {
            _dir: dir,
            root,
            corpus,
        }
    }

    fn run_config(&self, name: &str) -> RunConfig {
        RunConfig {
            corpus: self.corpus.clone(),
            out_dir: self.root.join(name),
            log_every: 50,
            ..RunConfig::default()
        }
    }
}

// ---------------------------------------------------------------- criterion 1

/// −ln Σ over every length-T path collapsing to each target, by enumeration.
fn brute_force_losses(lp: &[Vec<f64>], v: usize) -> std::collections::HashMap<Vec<usize>, f64> {
    let t = lp.len();
    let mut mass = std::collections::HashMap::new();
    let mut path = vec![0usize; t];
    for code in 0..v.pow(t as u32) {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % v;
            c /= v;
        }
        let prob: f64 = path.iter().enumerate().map(|(i, &s)| lp[i][s].exp()).product();
        let mut label = Vec::new();
        let mut prev = None;
        for &s in &path {
            if s != 0 && Some(s) != prev {
                label.push(s);
            }
            prev = Some(s);
        }
        *mass.entry(label).or_insert(0.0) += prob;
    }
    mass.into_iter().map(|(k, p)| (k, -p.ln())).collect()
}

fn all_targets(v: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for seq in &frontier {
            for s in 1..v {
                let mut n: Vec<usize> = seq.clone();
                n.push(s);
                next.push(n);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    let mut mismatch = None;
    for v in 1..=4usize {
        for t in 1..=6usize {
            if v.pow(t as u32) > 4096 {
                continue;
            }
            for _ in 0..3 {
                let logits = Tensor::<f64>::randn(&[t, v], 1.5, &mut rng);
                let lp = logits.log_softmax();
                let rows: Vec<Vec<f64>> = (0..t).map(|r| lp.row(r).to_vec()).collect();
                let oracle = brute_force_losses(&rows, v);
                for target in all_targets(v, 3) {
                    let got = ctc_loss(&lp, &target, 0).expect("ctc");
                    let want = oracle.get(&target).copied().unwrap_or(f64::INFINITY);
                    cases += 1;
                    let ok = if want.is_infinite() {
                        got == f64::INFINITY
                    } else {
                        let d = (got - want).abs();
                        worst = worst.max(d);
                        d <= 1e-9
                    };
                    if !ok && mismatch.is_none() {
                        mismatch = Some(format!("T={t} V={v} y={target:?}: {got} vs {want}"));
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = mismatch.is_none() && secs < 10.0;
    (
        pass,
        format!(
            "{cases} cases, max |diff| {worst:.2e}, {secs:.2}s{}",
            mismatch.map(|m| format!(", first mismatch {m}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

fn small_model(prompts: usize, seed: u64) -> AvsrModel<f64> {
    AvsrModel::new(ModelConfig {
        d: 16,
        heads: 2,
        prompts,
        audio_channels: 4,
        seed,
        ..ModelConfig::default()
    })
    .expect("model")
}

fn criterion_2(fx: &Fixture) -> Outcome {
    let start = Instant::now();
    let opts = GradCheckOptions {
        eps: 1e-5,
        samples: 200,
        ..GradCheckOptions::default()
    };
    let mut results = Vec::new();

    // (a) CTC with respect to its logits.
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = store.add_randn("logits", &[6, 4], 1.0, &mut rng);
    let r = grad_check(
        &mut store,
        &[x],
        |g| {
            let logits = g.param(x);
            g.ctc_loss(logits, &[1, 2, 2], 0)
        },
        opts,
    );
    results.push(("ctc", r));

    // (b) Attention loss through the decoder, memory included.
    let mut m = small_model(4, 3);
    let mem = m.store.add_randn("probe.memory", &[12, 16], 1.0, &mut rng);
    let params = m.store.weights_with_prefix(&["decoder.", "probe."]);
    let (input, target) = teacher_forcing(&m.net.vocab, 1, &[m.net.vocab.content(12), m.net.vocab.content(15)]);
    let net = &m.net;
    let r = grad_check(
        &mut m.store,
        &params,
        |g| {
            let memory = g.param(mem);
            let lp = net.decoder.forward(g, &input, memory)?;
            attention_loss_node(g, lp, &target)
        },
        opts,
    );
    results.push(("attention", r));

    // (c) Classification loss through the classifier, e_av included.
    let mut m = small_model(4, 4);
    let e = m.store.add_randn("probe.e_av", &[12, 16], 1.0, &mut rng);
    let params = m.store.weights_with_prefix(&["classifier.", "probe."]);
    let net = &m.net;
    let r = grad_check(
        &mut m.store,
        &params,
        |g| {
            let values = g.param(e);
            let emb = PromptEmbedding {
                values,
                prompts: 4,
                frames: 8,
            };
            let logits = net.classifier.classify(g, &emb)?;
            class_loss_node(g, logits, 2)
        },
        opts,
    );
    results.push(("classification", r));

    // (d) The whole balanced objective over a two-utterance batch.
    let corpus = Corpus::open(&fx.corpus).expect("corpus");
    let train = load_samples::<f64>(&corpus, "train").expect("samples");
    let mut m = AvsrModel::<f64>::new(RunConfig::default().model_config(&corpus)).expect("model");
    let a = train.iter().find(|s| s.lang == 0).expect("lang 0");
    let b = train.iter().find(|s| s.lang == 1).expect("lang 1");
    let batch = [a, b];
    let params = m.store.weights();
    let net = &m.net;
    let obj = ObjectiveOptions {
        weights: ObjectiveWeights::default(),
        balance: true,
        phase: Phase::Joint,
    };
    let r = grad_check(
        &mut m.store,
        &params,
        |g| Ok(batch_objective(net, g, &batch, obj)?.loss),
        GradCheckOptions { samples: 400, ..opts },
    );
    results.push(("composite", r));

    let secs = start.elapsed().as_secs_f64();
    let mut pass = secs < 120.0;
    let mut parts = Vec::new();
    for (name, r) in results {
        match r {
            Ok(rep) => {
                pass &= rep.max_rel_error < 1e-4;
                parts.push(format!(
                    "{name} {:.1e} ({} coords, {} kinks)",
                    rep.max_rel_error, rep.checked, rep.skipped_kinks
                ));
                if std::env::var("ACCEPTANCE_VERBOSE").is_ok() {
                    eprintln!("{name}: worst {:?} {:?}", rep.worst, rep.worst_values);
                }
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name} error: {e}"));
            }
        }
    }
    (pass, format!("{}; {secs:.1}s", parts.join(", ")))
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3(fx: &Fixture) -> Outcome {
    let corpus = Corpus::open(&fx.corpus).expect("corpus");
    let train = load_samples::<f64>(&corpus, "train").expect("samples");
    let s = &train[0];
    let t = s.video.len();
    let mut notes = Vec::new();
    let mut pass = true;
    for n in [0, 1, 4, 16] {
        let m = small_model(n, 5);
        let mut g = Graph::with_params(&m.store, false);
        let e = m.net.encode(&mut g, &s.audio, &s.video).expect("encode");
        let shape = g.shape(e.values).to_vec();
        pass &= shape == [n + t, 16];
        notes.push(format!("n={n}: {shape:?}"));
        if n == 0 {
            let x_a = g.constant(s.audio.samples.clone());
            let x_v = g.constant(s.video.frames.clone());
            let f_a = m.net.audio.forward(&mut g, x_a).expect("audio");
            let f_v = m.net.visual.forward(&mut g, x_v).expect("video");
            let f_av = m.net.fusion.forward(&mut g, f_a, f_v).expect("fuse");
            let plain = m.net.encoder.encode_features(&mut g, f_av).expect("plain");
            let same = g.value(plain).data() == g.value(e.values).data();
            pass &= same;
            notes.push(format!("n=0 bitwise equal to promptless: {same}"));
        }
    }
    let m = small_model(4, 6);
    let batch: Vec<&Sample<f64>> = train.iter().take(2).collect();
    let mut g = Graph::with_params(&m.store, true);
    let obj = ObjectiveOptions {
        weights: ObjectiveWeights::default(),
        balance: true,
        phase: Phase::Joint,
    };
    let loss = batch_objective(&m.net, &mut g, &batch, obj).expect("objective").loss;
    g.backward(loss).expect("backward");
    let reached = m
        .net
        .bank
        .prompts
        .iter()
        .filter(|&&p| {
            g.param_node(p)
                .and_then(|n| g.grad(n))
                .is_some_and(|gr| gr.iter().any(|&v| v != 0.0))
        })
        .count();
    pass &= reached == m.net.bank.prompts.len();
    notes.push(format!("prompt matrices with gradient {reached}/{}", m.net.bank.prompts.len()));
    (pass, notes.join(", "))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4(fx: &Fixture) -> Outcome {
    let g = balance_weights(&[0, 0, 0, 1]).expect("weights");
    let want_a = 1.0 / 0.75f64.sqrt();
    let arith = (g[0] - want_a).abs() <= 1e-12
        && g[..3].iter().all(|&x| x == g[0])
        && (g[3] - 2.0).abs() <= 1e-12
        && (g[0] - 1.154_700_538_379_251_5).abs() <= 1e-12;
    let uniform = balance_weights(&[2; 5]).expect("weights").iter().all(|&x| x == 1.0);

    let dir = fx.root.join("mono");
    let cfg = CorpusConfig {
        languages: 2,
        ratios: vec![1.0, 0.0],
        train_total: 120,
        eval_per_lang: 2,
        ..CorpusConfig::default()
    };
    generate(&cfg, &dir).expect("corpus");
    let run = |balance: bool| {
        let cfg = RunConfig {
            corpus: dir.clone(),
            out_dir: fx.root.join(format!("mono-run-{balance}")),
            steps: 30,
            log_every: 1,
            balance_enabled: balance,
            precision: Precision::F64,
            ..RunConfig::default()
        };
        train(&cfg).expect("train").0
    };
    let on = run(true);
    let off = run(false);
    let replay = on == off && on.len() == 30;
    (
        arith && uniform && replay,
        format!(
            "gamma [A,A,A,B] = ({:.12}, {:.12}), uniform all 1: {uniform}, single-language replay identical over {} steps: {replay}",
            g[0],
            g[3],
            on.len()
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

fn language_accuracy(model: &AvsrModel<f32>, samples: &[Sample<f32>]) -> f64 {
    let hits = samples
        .iter()
        .filter(|s| model.predict_language(&s.audio, &s.video).expect("classify").id == s.lang)
        .count();
    hits as f64 / samples.len() as f64
}

fn criterion_5(fx: &Fixture) -> Outcome {
    let start = Instant::now();
    let corpus = Corpus::open(&fx.corpus).expect("corpus");
    let test = load_samples::<f32>(&corpus, "test").expect("test");
    let cfg = RunConfig {
        steps: 2000,
        freeze_backbone: true,
        classifier_warmup_steps: 2000,
        ..fx.run_config("langid")
    };
    let baseline = AvsrModel::<f32>::new(cfg.model_config(&corpus)).expect("model");
    let base_acc = language_accuracy(&baseline, &test);
    let trained = train_model::<f32>(&cfg).expect("train").model;
    let acc = language_accuracy(&trained, &test);
    let secs = start.elapsed().as_secs_f64();
    let pass = acc >= 0.95 && (base_acc - 1.0 / 3.0).abs() <= 0.15 && secs < 600.0;
    (
        pass,
        format!(
            "held-out accuracy {:.2}% after 2000 steps, untrained {:.2}%, {secs:.0}s",
            100.0 * acc,
            100.0 * base_acc
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

struct Smoke {
    model: AvsrModel<f32>,
    checkpoint: PathBuf,
    test: Vec<Sample<f32>>,
    report: MetricReport,
    eval_opts: EvalOptions,
}

fn wers(r: &MetricReport, cond: &str) -> String {
    let c = r.condition(cond).expect("condition");
    let per: Vec<String> = c.wer.iter().map(|w| format!("{:.2}", 100.0 * w)).collect();
    format!("[{}] avg {:.2}%", per.join(" "), 100.0 * c.avg_wer)
}

fn criterion_6(fx: &Fixture) -> (Outcome, Option<Smoke>) {
    let start = Instant::now();
    let corpus = Corpus::open(&fx.corpus).expect("corpus");
    let test = load_samples::<f32>(&corpus, "test").expect("test");
    let cfg = RunConfig {
        steps: 5000,
        ..fx.run_config("smoke")
    };
    let eval_opts = EvalOptions {
        beam: cfg.beam_config(),
        noise_snr: Some(0.0),
        noise_seed: 7,
        threads: 1,
    };
    let untrained = AvsrModel::<f32>::new(cfg.model_config(&corpus)).expect("model");
    let clean_only = EvalOptions {
        noise_snr: None,
        ..eval_opts
    };
    let (base, _) = evaluate(&untrained, &test, &clean_only).expect("baseline eval");
    let out = match train_model::<f32>(&cfg) {
        Ok(o) => o,
        Err(e) => return ((false, format!("training failed: {e}")), None),
    };
    let (report, _) = evaluate(&out.model, &test, &eval_opts).expect("eval");
    let secs = start.elapsed().as_secs_f64();
    let clean = report.condition("clean").expect("clean");
    let noisy = report.condition("noisy").expect("noisy");
    let base_wer = base.condition("clean").expect("clean").avg_wer;
    let ordering = clean.wer.iter().zip(&noisy.wer).all(|(c, n)| n >= c);
    let pass = clean.avg_wer <= 0.30 && clean.avg_wer < base_wer && base_wer >= 0.9 && ordering && secs < 1800.0;
    let detail = format!(
        "clean {}, noisy 0 dB {}, untrained {:.2}%, noisy >= clean per language: {ordering}, {secs:.0}s",
        wers(&report, "clean"),
        wers(&report, "noisy"),
        100.0 * base_wer
    );
    (
        (pass, detail),
        Some(Smoke {
            model: out.model,
            checkpoint: out.final_checkpoint,
            test,
            report,
            eval_opts,
        }),
    )
}

// ---------------------------------------------------------------- criterion 7

const IMBALANCE_STEPS: usize = 2000;

fn criterion_7(fx: &Fixture) -> Outcome {
    let dir = fx.root.join("imbalanced");
    let cfg = CorpusConfig {
        ratios: vec![0.6, 0.3, 0.1],
        ..CorpusConfig::default()
    };
    generate(&cfg, &dir).expect("corpus");
    let corpus = Corpus::open(&dir).expect("corpus");
    let test = load_samples::<f32>(&corpus, "test").expect("test");
    let minority = 2;
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in [1u64, 2, 3] {
        let mut minority_wer = [0.0; 2];
        for (k, balance) in [true, false].into_iter().enumerate() {
            let run = RunConfig {
                corpus: dir.clone(),
                out_dir: fx.root.join(format!("imb-{seed}-{balance}")),
                steps: IMBALANCE_STEPS,
                seed,
                balance_enabled: balance,
                log_every: 100,
                ..RunConfig::default()
            };
            let model = train_model::<f32>(&run).expect("train").model;
            let opts = EvalOptions {
                beam: run.beam_config(),
                ..EvalOptions::default()
            };
            let (report, _) = evaluate(&model, &test, &opts).expect("eval");
            minority_wer[k] = report.conditions[0].wer[minority];
        }
        if minority_wer[0] <= minority_wer[1] {
            wins += 1;
        }
        pairs.push(format!(
            "seed {seed}: balanced {:.2}% vs unbalanced {:.2}%",
            100.0 * minority_wer[0],
            100.0 * minority_wer[1]
        ));
    }
    (
        wins >= 2,
        format!("minority L2 WER, {wins}/3 seeds balanced <= unbalanced ({})", pairs.join("; ")),
    )
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8(fx: &Fixture, smoke: Option<&Smoke>) -> Outcome {
    let run = |name: &str| {
        let cfg = RunConfig {
            steps: 40,
            log_every: 1,
            precision: Precision::F64,
            seed: 11,
            ..fx.run_config(name)
        };
        train(&cfg).expect("train");
        std::fs::read(cfg.out_dir.join("metrics.jsonl")).expect("metrics")
    };
    let a = run("det-a");
    let b = run("det-b");
    let logs_equal = a == b && !a.is_empty();
    let Some(smoke) = smoke else {
        return (false, format!("metric logs identical: {logs_equal}; no smoke checkpoint to reload"));
    };
    let opts = EvalOptions {
        noise_snr: None,
        ..smoke.eval_opts
    };
    let (loaded, _) = checkpoint::load::<f32>(&smoke.checkpoint).expect("load");
    let (r1, d1) = evaluate(&smoke.model, &smoke.test, &opts).expect("eval");
    let (r2, d2) = evaluate(&loaded, &smoke.test, &opts).expect("eval");
    let round_trip = r1 == r2 && d1 == d2;
    let matches_smoke = smoke.report.conditions[0] == r1.conditions[0];
    (
        logs_equal && round_trip && matches_smoke,
        format!(
            "64-bit metric logs identical: {logs_equal}; reloaded checkpoint decodes identically: {round_trip} ({} records)",
            d1.len()
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn oracle_distance(a: &[u8], b: &[u8]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn criterion_9(smoke: Option<&Smoke>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut wer_ok = 0;
    for _ in 0..1000 {
        let la = rng.random_range(1..10);
        let lb = rng.random_range(0..10);
        let a: Vec<u8> = (0..la).map(|_| rng.random_range(0..4)).collect();
        let b: Vec<u8> = (0..lb).map(|_| rng.random_range(0..4)).collect();
        let want = oracle_distance(&a, &b) as f64 / a.len() as f64;
        if wer(&a, &b).expect("wer") == want {
            wer_ok += 1;
        }
    }
    let Some(smoke) = smoke else {
        return (false, format!("WER oracle {wer_ok}/1000; no trained model for decoding checks"));
    };
    let model = &smoke.model;
    let vocab = model.vocab();
    let mut greedy_equal = 0;
    let mut dominates = 0;
    let mut min_margin = f64::INFINITY;
    for s in &smoke.test {
        let (logits, ctc_lp, mut scorer) = model.prepare(&s.audio, &s.video).expect("prepare");
        let lang = polyavsr::classifier::predict_language(&logits).id;
        let max_len = 12.min(ctc_lp.shape()[0]);
        let greedy = greedy_decode(&mut scorer, vocab, lang, max_len).expect("greedy");
        let one = BeamConfig {
            beam: 1,
            ctc_weight: 0.0,
            max_len,
        };
        let b1 = beam_decode(&mut scorer, &ctc_lp, vocab, lang, one).expect("beam 1");
        greedy_equal += usize::from(b1.tokens == greedy);
        let four = BeamConfig {
            beam: 4,
            ctc_weight: 0.1,
            max_len,
        };
        let b4 = beam_decode(&mut scorer, &ctc_lp, vocab, lang, four).expect("beam 4");
        let ctc = CtcPrefixScorer::new(&ctc_lp).expect("ctc");
        let g = score_sequence(&mut scorer, &ctc, vocab, lang, &greedy, 0.1).expect("score");
        min_margin = min_margin.min(b4.score - g.score);
        dominates += usize::from(b4.score >= g.score);
    }
    let n = smoke.test.len();
    (
        wer_ok == 1000 && greedy_equal == n && dominates == n,
        format!(
            "beam=1/λ=0 equals greedy {greedy_equal}/{n}, beam=4 joint >= greedy {dominates}/{n} (min margin {min_margin:.3e}), WER oracle {wer_ok}/1000"
        ),
    )
}

fn main() {
    // ACCEPTANCE_ONLY=2,3 restricts a development run to some criteria.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |id: usize| only.as_ref().is_none_or(|o| o.contains(&id));
    let fx = Fixture::new();
    let mut failed = Vec::new();
    let mut report = |id: usize, name: &str, run: &mut dyn FnMut() -> Outcome| {
        if !want(id) {
            println!("acceptance criterion {id} ({name}): SKIPPED");
            return;
        }
        let (pass, detail) = run();
        println!(
            "acceptance criterion {id} ({name}): {} : {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            failed.push(id);
        }
    };
    report(1, "CTC oracle equivalence", &mut criterion_1);
    report(2, "gradient suite", &mut || criterion_2(&fx));
    report(3, "prompt mechanics", &mut || criterion_3(&fx));
    report(4, "balancing arithmetic", &mut || criterion_4(&fx));
    report(5, "language-ID learnability", &mut || criterion_5(&fx));
    let mut smoke = None;
    report(6, "end-to-end smoke", &mut || {
        let (outcome, s) = criterion_6(&fx);
        smoke = s;
        outcome
    });
    report(7, "imbalance effect", &mut || criterion_7(&fx));
    report(8, "determinism", &mut || criterion_8(&fx, smoke.as_ref()));
    report(9, "decoding contracts", &mut || criterion_9(smoke.as_ref()));
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all 9 criteria passed");
}
