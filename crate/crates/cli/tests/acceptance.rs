//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so
//! the report is printed even when every check passes.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rock_cli::manifest::{manifest_path, read_metrics};
use rock_core::evaluation::{ExampleOutcome, COLUMNS};
use rock_core::gradcheck::{check_gradient, sample_coordinates, GradCheckReport};
use rock_core::nn::Tensor;
use rock_core::reasoner::PreparedInstance;
use rock_core::retrieval::{question_block, EncodedPair, ScorerInput};
use rock_core::text::Vocab;
use rock_core::*;

const RATIOS: [f64; 3] = [0.6, 0.2, 0.2];
const TOP_K: usize = 5;

struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

fn timed(name: &'static str, budget: Option<Duration>, f: impl FnOnce() -> (bool, String)) -> Check {
    let t = Instant::now();
    let (ok, mut detail) = f();
    let elapsed = t.elapsed();
    let mut passed = ok;
    if let Some(b) = budget {
        passed &= elapsed <= b;
        detail.push_str(&format!("; budget {}s", b.as_secs()));
    }
    Check {
        name,
        passed,
        detail,
        elapsed,
    }
}

fn report(c: &Check) {
    let tag = if c.passed { "PASS" } else { "FAIL" };
    println!("{tag}  {:<28} {:>7.1}s  {}", c.name, c.elapsed.as_secs_f64(), c.detail);
}

// ---------------------------------------------------------------------------
// retrieval oracle

fn random_scorer(rng: &mut ChaCha8Rng, vocab: Vocab) -> Scorer {
    let mut m = Scorer::init(vocab, rng.random_range(2..8), rng.random_range(2..8), rng.random());
    for t in &mut m.params_mut().tensors {
        *t = Tensor::normal(&t.name, &t.shape.clone(), 1.0, rng);
    }
    m
}

fn random_text(rng: &mut ChaCha8Rng, words: &[String]) -> String {
    let n = rng.random_range(1..6);
    (0..n).map(|_| words[rng.random_range(0..words.len())].as_str()).collect::<Vec<_>>().join(" ")
}

fn retrieval_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let words: Vec<String> = (0..30).map(|i| format!("t{i}")).collect();
    let mut mismatches = 0;
    let mut compared = 0;
    for _ in 0..20 {
        let model = random_scorer(&mut rng, Vocab::build(words.iter().map(String::as_str)));
        let n = rng.random_range(1..=200);
        let kb = KnowledgeBase::from_entries(
            (0..n)
                .map(|i| KnowledgeInstance {
                    kb_id: i + 1,
                    text: format!("{} u{i}", random_text(&mut rng, &words)),
                    source_instance_ids: vec![],
                })
                .collect(),
        )
        .unwrap();
        let q = QuestionInstance {
            id: "q".into(),
            episode_id: "e".into(),
            clip_id: "c".into(),
            question: random_text(&mut rng, &words),
            candidates: (0..4).map(|_| random_text(&mut rng, &words)).collect(),
            gold_index: 0,
            qtype: QuestionType::Knowledge,
            knowledge_text: String::new(),
        };
        let block = question_block(&q);
        let mut brute: Vec<ScoredKnowledge> = kb
            .entries()
            .iter()
            .map(|e| ScoredKnowledge {
                kb_id: e.kb_id,
                score: model.score_pair(&ScorerInput {
                    question_block: block.clone(),
                    knowledge_text: e.text.clone(),
                }),
            })
            .collect();
        brute.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.kb_id.cmp(&b.kb_id)));
        for k in [1, 5, n] {
            compared += 1;
            if retrieve_topk(&model, &q, &kb, k).unwrap() != brute[..k.min(n)] {
                mismatches += 1;
            }
        }
    }
    (mismatches == 0, format!("{compared} rankings, {mismatches} differ from brute force"))
}

// ---------------------------------------------------------------------------
// gradients and loss sanity

fn perturbed_scorer_batch(seed: u64) -> (Scorer, Vec<(EncodedPair, bool)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..20).map(|i| format!("t{i}")).collect();
    let mut model = Scorer::init(Vocab::build(words.iter().map(String::as_str)), 6, 5, seed);
    for t in &mut model.params_mut().tensors {
        *t = Tensor::normal(&t.name, &t.shape.clone(), 0.5, &mut rng);
    }
    let batch = (0..16)
        .map(|i| {
            let input = ScorerInput {
                question_block: random_text(&mut rng, &words),
                knowledge_text: random_text(&mut rng, &words),
            };
            (model.encode_pair(&input), i % 2 == 0)
        })
        .collect();
    (model, batch)
}

fn scorer_gradcheck() -> GradCheckReport {
    let (mut model, batch) = perturbed_scorer_batch(7);
    let (_, grads) = model.loss_and_grad(&batch);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let coords = sample_coordinates(model.params(), 60, &mut rng);
    let frozen = model.clone();
    check_gradient(model.params_mut(), &grads, &coords, 1e-5, |p| {
        let mut m = frozen.clone();
        *m.params_mut() = p.clone();
        m.loss(&batch)
    })
}

fn small_corpus() -> (Corpus, SplitAssignment) {
    let (corpus, _) = generate(&SynthSpec {
        n_episodes: 10,
        ..Default::default()
    })
    .unwrap();
    let split = split_by_episode(&corpus, RATIOS, 0).unwrap();
    (corpus, split)
}

fn train_batch(model: &Reasoner, corpus: &Corpus, split: &SplitAssignment) -> Vec<PreparedInstance<f64>> {
    corpus
        .instances_in(split, &[Split::Train])
        .map(|q| {
            model
                .prepare(q, corpus.clip(&q.clip_id).unwrap(), &[q.knowledge_text.as_str()])
                .unwrap()
        })
        .collect()
}

fn reasoner_gradcheck() -> GradCheckReport {
    let (corpus, split) = small_corpus();
    let cfg = ReasonerConfig {
        epochs: 0,
        encoder: EncoderConfig {
            embed_dim: 6,
            d_lang: 5,
            l_max: 512,
            knowledge_slots: 2,
        },
        ..Default::default()
    };
    let (mut model, _) = train_reasoner::<f64>(&corpus, &split, &KnowledgeSource::Gold, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for t in &mut model.head_mut().tensors {
        *t = Tensor::normal(&t.name, &t.shape.clone(), 1.0, &mut rng);
    }
    for t in &mut model.encoder_mut().params_mut().tensors {
        *t = Tensor::normal(&t.name, &t.shape.clone(), 0.5, &mut rng);
    }
    let all = train_batch(&model, &corpus, &split);
    let batch: Vec<&PreparedInstance<f64>> = all.iter().take(12).collect();
    let (_, grads) = model.loss_and_grad(&batch).unwrap();
    let frozen = model.clone();
    let coords = sample_coordinates(model.encoder().params(), 25, &mut rng);
    let mut report = check_gradient(model.encoder_mut().params_mut(), &grads.encoder, &coords, 1e-5, |p| {
        let mut m = frozen.clone();
        *m.encoder_mut().params_mut() = p.clone();
        m.loss(&batch).unwrap()
    });
    let coords = sample_coordinates(model.head(), 25, &mut rng);
    report.extend(check_gradient(model.head_mut(), &grads.head, &coords, 1e-5, |p| {
        let mut m = frozen.clone();
        *m.head_mut() = p.clone();
        m.loss(&batch).unwrap()
    }));
    report
}

fn gradient_checks() -> (bool, String) {
    let s = scorer_gradcheck();
    let r = reasoner_gradcheck();
    let ok = s.len() >= 100 && r.len() >= 100 && s.max_rel_error() < 1e-4 && r.max_rel_error() < 1e-4;
    (
        ok,
        format!(
            "scorer {} coords max rel {:.2e}; reasoner {} coords max rel {:.2e}; tol 1e-4",
            s.len(),
            s.max_rel_error(),
            r.len(),
            r.max_rel_error()
        ),
    )
}

fn loss_sanity(corpus: &Corpus, split: &SplitAssignment) -> (bool, String) {
    let (model, _) = train_reasoner::<f64>(
        corpus,
        split,
        &KnowledgeSource::Gold,
        &ReasonerConfig {
            epochs: 0,
            ..Default::default()
        },
    )
    .unwrap();
    let batch = train_batch(&model, corpus, split);
    let refs: Vec<&PreparedInstance<f64>> = batch.iter().collect();
    let ce = model.loss(&refs).unwrap();

    let (mut scorer, pairs) = perturbed_scorer_batch(3);
    for t in &mut scorer.params_mut().tensors[3..] {
        t.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let bce = scorer.loss(&pairs);
    let ln4 = 4f64.ln();
    let ln2 = std::f64::consts::LN_2;
    let ok = (ce - ln4).abs() <= 0.05 && (bce - ln2).abs() <= 1e-6;
    (
        ok,
        format!(
            "reasoner CE {ce:.4} vs ln4 {ln4:.4} (±0.05); scorer BCE {bce:.9} vs ln2 (±1e-6)"
        ),
    )
}

// ---------------------------------------------------------------------------
// learning experiments

struct Pipeline {
    corpus: Corpus,
    split: SplitAssignment,
    kb: KnowledgeBase,
    scorer: Scorer,
    scorer_time: Duration,
}

fn train_pipeline_scorer(seed: u64, determinism: f64) -> Pipeline {
    let t = Instant::now();
    let (corpus, _) = generate(&SynthSpec {
        determinism,
        seed,
        ..Default::default()
    })
    .unwrap();
    let split = split_by_episode(&corpus, RATIOS, seed).unwrap();
    let kb = KnowledgeBase::build(&corpus, &split, &[Split::Train]).unwrap();
    let train: Vec<&QuestionInstance> = corpus.instances_in(&split, &[Split::Train]).collect();
    let cfg = RetrievalConfig {
        seed,
        ..Default::default()
    };
    let pairs = make_training_pairs(&train, &kb, &cfg).unwrap();
    let (scorer, _) = train_scorer::<f64>(&pairs, &cfg).unwrap();
    Pipeline {
        corpus,
        split,
        kb,
        scorer,
        scorer_time: t.elapsed(),
    }
}

fn held_out(p: &Pipeline) -> Vec<&QuestionInstance> {
    p.corpus
        .instances_in(&p.split, &[Split::Test])
        .filter(|q| p.kb.find(&q.knowledge_text).is_some())
        .collect()
}

fn retrieval_learning(p: &Pipeline) -> (bool, String) {
    let held = held_out(p);
    let total = p.corpus.instances_in(&p.split, &[Split::Test]).count();
    let r1 = recall_at_k(&p.scorer, &held, &p.kb, 1).unwrap();
    let r5 = recall_at_k(&p.scorer, &held, &p.kb, 5).unwrap();
    (
        r1 >= 0.9 && r5 >= 0.98,
        format!(
            "recall@1 {r1:.3} (>=0.9), recall@5 {r5:.3} (>=0.98) on {}/{total} held-out questions, N={}",
            held.len(),
            p.kb.len()
        ),
    )
}

/// Held-out accuracy with retrieved knowledge and with the knowledge
/// segment removed, for one reasoner.
fn reasoner_accuracies(p: &Pipeline, seed: u64) -> (f64, f64) {
    let source = KnowledgeSource::Retrieved {
        scorer: &p.scorer,
        kb: &p.kb,
        k: TOP_K,
    };
    let cfg = ReasonerConfig {
        seed,
        ..Default::default()
    };
    let (model, _) = train_reasoner::<f64>(&p.corpus, &p.split, &source, &cfg).unwrap();
    let acc = |src: &KnowledgeSource| {
        let preds = predict_split(&model, &p.corpus, &p.split, Split::Test, src).unwrap();
        evaluate(&preds, &p.corpus, &p.split, Split::Test).unwrap().overall_accuracy
    };
    (acc(&source), acc(&KnowledgeSource::Ablated))
}

fn knowledge_gain(p: &Pipeline) -> (bool, String) {
    let (full, vsqa) = reasoner_accuracies(p, 0);
    let gap = full - vsqa;
    (
        full >= 0.9 && vsqa <= 0.4 && gap >= 0.3,
        format!("full {full:.3} (>=0.9), knowledge ablated {vsqa:.3} (<=0.4), gap {gap:+.3} (>=0.3)"),
    )
}

fn chance_floor() -> (bool, String) {
    let accs: Vec<f64> = (0..5)
        .map(|seed| {
            let p = train_pipeline_scorer(seed, 0.0);
            reasoner_accuracies(&p, seed).0
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let listed: Vec<String> = accs.iter().map(|a| format!("{a:.2}")).collect();
    (
        (mean - 0.25).abs() <= 0.05,
        format!("mean held-out accuracy {mean:.3} (0.25±0.05) over seeds 0-4: {}", listed.join(" ")),
    )
}

// ---------------------------------------------------------------------------
// evaluation

fn evaluation_decomposition() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut worst = 0.0f64;
    let mut rational_ok = true;
    let mut reports = IndexMap::new();
    for r in 0..1000 {
        let n = rng.random_range(1..400);
        let examples: Vec<ExampleOutcome> = (0..n)
            .map(|i| {
                let p: f64 = rng.random();
                let correct = rng.random_bool(p);
                ExampleOutcome {
                    instance_id: format!("q{i}"),
                    qtype: QuestionType::ALL[rng.random_range(0..4)],
                    predicted_index: usize::from(!correct),
                    gold_index: 0,
                    correct,
                }
            })
            .collect();
        let report = EvalReport::from_outcomes(examples);
        let weighted = QuestionType::ALL
            .iter()
            .filter_map(|t| report.accuracy_of(*t).map(|a| a * report.counts[t].count as f64))
            .sum::<f64>()
            / report.total as f64;
        worst = worst.max((weighted - report.overall_accuracy).abs());
        let (w, o) = report.decomposition::<Ratio<i64>>();
        rational_ok &= w == o;
        if r < 8 {
            reports.insert(format!("method {r}"), report);
        }
    }
    let table = emit_table(&reports);
    let header: Vec<&str> = table.lines().next().unwrap_or("").split_whitespace().collect();
    let layout_ok = header.len() == 6 && header[1..] == COLUMNS;
    let parsed = parse_table(&table).unwrap_or_default();
    let parse_ok = parsed.len() == reports.len()
        && parsed.iter().zip(&reports).all(|((name, got), (want_name, r))| {
            name == want_name
                && r.row()
                    .iter()
                    .zip(got)
                    .all(|(w, g)| w.map(|x| format!("{x:.3}").parse::<f64>().unwrap()) == *g)
        });
    (
        worst <= 1e-12 && rational_ok && layout_ok && parse_ok,
        format!(
            "1000 reports, max |weighted - overall| {worst:.1e} (<=1e-12), rational exact {rational_ok}, \
             columns {} {layout_ok}, parse-back {parse_ok}",
            COLUMNS.join("/")
        ),
    )
}

// ---------------------------------------------------------------------------
// command determinism

fn rock(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_rock"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("rock {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Runs `command` once as given, then again from its manifest into `rerun`,
/// and compares the manifest metrics and every named output file.
fn rerun_matches(command: &str, first: &Path, rerun: &Path, args: &[&str], files: &[&str]) -> Result<String, String> {
    let mut full = vec![command];
    full.extend_from_slice(args);
    full.extend_from_slice(&["--out", path(first)]);
    rock(&full)?;
    let manifest = manifest_path(first, command);
    rock(&["--config", path(&manifest), command, "--out", path(rerun)])?;
    let a = read_metrics(&manifest).map_err(|e| e.to_string())?;
    let b = read_metrics(&manifest_path(rerun, command)).map_err(|e| e.to_string())?;
    if a.is_empty() || a != b {
        return Err(format!("{command}: metrics differ {a:?} vs {b:?}"));
    }
    for f in files {
        if fs::read(first.join(f)).ok() != fs::read(rerun.join(f)).ok() {
            return Err(format!("{command}: {f} differs"));
        }
    }
    Ok(format!("{command} {} metrics", a.len()))
}

fn determinism() -> (bool, String) {
    let tmp = tempfile::tempdir().unwrap();
    let d = |name: &str| tmp.path().join(name);
    let steps = || -> Result<Vec<String>, String> {
        let mut done = vec![rerun_matches(
            "generate",
            &d("data"),
            &d("data2"),
            &["--seed", "5", "--n-episodes", "10"],
            &["instances.jsonl", "clips.jsonl", "ledger.jsonl"],
        )?];
        let data = d("data");
        let common = ["--data", path(&data), "--ratios", "0.6,0.2,0.2", "--seed", "5"];
        let mut scorer_args = common.to_vec();
        scorer_args.extend_from_slice(&["--epochs", "40"]);
        done.push(rerun_matches("train-scorer", &d("s"), &d("s2"), &scorer_args, &["scorer.ckpt", "kb.jsonl", "scorer_loss.csv"])?);
        let scorer = d("s").join("scorer.ckpt");
        let mut reasoner_args = common.to_vec();
        reasoner_args.extend_from_slice(&["--scorer", path(&scorer), "--epochs", "20"]);
        done.push(rerun_matches("train-reasoner", &d("r"), &d("r2"), &reasoner_args, &["reasoner.ckpt", "reasoner_loss.csv"])?);
        let reasoner = d("r").join("reasoner.ckpt");
        let eval_args = ["--data", path(&data), "--scorer", path(&scorer), "--reasoner", path(&reasoner)];
        done.push(rerun_matches(
            "evaluate",
            &d("e"),
            &d("e2"),
            &eval_args,
            &["predictions.jsonl", "predictions_vsqa.jsonl", "report.json", "table.txt"],
        )?);
        Ok(done)
    };
    match steps() {
        Ok(done) => (true, format!("bit-identical reruns: {}", done.join(", "))),
        Err(e) => (false, e),
    }
}

fn main() -> ExitCode {
    let start = Instant::now();
    let secs = Duration::from_secs;
    let mut checks = Vec::new();

    let mut push = |c: Check| {
        report(&c);
        checks.push(c);
    };
    push(timed("retrieval oracle", Some(secs(10)), retrieval_oracle));
    push(timed("gradient checks", Some(secs(60)), gradient_checks));
    let (corpus, split) = small_corpus();
    push(timed("loss sanity", None, || loss_sanity(&corpus, &split)));

    let pipeline = train_pipeline_scorer(0, 1.0);
    let mut c = timed("retrieval learning", None, || retrieval_learning(&pipeline));
    c.elapsed += pipeline.scorer_time;
    c.passed &= c.elapsed <= secs(120);
    c.detail.push_str("; budget 120s");
    push(c);
    let mut c = timed("knowledge gain", None, || knowledge_gain(&pipeline));
    c.elapsed += pipeline.scorer_time;
    c.passed &= c.elapsed <= secs(300);
    c.detail.push_str("; budget 300s");
    push(c);

    push(timed("chance floor", None, chance_floor));
    push(timed("evaluation decomposition", None, evaluation_decomposition));
    push(timed("command determinism", None, determinism));

    let total = start.elapsed();
    let c = Check {
        name: "acceptance wall-clock",
        passed: total <= secs(600),
        detail: "all criteria above in one process; budget 600s".into(),
        elapsed: total,
    };
    report(&c);
    checks.push(c);

    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} acceptance criteria passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
