//! One function per subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use indexmap::IndexMap;
use log::info;
use serde_json::{json, Value};

use rock_core::evaluation::emit_csv;
use rock_core::reasoner::{write_predictions, CHECKPOINT_KIND as REASONER_KIND};
use rock_core::synthgen::write_bundle;
use rock_core::{
    compare_knowledge_gain, emit_table, evaluate as evaluate_split, generate as synth_generate,
    load_corpus, make_training_pairs, predict_split, recall_at_k, retrieve_topk, split_by_episode,
    train_reasoner as fit_reasoner, train_scorer as fit_scorer, validate_corpus, Checkpoint, Corpus,
    EncoderConfig, EvalReport, KnowledgeBase, KnowledgeSource, QuestionInstance, QuestionType,
    Reasoner, ReasonerConfig, RetrievalConfig, Scorer, Split, SplitAssignment, SynthSpec,
    VisualVariant,
};

use crate::config::to_pairs;
use crate::manifest::Manifest;
use crate::{EvaluateArgs, GenerateArgs, RetrieveArgs, SplitArgs, TrainReasonerArgs, TrainScorerArgs};

pub const SCORER_FILE: &str = "scorer.ckpt";
pub const REASONER_FILE: &str = "reasoner.ckpt";
pub const KB_FILE: &str = rock_core::kb::KB_FILE;

pub fn parse_ratios(text: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("ratios `{text}` must be three comma-separated numbers"))?;
    <[f64; 3]>::try_from(parts).map_err(|p| anyhow!("ratios need exactly 3 values, got {}", p.len()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

struct Dataset {
    corpus: Corpus,
    split: SplitAssignment,
    ratios: [f64; 3],
    split_seed: u64,
}

fn load_dataset(data: &Path, ratios: [f64; 3], split_seed: u64) -> Result<Dataset> {
    let corpus = load_corpus(data)?;
    let violations = validate_corpus(&corpus);
    if let Some(v) = violations.first() {
        bail!("{} corpus violations in {}, first: {v}", violations.len(), data.display());
    }
    let split = split_by_episode(&corpus, ratios, split_seed)?;
    Ok(Dataset {
        corpus,
        split,
        ratios,
        split_seed,
    })
}

fn load_from_args(a: &SplitArgs, seed: u64) -> Result<Dataset> {
    load_dataset(&a.data, parse_ratios(&a.ratios)?, a.split_seed.unwrap_or(seed))
}

fn split_meta(ds: &Dataset) -> Value {
    json!({ "ratios": ds.ratios, "split_seed": ds.split_seed })
}

fn merge_meta(ck: &mut Checkpoint, extra: Value) {
    if let (Value::Object(meta), Value::Object(extra)) = (&mut ck.meta, extra) {
        meta.extend(extra);
    }
}

fn kb_path(kb: &Option<PathBuf>, scorer: &Path) -> PathBuf {
    kb.clone()
        .unwrap_or_else(|| scorer.parent().unwrap_or(Path::new(".")).join(KB_FILE))
}

fn load_scorer(path: &Path) -> Result<Scorer> {
    Ok(Scorer::from_checkpoint(Checkpoint::load(path)?)?)
}

/// Questions of `which` whose knowledge sentence is in the KB.
fn covered<'a>(ds: &'a Dataset, which: Split, kb: &KnowledgeBase) -> Vec<&'a QuestionInstance> {
    ds.corpus
        .instances_in(&ds.split, &[which])
        .filter(|q| kb.find(&q.knowledge_text).is_some())
        .collect()
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let spec = SynthSpec {
        n_episodes: a.n_episodes,
        clips_per_episode: a.clips_per_episode,
        questions_per_clip: a.questions_per_clip,
        n_knowledge: a.n_knowledge,
        determinism: a.determinism,
        filler_vocab: a.filler_vocab,
        concept_vocab: a.concept_vocab,
        character_vocab: a.character_vocab,
        frames_per_clip: a.frames_per_clip,
        d_img: a.d_img,
        seed: a.seed,
    };
    let (corpus, ledger) = synth_generate(&spec)?;
    let violations = validate_corpus(&corpus);
    if let Some(v) = violations.first() {
        bail!("generated corpus has {} violations, first: {v}", violations.len());
    }
    write_bundle(&corpus, &ledger, &a.out)?;
    let decidable = ledger.entries().filter(|e| e.decidable).count();
    let kb = KnowledgeBase::build_all(&corpus)?;
    let mut m = Manifest::new("generate", to_pairs(a)?);
    m.count("instances", corpus.instances.len());
    m.count("clips", corpus.clips.len());
    m.count("episodes", corpus.episode_ids().len());
    m.count("decidable", decidable);
    m.count("knowledge_entries", kb.len());
    m.write(&a.out)?;
    println!(
        "wrote {} instances over {} clips ({} decidable, {} knowledge sentences) to {}",
        corpus.instances.len(),
        corpus.clips.len(),
        decidable,
        kb.len(),
        a.out.display()
    );
    Ok(())
}

pub fn train_scorer(a: &TrainScorerArgs) -> Result<()> {
    let ds = load_from_args(&a.split, a.seed)?;
    let kb = KnowledgeBase::build(&ds.corpus, &ds.split, &[Split::Train])?;
    let cfg = RetrievalConfig {
        top_k: a.top_k,
        negatives_per_positive: a.negatives_per_positive,
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        seed: a.seed,
        embed_dim: a.embed_dim,
        hidden_dim: a.hidden_dim,
    };
    let train = covered(&ds, Split::Train, &kb);
    let pairs = make_training_pairs(&train, &kb, &cfg)?;
    info!("training scorer on {} pairs from {} questions, N = {}", pairs.len(), train.len(), kb.len());
    let (scorer, log) = fit_scorer::<f64>(&pairs, &cfg)?;

    create_dir(&a.out)?;
    let mut ck = scorer.to_checkpoint();
    merge_meta(&mut ck, split_meta(&ds));
    ck.save(a.out.join(SCORER_FILE))?;
    kb.save_jsonl(a.out.join(KB_FILE))?;
    log.write(a.out.join("scorer_loss.csv"))?;

    let mut m = Manifest::new("train-scorer", to_pairs(a)?);
    m.count("knowledge_entries", kb.len());
    m.count("training_pairs", pairs.len());
    if let Some(l) = log.last() {
        m.metric("final_loss", l);
    }
    let val = covered(&ds, Split::Val, &kb);
    m.count("val_covered", val.len());
    if !val.is_empty() {
        let r1 = recall_at_k(&scorer, &val, &kb, 1)?;
        let rk = recall_at_k(&scorer, &val, &kb, a.top_k)?;
        m.metric("val_recall_at_1", r1);
        m.metric(&format!("val_recall_at_{}", a.top_k), rk);
        println!("val recall@1 {r1:.3}, recall@{} {rk:.3} over {} questions", a.top_k, val.len());
    }
    m.write(&a.out)?;
    println!("scorer written to {}", a.out.join(SCORER_FILE).display());
    Ok(())
}

enum Knowledge {
    Gold,
    Retrieved(Scorer, KnowledgeBase),
}

impl Knowledge {
    fn load(gold: bool, scorer: &Option<PathBuf>, kb: &Option<PathBuf>) -> Result<Self> {
        if gold {
            return Ok(Knowledge::Gold);
        }
        let Some(scorer_path) = scorer else {
            bail!("pass --scorer (with its knowledge base) or --gold-knowledge");
        };
        let scorer = load_scorer(scorer_path)?;
        let kb = KnowledgeBase::load_jsonl(kb_path(kb, scorer_path))?;
        Ok(Knowledge::Retrieved(scorer, kb))
    }

    fn source(&self, k: usize) -> KnowledgeSource<'_> {
        match self {
            Knowledge::Gold => KnowledgeSource::Gold,
            Knowledge::Retrieved(scorer, kb) => KnowledgeSource::Retrieved { scorer, kb, k },
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Knowledge::Gold => "gold",
            Knowledge::Retrieved(..) => "retrieved",
        }
    }
}

pub fn train_reasoner(a: &TrainReasonerArgs) -> Result<()> {
    let ds = load_from_args(&a.split, a.seed)?;
    let knowledge = Knowledge::load(a.gold_knowledge, &a.scorer, &a.kb)?;
    let variant = VisualVariant::parse(&a.variant)
        .ok_or_else(|| anyhow!("unknown visual variant `{}`", a.variant))?;
    let cfg = ReasonerConfig {
        variant,
        n_frames: a.n_frames,
        encoder: EncoderConfig {
            embed_dim: a.embed_dim,
            d_lang: a.d_lang,
            l_max: a.l_max,
            knowledge_slots: a.knowledge_slots,
        },
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        seed: a.seed,
        head_init_std: a.head_init_std,
    };
    let source = knowledge.source(a.top_k);
    let (model, log) = fit_reasoner::<f64>(&ds.corpus, &ds.split, &source, &cfg)?;

    create_dir(&a.out)?;
    let mut ck = model.to_checkpoint();
    let mut extra = split_meta(&ds);
    extra["knowledge"] = json!(knowledge.name());
    extra["top_k"] = json!(a.top_k);
    merge_meta(&mut ck, extra);
    ck.save(a.out.join(REASONER_FILE))?;
    log.write(a.out.join("reasoner_loss.csv"))?;

    let mut m = Manifest::new("train-reasoner", to_pairs(a)?);
    if let Some(l) = log.last() {
        m.metric("final_loss", l);
    }
    let preds = predict_split(&model, &ds.corpus, &ds.split, Split::Val, &source)?;
    if !preds.is_empty() {
        let report = evaluate_split(&preds, &ds.corpus, &ds.split, Split::Val)?;
        m.metric("val_accuracy", report.overall_accuracy);
        println!("val accuracy {:.3} over {} questions", report.overall_accuracy, report.total);
    }
    m.write(&a.out)?;
    println!("reasoner written to {}", a.out.join(REASONER_FILE).display());
    Ok(())
}

fn meta_field<'a>(ck: &'a Checkpoint, key: &str) -> Result<&'a Value> {
    ck.meta
        .get(key)
        .ok_or_else(|| anyhow!("reasoner checkpoint lacks `{key}`; was it written by train-reasoner?"))
}

fn report_metrics(m: &mut Manifest, prefix: &str, r: &EvalReport) {
    m.metric(&format!("{prefix}accuracy"), r.overall_accuracy);
    for t in QuestionType::ALL {
        if let Some(acc) = r.accuracy_of(t) {
            m.metric(&format!("{prefix}accuracy_{t}"), acc);
        }
    }
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.reasoner)?;
    ck.expect_kind(REASONER_KIND)?;
    let ratios: [f64; 3] = serde_json::from_value(meta_field(&ck, "ratios")?.clone())
        .context("reasoner checkpoint `ratios`")?;
    let split_seed = meta_field(&ck, "split_seed")?
        .as_u64()
        .ok_or_else(|| anyhow!("reasoner checkpoint `split_seed` must be an integer"))?;
    let trained_k = ck.meta.get("top_k").and_then(Value::as_u64).unwrap_or(5) as usize;
    let model = Reasoner::from_checkpoint(ck)?;
    let which = Split::parse(&a.split).ok_or_else(|| anyhow!("unknown split `{}`", a.split))?;
    let ds = load_dataset(&a.data, ratios, split_seed)?;
    let knowledge = Knowledge::load(a.gold_knowledge, &a.scorer, &a.kb)?;
    let k = a.top_k.unwrap_or(trained_k);

    let full = predict_split(&model, &ds.corpus, &ds.split, which, &knowledge.source(k))?;
    let ablated = predict_split(&model, &ds.corpus, &ds.split, which, &KnowledgeSource::Ablated)?;
    let full_report = evaluate_split(&full, &ds.corpus, &ds.split, which)?;
    let vsqa_report = evaluate_split(&ablated, &ds.corpus, &ds.split, which)?;
    let gain = compare_knowledge_gain(&vsqa_report, &full_report);

    let label = model.variant().label();
    let mut rows = IndexMap::new();
    rows.insert(format!("ROCK_VSQA {label}"), vsqa_report.clone());
    rows.insert(format!("ROCK {label}"), full_report.clone());
    let table = emit_table(&rows);

    create_dir(&a.out)?;
    write_predictions(a.out.join("predictions.jsonl"), &full)?;
    write_predictions(a.out.join("predictions_vsqa.jsonl"), &ablated)?;
    full_report.write_json(a.out.join("report.json"))?;
    vsqa_report.write_json(a.out.join("report_vsqa.json"))?;
    fs::write(a.out.join("table.txt"), &table).context("writing table.txt")?;
    fs::write(a.out.join("table.csv"), emit_csv(&rows)).context("writing table.csv")?;

    let mut m = Manifest::new("evaluate", to_pairs(a)?);
    m.count("instances", full_report.total);
    report_metrics(&mut m, "", &full_report);
    report_metrics(&mut m, "vsqa_", &vsqa_report);
    m.metric("knowledge_gain", gain);
    m.write(&a.out)?;

    print!("{table}");
    println!("knowledge gain: {gain:+.3}");
    Ok(())
}

pub fn retrieve(a: &RetrieveArgs) -> Result<()> {
    let corpus = load_corpus(&a.data)?;
    let scorer = load_scorer(&a.scorer)?;
    let kb = KnowledgeBase::load_jsonl(kb_path(&a.kb, &a.scorer))?;
    let q = corpus
        .instance(&a.question)
        .ok_or_else(|| anyhow!("no question with id `{}`", a.question))?;
    println!("question: {}", q.question);
    for (i, c) in q.candidates.iter().enumerate() {
        println!("  ({}) {c}", i + 1);
    }
    let own = kb.find(&q.knowledge_text);
    for (rank, s) in retrieve_topk(&scorer, q, &kb, a.top_k)?.iter().enumerate() {
        let mark = if Some(s.kb_id) == own { " *" } else { "" };
        println!(
            "{:>3}  kb {:>4}  {:.6}  {}{mark}",
            rank + 1,
            s.kb_id,
            s.score,
            kb.lookup(s.kb_id)?.text
        );
    }
    Ok(())
}
