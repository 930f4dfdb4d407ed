//! Seeded synthetic corpora with a ground-truth ledger.
//!
//! Every knowledge template names a keyword; a private bijection pairs each
//! keyword with one answer token, and on decidable instances exactly the
//! gold candidate carries that token. Keywords occur nowhere outside the
//! knowledge text. The four candidates of a template are drawn from a fixed
//! set that overlaps any other template's set in at most one token, so the
//! candidate list identifies the template while no single candidate reveals
//! whether it is gold.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    save_corpus, ClipAssets, Corpus, Frame, QuestionInstance, QuestionType, NUM_CANDIDATES,
};
use crate::error::{Error, Result};
use crate::text::tokenize;

pub const LEDGER_FILE: &str = "ledger.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_episodes: usize,
    pub clips_per_episode: usize,
    pub questions_per_clip: usize,
    pub n_knowledge: usize,
    /// Probability that an instance's gold answer follows its knowledge keyword.
    pub determinism: f64,
    pub filler_vocab: usize,
    pub concept_vocab: usize,
    pub character_vocab: usize,
    pub frames_per_clip: usize,
    pub d_img: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_episodes: 25,
            clips_per_episode: 5,
            questions_per_clip: 4,
            n_knowledge: 40,
            determinism: 1.0,
            filler_vocab: 4,
            concept_vocab: 30,
            character_vocab: 8,
            frames_per_clip: 6,
            d_img: 8,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn n_instances(&self) -> usize {
        self.n_episodes * self.clips_per_episode * self.questions_per_clip
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_episodes", self.n_episodes),
            ("clips_per_episode", self.clips_per_episode),
            ("questions_per_clip", self.questions_per_clip),
            ("n_knowledge", self.n_knowledge),
            ("filler_vocab", self.filler_vocab),
            ("concept_vocab", self.concept_vocab),
            ("character_vocab", self.character_vocab),
            ("frames_per_clip", self.frames_per_clip),
            ("d_img", self.d_img),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("synthgen: {name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.determinism) {
            return Err(Error::InvalidConfig(format!(
                "synthgen: determinism must lie in [0, 1], got {}",
                self.determinism
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub instance_id: String,
    /// 1-based index of the knowledge template the instance was drawn from.
    pub template: usize,
    pub decidable: bool,
    pub keyword: String,
    pub answer_token: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Ledger {
    entries: IndexMap<String, LedgerEntry>,
}

impl Ledger {
    pub fn from_entries(entries: impl IntoIterator<Item = LedgerEntry>) -> Self {
        Self {
            entries: entries.into_iter().map(|e| (e.instance_id.clone(), e)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, instance_id: &str) -> Option<&LedgerEntry> {
        self.entries.get(instance_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &LedgerEntry> {
        self.entries.values()
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        for e in self.entries.values() {
            serde_json::to_writer(&mut buf, e).expect("ledger entry serializes");
            buf.push(b'\n');
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
                file: path.display().to_string(),
                line: i + 1,
                field: "<record>".into(),
                message: e.to_string(),
            })?);
        }
        Ok(Self::from_entries(entries))
    }
}

/// Index of the candidate holding the answer token paired with the keyword
/// of the instance's knowledge sentence.
pub fn oracle_answer(instance: &QuestionInstance, ledger: &Ledger) -> Result<usize> {
    let entry = ledger
        .get(&instance.id)
        .ok_or_else(|| Error::NotInLedger(instance.id.clone()))?;
    if !entry.decidable {
        return Err(Error::NotDecidable(instance.id.clone()));
    }
    if !tokenize(&instance.knowledge_text).contains(&entry.keyword) {
        return Err(Error::NotDecidable(format!(
            "{} (keyword `{}` absent from its knowledge text)",
            instance.id, entry.keyword
        )));
    }
    let hits: Vec<usize> = instance
        .candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| tokenize(c).contains(&entry.answer_token))
        .map(|(i, _)| i)
        .collect();
    match hits.as_slice() {
        [i] => Ok(*i),
        _ => Err(Error::NotDecidable(format!(
            "{} (answer token `{}` held by {} candidates)",
            instance.id,
            entry.answer_token,
            hits.len()
        ))),
    }
}

/// Offsets `0 = o0 < o1 < o2 < o3 < m` whose pairwise differences are
/// distinct mod `m`, so that two shifted copies share at most one element.
/// Falls back to consecutive offsets when `m` is too small for that.
pub(crate) fn candidate_offsets(m: usize) -> [usize; NUM_CANDIDATES] {
    for a in 1..m {
        for b in a + 1..m {
            for c in b + 1..m {
                let o = [0, a, b, c];
                let mut diffs = Vec::with_capacity(12);
                for &x in &o {
                    for &y in &o {
                        if x != y {
                            diffs.push((x + m - y) % m);
                        }
                    }
                }
                diffs.sort_unstable();
                diffs.dedup();
                if diffs.len() == 12 {
                    return o;
                }
            }
        }
    }
    [0, 1, 2, 3]
}

fn filler(rng: &mut ChaCha8Rng, vocab: usize, n: usize) -> Vec<String> {
    (0..n).map(|_| format!("w{}", rng.random_range(0..vocab))).collect()
}

struct Template {
    text: String,
    keyword: String,
    members: [String; NUM_CANDIDATES],
}

/// Generates a corpus and its ledger; a pure function of `spec`.
pub fn generate(spec: &SynthSpec) -> Result<(Corpus, Ledger)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.n_knowledge.max(NUM_CANDIDATES);
    let mut answers: Vec<String> = (0..m).map(|i| format!("ans{i}")).collect();
    answers.shuffle(&mut rng);
    let mut keyword_of: Vec<usize> = (0..m).collect();
    keyword_of.shuffle(&mut rng);
    let offsets = candidate_offsets(m);

    let templates: Vec<Template> = (0..spec.n_knowledge)
        .map(|j| {
            let members = offsets.map(|o| answers[(j + o) % m].clone());
            let keyword = format!("kw{}", keyword_of[j]);
            let mut words = filler(&mut rng, spec.filler_vocab, 3);
            words.extend(members.iter().cloned());
            words.push(keyword.clone());
            words[3..].shuffle(&mut rng);
            Template {
                text: words.join(" "),
                keyword,
                members,
            }
        })
        .collect();

    let total = spec.n_instances();
    let mut assignment: Vec<usize> = (0..total).map(|i| i % spec.n_knowledge).collect();
    assignment.shuffle(&mut rng);

    let mut instances = Vec::with_capacity(total);
    let mut clips = Vec::with_capacity(spec.n_episodes * spec.clips_per_episode);
    let mut ledger = Vec::with_capacity(total);
    let mut next = 0usize;
    for e in 0..spec.n_episodes {
        // one stream per episode so episodes could be generated independently
        let mut er = ChaCha8Rng::seed_from_u64(spec.seed);
        er.set_stream(e as u64 + 1);
        let episode_id = format!("ep{e:03}");
        for c in 0..spec.clips_per_episode {
            let clip_id = format!("{episode_id}_c{c:02}");
            clips.push(synth_clip(spec, &clip_id, &mut er));
            for k in 0..spec.questions_per_clip {
                let j = assignment[next];
                next += 1;
                let t = &templates[j];
                let decidable = er.random::<f64>() < spec.determinism;
                let gold_member = if decidable { 0 } else { er.random_range(0..NUM_CANDIDATES) };
                let mut order: Vec<usize> = (0..NUM_CANDIDATES).collect();
                order.shuffle(&mut er);
                let candidates = order.iter().map(|&i| t.members[i].clone()).collect();
                let gold_index = order.iter().position(|&i| i == gold_member).expect("member present");
                let mut question = filler(&mut er, spec.filler_vocab, 3).join(" ");
                question.push('?');
                let id = format!("{clip_id}_q{k}");
                ledger.push(LedgerEntry {
                    instance_id: id.clone(),
                    template: j + 1,
                    decidable,
                    keyword: t.keyword.clone(),
                    answer_token: t.members[0].clone(),
                });
                instances.push(QuestionInstance {
                    id,
                    episode_id: episode_id.clone(),
                    clip_id: clip_id.clone(),
                    question,
                    candidates,
                    gold_index,
                    qtype: QuestionType::ALL[er.random_range(0..QuestionType::ALL.len())],
                    knowledge_text: t.text.clone(),
                });
            }
        }
    }
    Ok((Corpus::new(instances, clips), Ledger::from_entries(ledger)))
}

fn synth_clip(spec: &SynthSpec, clip_id: &str, rng: &mut ChaCha8Rng) -> ClipAssets {
    let frames = (0..spec.frames_per_clip)
        .map(|_| {
            let n_concepts = rng.random_range(0..4);
            let n_chars = rng.random_range(1..=3.min(spec.character_vocab));
            let mut characters: Vec<String> = (0..n_chars)
                .map(|_| format!("char{}", rng.random_range(0..spec.character_vocab)))
                .collect();
            characters.dedup();
            Frame {
                feature_vector: (0..spec.d_img).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                concept_labels: (0..n_concepts)
                    .map(|_| format!("obj{}", rng.random_range(0..spec.concept_vocab)))
                    .collect(),
                characters_present: characters,
                caption: filler(rng, spec.filler_vocab, 4).join(" "),
            }
        })
        .collect();
    let n_lines = rng.random_range(1..=3);
    ClipAssets {
        clip_id: clip_id.to_string(),
        subtitles: (0..n_lines).map(|_| filler(rng, spec.filler_vocab, 6).join(" ")).collect(),
        frames,
    }
}

/// Writes the dataset bundle plus the ledger into `dir`, creating it.
pub fn write_bundle(corpus: &Corpus, ledger: &Ledger, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_corpus(corpus, dir)?;
    ledger.save_jsonl(dir.join(LEDGER_FILE))
}

/// Template id → instance ids, in generation order.
pub fn template_members(ledger: &Ledger) -> BTreeMap<usize, Vec<String>> {
    let mut out: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for e in ledger.entries() {
        out.entry(e.template).or_default().push(e.instance_id.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_overlap_at_most_once() {
        for m in [13, 40, 200] {
            let o = candidate_offsets(m);
            for s in 1..m {
                let a: Vec<usize> = o.to_vec();
                let b: Vec<usize> = o.iter().map(|x| (x + s) % m).collect();
                assert!(a.iter().filter(|x| b.contains(x)).count() <= 1, "m={m} shift={s}");
            }
        }
    }

    #[test]
    fn small_pool_falls_back() {
        assert_eq!(candidate_offsets(4), [0, 1, 2, 3]);
    }

    #[test]
    fn rejects_bad_spec() {
        let spec = SynthSpec {
            determinism: 1.5,
            ..SynthSpec::default()
        };
        assert!(generate(&spec).is_err());
    }
}
