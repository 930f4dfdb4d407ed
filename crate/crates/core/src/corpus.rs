//! Dataset schema, JSONL bundle I/O, validation and episode-disjoint splits.
//!
//! A bundle is a directory holding `instances.jsonl` (one question per line)
//! and `clips.jsonl` (one clip with its subtitles and per-frame signals per
//! line). Both are UTF-8 with LF line endings.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const INSTANCES_FILE: &str = "instances.jsonl";
pub const CLIPS_FILE: &str = "clips.jsonl";
pub const NUM_CANDIDATES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Visual,
    Textual,
    Temporal,
    Knowledge,
}

impl QuestionType {
    pub const ALL: [QuestionType; 4] = [
        QuestionType::Visual,
        QuestionType::Textual,
        QuestionType::Temporal,
        QuestionType::Knowledge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::Visual => "visual",
            QuestionType::Textual => "textual",
            QuestionType::Temporal => "temporal",
            QuestionType::Knowledge => "knowledge",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One annotated multi-choice question about a clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionInstance {
    pub id: String,
    pub episode_id: String,
    pub clip_id: String,
    pub question: String,
    pub candidates: Vec<String>,
    pub gold_index: usize,
    pub qtype: QuestionType,
    /// Annotated background knowledge; empty only in knowledge-free corpora.
    pub knowledge_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub feature_vector: Vec<f64>,
    pub concept_labels: Vec<String>,
    pub characters_present: Vec<String>,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipAssets {
    pub clip_id: String,
    pub subtitles: Vec<String>,
    pub frames: Vec<Frame>,
}

impl ClipAssets {
    pub fn feature_dim(&self) -> usize {
        self.frames.first().map_or(0, |f| f.feature_vector.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub instances: Vec<QuestionInstance>,
    pub clips: IndexMap<String, ClipAssets>,
    pub character_vocab: Vec<String>,
    pub concept_vocab: Vec<String>,
}

impl Corpus {
    /// Assembles a corpus and derives the character and concept vocabularies
    /// in first-occurrence order over the clips. Does not validate.
    pub fn new(instances: Vec<QuestionInstance>, clips: Vec<ClipAssets>) -> Self {
        let mut characters = IndexMap::<String, ()>::new();
        let mut concepts = IndexMap::<String, ()>::new();
        for frame in clips.iter().flat_map(|c| &c.frames) {
            for name in &frame.characters_present {
                characters.entry(name.clone()).or_default();
            }
            for label in &frame.concept_labels {
                concepts.entry(label.clone()).or_default();
            }
        }
        Self {
            instances,
            clips: clips.into_iter().map(|c| (c.clip_id.clone(), c)).collect(),
            character_vocab: characters.into_keys().collect(),
            concept_vocab: concepts.into_keys().collect(),
        }
    }

    pub fn clip(&self, clip_id: &str) -> Option<&ClipAssets> {
        self.clips.get(clip_id)
    }

    pub fn instance(&self, id: &str) -> Option<&QuestionInstance> {
        self.instances.iter().find(|q| q.id == id)
    }

    /// Common frame feature dimension (0 for a corpus without frames).
    pub fn feature_dim(&self) -> usize {
        self.clips.values().map(ClipAssets::feature_dim).find(|&d| d > 0).unwrap_or(0)
    }

    pub fn episode_ids(&self) -> BTreeSet<&str> {
        self.instances.iter().map(|q| q.episode_id.as_str()).collect()
    }

    /// Instances whose episode is assigned to one of `splits`, in corpus order.
    pub fn instances_in<'a>(
        &'a self,
        assignment: &'a SplitAssignment,
        splits: &[Split],
    ) -> impl Iterator<Item = &'a QuestionInstance> + 'a {
        let splits = splits.to_vec();
        self.instances.iter().filter(move |q| {
            assignment
                .split_of(&q.episode_id)
                .is_some_and(|s| splits.contains(&s))
        })
    }
}

// ---------------------------------------------------------------------------
// loading

fn malformed(file: &str, line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::MalformedRecord {
        file: file.to_string(),
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

struct Record<'a> {
    file: &'a str,
    line: usize,
    obj: Map<String, Value>,
}

impl<'a> Record<'a> {
    fn parse(file: &'a str, line: usize, text: &str, allowed: &[&str]) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| malformed(file, line, "<record>", format!("invalid JSON: {e}")))?;
        let Value::Object(obj) = value else {
            return Err(malformed(file, line, "<record>", "expected a JSON object"));
        };
        if let Some(extra) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(malformed(file, line, extra, "unexpected field"));
        }
        Ok(Self { file, line, obj })
    }

    fn err(&self, field: &str, message: impl Into<String>) -> Error {
        malformed(self.file, self.line, field, message)
    }

    fn field(&self, name: &str) -> Result<&Value> {
        self.obj.get(name).ok_or_else(|| self.err(name, "missing"))
    }

    fn string(&self, name: &str) -> Result<String> {
        self.field(name)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| self.err(name, "expected a string"))
    }

    fn strings(&self, name: &str) -> Result<Vec<String>> {
        strings_of(self.field(name)?).ok_or_else(|| self.err(name, "expected an array of strings"))
    }
}

fn strings_of(v: &Value) -> Option<Vec<String>> {
    v.as_array()?
        .iter()
        .map(|s| s.as_str().map(str::to_string))
        .collect()
}

const INSTANCE_FIELDS: [&str; 8] = [
    "id",
    "episode_id",
    "clip_id",
    "question",
    "candidates",
    "gold_index",
    "qtype",
    "knowledge_text",
];
const CLIP_FIELDS: [&str; 3] = ["clip_id", "subtitles", "frames"];
const FRAME_FIELDS: [&str; 4] = [
    "feature_vector",
    "concept_labels",
    "characters_present",
    "caption",
];

fn parse_instance(rec: &Record<'_>) -> Result<QuestionInstance> {
    let id = rec.string("id")?;
    if id.trim().is_empty() {
        return Err(rec.err("id", "empty id"));
    }
    let candidates = rec.strings("candidates")?;
    if candidates.len() != NUM_CANDIDATES {
        return Err(rec.err(
            "candidates",
            format!("expected {NUM_CANDIDATES} candidates, found {}", candidates.len()),
        ));
    }
    if let Some(i) = candidates.iter().position(|c| c.trim().is_empty()) {
        return Err(rec.err("candidates", format!("candidate {i} is blank")));
    }
    let gold_index = rec
        .field("gold_index")?
        .as_u64()
        .ok_or_else(|| rec.err("gold_index", "expected a non-negative integer"))?;
    if gold_index >= NUM_CANDIDATES as u64 {
        return Err(rec.err("gold_index", format!("{gold_index} is outside 0..=3")));
    }
    let qtype_raw = rec.string("qtype")?;
    let qtype = QuestionType::parse(&qtype_raw)
        .ok_or_else(|| rec.err("qtype", format!("unknown question type `{qtype_raw}`")))?;
    Ok(QuestionInstance {
        id,
        episode_id: rec.string("episode_id")?,
        clip_id: rec.string("clip_id")?,
        question: rec.string("question")?,
        candidates,
        gold_index: gold_index as usize,
        qtype,
        knowledge_text: rec.string("knowledge_text")?,
    })
}

fn parse_clip(rec: &Record<'_>) -> Result<ClipAssets> {
    let clip_id = rec.string("clip_id")?;
    let subtitles = rec.strings("subtitles")?;
    let raw_frames = rec
        .field("frames")?
        .as_array()
        .ok_or_else(|| rec.err("frames", "expected an array"))?;
    if raw_frames.is_empty() {
        return Err(rec.err("frames", "clip has no frames"));
    }
    let mut frames = Vec::with_capacity(raw_frames.len());
    for (i, raw) in raw_frames.iter().enumerate() {
        let Value::Object(obj) = raw else {
            return Err(rec.err("frames", format!("frame {i} is not an object")));
        };
        if let Some(extra) = obj.keys().find(|k| !FRAME_FIELDS.contains(&k.as_str())) {
            return Err(rec.err(extra, format!("unexpected field in frame {i}")));
        }
        let get = |name: &str| {
            obj.get(name)
                .ok_or_else(|| rec.err(name, format!("missing in frame {i}")))
        };
        let feature_vector = get("feature_vector")?
            .as_array()
            .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
            .ok_or_else(|| rec.err("feature_vector", format!("frame {i}: expected numbers")))?;
        let concept_labels = strings_of(get("concept_labels")?)
            .ok_or_else(|| rec.err("concept_labels", format!("frame {i}: expected strings")))?;
        let characters_present = strings_of(get("characters_present")?).ok_or_else(|| {
            rec.err("characters_present", format!("frame {i}: expected strings"))
        })?;
        let caption = get("caption")?
            .as_str()
            .ok_or_else(|| rec.err("caption", format!("frame {i}: expected a string")))?
            .to_string();
        frames.push(Frame {
            feature_vector,
            concept_labels,
            characters_present,
            caption,
        });
    }
    let dim = frames[0].feature_vector.len();
    if dim == 0 {
        return Err(rec.err("feature_vector", "feature dimension must be positive"));
    }
    if let Some(i) = frames.iter().position(|f| f.feature_vector.len() != dim) {
        return Err(rec.err(
            "feature_vector",
            format!("frame {i} has dimension {} but frame 0 has {dim}", frames[i].feature_vector.len()),
        ));
    }
    Ok(ClipAssets {
        clip_id,
        subtitles,
        frames,
    })
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .split('\n')
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

/// Loads a dataset bundle directory. Records are checked against the type
/// invariants as they are read; cross-record checks (unique ids, consistent
/// feature dimension, resolvable clip references) run afterwards.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();

    let mut clips = Vec::new();
    let mut clip_ids = HashSet::new();
    let mut corpus_dim: Option<usize> = None;
    for (line, text) in read_lines(&dir.join(CLIPS_FILE))? {
        let rec = Record::parse(CLIPS_FILE, line, &text, &CLIP_FIELDS)?;
        let clip = parse_clip(&rec)?;
        if !clip_ids.insert(clip.clip_id.clone()) {
            return Err(rec.err("clip_id", format!("duplicate clip id `{}`", clip.clip_id)));
        }
        let dim = clip.feature_dim();
        match corpus_dim {
            Some(d) if d != dim => {
                return Err(rec.err(
                    "feature_vector",
                    format!("dimension {dim} differs from corpus dimension {d}"),
                ))
            }
            _ => corpus_dim = Some(dim),
        }
        clips.push(clip);
    }

    let mut instances = Vec::new();
    let mut ids = HashSet::new();
    for (line, text) in read_lines(&dir.join(INSTANCES_FILE))? {
        let rec = Record::parse(INSTANCES_FILE, line, &text, &INSTANCE_FIELDS)?;
        let inst = parse_instance(&rec)?;
        if !ids.insert(inst.id.clone()) {
            return Err(rec.err("id", format!("duplicate instance id `{}`", inst.id)));
        }
        instances.push(inst);
    }

    let mut dangling: Vec<String> = Vec::new();
    for q in &instances {
        if !clip_ids.contains(&q.clip_id) && !dangling.contains(&q.clip_id) {
            dangling.push(q.clip_id.clone());
        }
    }
    if !dangling.is_empty() {
        return Err(Error::DanglingClips(dangling));
    }
    Ok(Corpus::new(instances, clips))
}

fn write_jsonl<S: Serialize>(path: &Path, records: impl Iterator<Item = S>) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, &r).expect("record serializes");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Writes the corpus as a bundle directory, creating it if needed.
pub fn save_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join(INSTANCES_FILE), corpus.instances.iter())?;
    write_jsonl(&dir.join(CLIPS_FILE), corpus.clips.values())
}

// ---------------------------------------------------------------------------
// validation

/// One broken invariant. `subject` is the instance id (or clip id for
/// clip-level rules) and `field` names the violated field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub subject: String,
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.subject, self.field, self.message)
    }
}

pub fn validate_corpus(corpus: &Corpus) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |subject: &str, field: &'static str, message: String| {
        out.push(Violation {
            subject: subject.to_string(),
            field,
            message,
        })
    };

    let mut seen = HashSet::new();
    for q in &corpus.instances {
        if q.id.trim().is_empty() {
            push(&q.id, "id", "empty id".into());
        } else if !seen.insert(q.id.as_str()) {
            push(&q.id, "id", "duplicate id".into());
        }
        if q.candidates.len() != NUM_CANDIDATES {
            push(&q.id, "candidates", format!("{} candidates, expected 4", q.candidates.len()));
        } else if q.candidates.iter().any(|c| c.trim().is_empty()) {
            push(&q.id, "candidates", "blank candidate".into());
        }
        if q.gold_index >= NUM_CANDIDATES {
            push(&q.id, "gold_index", format!("{} outside 0..=3", q.gold_index));
        }
        if !corpus.clips.contains_key(&q.clip_id) {
            push(&q.id, "clip_id", format!("unresolved clip `{}`", q.clip_id));
        }
    }

    let dim = corpus.feature_dim();
    for (key, clip) in &corpus.clips {
        if key != &clip.clip_id {
            push(&clip.clip_id, "clip_id", format!("stored under key `{key}`"));
        }
        if clip.frames.is_empty() {
            push(&clip.clip_id, "frames", "clip has no frames".into());
        }
        for (i, frame) in clip.frames.iter().enumerate() {
            if frame.feature_vector.is_empty() || frame.feature_vector.len() != dim {
                push(
                    &clip.clip_id,
                    "feature_vector",
                    format!("frame {i} has dimension {}, corpus uses {dim}", frame.feature_vector.len()),
                );
            } else if frame.feature_vector.iter().any(|v| !v.is_finite()) {
                push(&clip.clip_id, "feature_vector", format!("frame {i} has non-finite values"));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// splits

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Episode → split mapping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    episodes: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn from_map(episodes: BTreeMap<String, Split>) -> Self {
        Self { episodes }
    }

    pub fn split_of(&self, episode_id: &str) -> Option<Split> {
        self.episodes.get(episode_id).copied()
    }

    pub fn episodes_in(&self, split: Split) -> Vec<&str> {
        self.episodes
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(e, _)| e.as_str())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Split)> {
        self.episodes.iter().map(|(e, s)| (e.as_str(), *s))
    }
}

/// Per-split episode counts by largest remainder; each count is within one
/// episode of `ratio · n`.
fn split_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let ideal = ratios.map(|r| r * n as f64);
    let mut counts = ideal.map(|x| x.floor() as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut remaining = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    counts
}

/// Shuffles the sorted set of episode ids with `seed` and assigns the first
/// block to train, the next to validation and the rest to test.
pub fn split_by_episode(corpus: &Corpus, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::InvalidRatios(format!("{ratios:?}: every ratio must be positive")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRatios(format!("{ratios:?} sums to {total}, expected 1")));
    }
    let mut episodes: Vec<&str> = corpus.episode_ids().into_iter().collect();
    if episodes.len() < 3 {
        return Err(Error::TooFewEpisodes(episodes.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    episodes.shuffle(&mut rng);
    let [n_train, n_val, _] = split_counts(episodes.len(), ratios);
    let map = episodes
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (e.to_string(), split)
        })
        .collect();
    Ok(SplitAssignment { episodes: map })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn instance(id: &str, episode: &str, clip: &str) -> QuestionInstance {
        QuestionInstance {
            id: id.into(),
            episode_id: episode.into(),
            clip_id: clip.into(),
            question: "Why did Alice leave early?".into(),
            candidates: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            gold_index: 0,
            qtype: QuestionType::Knowledge,
            knowledge_text: "Alice had a train to catch".into(),
        }
    }

    pub(crate) fn clip(id: &str) -> ClipAssets {
        ClipAssets {
            clip_id: id.into(),
            subtitles: vec!["hello".into()],
            frames: vec![Frame {
                feature_vector: vec![0.5, -1.0],
                concept_labels: vec!["sofa".into()],
                characters_present: vec!["alice".into()],
                caption: "two men talk".into(),
            }],
        }
    }

    #[test]
    fn split_counts_stay_within_one() {
        for n in 3..60 {
            for ratios in [[0.7, 0.15, 0.15], [1.0 / 3.0; 3], [0.5, 0.25, 0.25], [0.9, 0.05, 0.05]] {
                let c = split_counts(n, ratios);
                assert_eq!(c.iter().sum::<usize>(), n);
                for i in 0..3 {
                    assert!((c[i] as f64 - ratios[i] * n as f64).abs() < 1.0, "{n} {ratios:?} {c:?}");
                }
            }
        }
    }

    #[test]
    fn validate_flags_gold_index() {
        let mut q = instance("q1", "e1", "c1");
        q.gold_index = 5;
        let corpus = Corpus::new(vec![q], vec![clip("c1")]);
        let v = validate_corpus(&corpus);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].subject, "q1");
        assert_eq!(v[0].field, "gold_index");
    }

    #[test]
    fn vocabularies_follow_first_occurrence() {
        let mut c2 = clip("c2");
        c2.frames[0].characters_present = vec!["bob".into(), "alice".into()];
        let corpus = Corpus::new(vec![], vec![clip("c1"), c2]);
        assert_eq!(corpus.character_vocab, ["alice", "bob"]);
        assert_eq!(corpus.concept_vocab, ["sofa"]);
    }

    #[test]
    fn ratios_must_be_positive_and_sum_to_one() {
        let corpus = Corpus::new(
            vec![instance("a", "e1", "c"), instance("b", "e2", "c"), instance("c", "e3", "c")],
            vec![clip("c")],
        );
        assert!(matches!(
            split_by_episode(&corpus, [0.5, 0.5, 0.0], 1),
            Err(Error::InvalidRatios(_))
        ));
        assert!(matches!(
            split_by_episode(&corpus, [0.5, 0.4, 0.2], 1),
            Err(Error::InvalidRatios(_))
        ));
    }
}
