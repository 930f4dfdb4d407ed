use std::collections::BTreeSet;
use std::fs;

use proptest::prelude::*;
use rock_core::{
    generate, load_corpus, save_corpus, split_by_episode, validate_corpus, ClipAssets, Corpus, Error, Frame,
    QuestionInstance, QuestionType, Split, SynthSpec,
};

fn instance(id: &str, episode: &str, clip: &str) -> QuestionInstance {
    QuestionInstance {
        id: id.into(),
        episode_id: episode.into(),
        clip_id: clip.into(),
        question: "where is the key".into(),
        candidates: vec!["desk".into(), "shelf".into(), "car".into(), "bag".into()],
        gold_index: 2,
        qtype: QuestionType::Visual,
        knowledge_text: "the key was left in the car".into(),
    }
}

fn clip(id: &str) -> ClipAssets {
    ClipAssets {
        clip_id: id.into(),
        subtitles: vec!["where did you put it".into()],
        frames: vec![Frame {
            feature_vector: vec![0.25, -1.5, 3.0],
            concept_labels: vec!["desk".into()],
            characters_present: vec!["alice".into()],
            caption: "a woman searches a desk".into(),
        }],
    }
}

const MINIMAL_INSTANCE: &str = r#"{"id":"q1","episode_id":"e1","clip_id":"c1","question":"where is the key","candidates":["desk","shelf","car","bag"],"gold_index":2,"qtype":"visual","knowledge_text":"the key was left in the car"}"#;
const MINIMAL_CLIP: &str = r#"{"clip_id":"c1","subtitles":["where did you put it"],"frames":[{"feature_vector":[0.25,-1.5,3.0],"concept_labels":["desk"],"characters_present":["alice"],"caption":"a woman searches a desk"}]}"#;

fn write_bundle(instances: &[&str], clips: &[&str]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("instances.jsonl"), instances.join("\n") + "\n").unwrap();
    fs::write(dir.path().join("clips.jsonl"), clips.join("\n") + "\n").unwrap();
    dir
}

fn synthetic(n_episodes: usize, seed: u64) -> Corpus {
    let spec = SynthSpec {
        n_episodes,
        clips_per_episode: 2,
        questions_per_clip: 2,
        seed,
        ..SynthSpec::default()
    };
    generate(&spec).unwrap().0
}

#[test]
fn minimal_bundle_loads() {
    let dir = write_bundle(&[MINIMAL_INSTANCE], &[MINIMAL_CLIP]);
    let corpus = load_corpus(dir.path()).unwrap();
    assert_eq!(corpus.instances.len(), 1);
    assert_eq!(corpus.instances[0], instance("q1", "e1", "c1"));
    assert_eq!(corpus.clip("c1"), Some(&clip("c1")));
    assert_eq!(corpus.character_vocab, ["alice"]);
    assert_eq!(corpus.concept_vocab, ["desk"]);
}

#[test]
fn three_candidates_is_malformed() {
    let bad = MINIMAL_INSTANCE.replace(r#""desk","shelf","car","bag""#, r#""desk","shelf","car""#);
    let dir = write_bundle(&[MINIMAL_INSTANCE.replace("q1", "q0").as_str(), &bad], &[MINIMAL_CLIP]);
    match load_corpus(dir.path()).unwrap_err() {
        Error::MalformedRecord { line, field, .. } => {
            assert_eq!(line, 2);
            assert_eq!(field, "candidates");
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn gold_index_out_of_range_is_malformed() {
    let bad = MINIMAL_INSTANCE.replace(r#""gold_index":2"#, r#""gold_index":4"#);
    let dir = write_bundle(&[&bad], &[MINIMAL_CLIP]);
    let err = load_corpus(dir.path()).unwrap_err();
    assert!(matches!(err, Error::MalformedRecord { ref field, .. } if field == "gold_index"), "{err}");
}

#[test]
fn dangling_clips_are_listed() {
    let other = MINIMAL_INSTANCE.replace(r#""id":"q1""#, r#""id":"q2""#).replace(r#""clip_id":"c1""#, r#""clip_id":"c9""#);
    let dir = write_bundle(&[MINIMAL_INSTANCE, &other], &[MINIMAL_CLIP]);
    match load_corpus(dir.path()).unwrap_err() {
        Error::DanglingClips(ids) => assert_eq!(ids, ["c9"]),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn missing_bundle_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_corpus(dir.path().join("nope")), Err(Error::Io { .. })));
}

#[test]
fn synthetic_bundle_round_trips() {
    let spec = SynthSpec {
        n_episodes: 10,
        clips_per_episode: 5,
        questions_per_clip: 4,
        seed: 11,
        ..SynthSpec::default()
    };
    let (corpus, _) = generate(&spec).unwrap();
    assert_eq!(corpus.instances.len(), 200);
    let dir = tempfile::tempdir().unwrap();
    save_corpus(&corpus, dir.path()).unwrap();
    let back = load_corpus(dir.path()).unwrap();
    assert_eq!(back, corpus);
    assert!(validate_corpus(&back).is_empty());
}

#[test]
fn three_episodes_split_one_each() {
    let corpus = synthetic(3, 0);
    let third = 1.0 / 3.0;
    let split = split_by_episode(&corpus, [third, third, third], 7).unwrap();
    for s in Split::ALL {
        assert_eq!(split.episodes_in(s).len(), 1, "{s}");
    }
    assert_eq!(split, split_by_episode(&corpus, [third, third, third], 7).unwrap());
}

#[test]
fn twenty_episodes_follow_ratios() {
    let corpus = synthetic(20, 0);
    let split = split_by_episode(&corpus, [0.7, 0.15, 0.15], 1).unwrap();
    let counts: Vec<usize> = Split::ALL.iter().map(|&s| split.episodes_in(s).len()).collect();
    for (got, want) in counts.iter().zip([14usize, 3, 3]) {
        assert!(got.abs_diff(want) <= 1, "{counts:?}");
    }
    assert_eq!(counts.iter().sum::<usize>(), 20);
}

#[test]
fn split_errors() {
    let corpus = synthetic(2, 0);
    assert!(matches!(split_by_episode(&corpus, [0.6, 0.2, 0.2], 0), Err(Error::TooFewEpisodes(2))));
    let corpus = synthetic(5, 0);
    assert!(matches!(split_by_episode(&corpus, [0.6, 0.4, 0.0], 0), Err(Error::InvalidRatios(_))));
    assert!(matches!(split_by_episode(&corpus, [0.6, 0.2, 0.1], 0), Err(Error::InvalidRatios(_))));
}

#[test]
fn valid_corpus_has_no_violations() {
    let corpus = Corpus::new(vec![instance("q1", "e1", "c1")], vec![clip("c1")]);
    assert!(validate_corpus(&corpus).is_empty());
}

#[test]
fn six_broken_invariants_six_descriptors() {
    let ok = |id: &str| instance(id, "e1", "c1");
    let mut empty_id = ok("");
    empty_id.id = "  ".into();
    let dup = ok("q1");
    let mut short = ok("q3");
    short.candidates.pop();
    let mut blank = ok("q4");
    blank.candidates[1] = "   ".into();
    let mut gold = ok("q5");
    gold.gold_index = 7;
    let dangling = instance("q6", "e1", "c404");
    let corpus = Corpus::new(vec![ok("q1"), empty_id, dup, short, blank, gold, dangling], vec![clip("c1")]);

    let got: BTreeSet<(String, &str)> = validate_corpus(&corpus)
        .into_iter()
        .map(|v| (v.subject, v.field))
        .collect();
    let want: BTreeSet<(String, &str)> = [
        ("  ", "id"),
        ("q1", "id"),
        ("q3", "candidates"),
        ("q4", "candidates"),
        ("q5", "gold_index"),
        ("q6", "clip_id"),
    ]
    .into_iter()
    .map(|(s, f)| (s.to_string(), f))
    .collect();
    assert_eq!(got, want);
    assert_eq!(validate_corpus(&corpus).len(), 6);
}

#[test]
fn clip_level_violations() {
    let mut no_frames = clip("c2");
    no_frames.frames.clear();
    let mut wrong_dim = clip("c3");
    wrong_dim.frames[0].feature_vector.push(1.0);
    let corpus = Corpus::new(
        vec![instance("q1", "e1", "c1"), instance("q2", "e1", "c2"), instance("q3", "e1", "c3")],
        vec![clip("c1"), no_frames, wrong_dim],
    );
    let fields: Vec<(String, &str)> = validate_corpus(&corpus).into_iter().map(|v| (v.subject, v.field)).collect();
    assert_eq!(fields, [("c2".to_string(), "frames"), ("c3".to_string(), "feature_vector")]);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn splits_partition_episodes(n in 3usize..40, seed in any::<u64>(), a in 1u32..10, b in 1u32..10, c in 1u32..10) {
        let corpus = synthetic(n, seed % 7);
        let total = f64::from(a + b + c);
        let ratios = [f64::from(a) / total, f64::from(b) / total, f64::from(c) / total];
        let split = split_by_episode(&corpus, ratios, seed).unwrap();
        let sets: Vec<BTreeSet<&str>> = Split::ALL.iter().map(|&s| split.episodes_in(s).into_iter().collect()).collect();
        for i in 0..3 {
            for j in i + 1..3 {
                prop_assert!(sets[i].is_disjoint(&sets[j]));
            }
            prop_assert!((sets[i].len() as f64 - ratios[i] * n as f64).abs() <= 1.0);
        }
        let union: BTreeSet<&str> = sets.iter().flatten().copied().collect();
        prop_assert_eq!(union, corpus.episode_ids());
        prop_assert_eq!(&split, &split_by_episode(&corpus, ratios, seed).unwrap());
    }

    #[test]
    fn own_writers_round_trip_and_validate(seed in any::<u64>(), n in 1usize..6, det in 0.0f64..=1.0) {
        let spec = SynthSpec { n_episodes: n, clips_per_episode: 2, questions_per_clip: 3, determinism: det, seed, ..SynthSpec::default() };
        let (corpus, _) = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        prop_assert!(validate_corpus(&back).is_empty());
        prop_assert_eq!(back, corpus);
    }
}
