//! Multi-choice accuracy, overall and per question type, with plain-text,
//! CSV and JSON result tables.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use num_traits::{FromPrimitive, Num};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, QuestionType, Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::reasoner::Prediction;

/// Column headers of result tables, in order.
pub const COLUMNS: [&str; 5] = ["Vis.", "Text.", "Temp.", "Know.", "All"];
/// Placeholder for a type with no instances.
pub const EMPTY_CELL: &str = "—";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TypeCount {
    pub correct: usize,
    pub count: usize,
}

impl TypeCount {
    pub fn accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.correct as f64 / self.count as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub instance_id: String,
    pub qtype: QuestionType,
    pub predicted_index: usize,
    pub gold_index: usize,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_type_accuracy: BTreeMap<QuestionType, Option<f64>>,
    pub counts: BTreeMap<QuestionType, TypeCount>,
    pub overall_accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub examples: Vec<ExampleOutcome>,
}

impl EvalReport {
    /// Aggregates outcomes. An empty outcome list has overall accuracy 0.
    pub fn from_outcomes(examples: Vec<ExampleOutcome>) -> Self {
        let mut counts: BTreeMap<QuestionType, TypeCount> =
            QuestionType::ALL.iter().map(|&t| (t, TypeCount::default())).collect();
        for e in &examples {
            let c = counts.get_mut(&e.qtype).expect("all types present");
            c.count += 1;
            c.correct += usize::from(e.correct);
        }
        let correct = counts.values().map(|c| c.correct).sum();
        let total = counts.values().map(|c| c.count).sum();
        Self {
            per_type_accuracy: counts.iter().map(|(&t, c)| (t, c.accuracy())).collect(),
            counts,
            overall_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            correct,
            total,
            examples,
        }
    }

    pub fn accuracy_of(&self, qtype: QuestionType) -> Option<f64> {
        self.per_type_accuracy.get(&qtype).copied().flatten()
    }

    /// Table row values: the four types, then overall.
    pub fn row(&self) -> [Option<f64>; 5] {
        let mut out = [None; 5];
        for (slot, t) in out.iter_mut().zip(QuestionType::ALL) {
            *slot = self.accuracy_of(t);
        }
        out[4] = (self.total > 0).then_some(self.overall_accuracy);
        out
    }

    /// Both sides of `Σ_t acc_t · count_t = overall · total`, computed in
    /// `T`. Exact for rational `T`.
    pub fn decomposition<T: Num + FromPrimitive + Copy>(&self) -> (T, T) {
        let of = |n: usize| T::from_usize(n).expect("count representable");
        let weighted = self
            .counts
            .values()
            .filter(|c| c.count > 0)
            .fold(T::zero(), |acc, c| acc + of(c.correct) / of(c.count) * of(c.count));
        let overall = if self.total == 0 {
            T::zero()
        } else {
            of(self.correct) / of(self.total) * of(self.total)
        };
        (weighted, overall)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::MalformedRecord {
            file: "<report>".into(),
            line: 1,
            field: "<record>".into(),
            message: e.to_string(),
        })
    }
}

/// Scores `predictions` against the gold answers of split `which`.
pub fn evaluate(
    predictions: &[Prediction],
    corpus: &Corpus,
    split: &SplitAssignment,
    which: Split,
) -> Result<EvalReport> {
    let expected: Vec<_> = corpus.instances_in(split, &[which]).collect();
    let expected_ids: HashSet<&str> = expected.iter().map(|q| q.id.as_str()).collect();
    let mut by_id: HashMap<&str, &Prediction> = HashMap::new();
    let mut extra = Vec::new();
    for p in predictions {
        if !expected_ids.contains(p.instance_id.as_str()) || by_id.insert(&p.instance_id, p).is_some() {
            extra.push(p.instance_id.clone());
        }
    }
    let missing: Vec<String> = expected
        .iter()
        .filter(|q| !by_id.contains_key(q.id.as_str()))
        .map(|q| q.id.clone())
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Coverage { missing, extra });
    }
    let examples = expected
        .iter()
        .map(|q| {
            let p = by_id[q.id.as_str()];
            ExampleOutcome {
                instance_id: q.id.clone(),
                qtype: q.qtype,
                predicted_index: p.predicted_index,
                gold_index: q.gold_index,
                correct: p.predicted_index == q.gold_index,
            }
        })
        .collect();
    Ok(EvalReport::from_outcomes(examples))
}

/// Overall accuracy of the knowledge-using run minus that of the ablated run.
pub fn compare_knowledge_gain(report_vsqa: &EvalReport, report_full: &EvalReport) -> f64 {
    report_full.overall_accuracy - report_vsqa.overall_accuracy
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| EMPTY_CELL.to_string(), |x| format!("{x:.3}"))
}

/// Aligned plain-text table, one row per report in the given order.
pub fn emit_table(reports: &IndexMap<String, EvalReport>) -> String {
    let name_w = reports
        .keys()
        .map(|k| k.chars().count())
        .chain(std::iter::once("Model".len()))
        .max()
        .unwrap_or(5);
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "Model");
    for c in COLUMNS {
        let _ = write!(out, "  {c:>6}");
    }
    out.push('\n');
    for (name, report) in reports {
        let _ = write!(out, "{name:<name_w$}");
        for v in report.row() {
            // right-align by characters; the placeholder is multi-byte
            let s = cell(v);
            let pad = 6usize.saturating_sub(s.chars().count());
            let _ = write!(out, "  {}{s}", " ".repeat(pad));
        }
        out.push('\n');
    }
    out
}

/// Same rows as [`emit_table`] in CSV; empty types are blank cells.
pub fn emit_csv(reports: &IndexMap<String, EvalReport>) -> String {
    let mut out = String::from("model");
    for c in COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (name, report) in reports {
        out.push_str(&csv_field(name));
        for v in report.row() {
            out.push(',');
            if let Some(x) = v {
                let _ = write!(out, "{x:.3}");
            }
        }
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub type TableRow = (String, [Option<f64>; 5]);

/// Reads back a table produced by [`emit_table`].
pub fn parse_table(text: &str) -> Result<Vec<TableRow>> {
    let bad = |line: usize, message: String| Error::MalformedRecord {
        file: "<table>".into(),
        line,
        field: "row".into(),
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) => {
            let cols: Vec<&str> = header.split_whitespace().collect();
            if cols.len() != 6 || cols[0] != "Model" || cols[1..] != COLUMNS {
                return Err(bad(1, format!("unexpected header `{header}`")));
            }
        }
        None => return Err(bad(1, "missing header".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() < 6 {
            return Err(bad(i + 1, format!("expected a name and 5 values in `{line}`")));
        }
        let (name, vals) = parts.split_at(parts.len() - 5);
        let mut values = [None; 5];
        for (slot, v) in values.iter_mut().zip(vals) {
            if *v != EMPTY_CELL {
                *slot = Some(v.parse::<f64>().map_err(|e| bad(i + 1, format!("`{v}`: {e}")))?);
            }
        }
        rows.push((name.join(" "), values));
    }
    Ok(rows)
}
