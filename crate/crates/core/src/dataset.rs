//! Turning annotated spans into labelled task instances with context windows.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::synth::PlantedSpan;
use crate::corpus::Corpus;
use crate::ontology::{AttributeCategory, ConceptId, Ontology, OntologyError, RawLabel, TaskId};
use crate::windowing::{center_window, tokenize, Token, WindowError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unknown document {0}")]
    UnknownDocument(String),
    #[error("span {start}..{end} lies outside document {doc_id}")]
    SpanOutside { doc_id: String, start: usize, end: usize },
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A concept span with its attribute labels, as produced by annotation or by
/// the synthetic generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSpan {
    pub doc_id: String,
    pub patient_id: String,
    pub start: usize,
    pub end: usize,
    pub concept: ConceptId,
    pub surface: String,
    pub labels: Vec<RawLabel>,
    pub valid: bool,
}

impl From<&PlantedSpan> for AnnotatedSpan {
    fn from(p: &PlantedSpan) -> Self {
        AnnotatedSpan {
            doc_id: p.doc_id.clone(),
            patient_id: p.patient_id.clone(),
            start: p.start,
            end: p.end,
            concept: p.concept,
            surface: p.surface.clone(),
            labels: p.labels.clone(),
            valid: p.valid,
        }
    }
}

/// One (span, task, gold class) example with its token window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub patient_id: String,
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub concept: ConceptId,
    pub span_text: String,
    pub task: TaskId,
    pub class: String,
    pub window: Vec<String>,
    pub span_range: Range<usize>,
}

impl LabeledInstance {
    /// Stratification label `task=class`.
    pub fn label_key(&self) -> String {
        format!("{}={}", self.task, self.class)
    }
}

/// Consolidated `(task, class)` pairs for one span. Invalid spans contribute
/// only span-validity examples; valid spans contribute every stated attribute
/// plus a "Valid" example where span validity is modelled.
pub fn span_targets<'o>(
    ontology: &'o Ontology,
    span: &AnnotatedSpan,
) -> Result<Vec<(TaskId, &'o str)>, OntologyError> {
    let mut out = Vec::new();
    if span.valid {
        for l in &span.labels {
            if l.category == AttributeCategory::SpanValidity {
                continue;
            }
            ontology.check_raw(l)?;
            if let Some(t) = ontology.consolidate(l)? {
                out.push(t);
            }
        }
    }
    let validity = RawLabel {
        concept: span.concept,
        category: AttributeCategory::SpanValidity,
        value: if span.valid { "Valid" } else { "Invalid" }.to_string(),
        negated: false,
    };
    if let Some(t) = ontology.consolidate(&validity)? {
        out.push(t);
    }
    Ok(out)
}

/// Builds instances for every span, windowing each within its rendered note.
pub fn build_instances(
    corpus: &Corpus,
    spans: &[AnnotatedSpan],
    ontology: &Ontology,
    max_window: usize,
) -> Result<Vec<LabeledInstance>, DatasetError> {
    let mut docs: HashMap<&str, Vec<Token>> = HashMap::new();
    let mut lengths: HashMap<&str, usize> = HashMap::new();
    for (_, enc) in corpus.documents() {
        let text = enc.note.render().text;
        lengths.insert(&enc.note.doc_id, text.len());
        docs.insert(&enc.note.doc_id, tokenize(&text));
    }
    let mut out = Vec::new();
    for span in spans {
        let tokens = docs
            .get(span.doc_id.as_str())
            .ok_or_else(|| DatasetError::UnknownDocument(span.doc_id.clone()))?;
        if span.start >= span.end || span.end > lengths[span.doc_id.as_str()] {
            return Err(DatasetError::SpanOutside {
                doc_id: span.doc_id.clone(),
                start: span.start,
                end: span.end,
            });
        }
        let targets = span_targets(ontology, span)?;
        if targets.is_empty() {
            continue;
        }
        let w = center_window(tokens, span.start..span.end, max_window)?;
        let window: Vec<String> = w.tokens.into_iter().map(|t| t.surface).collect();
        for (task, class) in targets {
            out.push(LabeledInstance {
                patient_id: span.patient_id.clone(),
                doc_id: span.doc_id.clone(),
                start: span.start,
                end: span.end,
                concept: span.concept,
                span_text: span.surface.clone(),
                task,
                class: class.to_string(),
                window: window.clone(),
                span_range: w.span_range.clone(),
            });
        }
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut w: W, items: &[T]) -> Result<(), DatasetError> {
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| DatasetError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(r: R) -> Result<Vec<T>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn save_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<(), DatasetError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_jsonl(&mut w, items)?;
    w.flush()?;
    Ok(())
}

pub fn load_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>, DatasetError> {
    read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Instances grouped by task in task order.
pub fn by_task(instances: &[LabeledInstance]) -> std::collections::BTreeMap<TaskId, Vec<&LabeledInstance>> {
    let mut out: std::collections::BTreeMap<TaskId, Vec<&LabeledInstance>> = Default::default();
    for i in instances {
        out.entry(i.task).or_default().push(i);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{generate_corpus, SynthConfig};

    #[test]
    fn invalid_spans_only_feed_validity_tasks() {
        let o = Ontology::default_ontology();
        let mut span = AnnotatedSpan {
            doc_id: "d".into(),
            patient_id: "p".into(),
            start: 0,
            end: 2,
            concept: ConceptId::B1,
            surface: "ME".into(),
            labels: vec![o.raw_label(ConceptId::B1, AttributeCategory::Laterality, "OU", false).unwrap()],
            valid: true,
        };
        assert_eq!(
            span_targets(&o, &span).unwrap(),
            [(TaskId::LateralityAll, "OU"), (TaskId::SpanValidityMe, "Valid")]
        );
        span.valid = false;
        assert_eq!(span_targets(&o, &span).unwrap(), [(TaskId::SpanValidityMe, "Invalid")]);
        span.concept = ConceptId::G3;
        span.labels.clear();
        assert!(span_targets(&o, &span).unwrap().is_empty());
    }

    #[test]
    fn builds_windows_around_synthetic_spans() {
        let o = Ontology::default_ontology();
        let cfg = SynthConfig {
            n_patients: 10,
            ..SynthConfig::default()
        };
        let (corpus, truth) = generate_corpus(&cfg, &o).unwrap();
        let spans: Vec<AnnotatedSpan> = truth.spans.iter().map(AnnotatedSpan::from).collect();
        let inst = build_instances(&corpus, &spans, &o, 32).unwrap();
        assert!(!inst.is_empty());
        for i in &inst {
            assert!(i.window.len() <= 32);
            let joined = i.window[i.span_range.clone()].concat();
            assert_eq!(joined, i.span_text.split_whitespace().collect::<String>());
        }
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &inst).unwrap();
        let back: Vec<LabeledInstance> = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, inst);
    }
}
