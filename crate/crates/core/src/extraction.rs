//! High-recall concept span extraction over note free text and diagnostic
//! codes.
//!
//! Free-text patterns run first; an ICD span for a concept is dropped when the
//! same document already has a free-text span for that concept. All spans
//! share the offset space of the rendered note.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, IcdEntry, IcdLocation, NoteDocument};
use crate::ontology::ConceptId;

const DEFAULT_PATTERNS: &str = include_str!("../patterns/default");

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{concept}: pattern {pattern:?} does not compile: {source}")]
    Regex {
        concept: ConceptId,
        pattern: String,
        #[source]
        source: regex::Error,
    },
    #[error("{0} has no free-text pattern")]
    MissingConcept(ConceptId),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpanSource {
    FreeText,
    IcdEncounterCodes,
    IcdProblemList,
}

impl SpanSource {
    pub fn is_icd(self) -> bool {
        self != SpanSource::FreeText
    }
}

impl From<IcdLocation> for SpanSource {
    fn from(loc: IcdLocation) -> Self {
        match loc {
            IcdLocation::EncounterCodes => SpanSource::IcdEncounterCodes,
            IcdLocation::ProblemList => SpanSource::IcdProblemList,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConceptSpan {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub concept: ConceptId,
    pub surface: String,
    pub source: SpanSource,
}

impl ConceptSpan {
    fn sort_key(&self) -> (usize, ConceptId, usize, SpanSource) {
        (self.start, self.concept, self.end, self.source)
    }
}

pub fn sort_spans(spans: &mut [ConceptSpan]) {
    spans.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternDef {
    pub regex: String,
    pub case_insensitive: bool,
}

#[derive(Debug, Clone)]
struct ConceptPatterns {
    concept: ConceptId,
    patterns: Vec<PatternDef>,
    matcher: Regex,
    icd_prefixes: Vec<String>,
}

/// Compiled free-text matchers and ICD prefixes for all 19 concepts.
#[derive(Debug, Clone)]
pub struct PatternSet {
    concepts: Vec<ConceptPatterns>,
}

impl PatternSet {
    pub fn default_set() -> PatternSet {
        PatternSet::parse(DEFAULT_PATTERNS).expect("embedded patterns are valid")
    }

    pub fn default_text() -> &'static str {
        DEFAULT_PATTERNS
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PatternSet, PatternError> {
        PatternSet::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<PatternSet, PatternError> {
        let mut blocks: BTreeMap<ConceptId, (Vec<PatternDef>, Vec<String>)> = BTreeMap::new();
        let mut current: Option<ConceptId> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = i + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let perr = |message: String| PatternError::Parse {
                line: lineno,
                message,
            };
            if let Some(id) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let id: ConceptId = id.parse().map_err(|e| perr(format!("{e}")))?;
                if blocks.contains_key(&id) {
                    return Err(perr(format!("duplicate block for {id}")));
                }
                blocks.insert(id, Default::default());
                current = Some(id);
                continue;
            }
            let concept = current.ok_or_else(|| perr("pattern outside a concept block".into()))?;
            let block = blocks.get_mut(&concept).expect("block exists");
            let (kind, rest) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| perr(format!("malformed line {line:?}")))?;
            match kind {
                "text" => {
                    let (flag, regex) = rest
                        .trim_start()
                        .split_once(char::is_whitespace)
                        .ok_or_else(|| perr("expected `text ci|cs <regex>`".into()))?;
                    let case_insensitive = match flag {
                        "ci" => true,
                        "cs" => false,
                        other => return Err(perr(format!("unknown case flag {other:?}"))),
                    };
                    let regex = regex.trim().to_string();
                    Regex::new(&regex).map_err(|source| PatternError::Regex {
                        concept,
                        pattern: regex.clone(),
                        source,
                    })?;
                    block.0.push(PatternDef {
                        regex,
                        case_insensitive,
                    });
                }
                "icd" => block.1.extend(rest.split_whitespace().map(str::to_string)),
                other => return Err(perr(format!("unknown directive {other:?}"))),
            }
        }

        let mut concepts = Vec::with_capacity(ConceptId::ALL.len());
        for &concept in ConceptId::ALL {
            let (patterns, icd_prefixes) = blocks.remove(&concept).unwrap_or_default();
            if patterns.is_empty() {
                return Err(PatternError::MissingConcept(concept));
            }
            let combined = patterns
                .iter()
                .map(|p| {
                    if p.case_insensitive {
                        format!("(?i:{})", p.regex)
                    } else {
                        format!("(?:{})", p.regex)
                    }
                })
                .collect::<Vec<_>>()
                .join("|");
            let matcher = Regex::new(&combined).map_err(|source| PatternError::Regex {
                concept,
                pattern: combined.clone(),
                source,
            })?;
            concepts.push(ConceptPatterns {
                concept,
                patterns,
                matcher,
                icd_prefixes,
            });
        }
        Ok(PatternSet { concepts })
    }

    pub fn patterns(&self, concept: ConceptId) -> &[PatternDef] {
        &self.concepts[concept.index()].patterns
    }

    pub fn icd_prefixes(&self, concept: ConceptId) -> &[String] {
        &self.concepts[concept.index()].icd_prefixes
    }

    /// Concepts whose ICD prefixes match `code`, in concept order.
    pub fn concepts_for_code(&self, code: &str) -> Vec<ConceptId> {
        self.concepts
            .iter()
            .filter(|c| c.icd_prefixes.iter().any(|p| code.starts_with(p.as_str())))
            .map(|c| c.concept)
            .collect()
    }

    /// Matches in `text`, offsets shifted by `base`.
    fn find_in(&self, doc_id: &str, text: &str, base: usize, out: &mut Vec<ConceptSpan>) {
        for cp in &self.concepts {
            for m in cp.matcher.find_iter(text) {
                if m.start() == m.end() {
                    continue;
                }
                out.push(ConceptSpan {
                    doc_id: doc_id.to_string(),
                    start: base + m.start(),
                    end: base + m.end(),
                    concept: cp.concept,
                    surface: m.as_str().to_string(),
                    source: SpanSource::FreeText,
                });
            }
        }
    }

    /// All free-text matches, sorted by (start, concept). Spans of different
    /// concepts may overlap.
    pub fn extract_free_text(&self, doc_id: &str, text: &str) -> Vec<ConceptSpan> {
        let mut out = Vec::new();
        self.find_in(doc_id, text, 0, &mut out);
        sort_spans(&mut out);
        out
    }

    /// One span per (entry, matching concept), located at the code in the
    /// rendered note.
    pub fn extract_icd(
        &self,
        doc_id: &str,
        entries: &[IcdEntry],
        code_ranges: &[std::ops::Range<usize>],
    ) -> Vec<ConceptSpan> {
        let mut out = Vec::new();
        for (entry, range) in entries.iter().zip(code_ranges) {
            for concept in self.concepts_for_code(&entry.code) {
                out.push(ConceptSpan {
                    doc_id: doc_id.to_string(),
                    start: range.start,
                    end: range.end,
                    concept,
                    surface: entry.code.clone(),
                    source: entry.location.into(),
                });
            }
        }
        sort_spans(&mut out);
        out
    }

    fn encounter_parts(&self, doc: &NoteDocument) -> (Vec<ConceptSpan>, Vec<ConceptSpan>) {
        let rendered = doc.render();
        let mut text_spans = Vec::new();
        for range in &rendered.section_body_ranges {
            self.find_in(
                &doc.doc_id,
                &rendered.text[range.clone()],
                range.start,
                &mut text_spans,
            );
        }
        let icd_spans = self.extract_icd(&doc.doc_id, &doc.icd_entries, &rendered.icd_code_ranges);
        (text_spans, icd_spans)
    }

    /// Free-text spans plus ICD spans whose concept has no free-text span in
    /// the same document.
    pub fn extract_encounter(&self, doc: &NoteDocument) -> Vec<ConceptSpan> {
        let (mut spans, icd) = self.encounter_parts(doc);
        let in_text: BTreeSet<ConceptId> = spans.iter().map(|s| s.concept).collect();
        spans.extend(icd.into_iter().filter(|s| !in_text.contains(&s.concept)));
        sort_spans(&mut spans);
        spans
    }

    /// Note-level counts per concept by where the concept was matched.
    pub fn extraction_stats(&self, corpus: &Corpus) -> ExtractionStats {
        let mut stats = ExtractionStats::default();
        for (_, enc) in corpus.documents() {
            let (text, icd) = self.encounter_parts(&enc.note);
            let text: BTreeSet<ConceptId> = text.iter().map(|s| s.concept).collect();
            let icd: BTreeSet<ConceptId> = icd.iter().map(|s| s.concept).collect();
            stats.record(&text, &icd);
        }
        stats
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    /// Notes where the concept was found only in diagnostic codes.
    pub icd_only: usize,
    /// Notes where it was found in both codes and free text.
    pub both: usize,
    /// Notes where it was found only in free text.
    pub text: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionStats {
    pub counts: Vec<SourceCounts>,
}

impl Default for ExtractionStats {
    fn default() -> Self {
        ExtractionStats {
            counts: vec![SourceCounts::default(); ConceptId::ALL.len()],
        }
    }
}

impl ExtractionStats {
    pub const HEADER: [&'static str; 4] = ["Clinical Concept", "ICD-10", "∩", "Text"];

    pub fn record(&mut self, text: &BTreeSet<ConceptId>, icd: &BTreeSet<ConceptId>) {
        for &c in ConceptId::ALL {
            let row = &mut self.counts[c.index()];
            match (icd.contains(&c), text.contains(&c)) {
                (true, false) => row.icd_only += 1,
                (true, true) => row.both += 1,
                (false, true) => row.text += 1,
                (false, false) => {}
            }
        }
    }

    pub fn get(&self, concept: ConceptId) -> SourceCounts {
        self.counts[concept.index()]
    }

    /// Rows as (concept label, icd-only, both, text-only).
    pub fn rows(&self, ontology: &crate::ontology::Ontology) -> Vec<(String, usize, usize, usize)> {
        ConceptId::ALL
            .iter()
            .map(|&c| {
                let n = self.get(c);
                (
                    format!("{} - {}", c, ontology.concept(c).display_name),
                    n.icd_only,
                    n.both,
                    n.text,
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{IcdEntry, Section};
    use chrono::NaiveDate;

    fn set() -> PatternSet {
        PatternSet::default_set()
    }

    fn concepts(spans: &[ConceptSpan]) -> Vec<(ConceptId, &str)> {
        spans.iter().map(|s| (s.concept, s.surface.as_str())).collect()
    }

    #[test]
    fn every_concept_has_two_surface_forms() {
        let p = set();
        for &c in ConceptId::ALL {
            let n: usize = p
                .patterns(c)
                .iter()
                .map(|d| d.regex.matches('|').count() + 1)
                .sum();
            assert!(n >= 2, "{c}");
        }
    }

    #[test]
    fn npdr_forms() {
        let p = set();
        let s = p.extract_free_text("d", "NPDR");
        assert_eq!(concepts(&s), [(ConceptId::A2, "NPDR")]);
        let s = p.extract_free_text("d", "nonproliferative diabetic retinopathy");
        assert!(s
            .iter()
            .any(|x| x.concept == ConceptId::A2 && x.surface == "nonproliferative diabetic retinopathy"));
    }

    #[test]
    fn fig_examples() {
        let p = set();
        let s = p.extract_free_text("d", "No progression to PDR.");
        assert_eq!(concepts(&s), [(ConceptId::A3, "PDR")]);
        assert_eq!((s[0].start, s[0].end), (18, 21));

        let s = p.extract_free_text("d", "vacation to MI.");
        assert_eq!(concepts(&s), [(ConceptId::G3, "MI")]);

        let s = p.extract_free_text("d", "[[diabetic retinopathy]]");
        assert_eq!(
            concepts(&s),
            [(ConceptId::A1, "diabetic retinopathy"), (ConceptId::F1, "diabetic")]
        );
        assert_eq!(s[0].start, s[1].start);
        assert!(s[1].end < s[0].end);
    }

    #[test]
    fn abbreviations_are_case_sensitive() {
        let p = set();
        assert!(p.extract_free_text("d", "admit me to the clinic").is_empty());
        assert_eq!(p.extract_free_text("d", "Macular EDEMA").len(), 1);
    }

    #[test]
    fn icd_mappings() {
        let p = set();
        assert_eq!(p.concepts_for_code("E11.319"), [ConceptId::A1, ConceptId::F1]);
        assert!(p.concepts_for_code("E11.311").contains(&ConceptId::B1));
        assert!(p.concepts_for_code("H25.13").is_empty());
    }

    #[test]
    fn pattern_file_errors() {
        let err = PatternSet::parse("[A1]\ntext cs ([\n").unwrap_err();
        assert!(matches!(err, PatternError::Regex { concept: ConceptId::A1, .. }));
        assert!(matches!(PatternSet::parse(""), Err(PatternError::MissingConcept(ConceptId::A1))));
        assert!(matches!(
            PatternSet::parse("text cs x\n"),
            Err(PatternError::Parse { line: 1, .. })
        ));
    }

    fn doc(body: &str, codes: &[&str]) -> NoteDocument {
        let entries = codes
            .iter()
            .map(|c| IcdEntry::new(c, "code", crate::corpus::IcdLocation::EncounterCodes).unwrap())
            .collect();
        let sections = if body.is_empty() {
            vec![]
        } else {
            vec![Section::new("OVERVIEW", body).unwrap()]
        };
        NoteDocument::new("p", "e", NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), sections, entries)
    }

    #[test]
    fn dedup_prefers_free_text() {
        let p = set();
        let d = doc("No progression to PDR.", &["E11.3513"]);
        let spans = p.extract_encounter(&d);
        assert!(!spans.iter().any(|s| s.concept == ConceptId::A3 && s.source.is_icd()));
        // codes from the same entry for other concepts survive
        assert!(spans.iter().any(|s| s.concept == ConceptId::F1 && s.source.is_icd()));
        let text = d.render().text;
        for s in &spans {
            assert_eq!(&text[s.start..s.end], s.surface);
        }
    }

    #[test]
    fn codes_only_keeps_all() {
        let p = set();
        let d = doc("", &["E11.319"]);
        let spans = p.extract_encounter(&d);
        assert_eq!(spans.len(), 2);
        assert!(spans.iter().all(|s| s.source == SpanSource::IcdEncounterCodes));
    }

    #[test]
    fn stats_columns() {
        use crate::corpus::{Encounter, PatientRecord};
        let p = set();
        let mut rec = PatientRecord::new("p");
        let d = doc("Stable.", &["I21.9"]);
        rec.push(Encounter { encounter_id: "e".into(), note: d }).unwrap();
        let corpus = Corpus { patients: vec![rec] };
        let stats = p.extraction_stats(&corpus);
        assert_eq!(stats.get(ConceptId::G3), SourceCounts { icd_only: 1, both: 0, text: 0 });
        assert_eq!(stats.get(ConceptId::D1), SourceCounts::default());
    }
}
