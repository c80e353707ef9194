//! Annotation workbooks: one CSV per encounter holding the rendered note and
//! one row per candidate span, plus a JSON sidecar listing the legal options
//! of every editable cell.
//!
//! Layout (RFC 4180 quoting, rows of varying width):
//!
//! ```text
//! Document ID,<hex id>
//! Encounter Date,<YYYY-MM-DD>
//! Note,<rendered note>
//! Start,End,Concept,Text Span,Context,Laterality,Severity/Type,Temporality,Negated,Incorrect
//! <one row per span, sorted by (start, concept)>
//! ```
//!
//! Blank attribute cells mean "not stated" and become missing data; `--`
//! marks a column that does not apply to the row's concept.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::NoteDocument;
use crate::dataset::AnnotatedSpan;
use crate::extraction::ConceptSpan;
use crate::ontology::{AttributeCategory, ConceptId, Ontology, RawLabel};

pub const HEADER: [&str; 10] = [
    "Start",
    "End",
    "Concept",
    "Text Span",
    "Context",
    "Laterality",
    "Severity/Type",
    "Temporality",
    "Negated",
    "Incorrect",
];
pub const NOT_APPLICABLE: &str = "--";
pub const NEGATED: &str = "Negated";
pub const INCORRECT: &str = "Incorrect";
pub const CONTEXT_CHARS: usize = 40;

/// Editable columns, in header order.
pub const EDITABLE: [&str; 5] = ["Laterality", "Severity/Type", "Temporality", "Negated", "Incorrect"];

#[derive(Debug, Error)]
pub enum WorkbookError {
    #[error("span {start}..{end} lies outside the note")]
    SpanOutside { start: usize, end: usize },
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("malformed workbook header: {0}")]
    Header(String),
    #[error("annotation sets cover different spans: {0}")]
    SpanMismatch(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A span with its (possibly partial) annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub start: usize,
    pub end: usize,
    pub concept: ConceptId,
    pub surface: String,
    pub labels: Vec<RawLabel>,
    pub valid: bool,
}

impl SpanAnnotation {
    /// An unannotated candidate.
    pub fn candidate(span: &ConceptSpan) -> Self {
        SpanAnnotation {
            start: span.start,
            end: span.end,
            concept: span.concept,
            surface: span.surface.clone(),
            labels: Vec::new(),
            valid: true,
        }
    }

    pub fn from_annotated(span: &AnnotatedSpan) -> Self {
        SpanAnnotation {
            start: span.start,
            end: span.end,
            concept: span.concept,
            surface: span.surface.clone(),
            labels: span.labels.clone(),
            valid: span.valid,
        }
    }

    pub fn into_annotated(self, doc_id: &str, patient_id: &str) -> AnnotatedSpan {
        AnnotatedSpan {
            doc_id: doc_id.to_string(),
            patient_id: patient_id.to_string(),
            start: self.start,
            end: self.end,
            concept: self.concept,
            surface: self.surface,
            labels: self.labels,
            valid: self.valid,
        }
    }

    fn key(&self) -> (usize, ConceptId, usize) {
        (self.start, self.concept, self.end)
    }

    fn label(&self, cat: AttributeCategory) -> Option<&RawLabel> {
        self.labels.iter().find(|l| l.category == cat)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkbookRow {
    pub start: usize,
    pub end: usize,
    pub concept: String,
    pub text_span: String,
    pub context: String,
    /// Laterality, Severity/Type, Temporality, Negated, Incorrect.
    pub cells: [String; 5],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workbook {
    pub doc_id: String,
    pub encounter_date: NaiveDate,
    pub note: String,
    pub rows: Vec<WorkbookRow>,
}

fn category_of(column: usize) -> Option<AttributeCategory> {
    match column {
        0 => Some(AttributeCategory::Laterality),
        1 => Some(AttributeCategory::SeverityType),
        2 => Some(AttributeCategory::Temporality),
        _ => None,
    }
}

/// Legal non-blank values of each editable column for `concept`; an empty
/// list means the column does not apply.
pub fn column_options(ontology: &Ontology, concept: ConceptId) -> [Vec<String>; 5] {
    let attrs = ontology.valid_attributes(concept);
    let get = |c| attrs.get(&c).cloned().unwrap_or_default();
    let temporality = get(AttributeCategory::Temporality);
    let negated = if temporality.is_empty() {
        Vec::new()
    } else {
        vec![NEGATED.to_string()]
    };
    [
        get(AttributeCategory::Laterality),
        get(AttributeCategory::SeverityType),
        temporality,
        negated,
        vec![INCORRECT.to_string()],
    ]
}

/// Up to `chars` characters either side of the span, the span wrapped in
/// `<<` `>>`, line breaks flattened to spaces.
pub fn context_excerpt(text: &str, start: usize, end: usize, chars: usize) -> String {
    let before: String = {
        let mut v: Vec<char> = text[..start].chars().rev().take(chars).collect();
        v.reverse();
        v.into_iter().collect()
    };
    let after: String = text[end..].chars().take(chars).collect();
    format!("{before}<<{}>>{after}", &text[start..end]).replace(['\n', '\r'], " ")
}

fn cells_for(ontology: &Ontology, a: &SpanAnnotation) -> [String; 5] {
    let options = column_options(ontology, a.concept);
    let mut cells: [String; 5] = Default::default();
    for (i, cell) in cells.iter_mut().enumerate() {
        if options[i].is_empty() {
            *cell = NOT_APPLICABLE.to_string();
            continue;
        }
        *cell = match i {
            0..=2 => a
                .label(category_of(i).unwrap())
                .map(|l| l.value.clone())
                .unwrap_or_default(),
            3 => match a.label(AttributeCategory::Temporality) {
                Some(l) if l.negated => NEGATED.to_string(),
                _ => String::new(),
            },
            _ => if a.valid { "" } else { INCORRECT }.to_string(),
        };
    }
    cells
}

/// Builds the workbook for one note. Rows are sorted by (start, concept).
pub fn emit_workbook(
    doc: &NoteDocument,
    spans: &[SpanAnnotation],
    ontology: &Ontology,
    context_chars: usize,
) -> Result<Workbook, WorkbookError> {
    let note = doc.render().text;
    let mut spans: Vec<&SpanAnnotation> = spans.iter().collect();
    spans.sort_by_key(|s| s.key());
    let mut rows = Vec::with_capacity(spans.len());
    for a in spans {
        if a.start >= a.end || a.end > note.len() || !note.is_char_boundary(a.start) || !note.is_char_boundary(a.end) {
            return Err(WorkbookError::SpanOutside { start: a.start, end: a.end });
        }
        rows.push(WorkbookRow {
            start: a.start,
            end: a.end,
            concept: ontology.concept(a.concept).display_name.clone(),
            text_span: note[a.start..a.end].to_string(),
            context: context_excerpt(&note, a.start, a.end, context_chars),
            cells: cells_for(ontology, a),
        });
    }
    Ok(Workbook {
        doc_id: doc.doc_id.clone(),
        encounter_date: doc.encounter_date,
        note,
        rows,
    })
}

fn parse_cells(
    ontology: &Ontology,
    concept: ConceptId,
    cells: &[String; 5],
) -> Result<(Vec<RawLabel>, bool), String> {
    let options = column_options(ontology, concept);
    let mut labels = Vec::new();
    let mut negated = false;
    let mut valid = true;
    for (i, raw) in cells.iter().enumerate() {
        let v = raw.trim();
        if v.is_empty() || v == NOT_APPLICABLE {
            continue;
        }
        if !options[i].iter().any(|o| o == v) {
            return Err(format!(
                "{:?} is not a legal {} value for {}",
                v,
                EDITABLE[i],
                ontology.concept(concept).display_name
            ));
        }
        match i {
            0..=2 => labels.push(RawLabel {
                concept,
                category: category_of(i).unwrap(),
                value: v.to_string(),
                negated: false,
            }),
            3 => negated = true,
            _ => valid = false,
        }
    }
    if negated {
        let Some(t) = labels.iter_mut().find(|l| l.category == AttributeCategory::Temporality) else {
            return Err("Negated needs a Temporality value".to_string());
        };
        t.negated = true;
    }
    for l in &labels {
        ontology.check_raw(l).map_err(|e| e.to_string())?;
    }
    Ok((labels, valid))
}

impl Workbook {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), WorkbookError> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(w);
        w.write_record(["Document ID", &self.doc_id])?;
        w.write_record(["Encounter Date", &self.encounter_date.to_string()])?;
        w.write_record(["Note", &self.note])?;
        w.write_record(HEADER)?;
        for r in &self.rows {
            let mut rec = vec![
                r.start.to_string(),
                r.end.to_string(),
                r.concept.clone(),
                r.text_span.clone(),
                r.context.clone(),
            ];
            rec.extend(r.cells.iter().cloned());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WorkbookError> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Workbook, WorkbookError> {
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(r);
        let mut records = rd.records();
        let mut meta = |key: &str| -> Result<String, WorkbookError> {
            let rec = records
                .next()
                .ok_or_else(|| WorkbookError::Header(format!("missing {key}")))??;
            if rec.len() != 2 || &rec[0] != key {
                return Err(WorkbookError::Header(format!("expected {key}")));
            }
            Ok(rec[1].to_string())
        };
        let doc_id = meta("Document ID")?;
        let date = meta("Encounter Date")?;
        let encounter_date = date
            .parse()
            .map_err(|_| WorkbookError::Header(format!("bad encounter date {date:?}")))?;
        let note = meta("Note")?;
        let header = records
            .next()
            .ok_or_else(|| WorkbookError::Header("missing column header".into()))??;
        if header.iter().ne(HEADER) {
            return Err(WorkbookError::Header("unexpected column header".into()));
        }
        let mut rows = Vec::new();
        for rec in records {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let err = |m: String| WorkbookError::Row { line, message: m };
            if rec.len() != HEADER.len() {
                return Err(err(format!("expected {} cells, found {}", HEADER.len(), rec.len())));
            }
            let num = |i: usize| rec[i].trim().parse::<usize>().map_err(|_| err(format!("bad {} {:?}", HEADER[i], &rec[i])));
            let cells: [String; 5] = std::array::from_fn(|i| rec[5 + i].to_string());
            rows.push(WorkbookRow {
                start: num(0)?,
                end: num(1)?,
                concept: rec[2].to_string(),
                text_span: rec[3].to_string(),
                context: rec[4].to_string(),
                cells,
            });
        }
        Ok(Workbook {
            doc_id,
            encounter_date,
            note,
            rows,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Workbook, WorkbookError> {
        Workbook::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Interprets the rows. Data rows are numbered by file line (metadata and
    /// header occupy lines 1–4 unless the note spans several lines).
    pub fn annotations(&self, ontology: &Ontology) -> Result<Vec<SpanAnnotation>, WorkbookError> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| self.parse_row(ontology, i, r))
            .collect()
    }

    fn parse_row(&self, ontology: &Ontology, index: usize, r: &WorkbookRow) -> Result<SpanAnnotation, WorkbookError> {
        let err = |m: String| WorkbookError::Row {
            line: self.row_line(index),
            message: m,
        };
        let concept = ontology
            .concept_by_display_name(&r.concept)
            .ok_or_else(|| err(format!("unknown concept {:?}", r.concept)))?;
        if r.start >= r.end || r.end > self.note.len() || self.note.get(r.start..r.end) != Some(r.text_span.as_str()) {
            return Err(err(format!("offsets {}..{} do not match {:?}", r.start, r.end, r.text_span)));
        }
        let marked = format!("<<{}>>", r.text_span.replace(['\n', '\r'], " "));
        if r.context.matches("<<").count() != 1 || !r.context.contains(&marked) {
            return Err(err("context must mark the span once with << >>".into()));
        }
        let (labels, valid) = parse_cells(ontology, concept, &r.cells).map_err(err)?;
        Ok(SpanAnnotation {
            start: r.start,
            end: r.end,
            concept,
            surface: r.text_span.clone(),
            labels,
            valid,
        })
    }

    /// File line of data row `index` as written by [`Workbook::write_csv`].
    pub fn row_line(&self, index: usize) -> u64 {
        let note_lines = self.note.matches('\n').count() as u64;
        5 + note_lines + index as u64
    }

    pub fn sidecar(&self, ontology: &Ontology) -> Sidecar {
        Sidecar {
            doc_id: self.doc_id.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| {
                    let options = ontology
                        .concept_by_display_name(&r.concept)
                        .map(|c| column_options(ontology, c))
                        .unwrap_or_default();
                    SidecarRow {
                        start: r.start,
                        end: r.end,
                        concept: r.concept.clone(),
                        options: EDITABLE
                            .iter()
                            .zip(options)
                            .filter(|(_, o)| !o.is_empty())
                            .map(|(k, o)| (k.to_string(), o))
                            .collect(),
                    }
                })
                .collect(),
        }
    }
}

/// Per-row drop-down contents; columns absent from `options` are "--".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub doc_id: String,
    pub rows: Vec<SidecarRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarRow {
    pub start: usize,
    pub end: usize,
    pub concept: String,
    pub options: BTreeMap<String, Vec<String>>,
}

impl Sidecar {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WorkbookError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}

/// A cell on which two annotators differ.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Disagreement {
    pub start: usize,
    pub end: usize,
    pub concept: ConceptId,
    pub column: String,
    pub a: String,
    pub b: String,
}

/// Adjudicated cell values keyed by (start, end, concept, column).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Resolution {
    pub values: BTreeMap<(usize, usize, ConceptId, String), String>,
}

impl Resolution {
    /// Reads `Start,End,Concept,Column,Value` rows; concepts by display name.
    pub fn read_csv<R: Read>(r: R, ontology: &Ontology) -> Result<Resolution, WorkbookError> {
        let mut rd = csv::Reader::from_reader(r);
        let mut values = BTreeMap::new();
        for rec in rd.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let err = |m: &str| WorkbookError::Row {
                line,
                message: m.to_string(),
            };
            if rec.len() != 5 {
                return Err(err("expected Start,End,Concept,Column,Value"));
            }
            let start = rec[0].parse().map_err(|_| err("bad Start"))?;
            let end = rec[1].parse().map_err(|_| err("bad End"))?;
            let concept = ontology
                .concept_by_display_name(&rec[2])
                .ok_or_else(|| err("unknown concept"))?;
            if !EDITABLE.contains(&&rec[3]) {
                return Err(err("unknown column"));
            }
            values.insert((start, end, concept, rec[3].to_string()), rec[4].to_string());
        }
        Ok(Resolution { values })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeResult {
    pub resolved: Vec<SpanAnnotation>,
    pub disagreements: Vec<Disagreement>,
}

/// Merges two annotations of the same spans. Agreeing cells pass through;
/// differing cells take the resolution's value, or are left blank (missing)
/// when it has none. Every differing cell is listed.
pub fn merge_annotations(
    a: &[SpanAnnotation],
    b: &[SpanAnnotation],
    resolution: &Resolution,
    ontology: &Ontology,
) -> Result<MergeResult, WorkbookError> {
    let index = |xs: &[SpanAnnotation]| -> BTreeMap<(usize, ConceptId, usize), SpanAnnotation> {
        xs.iter().map(|s| (s.key(), s.clone())).collect()
    };
    let (ia, ib) = (index(a), index(b));
    let ka: BTreeSet<_> = ia.keys().collect();
    let kb: BTreeSet<_> = ib.keys().collect();
    if ka != kb || ia.len() != a.len() || ib.len() != b.len() {
        let only: Vec<String> = ka
            .symmetric_difference(&kb)
            .map(|(s, c, e)| format!("{c}@{s}..{e}"))
            .collect();
        return Err(WorkbookError::SpanMismatch(if only.is_empty() {
            "duplicate spans".to_string()
        } else {
            only.join(", ")
        }));
    }
    let mut resolved = Vec::new();
    let mut disagreements = Vec::new();
    for (key, sa) in &ia {
        let sb = &ib[key];
        let (ca, cb) = (cells_for(ontology, sa), cells_for(ontology, sb));
        let mut merged: [String; 5] = Default::default();
        for i in 0..5 {
            if ca[i] == cb[i] {
                merged[i] = ca[i].clone();
                continue;
            }
            disagreements.push(Disagreement {
                start: sa.start,
                end: sa.end,
                concept: sa.concept,
                column: EDITABLE[i].to_string(),
                a: ca[i].clone(),
                b: cb[i].clone(),
            });
            merged[i] = resolution
                .values
                .get(&(sa.start, sa.end, sa.concept, EDITABLE[i].to_string()))
                .cloned()
                .unwrap_or_default();
        }
        if merged[3] == NEGATED && merged[2].is_empty() {
            // An unresolved temporality leaves nothing to negate.
            merged[3].clear();
        }
        let (labels, valid) = parse_cells(ontology, sa.concept, &merged).map_err(|m| WorkbookError::Row {
            line: 0,
            message: format!("{}@{}..{}: {m}", sa.concept, sa.start, sa.end),
        })?;
        resolved.push(SpanAnnotation {
            labels,
            valid,
            ..sa.clone()
        });
    }
    Ok(MergeResult { resolved, disagreements })
}

/// Canonical form used for round-trip comparison: labels ordered by category.
pub fn normalize(mut spans: Vec<SpanAnnotation>) -> Vec<SpanAnnotation> {
    for s in &mut spans {
        s.labels.sort_by_key(|l| l.category);
    }
    spans.sort_by_key(|s| s.key());
    spans
}
