#![allow(dead_code)]

use chrono::NaiveDate;
use eyephen::corpus::{IcdEntry, NoteDocument, Section};
use eyephen::extraction::PatternSet;
use eyephen::ontology::Ontology;
use eyephen::workbook::{emit_workbook, SpanAnnotation, Workbook, CONTEXT_CHARS};
use serde::Deserialize;

#[derive(Deserialize)]
pub struct FixtureRow {
    pub start: usize,
    pub end: usize,
    pub concept: String,
    pub cells: [String; 5],
}

#[derive(Deserialize)]
pub struct Fixture {
    pub patient_id: String,
    pub encounter_id: String,
    pub encounter_date: NaiveDate,
    pub icd_entries: Vec<IcdEntry>,
    pub sections: Vec<Section>,
    pub annotations: Vec<FixtureRow>,
}

pub fn fig1_fixture() -> Fixture {
    let text = include_str!("../fixtures/fig1_note.json");
    serde_json::from_str(text).expect("fixture parses")
}

pub fn fig1_note(f: &Fixture) -> NoteDocument {
    NoteDocument::new(
        &f.patient_id,
        &f.encounter_id,
        f.encounter_date,
        f.sections.clone(),
        f.icd_entries.clone(),
    )
}

/// Generates the candidate workbook for the fixture note, fills in the
/// annotator's cells for the rows the fixture covers, and round-trips it
/// through CSV.
pub fn fig1_workbook(o: &Ontology) -> (Workbook, Vec<SpanAnnotation>) {
    let f = fig1_fixture();
    let doc = fig1_note(&f);
    let spans = PatternSet::default_set().extract_encounter(&doc);
    let candidates: Vec<SpanAnnotation> = spans.iter().map(SpanAnnotation::candidate).collect();
    let mut wb = emit_workbook(&doc, &candidates, o, CONTEXT_CHARS).expect("emit");
    for a in &f.annotations {
        let row = wb
            .rows
            .iter_mut()
            .find(|r| r.start == a.start && r.end == a.end && r.concept == a.concept)
            .unwrap_or_else(|| panic!("no candidate row for {} at {}", a.concept, a.start));
        row.cells = a.cells.clone();
    }
    let mut buf = Vec::new();
    wb.write_csv(&mut buf).expect("write");
    let back = Workbook::read_csv(buf.as_slice()).expect("read");
    let parsed = back.annotations(o).expect("parse");
    (back, parsed)
}
