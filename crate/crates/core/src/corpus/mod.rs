//! Patients, encounters and notes, the deterministic note renderer and the
//! line-delimited corpus file format.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::OnceLock;

use chrono::NaiveDate;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub mod synth;

pub const ENCOUNTER_CODES_HEADER: &str = "[[[ENCOUNTER ICD-10 CODES]]]";
pub const PROBLEM_LIST_HEADER: &str = "[[[PROBLEM LIST]]]";

/// Free-text section headers used in rendered notes.
pub const KNOWN_SECTION_HEADERS: [&str; 5] = [
    "OVERVIEW",
    "ASSESSMENT & PLAN",
    "HISTORY OF PRESENT ILLNESS",
    "IMPRESSION",
    "PLAN",
];

const CORPUS_FORMAT: &str = "eyephen-corpus";
const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid ICD-10 code {0:?}")]
    InvalidIcdCode(String),
    #[error("invalid section header {0:?}")]
    InvalidHeader(String),
    #[error("encounter {0:?} has neither a note body nor a problem list")]
    NotIncluded(String),
    #[error("duplicate encounter {encounter:?} for patient {patient:?}")]
    DuplicateEncounter { patient: String, encounter: String },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn icd_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Z][0-9]{2}(\.[0-9A-Z]{1,4})?$").unwrap())
}

pub fn is_valid_icd_code(code: &str) -> bool {
    icd_pattern().is_match(code)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IcdLocation {
    EncounterCodes,
    ProblemList,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IcdEntry {
    pub code: String,
    pub description: String,
    pub location: IcdLocation,
}

impl IcdEntry {
    pub fn new(code: &str, description: &str, location: IcdLocation) -> Result<Self, CorpusError> {
        if !is_valid_icd_code(code) {
            return Err(CorpusError::InvalidIcdCode(code.to_string()));
        }
        Ok(IcdEntry {
            code: code.to_string(),
            description: description.to_string(),
            location,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub header: String,
    pub body: String,
}

impl Section {
    pub fn new(header: &str, body: &str) -> Result<Self, CorpusError> {
        if header.is_empty() || header.contains(['[', ']', '\n']) {
            return Err(CorpusError::InvalidHeader(header.to_string()));
        }
        Ok(Section {
            header: header.to_string(),
            body: body.to_string(),
        })
    }
}

/// A rendered note with the positions of its parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedNote {
    pub text: String,
    /// Byte range of each ICD code, parallel to `NoteDocument::icd_entries`.
    pub icd_code_ranges: Vec<Range<usize>>,
    /// Byte range of each section body, parallel to `NoteDocument::sections`.
    pub section_body_ranges: Vec<Range<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoteDocument {
    pub doc_id: String,
    pub encounter_date: NaiveDate,
    pub sections: Vec<Section>,
    pub icd_entries: Vec<IcdEntry>,
}

impl NoteDocument {
    /// Builds a note whose id is the SHA-256 of its owner, date and rendered text.
    pub fn new(
        patient_id: &str,
        encounter_id: &str,
        encounter_date: NaiveDate,
        sections: Vec<Section>,
        icd_entries: Vec<IcdEntry>,
    ) -> Self {
        let mut doc = NoteDocument {
            doc_id: String::new(),
            encounter_date,
            sections,
            icd_entries,
        };
        let mut h = Sha256::new();
        h.update(patient_id.as_bytes());
        h.update([0]);
        h.update(encounter_id.as_bytes());
        h.update([0]);
        h.update(encounter_date.to_string().as_bytes());
        h.update([0]);
        h.update(doc.render().text.as_bytes());
        doc.doc_id = hex::encode(h.finalize());
        doc
    }

    /// Inclusion rule: a visit needs a progress note body or a problem list.
    pub fn is_included(&self) -> bool {
        self.sections.iter().any(|s| !s.body.trim().is_empty())
            || self
                .icd_entries
                .iter()
                .any(|e| e.location == IcdLocation::ProblemList)
    }

    pub fn render(&self) -> RenderedNote {
        let mut text = String::new();
        let mut icd_code_ranges = vec![0..0; self.icd_entries.len()];
        let mut section_body_ranges = Vec::with_capacity(self.sections.len());

        let mut push_codes = |text: &mut String, location: IcdLocation| {
            for (i, entry) in self.icd_entries.iter().enumerate() {
                if entry.location != location {
                    continue;
                }
                text.push_str("[[");
                let start = text.len();
                text.push_str(&entry.code);
                icd_code_ranges[i] = start..text.len();
                text.push_str(": ");
                text.push_str(&entry.description);
                text.push_str("]]\n");
            }
        };

        text.push_str(ENCOUNTER_CODES_HEADER);
        text.push('\n');
        push_codes(&mut text, IcdLocation::EncounterCodes);
        text.push('\n');
        text.push_str(PROBLEM_LIST_HEADER);
        text.push('\n');
        push_codes(&mut text, IcdLocation::ProblemList);
        for section in &self.sections {
            text.push('[');
            text.push_str(&section.header);
            text.push_str("]\n");
            let start = text.len();
            text.push_str(&section.body);
            section_body_ranges.push(start..text.len());
            text.push('\n');
        }
        RenderedNote {
            text,
            icd_code_ranges,
            section_body_ranges,
        }
    }
}

pub fn render_note(doc: &NoteDocument) -> String {
    doc.render().text
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encounter {
    pub encounter_id: String,
    pub note: NoteDocument,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub encounters: Vec<Encounter>,
}

impl PatientRecord {
    pub fn new(patient_id: &str) -> Self {
        PatientRecord {
            patient_id: patient_id.to_string(),
            encounters: Vec::new(),
        }
    }

    pub fn push(&mut self, encounter: Encounter) -> Result<(), CorpusError> {
        if self
            .encounters
            .iter()
            .any(|e| e.encounter_id == encounter.encounter_id)
        {
            return Err(CorpusError::DuplicateEncounter {
                patient: self.patient_id.clone(),
                encounter: encounter.encounter_id,
            });
        }
        if !encounter.note.is_included() {
            return Err(CorpusError::NotIncluded(encounter.encounter_id));
        }
        self.encounters.push(encounter);
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub patients: Vec<PatientRecord>,
}

impl Corpus {
    pub fn documents(&self) -> impl Iterator<Item = (&PatientRecord, &Encounter)> {
        self.patients
            .iter()
            .flat_map(|p| p.encounters.iter().map(move |e| (p, e)))
    }

    pub fn num_documents(&self) -> usize {
        self.patients.iter().map(|p| p.encounters.len()).sum()
    }

    /// Index of documents by id.
    pub fn document_index(&self) -> HashMap<&str, (&PatientRecord, &Encounter)> {
        self.documents()
            .map(|(p, e)| (e.note.doc_id.as_str(), (p, e)))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CorpusError> {
        let header = CorpusHeader {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("serializable"))?;
        for (patient, enc) in self.documents() {
            let record = EncounterRecord {
                patient_id: patient.patient_id.clone(),
                encounter_id: enc.encounter_id.clone(),
                date: enc.note.encounter_date,
                sections: enc.note.sections.clone(),
                icd_entries: enc.note.icd_entries.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&record).expect("serializable"))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
        let file = std::fs::File::open(path)?;
        Corpus::read_from(std::io::BufReader::new(file))
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Corpus, CorpusError> {
        let mut corpus = Corpus::default();
        let mut by_patient: HashMap<String, usize> = HashMap::new();
        let mut seen_header = false;
        for (i, line) in r.lines().enumerate() {
            let lineno = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| CorpusError::Line {
                line: lineno,
                message,
            };
            if !seen_header {
                let header: CorpusHeader =
                    serde_json::from_str(&line).map_err(|e| err(format!("bad header: {e}")))?;
                if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
                    return Err(err(format!(
                        "unsupported corpus format {} v{}",
                        header.format, header.version
                    )));
                }
                seen_header = true;
                continue;
            }
            let rec: EncounterRecord =
                serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            for entry in &rec.icd_entries {
                if !is_valid_icd_code(&entry.code) {
                    return Err(err(format!("invalid ICD-10 code {:?}", entry.code)));
                }
            }
            for s in &rec.sections {
                Section::new(&s.header, &s.body).map_err(|e| err(e.to_string()))?;
            }
            let note = NoteDocument::new(
                &rec.patient_id,
                &rec.encounter_id,
                rec.date,
                rec.sections,
                rec.icd_entries,
            );
            let idx = *by_patient.entry(rec.patient_id.clone()).or_insert_with(|| {
                corpus.patients.push(PatientRecord::new(&rec.patient_id));
                corpus.patients.len() - 1
            });
            corpus.patients[idx]
                .push(Encounter {
                    encounter_id: rec.encounter_id,
                    note,
                })
                .map_err(|e| err(e.to_string()))?;
        }
        Ok(corpus)
    }

    /// Patient ids in first-appearance order.
    pub fn patient_ids(&self) -> Vec<&str> {
        self.patients.iter().map(|p| p.patient_id.as_str()).collect()
    }

    pub fn check_unique_patients(&self) -> bool {
        let ids: HashSet<&str> = self.patient_ids().into_iter().collect();
        ids.len() == self.patients.len()
    }
}

impl fmt::Display for IcdLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IcdLocation::EncounterCodes => f.write_str("EncounterCodes"),
            IcdLocation::ProblemList => f.write_str("ProblemList"),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct EncounterRecord {
    patient_id: String,
    encounter_id: String,
    date: NaiveDate,
    sections: Vec<Section>,
    icd_entries: Vec<IcdEntry>,
}
