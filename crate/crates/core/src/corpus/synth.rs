//! Template-based synthetic corpus generator with a planted-span ledger.
//!
//! Every concept mention is built from a small lexicon whose surface forms
//! each match exactly one concept pattern, surrounded by attribute phrases and
//! filler sentences that match none. That makes the ground truth exact: the
//! spans the extractor finds are precisely the planted ones.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{
    Corpus, CorpusError, Encounter, IcdEntry, IcdLocation, NoteDocument, PatientRecord, Section,
};
use crate::extraction::SpanSource;
use crate::ontology::{AttributeCategory, ConceptId, Ontology, RawLabel};

/// Prior over the classes of one attribute category; values must sum to 1.
pub type ClassPrior = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Inclusive range of encounters per patient.
    pub encounters_per_patient: (usize, usize),
    /// Inclusive range of concept mentions per note.
    pub mentions_per_note: (usize, usize),
    /// Relative concept weights; concepts not listed get weight 0. Empty means uniform.
    pub concept_mix: BTreeMap<ConceptId, f64>,
    /// Per concept and category class priors; unlisted pairs are uniform.
    pub attribute_priors: BTreeMap<ConceptId, BTreeMap<AttributeCategory, ClassPrior>>,
    /// Probability that an attribute is left unstated in the text.
    pub missing_rate: f64,
    /// Probability that a temporality mention is phrased as a negation, where
    /// the ontology allows it.
    pub negation_rate: f64,
    /// Probability that a mention is a pattern-matching decoy.
    pub decoy_rate: f64,
    /// Probability that an encounter carries diagnostic codes.
    pub icd_rate: f64,
    /// Probability that an encounter has a problem list but no note body.
    pub codes_only_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 100,
            encounters_per_patient: (1, 3),
            mentions_per_note: (3, 8),
            concept_mix: BTreeMap::new(),
            attribute_priors: BTreeMap::new(),
            missing_rate: 0.1,
            negation_rate: 0.15,
            decoy_rate: 0.05,
            icd_rate: 0.6,
            codes_only_rate: 0.03,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<SynthConfig, CorpusError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CorpusError::Config(e.to_string()))
    }

    pub fn validate(&self, ontology: &Ontology) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Config(m));
        if self.n_patients == 0 {
            return bad("n_patients must be at least 1".into());
        }
        let (lo, hi) = self.encounters_per_patient;
        if lo == 0 || lo > hi {
            return bad(format!("invalid encounters_per_patient range {lo}..={hi}"));
        }
        let (lo, hi) = self.mentions_per_note;
        if lo == 0 || lo > hi {
            return bad(format!("invalid mentions_per_note range {lo}..={hi}"));
        }
        for (name, p) in [
            ("missing_rate", self.missing_rate),
            ("negation_rate", self.negation_rate),
            ("decoy_rate", self.decoy_rate),
            ("icd_rate", self.icd_rate),
            ("codes_only_rate", self.codes_only_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !self.concept_mix.is_empty() {
            if self.concept_mix.values().any(|w| !w.is_finite() || *w < 0.0) {
                return bad("concept_mix weights must be finite and non-negative".into());
            }
            if self.concept_mix.values().sum::<f64>() <= 0.0 {
                return bad("concept_mix has no positive weight".into());
            }
        }
        for (&concept, cats) in &self.attribute_priors {
            let legal = ontology.valid_attributes(concept);
            for (&cat, prior) in cats {
                let Some(classes) = legal.get(&cat) else {
                    return bad(format!("{concept} has no {cat} attribute"));
                };
                for (class, &p) in prior {
                    if !classes.contains(class) {
                        return bad(format!("{class:?} is not a {cat} class of {concept}"));
                    }
                    if !p.is_finite() || p < 0.0 {
                        return bad(format!("prior for {concept}/{cat}/{class} is {p}"));
                    }
                }
                let total: f64 = prior.values().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return bad(format!("priors for {concept}/{cat} sum to {total}, not 1"));
                }
            }
        }
        Ok(())
    }
}

/// One planted concept span. `labels` holds the attributes stated in the
/// text; span validity is carried by `valid`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedSpan {
    pub doc_id: String,
    pub patient_id: String,
    pub encounter_id: String,
    pub start: usize,
    pub end: usize,
    pub concept: ConceptId,
    pub surface: String,
    pub source: SpanSource,
    pub labels: Vec<RawLabel>,
    pub valid: bool,
}

/// Which concepts a note was built to contain, by source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NotePlan {
    pub doc_id: String,
    pub text_concepts: BTreeSet<ConceptId>,
    pub icd_concepts: BTreeSet<ConceptId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthGroundTruth {
    pub spans: Vec<PlantedSpan>,
    pub notes: Vec<NotePlan>,
}

impl SynthGroundTruth {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let text = serde_json::to_string(self).map_err(|e| CorpusError::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SynthGroundTruth, CorpusError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CorpusError::Config(e.to_string()))
    }

    pub fn count_by_concept(&self) -> BTreeMap<ConceptId, usize> {
        let mut out = BTreeMap::new();
        for s in &self.spans {
            *out.entry(s.concept).or_insert(0) += 1;
        }
        out
    }
}

/// Surface forms planted for each concept.
pub fn lexicon(concept: ConceptId) -> &'static [&'static str] {
    use ConceptId::*;
    match concept {
        A1 => &["DR", "retinopathy"],
        A2 => &["NPDR"],
        A3 => &["PDR"],
        A4 => &["NV", "neovascularization"],
        B1 => &["ME", "macular edema"],
        C1 => &["VH", "vitreous hemorrhage"],
        C2 => &["RD", "retinal detachment"],
        C3 => &["NVG", "neovascular glaucoma"],
        D1 => &["anti-VEGF", "Eylea", "Avastin"],
        D2 => &["PRP", "panretinal photocoagulation"],
        D3 => &["focal laser", "grid laser"],
        D4 => &["Ozurdex", "IVTA"],
        E1 => &["vitrectomy", "PPV", "scleral buckle"],
        E2 => &["glaucoma surgery", "glaucoma drainage surgery"],
        F1 => &["DM", "diabetes", "diabetes mellitus"],
        G1 => &["nephropathy", "CKD"],
        G2 => &["neuropathy", "DPN"],
        G3 => &["MI", "myocardial infarction", "heart attack"],
        G4 => &["stroke", "CVA"],
    }
}

/// Decoy sentences: (sentence, concept, surface). The surface matches the
/// concept's pattern without denoting the concept.
pub const DECOYS: [(&str, ConceptId, &str); 8] = [
    ("Returns after vacation to MI.", ConceptId::G3, "MI"),
    ("Seen by DR Patel today.", ConceptId::A1, "DR"),
    ("Patient moved from ME last year.", ConceptId::B1, "ME"),
    ("Lives on Elm RD nearby.", ConceptId::C2, "RD"),
    ("PPV of the screening test discussed.", ConceptId::E1, "PPV"),
    ("Enjoys breast stroke swimming.", ConceptId::G4, "stroke"),
    ("Had PRP knee injection.", ConceptId::D2, "PRP"),
    ("Will DM results to patient.", ConceptId::F1, "DM"),
];

/// Sentences that match no concept pattern.
pub const FILLERS: [&str; 10] = [
    "Patient tolerating drops well.",
    "IOP within normal limits.",
    "Follow up in 3 months.",
    "Vision stable since last visit.",
    "Discussed importance of glucose control.",
    "Dilated fundus exam performed.",
    "Lens clear bilaterally.",
    "Pupils equal and reactive.",
    "Patient reports no new floaters.",
    "Counseled on blood pressure goals.",
];

/// Diagnostic codes used by the generator with the concepts each one denotes.
pub const ICD_TABLE: [(&str, &str, &[ConceptId]); 17] = {
    use ConceptId::*;
    [
        ("E11.9", "Type 2 diabetes mellitus without complications", &[F1]),
        ("E10.9", "Type 1 diabetes mellitus without complications", &[F1]),
        ("E11.319", "Type 2 diabetes mellitus with unspecified diabetic retinopathy without macular edema", &[A1, F1]),
        ("E11.311", "Type 2 diabetes mellitus with unspecified diabetic retinopathy with macular edema", &[A1, B1, F1]),
        ("E11.3293", "Type 2 diabetes mellitus with mild nonproliferative diabetic retinopathy without macular edema, bilateral", &[A2, F1]),
        ("E11.3513", "Type 2 diabetes mellitus with proliferative diabetic retinopathy with macular edema, bilateral", &[A3, B1, F1]),
        ("E11.22", "Type 2 diabetes mellitus with diabetic chronic kidney disease", &[F1, G1]),
        ("E11.40", "Type 2 diabetes mellitus with diabetic neuropathy, unspecified", &[F1, G2]),
        ("I25.2", "Old myocardial infarction", &[G3]),
        ("Z86.73", "Personal history of transient ischemic attack and cerebral infarction", &[G4]),
        ("H43.13", "Vitreous hemorrhage, bilateral", &[C1]),
        ("H33.40", "Traction detachment of retina, unspecified eye", &[C2]),
        ("H40.89", "Other specified glaucoma", &[C3]),
        ("H35.05", "Retinal neovascularization, unspecified", &[A4]),
        ("Z98.83", "Filtering (vitreous) bleb after glaucoma surgery status", &[E2]),
        ("H25.13", "Age-related nuclear cataract, bilateral", &[]),
        ("I10", "Essential (primary) hypertension", &[]),
    ]
};

fn laterality_phrase(value: &str, long: bool) -> &'static str {
    match (value, long) {
        ("OD", false) => "OD",
        ("OS", false) => "OS",
        ("OU", false) => "OU",
        ("OD", true) => "in the right eye",
        ("OS", true) => "in the left eye",
        ("OU", true) => "in both eyes",
        _ => unreachable!("laterality {value}"),
    }
}

/// (prefix, suffix) for a temporality value.
fn temporality_phrase(value: &str, negated: bool) -> (&'static str, &'static str) {
    match (value, negated) {
        ("Active", false) => ("Active", ""),
        ("Active", true) => ("No active", ""),
        ("History of", false) => ("History of", ""),
        ("History of", true) => ("No history of", ""),
        ("Resolved", false) => ("Prior", "now resolved"),
        ("Resolved", true) => ("Ongoing", "not yet resolved"),
        ("Resolving", false) => ("Improving", "slowly resolving"),
        ("Present", false) => ("Evidence of", ""),
        ("Not Present", false) => ("No evidence of", ""),
        ("No History of", false) => ("Denies any history of", ""),
        ("Performed Today", false) => ("Completed", "performed today"),
        ("Performed Today", true) => ("Deferred", "not performed today"),
        ("Recommended", false) => ("Recommend", ""),
        ("Recommended", true) => ("Do not recommend", ""),
        ("Considering", false) => ("Considering", ""),
        ("Considering", true) => ("No longer considering", ""),
        _ => unreachable!("temporality {value} negated={negated}"),
    }
}

/// (before-surface words, after-surface words) for a severity/type value.
fn severity_phrase(concept: ConceptId, value: &str) -> (&'static str, &'static str) {
    use ConceptId::*;
    match (concept, value) {
        (A2, "Mild") => ("mild", ""),
        (A2, "Mild-Moderate") => ("mild to moderate", ""),
        (A2, "Moderate") => ("moderate", ""),
        (A2, "Moderate-Severe") => ("moderate to severe", ""),
        (A2, "Severe") => ("severe", ""),
        (A3, "HR-PDR") => ("high-risk", ""),
        (A3, "NHR-PDR") => ("low-risk", ""),
        (A4, "Iris") => ("", "of the iris"),
        (A4, "Iris + NVD and/or NVE") => ("", "of the iris and disc"),
        (A4, "NVD") => ("", "at the disc"),
        (A4, "NVE") => ("", "elsewhere"),
        (A4, "NVD/NVE") => ("", "at disc and elsewhere"),
        (A4, "AMD") => ("", "from AMD"),
        (A4, "Other") => ("", "of other origin"),
        (B1, "DME") => ("glycemic", ""),
        (B1, "CI-DME") => ("center-involving", ""),
        (B1, "Non-CI-DME") => ("non-center-involving", ""),
        (B1, "CS-DME") => ("clinically significant", ""),
        (B1, "Non-CS-DME") => ("non-clinically significant", ""),
        (B1, "CME") => ("cystoid", ""),
        (B1, "AMD") => ("", "from AMD"),
        (B1, "Other") => ("", "of unclear etiology"),
        (C2, "RRD") => ("rhegmatogenous", ""),
        (C2, "TRD") => ("tractional", ""),
        (C2, "Serous") => ("serous", ""),
        (C2, "Combined RRD/TRD") => ("combined tractional-rhegmatogenous", ""),
        (E1, "Indication VH") => ("", "for vitreous bleeding"),
        (E1, "Indication RD") => ("", "for detachment repair"),
        (E2, "Tube") => ("", "via tube"),
        (E2, "Trab") => ("", "via trab"),
        (E2, "MIGS") => ("", "via minimally invasive approach"),
        (F1, "Type I") => ("type 1", ""),
        (F1, "Type II") => ("type 2", ""),
        (F1, "Gestational") => ("gestational", ""),
        (F1, "Other") => ("secondary", ""),
        _ => unreachable!("severity {concept} {value}"),
    }
}

struct Mention {
    sentence: String,
    /// Byte range of the surface within `sentence`.
    surface: std::ops::Range<usize>,
    concept: ConceptId,
    labels: Vec<RawLabel>,
    valid: bool,
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    ontology: &'a Ontology,
    rng: ChaCha8Rng,
    concept_dist: WeightedIndex<f64>,
}

impl Generator<'_> {
    fn sample_class<'c>(
        &mut self,
        concept: ConceptId,
        cat: AttributeCategory,
        classes: &'c [String],
    ) -> &'c str {
        let prior = self
            .cfg
            .attribute_priors
            .get(&concept)
            .and_then(|m| m.get(&cat));
        match prior {
            Some(prior) => {
                let weights: Vec<f64> = classes
                    .iter()
                    .map(|c| prior.get(c).copied().unwrap_or(0.0))
                    .collect();
                let dist = WeightedIndex::new(&weights).expect("validated prior");
                &classes[dist.sample(&mut self.rng)]
            }
            None => classes.choose(&mut self.rng).expect("non-empty class list"),
        }
    }

    fn decoy(&mut self) -> Mention {
        let (sentence, concept, surface) = *DECOYS.choose(&mut self.rng).unwrap();
        let start = sentence.find(surface).unwrap();
        Mention {
            sentence: sentence.to_string(),
            surface: start..start + surface.len(),
            concept,
            labels: Vec::new(),
            valid: false,
        }
    }

    fn mention(&mut self) -> Mention {
        if self.rng.gen_bool(self.cfg.decoy_rate) {
            return self.decoy();
        }
        let concept = ConceptId::ALL[self.concept_dist.sample(&mut self.rng)];
        let surface = *lexicon(concept).choose(&mut self.rng).unwrap();
        let attrs = self.ontology.valid_attributes(concept).clone();
        let mut labels = Vec::new();
        let (mut pre, mut post) = ("Noted", "");
        let (mut sev_before, mut sev_after) = ("", "");
        let mut lat = "";

        for (&cat, classes) in &attrs {
            if cat == AttributeCategory::SpanValidity || cat == AttributeCategory::Negation {
                continue;
            }
            if self.rng.gen_bool(self.cfg.missing_rate) {
                continue;
            }
            let value = self.sample_class(concept, cat, classes).to_string();
            let mut negated = false;
            match cat {
                AttributeCategory::Laterality => {
                    let long = self.rng.gen_bool(0.3);
                    lat = laterality_phrase(&value, long);
                }
                AttributeCategory::Temporality => {
                    if self.rng.gen_bool(self.cfg.negation_rate) {
                        let candidate = RawLabel {
                            concept,
                            category: cat,
                            value: value.clone(),
                            negated: true,
                        };
                        negated = self.ontology.check_raw(&candidate).is_ok();
                    }
                    (pre, post) = temporality_phrase(&value, negated);
                }
                AttributeCategory::SeverityType => {
                    (sev_before, sev_after) = severity_phrase(concept, &value);
                }
                _ => unreachable!(),
            }
            labels.push(RawLabel {
                concept,
                category: cat,
                value,
                negated,
            });
        }

        let mut sentence = String::new();
        for part in [pre, sev_before] {
            if !part.is_empty() {
                sentence.push_str(part);
                sentence.push(' ');
            }
        }
        let start = sentence.len();
        sentence.push_str(surface);
        let end = sentence.len();
        for part in [sev_after, lat, post] {
            if !part.is_empty() {
                sentence.push(' ');
                sentence.push_str(part);
            }
        }
        sentence.push('.');
        Mention {
            sentence,
            surface: start..end,
            concept,
            labels,
            valid: true,
        }
    }

    fn icd_entries(&mut self) -> Vec<(IcdEntry, &'static [ConceptId])> {
        if !self.rng.gen_bool(self.cfg.icd_rate) {
            return Vec::new();
        }
        let n = self.rng.gen_range(1..=3);
        let picks: Vec<_> = ICD_TABLE.choose_multiple(&mut self.rng, n).copied().collect();
        picks
            .into_iter()
            .map(|(code, desc, concepts)| {
                let location = if self.rng.gen_bool(0.5) {
                    IcdLocation::EncounterCodes
                } else {
                    IcdLocation::ProblemList
                };
                (IcdEntry::new(code, desc, location).unwrap(), concepts)
            })
            .collect()
    }
}

/// Generates a corpus and the ledger of every span planted in it.
pub fn generate_corpus(
    cfg: &SynthConfig,
    ontology: &Ontology,
) -> Result<(Corpus, SynthGroundTruth), CorpusError> {
    cfg.validate(ontology)?;
    let weights: Vec<f64> = if cfg.concept_mix.is_empty() {
        vec![1.0; ConceptId::ALL.len()]
    } else {
        ConceptId::ALL
            .iter()
            .map(|c| cfg.concept_mix.get(c).copied().unwrap_or(0.0))
            .collect()
    };
    let mut g = Generator {
        cfg,
        ontology,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        concept_dist: WeightedIndex::new(&weights).map_err(|e| CorpusError::Config(e.to_string()))?,
    };
    let base_date = NaiveDate::from_ymd_opt(2012, 1, 1).unwrap();
    let mut corpus = Corpus::default();
    let mut truth = SynthGroundTruth::default();

    for p in 0..cfg.n_patients {
        let patient_id = format!("P{:05}", p + 1);
        let mut record = PatientRecord::new(&patient_id);
        let n_enc = g
            .rng
            .gen_range(cfg.encounters_per_patient.0..=cfg.encounters_per_patient.1);
        let mut day = g.rng.gen_range(0..3000u64);
        for e in 0..n_enc {
            let encounter_id = format!("{patient_id}-E{}", e + 1);
            day += g.rng.gen_range(14..200u64);
            let date = base_date.checked_add_days(Days::new(day)).unwrap();

            let codes_only = g.rng.gen_bool(cfg.codes_only_rate);
            let mut codes = g.icd_entries();
            if codes_only && !codes.iter().any(|(e, _)| e.location == IcdLocation::ProblemList) {
                let (code, desc, concepts) = *ICD_TABLE.choose(&mut g.rng).unwrap();
                let entry = IcdEntry::new(code, desc, IcdLocation::ProblemList).unwrap();
                codes.push((entry, concepts));
            }

            // Sections hold (mention, offset of the sentence within the body).
            let mut sections: Vec<(String, String, Vec<(Mention, usize)>)> = Vec::new();
            if !codes_only {
                let n_mentions = g
                    .rng
                    .gen_range(cfg.mentions_per_note.0..=cfg.mentions_per_note.1);
                let n_sections = g.rng.gen_range(1..=n_mentions.min(3));
                let mut headers = super::KNOWN_SECTION_HEADERS.to_vec();
                headers.shuffle(&mut g.rng);
                for h in headers.into_iter().take(n_sections) {
                    sections.push((h.to_string(), String::new(), Vec::new()));
                }
                for m in 0..n_mentions {
                    let idx = if m < n_sections { m } else { g.rng.gen_range(0..n_sections) };
                    let mention = g.mention();
                    let filler = g.rng.gen_bool(0.4).then(|| *FILLERS.choose(&mut g.rng).unwrap());
                    let (_, body, mentions) = &mut sections[idx];
                    if let Some(f) = filler {
                        if !body.is_empty() {
                            body.push(' ');
                        }
                        body.push_str(f);
                    }
                    if !body.is_empty() {
                        body.push(' ');
                    }
                    let at = body.len();
                    body.push_str(&mention.sentence);
                    mentions.push((mention, at));
                }
            }

            let entries: Vec<IcdEntry> = codes.iter().map(|(e, _)| e.clone()).collect();
            let section_values = sections
                .iter()
                .map(|(h, b, _)| Section::new(h, b))
                .collect::<Result<Vec<_>, _>>()?;
            let doc = NoteDocument::new(&patient_id, &encounter_id, date, section_values, entries);
            let rendered = doc.render();

            let mut text_concepts = BTreeSet::new();
            for ((_, _, mentions), range) in sections.iter().zip(&rendered.section_body_ranges) {
                for (m, at) in mentions {
                    let start = range.start + at + m.surface.start;
                    let end = range.start + at + m.surface.end;
                    text_concepts.insert(m.concept);
                    truth.spans.push(PlantedSpan {
                        doc_id: doc.doc_id.clone(),
                        patient_id: patient_id.clone(),
                        encounter_id: encounter_id.clone(),
                        start,
                        end,
                        concept: m.concept,
                        surface: rendered.text[start..end].to_string(),
                        source: SpanSource::FreeText,
                        labels: m.labels.clone(),
                        valid: m.valid,
                    });
                }
            }
            let mut icd_concepts = BTreeSet::new();
            for ((entry, concepts), range) in codes.iter().zip(&rendered.icd_code_ranges) {
                for &c in concepts.iter() {
                    icd_concepts.insert(c);
                    if text_concepts.contains(&c) {
                        continue;
                    }
                    truth.spans.push(PlantedSpan {
                        doc_id: doc.doc_id.clone(),
                        patient_id: patient_id.clone(),
                        encounter_id: encounter_id.clone(),
                        start: range.start,
                        end: range.end,
                        concept: c,
                        surface: entry.code.clone(),
                        source: entry.location.into(),
                        labels: Vec::new(),
                        valid: true,
                    });
                }
            }
            truth.notes.push(NotePlan {
                doc_id: doc.doc_id.clone(),
                text_concepts,
                icd_concepts,
            });
            record.push(Encounter {
                encounter_id,
                note: doc,
            })?;
        }
        corpus.patients.push(record);
    }
    Ok((corpus, truth))
}
