//! Concept ontology, attribute validity and the consolidation of raw
//! attribute labels into the fourteen classification tasks.
//!
//! The ontology is loaded from a line-oriented definition file (see
//! `data/ontology.txt` for the grammar). A copy of the default file is
//! embedded in the library so [`Ontology::default_ontology`] never touches
//! the filesystem.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const DEFAULT_ONTOLOGY: &str = include_str!("../data/ontology.txt");

/// Raw values accepted for the span validity category on every concept.
pub const SPAN_VALIDITY_VALUES: [&str; 2] = ["Valid", "Invalid"];

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid ontology: {0}")]
    Validation(String),
    #[error("{value:?} is not a legal {category} class for {concept}")]
    IllegalLabel {
        concept: ConceptId,
        category: AttributeCategory,
        value: String,
    },
    #[error("negated {category} {value:?} has no consolidation rule for {concept}")]
    NoNegationRule {
        concept: ConceptId,
        category: AttributeCategory,
        value: String,
    },
    #[error("unknown raw value {0:?}")]
    UnknownValue(String),
    #[error("unknown identifier {0:?}")]
    UnknownId(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:expr),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(into = "&'static str", try_from = "String")]
        pub enum $name { $($variant),+ }

        impl From<$name> for &'static str {
            fn from(v: $name) -> Self {
                v.as_str()
            }
        }

        impl TryFrom<String> for $name {
            type Error = OntologyError;
            fn try_from(s: String) -> Result<Self, Self::Error> {
                s.parse()
            }
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            /// Position in declaration order.
            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = OntologyError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    other => Err(OntologyError::UnknownId(other.to_string())),
                }
            }
        }
    };
}

string_enum! {
    /// One of the 19 clinical concepts.
    ConceptId {
        A1 => "A1", A2 => "A2", A3 => "A3", A4 => "A4", B1 => "B1",
        C1 => "C1", C2 => "C2", C3 => "C3",
        D1 => "D1", D2 => "D2", D3 => "D3", D4 => "D4",
        E1 => "E1", E2 => "E2", F1 => "F1",
        G1 => "G1", G2 => "G2", G3 => "G3", G4 => "G4",
    }
}

/// Number of concepts, which is also the width of the concept indicator.
pub const NUM_CONCEPTS: usize = 19;

string_enum! {
    ConceptGroup {
        RetinaConditions => "RetinaConditions",
        RetinaComplications => "RetinaComplications",
        TreatmentProcedure => "TreatmentProcedure",
        TreatmentSurgery => "TreatmentSurgery",
        Comorbidities => "Comorbidities",
        DMComplications => "DMComplications",
    }
}

string_enum! {
    AttributeCategory {
        Laterality => "Laterality",
        Temporality => "Temporality",
        SeverityType => "SeverityType",
        SpanValidity => "SpanValidity",
        Negation => "Negation",
    }
}

string_enum! {
    /// The consolidated classification tasks, in report order.
    TaskId {
        TemporalityRetina => "Temporality-Retina",
        TemporalityDmComplications => "Temporality-DMComplications",
        TemporalityTreatment => "Temporality-Treatment",
        LateralityAll => "Laterality-All",
        TypeMe => "Type-ME",
        TypeRd => "Type-RD",
        TypeNv => "Type-NV",
        TypeDm => "Type-DM",
        TypeNvgSurgery => "Type-NVGSurgery",
        TypeRetinaSurgery => "Type-RetinaSurgery",
        SeverityNpdr => "Severity-NPDR",
        SeverityPdr => "Severity-PDR",
        SpanValidityMe => "SpanValidity-ME",
        SpanValidityRetinaSurgery => "SpanValidity-RetinaSurgery",
    }
}

pub const NUM_TASKS: usize = 14;

impl TaskId {
    /// Attribute heading used when grouping report rows.
    pub fn attribute_label(self) -> &'static str {
        use TaskId::*;
        match self {
            TemporalityRetina | TemporalityDmComplications | TemporalityTreatment => "Temporality",
            LateralityAll => "Laterality",
            TypeMe | TypeRd | TypeNv | TypeDm | TypeNvgSurgery | TypeRetinaSurgery => "Type",
            SeverityNpdr | SeverityPdr => "Severity",
            SpanValidityMe | SpanValidityRetinaSurgery => "Span Validity",
        }
    }

    /// Concept label used in report rows.
    pub fn concepts_label(self) -> &'static str {
        use TaskId::*;
        match self {
            TemporalityRetina => "Retina",
            TemporalityDmComplications => "DM Complications",
            TemporalityTreatment => "Treatment",
            LateralityAll => "All",
            TypeMe | SpanValidityMe => "ME",
            TypeRd => "RD",
            TypeNv => "NV",
            TypeDm => "DM",
            TypeNvgSurgery => "NVG Surgery",
            TypeRetinaSurgery | SpanValidityRetinaSurgery => "Retina Surgery",
            SeverityNpdr => "NPDR",
            SeverityPdr => "PDR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concept {
    pub id: ConceptId,
    pub group: ConceptGroup,
    pub display_name: String,
}

/// An annotated attribute value before consolidation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RawLabel {
    pub concept: ConceptId,
    pub category: AttributeCategory,
    pub value: String,
    pub negated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub id: TaskId,
    pub category: AttributeCategory,
    /// Canonical class order; ties in any argmax resolve to the earliest.
    pub classes: Vec<String>,
    pub concepts: BTreeSet<ConceptId>,
}

impl Task {
    pub fn class_index(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

type RuleKey = (ConceptId, AttributeCategory, String, bool);

#[derive(Debug, Clone)]
pub struct Ontology {
    concepts: Vec<Concept>,
    attributes: Vec<BTreeMap<AttributeCategory, Vec<String>>>,
    tasks: Vec<Task>,
    rules: HashMap<RuleKey, (TaskId, usize)>,
    exclusions: HashSet<(ConceptId, AttributeCategory)>,
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Concepts,
    Attributes,
    Tasks,
    Consolidation,
    Exclusions,
}

fn split_fields(line: &str, n: usize, lineno: usize) -> Result<Vec<&str>, OntologyError> {
    let fields: Vec<&str> = line.split('|').map(str::trim).collect();
    if fields.len() != n {
        return Err(OntologyError::Parse {
            line: lineno,
            message: format!("expected {n} '|'-separated fields, found {}", fields.len()),
        });
    }
    Ok(fields)
}

fn parse_at<T: FromStr<Err = OntologyError>>(s: &str, lineno: usize) -> Result<T, OntologyError> {
    s.parse().map_err(|e: OntologyError| OntologyError::Parse {
        line: lineno,
        message: e.to_string(),
    })
}

fn parse_concept_list(s: &str, lineno: usize) -> Result<Vec<ConceptId>, OntologyError> {
    let ids = s
        .split_whitespace()
        .map(|tok| parse_at::<ConceptId>(tok, lineno))
        .collect::<Result<Vec<_>, _>>()?;
    if ids.is_empty() {
        return Err(OntologyError::Parse {
            line: lineno,
            message: "empty concept list".into(),
        });
    }
    Ok(ids)
}

fn parse_class_list(s: &str, lineno: usize) -> Result<Vec<String>, OntologyError> {
    let classes: Vec<String> = s.split(',').map(|c| c.trim().to_string()).collect();
    if classes.iter().any(String::is_empty) {
        return Err(OntologyError::Parse {
            line: lineno,
            message: "empty class name".into(),
        });
    }
    let unique: HashSet<&String> = classes.iter().collect();
    if unique.len() != classes.len() {
        return Err(OntologyError::Parse {
            line: lineno,
            message: "duplicate class name".into(),
        });
    }
    Ok(classes)
}

impl Ontology {
    /// The built-in ontology.
    pub fn default_ontology() -> Ontology {
        Ontology::parse(DEFAULT_ONTOLOGY).expect("embedded ontology is valid")
    }

    pub fn default_text() -> &'static str {
        DEFAULT_ONTOLOGY
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Ontology, OntologyError> {
        let text = std::fs::read_to_string(path)?;
        Ontology::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Ontology, OntologyError> {
        let mut section = Section::None;
        let mut concepts: BTreeMap<ConceptId, Concept> = BTreeMap::new();
        let mut attributes: BTreeMap<ConceptId, BTreeMap<AttributeCategory, Vec<String>>> =
            BTreeMap::new();
        let mut tasks: BTreeMap<TaskId, Task> = BTreeMap::new();
        let mut rules: HashMap<RuleKey, (TaskId, usize)> = HashMap::new();
        let mut exclusions = HashSet::new();

        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = match &line[1..line.len() - 1] {
                    "concepts" => Section::Concepts,
                    "attributes" => Section::Attributes,
                    "tasks" => Section::Tasks,
                    "consolidation" => Section::Consolidation,
                    "exclusions" => Section::Exclusions,
                    other => {
                        return Err(OntologyError::Parse {
                            line: lineno,
                            message: format!("unknown section [{other}]"),
                        })
                    }
                };
                continue;
            }
            match section {
                Section::None => {
                    return Err(OntologyError::Parse {
                        line: lineno,
                        message: "content before the first section header".into(),
                    })
                }
                Section::Concepts => {
                    let f = split_fields(line, 3, lineno)?;
                    let id: ConceptId = parse_at(f[0], lineno)?;
                    let group: ConceptGroup = parse_at(f[1], lineno)?;
                    let concept = Concept {
                        id,
                        group,
                        display_name: f[2].to_string(),
                    };
                    if concepts.insert(id, concept).is_some() {
                        return Err(OntologyError::Parse {
                            line: lineno,
                            message: format!("concept {id} defined twice"),
                        });
                    }
                }
                Section::Attributes => {
                    let f = split_fields(line, 3, lineno)?;
                    let id: ConceptId = parse_at(f[0], lineno)?;
                    let category: AttributeCategory = parse_at(f[1], lineno)?;
                    if !matches!(
                        category,
                        AttributeCategory::Laterality
                            | AttributeCategory::Temporality
                            | AttributeCategory::SeverityType
                    ) {
                        return Err(OntologyError::Parse {
                            line: lineno,
                            message: format!("{category} cannot be declared as an attribute"),
                        });
                    }
                    let classes = parse_class_list(f[2], lineno)?;
                    if attributes
                        .entry(id)
                        .or_default()
                        .insert(category, classes)
                        .is_some()
                    {
                        return Err(OntologyError::Parse {
                            line: lineno,
                            message: format!("{id} {category} declared twice"),
                        });
                    }
                }
                Section::Tasks => {
                    let f = split_fields(line, 3, lineno)?;
                    let id: TaskId = parse_at(f[0], lineno)?;
                    let category: AttributeCategory = parse_at(f[1], lineno)?;
                    let classes = parse_class_list(f[2], lineno)?;
                    let task = Task {
                        id,
                        category,
                        classes,
                        concepts: BTreeSet::new(),
                    };
                    if tasks.insert(id, task).is_some() {
                        return Err(OntologyError::Parse {
                            line: lineno,
                            message: format!("task {id} defined twice"),
                        });
                    }
                }
                Section::Consolidation => {
                    let f = split_fields(line, 4, lineno)?;
                    let task_id: TaskId = parse_at(f[0], lineno)?;
                    let ids = parse_concept_list(f[1], lineno)?;
                    let (value, negated) = match f[2].strip_prefix('!') {
                        Some(v) => (v.trim().to_string(), true),
                        None => (f[2].to_string(), false),
                    };
                    let task = tasks.get_mut(&task_id).ok_or_else(|| OntologyError::Parse {
                        line: lineno,
                        message: format!("task {task_id} used before its [tasks] entry"),
                    })?;
                    let class_idx =
                        task.class_index(f[3])
                            .ok_or_else(|| OntologyError::Validation(format!(
                                "line {lineno}: {:?} is not a class of {task_id}",
                                f[3]
                            )))?;
                    for id in ids {
                        task.concepts.insert(id);
                        let key = (id, task.category, value.clone(), negated);
                        if let Some((other, _)) = rules.insert(key, (task_id, class_idx)) {
                            return Err(OntologyError::Validation(format!(
                                "line {lineno}: {id} {}{value:?} is mapped by both {other} and {task_id}",
                                if negated { "negated " } else { "" }
                            )));
                        }
                    }
                }
                Section::Exclusions => {
                    let f = split_fields(line, 2, lineno)?;
                    let ids = parse_concept_list(f[0], lineno)?;
                    let category: AttributeCategory = parse_at(f[1], lineno)?;
                    for id in ids {
                        exclusions.insert((id, category));
                    }
                }
            }
        }

        let ontology = Ontology {
            concepts: ConceptId::ALL
                .iter()
                .map(|id| {
                    concepts.remove(id).ok_or_else(|| {
                        OntologyError::Validation(format!("concept {id} is missing"))
                    })
                })
                .collect::<Result<_, _>>()?,
            attributes: ConceptId::ALL
                .iter()
                .map(|id| attributes.remove(id).unwrap_or_default())
                .collect(),
            tasks: TaskId::ALL
                .iter()
                .map(|id| {
                    tasks
                        .remove(id)
                        .ok_or_else(|| OntologyError::Validation(format!("task {id} is missing")))
                })
                .collect::<Result<_, _>>()?,
            rules,
            exclusions,
        };
        ontology.validate()?;
        Ok(ontology)
    }

    fn validate(&self) -> Result<(), OntologyError> {
        // Totality over every non-negated legal label, and no concept/category
        // that is both excluded and mapped.
        for &concept in ConceptId::ALL {
            for (category, values) in self.legal_values(concept) {
                let excluded = self.exclusions.contains(&(concept, category));
                for value in values {
                    let key = (concept, category, value.to_string(), false);
                    match (self.rules.get(&key), excluded) {
                        (Some((task, _)), true) => {
                            return Err(OntologyError::Validation(format!(
                                "{concept} {category} is excluded but {value:?} maps to {task}"
                            )))
                        }
                        (None, false) => {
                            return Err(OntologyError::Validation(format!(
                                "{concept} {category} class {value:?} has no consolidation rule or exclusion"
                            )))
                        }
                        _ => {}
                    }
                }
            }
        }
        // Every consolidated class is reachable from some legal raw label.
        for task in &self.tasks {
            for (ci, class) in task.classes.iter().enumerate() {
                let reachable = self.rules.iter().any(|((concept, category, value, _), &(t, c))| {
                    t == task.id
                        && c == ci
                        && self
                            .legal_values(*concept)
                            .iter()
                            .any(|(cat, vals)| cat == category && vals.contains(&value.as_str()))
                });
                if !reachable {
                    return Err(OntologyError::Validation(format!(
                        "class {class:?} of {} is unreachable from any legal raw label",
                        task.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Legal raw values per category, including the implicit span validity values.
    fn legal_values(&self, concept: ConceptId) -> Vec<(AttributeCategory, Vec<&str>)> {
        let mut out: Vec<(AttributeCategory, Vec<&str>)> = self.attributes[concept.index()]
            .iter()
            .map(|(cat, vals)| (*cat, vals.iter().map(String::as_str).collect()))
            .collect();
        out.push((AttributeCategory::SpanValidity, SPAN_VALIDITY_VALUES.to_vec()));
        out
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn concept(&self, id: ConceptId) -> &Concept {
        &self.concepts[id.index()]
    }

    pub fn concept_by_display_name(&self, name: &str) -> Option<ConceptId> {
        self.concepts
            .iter()
            .find(|c| c.display_name == name)
            .map(|c| c.id)
    }

    /// Attribute categories the concept exposes with their legal classes.
    /// Categories shown as `--` for the concept are absent.
    pub fn valid_attributes(&self, concept: ConceptId) -> &BTreeMap<AttributeCategory, Vec<String>> {
        &self.attributes[concept.index()]
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, id: TaskId) -> &Task {
        &self.tasks[id.index()]
    }

    pub fn tasks_for_concept(&self, concept: ConceptId) -> Vec<TaskId> {
        self.tasks
            .iter()
            .filter(|t| t.concepts.contains(&concept))
            .map(|t| t.id)
            .collect()
    }

    pub fn is_excluded(&self, concept: ConceptId, category: AttributeCategory) -> bool {
        self.exclusions.contains(&(concept, category))
    }

    /// Builds a validated raw label.
    pub fn raw_label(
        &self,
        concept: ConceptId,
        category: AttributeCategory,
        value: &str,
        negated: bool,
    ) -> Result<RawLabel, OntologyError> {
        let label = RawLabel {
            concept,
            category,
            value: value.to_string(),
            negated,
        };
        self.check_raw(&label)?;
        Ok(label)
    }

    pub fn check_raw(&self, label: &RawLabel) -> Result<(), OntologyError> {
        let legal = self
            .legal_values(label.concept)
            .into_iter()
            .any(|(cat, vals)| cat == label.category && vals.contains(&label.value.as_str()));
        if !legal {
            return Err(OntologyError::IllegalLabel {
                concept: label.concept,
                category: label.category,
                value: label.value.clone(),
            });
        }
        if label.negated {
            let ok = label.category == AttributeCategory::Temporality
                && (self.is_excluded(label.concept, label.category)
                    || self.rules.contains_key(&(
                        label.concept,
                        label.category,
                        label.value.clone(),
                        true,
                    )));
            if !ok {
                return Err(OntologyError::NoNegationRule {
                    concept: label.concept,
                    category: label.category,
                    value: label.value.clone(),
                });
            }
        }
        Ok(())
    }

    /// Maps a raw label to its task and consolidated class, or `None` when the
    /// concept/category pair is deliberately not modelled.
    pub fn consolidate(&self, raw: &RawLabel) -> Result<Option<(TaskId, &str)>, OntologyError> {
        if self.is_excluded(raw.concept, raw.category) {
            return Ok(None);
        }
        let key = (raw.concept, raw.category, raw.value.clone(), raw.negated);
        match self.rules.get(&key) {
            Some(&(task, class)) => Ok(Some((task, self.task(task).classes[class].as_str()))),
            None => Err(OntologyError::UnknownValue(raw.value.clone())),
        }
    }

    /// All raw labels accepted by [`Ontology::check_raw`], in a fixed order.
    pub fn enumerate_raw_labels(&self) -> Vec<RawLabel> {
        let mut out = Vec::new();
        for &concept in ConceptId::ALL {
            for (category, values) in self.legal_values(concept) {
                for value in values {
                    for negated in [false, true] {
                        let label = RawLabel {
                            concept,
                            category,
                            value: value.to_string(),
                            negated,
                        };
                        if self.check_raw(&label).is_ok() {
                            out.push(label);
                        }
                    }
                }
            }
        }
        out
    }
}
