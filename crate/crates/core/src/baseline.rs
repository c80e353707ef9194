//! Majority baseline conditioned on concept and span text, backing off to
//! the concept, then the span text, then the global majority.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{ConceptId, Ontology, TaskId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BaselineError {
    #[error("no training instances for {0}")]
    EmptyTask(TaskId),
    #[error("{class:?} is not a class of {task}")]
    UnknownClass { task: TaskId, class: String },
    #[error("no model fitted for {0}")]
    Unfitted(TaskId),
}

/// Case-folds and collapses whitespace runs to single spaces.
pub fn normalize_span(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Which count table answered a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackOff {
    ConceptAndSpan,
    Concept,
    Span,
    Global,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskMajority {
    pub task: TaskId,
    pub classes: Vec<String>,
    pub joint: HashMap<(ConceptId, String), Vec<usize>>,
    pub by_concept: HashMap<ConceptId, Vec<usize>>,
    pub by_span: HashMap<String, Vec<usize>>,
    pub global: Vec<usize>,
}

fn argmax(counts: &[usize]) -> usize {
    // First maximum wins, so ties go to the earlier canonical class.
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

impl TaskMajority {
    pub fn fit<'a>(
        task: TaskId,
        classes: &[String],
        examples: impl IntoIterator<Item = (ConceptId, &'a str, &'a str)>,
    ) -> Result<TaskMajority, BaselineError> {
        let k = classes.len();
        let mut m = TaskMajority {
            task,
            classes: classes.to_vec(),
            joint: HashMap::new(),
            by_concept: HashMap::new(),
            by_span: HashMap::new(),
            global: vec![0; k],
        };
        let mut n = 0;
        for (concept, span, class) in examples {
            let ci = classes
                .iter()
                .position(|c| c == class)
                .ok_or_else(|| BaselineError::UnknownClass {
                    task,
                    class: class.to_string(),
                })?;
            let span = normalize_span(span);
            m.joint.entry((concept, span.clone())).or_insert_with(|| vec![0; k])[ci] += 1;
            m.by_concept.entry(concept).or_insert_with(|| vec![0; k])[ci] += 1;
            m.by_span.entry(span).or_insert_with(|| vec![0; k])[ci] += 1;
            m.global[ci] += 1;
            n += 1;
        }
        if n == 0 {
            return Err(BaselineError::EmptyTask(task));
        }
        Ok(m)
    }

    pub fn predict_with_case(&self, concept: ConceptId, span: &str) -> (&str, BackOff) {
        let span = normalize_span(span);
        let (counts, case) = if let Some(c) = self.joint.get(&(concept, span.clone())) {
            (c, BackOff::ConceptAndSpan)
        } else if let Some(c) = self.by_concept.get(&concept) {
            (c, BackOff::Concept)
        } else if let Some(c) = self.by_span.get(&span) {
            (c, BackOff::Span)
        } else {
            (&self.global, BackOff::Global)
        };
        (&self.classes[argmax(counts)], case)
    }

    pub fn predict(&self, concept: ConceptId, span: &str) -> &str {
        self.predict_with_case(concept, span).0
    }
}

/// One fitted majority table per task.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MajorityModel {
    pub tasks: BTreeMap<TaskId, TaskMajority>,
}

impl MajorityModel {
    /// Fits every task that has at least one example; `(concept, span, task, class)`.
    pub fn fit<'a>(
        ontology: &Ontology,
        examples: impl IntoIterator<Item = (ConceptId, &'a str, TaskId, &'a str)>,
    ) -> Result<MajorityModel, BaselineError> {
        let mut per_task: BTreeMap<TaskId, Vec<(ConceptId, &str, &str)>> = BTreeMap::new();
        for (c, span, task, class) in examples {
            per_task.entry(task).or_default().push((c, span, class));
        }
        let mut tasks = BTreeMap::new();
        for (task, ex) in per_task {
            let classes = &ontology.task(task).classes;
            tasks.insert(task, TaskMajority::fit(task, classes, ex)?);
        }
        Ok(MajorityModel { tasks })
    }

    pub fn predict(&self, concept: ConceptId, span: &str, task: TaskId) -> Result<&str, BaselineError> {
        self.tasks
            .get(&task)
            .map(|m| m.predict(concept, span))
            .ok_or(BaselineError::Unfitted(task))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ConceptId::*;

    fn classes() -> Vec<String> {
        vec!["DME".into(), "Other".into()]
    }

    #[test]
    fn counts_and_back_off() {
        let ex = [
            (B1, "DME", "DME"),
            (B1, "DME", "DME"),
            (B1, "DME", "DME"),
            (B1, "DME", "Other"),
            (B1, "CSME", "Other"),
        ];
        let m = TaskMajority::fit(TaskId::TypeMe, &classes(), ex).unwrap();
        assert_eq!(m.joint[&(B1, "dme".into())], vec![3, 1]);
        assert_eq!(m.predict_with_case(B1, "DME"), ("DME", BackOff::ConceptAndSpan));
        assert_eq!(m.predict_with_case(B1, "CME"), ("DME", BackOff::Concept));
        assert_eq!(m.predict_with_case(A1, "csme"), ("Other", BackOff::Span));
        assert_eq!(m.predict_with_case(A1, "xyz"), ("DME", BackOff::Global));
    }

    #[test]
    fn ties_prefer_canonical_order() {
        let ex = [(B1, "ME", "Other"), (B1, "ME", "DME")];
        let m = TaskMajority::fit(TaskId::TypeMe, &classes(), ex).unwrap();
        assert_eq!(m.predict(B1, "ME"), "DME");
    }

    #[test]
    fn normalizes_spans() {
        assert_eq!(normalize_span("  Macular \n EDEMA "), "macular edema");
        let m = TaskMajority::fit(TaskId::TypeMe, &classes(), [(B1, "macular  edema", "Other")]).unwrap();
        assert_eq!(m.predict_with_case(B1, "Macular Edema").1, BackOff::ConceptAndSpan);
    }

    #[test]
    fn errors() {
        let empty: [(ConceptId, &str, &str); 0] = [];
        assert_eq!(
            TaskMajority::fit(TaskId::TypeMe, &classes(), empty).unwrap_err(),
            BaselineError::EmptyTask(TaskId::TypeMe)
        );
        assert!(TaskMajority::fit(TaskId::TypeMe, &classes(), [(B1, "ME", "Mild")]).is_err());
        let m = MajorityModel::default();
        assert!(m.predict(B1, "ME", TaskId::TypeMe).is_err());
    }
}
