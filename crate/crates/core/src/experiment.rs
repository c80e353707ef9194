//! Cross-validated comparison of the majority baseline with frozen and
//! unfrozen span classifiers over one or more encoders.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierError, Grid, HeadConfig, TaskContext, TrainConfig, TrainerRegistry, TrainerSettings};
use crate::dataset::LabeledInstance;
use crate::encoder::{
    mlm_pretrain, sequences_from_texts, subset_corpus, EncoderError, EncoderState, MlmConfig, MlmHead,
    PretrainPreset, Vocabulary,
};
use crate::evaluation::{macro_f1, ResultTable};
use crate::ontology::{Ontology, TaskId};
use crate::seeds;
use crate::stratify::{build_group_labels, make_splits, stratify, FoldPlan};

pub const MAJORITY_COLUMN: &str = "Majority";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    pub d: usize,
    pub max_window: usize,
    pub vocab_min_count: usize,
    pub vocab_max_size: Option<usize>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            d: 16,
            max_window: 32,
            vocab_min_count: 1,
            vocab_max_size: Some(5000),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub k: usize,
    pub seed: u64,
    pub grid: Grid,
    pub train: TrainConfig,
    pub head: HeadConfig,
    pub encoder: EncoderSpec,
    /// Pretraining for the "w/ Pretraining" encoder; `None` runs only the
    /// randomly initialised encoder.
    pub pretrain: Option<MlmConfig>,
    pub preset: PretrainPreset,
    pub cap_per_patient: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            k: 5,
            seed: 0,
            grid: Grid::default(),
            train: TrainConfig::default(),
            head: HeadConfig::default(),
            encoder: EncoderSpec::default(),
            pretrain: Some(MlmConfig::default()),
            preset: PretrainPreset::Small,
            cap_per_patient: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ClassifierError> {
        let text = std::fs::read_to_string(path).map_err(|e| ClassifierError::Config(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| ClassifierError::Config(e.to_string()))
    }
}

/// A named encoder that heads a pair of frozen/unfrozen columns.
#[derive(Debug, Clone)]
pub struct EncoderVariant {
    pub label: String,
    pub encoder: Arc<EncoderState>,
}

pub fn column_name(variant: &str, frozen: bool) -> String {
    format!("{variant}: {}", if frozen { "Frozen" } else { "Unfrozen" })
}

/// Builds the random encoder and, if configured, its pretrained counterpart.
pub fn prepare_encoders<S: AsRef<str> + Clone>(
    texts: &[S],
    cfg: &ExperimentConfig,
) -> Result<Vec<EncoderVariant>, EncoderError> {
    let spec = &cfg.encoder;
    let vocab = Vocabulary::build(texts, spec.vocab_min_count, spec.vocab_max_size)?;
    let max_len = match &cfg.pretrain {
        Some(p) => p.max_seq_len.max(spec.max_window),
        None => spec.max_window,
    };
    let random = EncoderState::random(vocab, spec.d, max_len, seeds::derive(cfg.seed, "encoder-init"));
    let mut out = vec![EncoderVariant {
        label: "w/o Pretraining".to_string(),
        encoder: Arc::new(random.clone()),
    }];
    if let Some(mlm) = &cfg.pretrain {
        let n = cfg.preset.documents(texts.len());
        if n > 0 {
            let docs = subset_corpus(texts, n, seeds::derive(cfg.seed, "pretrain-subset"))?;
            let seqs = sequences_from_texts(&random.vocab, &docs, mlm.max_seq_len);
            let head = MlmHead::random(random.vocab.len(), spec.d, seeds::derive(cfg.seed, "mlm-head"));
            let outcome = mlm_pretrain(random, head, &seqs, mlm, seeds::derive(cfg.seed, "pretrain"))?;
            out.push(EncoderVariant {
                label: format!("w/ Pretraining ({})", cfg.preset.as_str()),
                encoder: Arc::new(outcome.encoder),
            });
        }
    }
    Ok(out)
}

/// Patient-level folds stratified on every `task=class` label.
pub fn plan_folds(instances: &[LabeledInstance], k: usize, seed: u64) -> Result<FoldPlan, ClassifierError> {
    let m = build_group_labels(instances.iter().map(|i| (i.patient_id.as_str(), i.label_key())))?;
    Ok(stratify(&m, k, seeds::derive(seed, "folds"))?)
}

pub struct ExperimentOutput {
    pub table: ResultTable,
    pub plan: FoldPlan,
}

/// Scores every column on every task and test fold. Columns are the majority
/// baseline followed by frozen/unfrozen per encoder variant.
pub fn run_experiment(
    instances: &[LabeledInstance],
    ontology: &Ontology,
    variants: &[EncoderVariant],
    cfg: &ExperimentConfig,
    registry: &TrainerRegistry,
) -> Result<ExperimentOutput, ClassifierError> {
    let instances: Vec<LabeledInstance> = match cfg.cap_per_patient {
        Some(cap) => crate::stratify::cap_per_patient(
            instances,
            |i: &LabeledInstance| i.patient_id.as_str(),
            cap,
            seeds::derive(cfg.seed, "cap"),
        )?,
        None => instances.to_vec(),
    };
    let plan = plan_folds(&instances, cfg.k, cfg.seed)?;
    let splits = make_splits(cfg.k)?;

    let mut trainers = vec![(
        MAJORITY_COLUMN.to_string(),
        registry.create("majority", &TrainerSettings::default())?,
    )];
    for v in variants {
        let settings = TrainerSettings {
            encoder: Some(v.encoder.clone()),
            grid: cfg.grid.clone(),
            train: cfg.train.clone(),
            head: cfg.head,
        };
        for (name, frozen) in [("neural-frozen", true), ("neural-unfrozen", false)] {
            trainers.push((column_name(&v.label, frozen), registry.create(name, &settings)?));
        }
    }

    let mut grouped: BTreeMap<TaskId, Vec<Vec<&LabeledInstance>>> = BTreeMap::new();
    for i in &instances {
        let fold = plan.fold_of(&i.patient_id).expect("every patient is assigned");
        grouped.entry(i.task).or_insert_with(|| vec![Vec::new(); cfg.k])[fold].push(i);
    }

    let jobs: Vec<(TaskId, usize)> = grouped
        .keys()
        .flat_map(|&t| (0..cfg.k).map(move |f| (t, f)))
        .collect();
    let scores: Vec<Vec<(String, TaskId, usize, f64)>> = jobs
        .par_iter()
        .map(|&(task, f)| {
            let folds = &grouped[&task];
            let split = &splits[f];
            let train: Vec<&LabeledInstance> = split.train.iter().flat_map(|&j| folds[j].iter().copied()).collect();
            let dev = &folds[split.dev];
            let test = &folds[split.test];
            if train.is_empty() || dev.is_empty() || test.is_empty() {
                return Err(ClassifierError::Config(format!(
                    "task {task} has an empty train, dev or test partition in fold {f}"
                )));
            }
            let classes = ontology.task(task).classes.clone();
            let ctx = TaskContext {
                task,
                classes: &classes,
                train: &train,
                dev,
                test,
                seed: seeds::derive(cfg.seed, &format!("{task}/{f}")),
            };
            let golds: Vec<&str> = test.iter().map(|i| i.class.as_str()).collect();
            let mut out = Vec::new();
            for (col, trainer) in &trainers {
                let preds = trainer.fit_predict(&ctx)?;
                let preds: Vec<&str> = preds.iter().map(String::as_str).collect();
                out.push((col.clone(), task, f, macro_f1(&golds, &preds)?));
            }
            Ok(out)
        })
        .collect::<Result<_, ClassifierError>>()?;

    let mut table = ResultTable::new(trainers.iter().map(|(c, _)| c.clone()).collect(), cfg.k);
    for (col, task, f, s) in scores.into_iter().flatten() {
        table.record(task, &col, f, s);
    }
    Ok(ExperimentOutput { table, plan })
}
