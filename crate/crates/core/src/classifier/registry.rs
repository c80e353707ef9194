//! Interchangeable task-training strategies, looked up by name at runtime.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::baseline::TaskMajority;
use crate::dataset::LabeledInstance;
use crate::encoder::EncoderState;
use crate::ontology::TaskId;

use super::{grid_search, ClassifierError, Grid, GridPoint, HeadConfig, TaskExample, TaskModel, TrainConfig};

/// Everything a strategy sees for one task on one fold.
pub struct TaskContext<'a> {
    pub task: TaskId,
    pub classes: &'a [String],
    pub train: &'a [&'a LabeledInstance],
    pub dev: &'a [&'a LabeledInstance],
    pub test: &'a [&'a LabeledInstance],
    pub seed: u64,
}

pub trait TaskTrainer: Send + Sync {
    fn name(&self) -> &str;

    /// Fits on `train` (model selection on `dev`) and predicts a class for
    /// every `test` instance.
    fn fit_predict(&self, ctx: &TaskContext<'_>) -> Result<Vec<String>, ClassifierError>;
}

#[derive(Debug, Clone, Default)]
pub struct TrainerSettings {
    pub encoder: Option<Arc<EncoderState>>,
    pub grid: Grid,
    pub train: TrainConfig,
    pub head: HeadConfig,
}

pub struct MajorityTrainer;

impl TaskTrainer for MajorityTrainer {
    fn name(&self) -> &str {
        "majority"
    }

    fn fit_predict(&self, ctx: &TaskContext<'_>) -> Result<Vec<String>, ClassifierError> {
        let m = TaskMajority::fit(
            ctx.task,
            ctx.classes,
            ctx.train.iter().map(|i| (i.concept, i.span_text.as_str(), i.class.as_str())),
        )?;
        Ok(ctx
            .test
            .iter()
            .map(|i| m.predict(i.concept, &i.span_text).to_string())
            .collect())
    }
}

/// Grid-searched span classifier over a shared encoder.
pub struct NeuralTrainer {
    pub name: String,
    pub encoder: Arc<EncoderState>,
    pub frozen: bool,
    pub grid: Grid,
    pub train: TrainConfig,
    pub head: HeadConfig,
}

impl NeuralTrainer {
    /// Runs the grid search and returns the selected configuration and model.
    pub fn fit(&self, ctx: &TaskContext<'_>) -> Result<(GridPoint, TaskModel), ClassifierError> {
        let vocab = &self.encoder.vocab;
        let convert = |xs: &[&LabeledInstance]| -> Result<Vec<TaskExample>, ClassifierError> {
            xs.iter().map(|i| TaskExample::from_instance(i, vocab, ctx.classes)).collect()
        };
        let train = convert(ctx.train)?;
        let dev = convert(ctx.dev)?;
        let cfg = TrainConfig {
            frozen_encoder: self.frozen,
            seed: ctx.seed,
            ..self.train.clone()
        };
        let head_seed = crate::seeds::derive(ctx.seed, "head");
        let make = |h: HeadConfig| {
            TaskModel::new((*self.encoder).clone(), ctx.task, ctx.classes.to_vec(), h, head_seed)
        };
        let result = grid_search(&self.grid, &cfg, self.head, &make, &train, &dev)?;
        let best = result.best();
        Ok((best.point, best.outcome.model.clone()))
    }
}

impl TaskTrainer for NeuralTrainer {
    fn name(&self) -> &str {
        &self.name
    }

    fn fit_predict(&self, ctx: &TaskContext<'_>) -> Result<Vec<String>, ClassifierError> {
        let (_, model) = self.fit(ctx)?;
        let test: Vec<TaskExample> = ctx
            .test
            .iter()
            .map(|i| TaskExample::from_instance(i, &model.encoder.vocab, ctx.classes))
            .collect::<Result<_, _>>()?;
        test.iter()
            .map(|e| Ok(ctx.classes[model.predict(e)?].clone()))
            .collect()
    }
}

type Factory = Box<dyn Fn(&TrainerSettings) -> Result<Box<dyn TaskTrainer>, ClassifierError> + Send + Sync>;

/// Named constructors for task trainers.
pub struct TrainerRegistry {
    factories: BTreeMap<String, Factory>,
}

impl Default for TrainerRegistry {
    fn default() -> Self {
        let mut r = TrainerRegistry {
            factories: BTreeMap::new(),
        };
        r.register("majority", |_| Ok(Box::new(MajorityTrainer)));
        for (name, frozen) in [("neural-frozen", true), ("neural-unfrozen", false)] {
            r.register(name, move |s| {
                let encoder = s
                    .encoder
                    .clone()
                    .ok_or_else(|| ClassifierError::MissingEncoder(name.to_string()))?;
                Ok(Box::new(NeuralTrainer {
                    name: name.to_string(),
                    encoder,
                    frozen,
                    grid: s.grid.clone(),
                    train: s.train.clone(),
                    head: s.head,
                }))
            });
        }
        r
    }
}

impl TrainerRegistry {
    pub fn register(
        &mut self,
        name: &str,
        f: impl Fn(&TrainerSettings) -> Result<Box<dyn TaskTrainer>, ClassifierError> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.to_string(), Box::new(f));
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn create(&self, name: &str, settings: &TrainerSettings) -> Result<Box<dyn TaskTrainer>, ClassifierError> {
        let f = self
            .factories
            .get(name)
            .ok_or_else(|| ClassifierError::UnknownTrainer(name.to_string()))?;
        f(settings)
    }
}
