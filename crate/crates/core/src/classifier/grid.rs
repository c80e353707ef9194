use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_task, ClassifierError, HeadConfig, TaskExample, TaskModel, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Grid {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub hidden_dims: Vec<Option<usize>>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            learning_rates: vec![1e-5, 1e-4, 1e-3],
            batch_sizes: vec![8, 32, 64],
            hidden_dims: vec![None, Some(256), Some(512)],
        }
    }
}

impl Grid {
    /// Every configuration, learning rate outermost.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &learning_rate in &self.learning_rates {
            for &batch_size in &self.batch_sizes {
                for &hidden_dim in &self.hidden_dims {
                    out.push(GridPoint {
                        learning_rate,
                        batch_size,
                        hidden_dim,
                    });
                }
            }
        }
        out
    }

    /// Configurations the training set supports (batch no larger than it).
    pub fn supported(&self, n_train: usize) -> Vec<GridPoint> {
        self.points().into_iter().filter(|p| p.batch_size <= n_train).collect()
    }
}

#[derive(Debug, Clone)]
pub struct GridCandidate {
    pub point: GridPoint,
    pub dev_f1: f64,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    /// Trained candidates in grid order.
    pub candidates: Vec<GridCandidate>,
    pub best: usize,
}

impl GridResult {
    pub fn best(&self) -> &GridCandidate {
        &self.candidates[self.best]
    }
}

/// Trains one model per supported configuration (in parallel) and keeps the
/// one with the highest dev macro-F1; ties go to the earlier configuration.
/// `make_model` builds the untrained model for a head configuration.
pub fn grid_search(
    grid: &Grid,
    base: &TrainConfig,
    head: HeadConfig,
    make_model: &(dyn Fn(HeadConfig) -> TaskModel + Sync),
    train: &[TaskExample],
    dev: &[TaskExample],
) -> Result<GridResult, ClassifierError> {
    let points = grid.supported(train.len());
    if points.is_empty() {
        return Err(ClassifierError::NoConfigs);
    }
    let candidates: Vec<GridCandidate> = points
        .par_iter()
        .map(|&point| {
            let cfg = TrainConfig {
                learning_rate: point.learning_rate,
                batch_size: point.batch_size,
                ..base.clone()
            };
            let model = make_model(HeadConfig {
                hidden_dim: point.hidden_dim,
                ..head
            });
            let outcome = train_task(model, train, dev, &cfg)?;
            Ok(GridCandidate {
                point,
                dev_f1: outcome.best_dev_f1(),
                outcome,
            })
        })
        .collect::<Result<_, ClassifierError>>()?;
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.dev_f1 > candidates[best].dev_f1 {
            best = i;
        }
    }
    Ok(GridResult { candidates, best })
}
