//! Declarative training schedule for an external trainer.

use serde::{Deserialize, Serialize};

use crate::error::DatasetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceWeights {
    /// Start from COCO-pretrained weights.
    #[serde(rename = "coco")]
    Coco,
    /// Start from weights already trained on COCO and then on another 2D material.
    #[serde(rename = "coco+2dmat")]
    CocoThen2dMat,
}

impl std::str::FromStr for SourceWeights {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coco" => Ok(SourceWeights::Coco),
            "coco+2dmat" => Ok(SourceWeights::CocoThen2dMat),
            other => Err(DatasetError::Plan(format!(
                "unknown source weights {other:?}; expected coco or coco+2dmat"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableScope {
    Heads,
    Layer4Up,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub epochs: u32,
    pub learning_rate: f64,
    pub scope: TrainableScope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub source: SourceWeights,
    pub stages: Vec<Stage>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations_per_epoch: u32,
}

impl TrainingPlan {
    pub fn total_epochs(&self) -> u64 {
        self.stages.iter().map(|s| s.epochs as u64).sum()
    }

    pub fn total_iterations(&self) -> u64 {
        self.total_epochs() * self.iterations_per_epoch as u64
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.stages.is_empty() {
            return Err(DatasetError::Plan("plan has no stages".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.epochs == 0 {
                return Err(DatasetError::Plan(format!("stage {i}: epochs must be positive")));
            }
            if !(s.learning_rate > 0.0) || !s.learning_rate.is_finite() {
                return Err(DatasetError::Plan(format!(
                    "stage {i}: learning rate must be positive, got {}",
                    s.learning_rate
                )));
            }
        }
        if !(self.momentum > 0.0) || !(self.weight_decay > 0.0) || self.iterations_per_epoch == 0 {
            return Err(DatasetError::Plan(
                "momentum, weight decay and iterations per epoch must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanOverrides {
    pub epochs_per_stage: Option<u32>,
    pub learning_rates: Option<Vec<f64>>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub iterations_per_epoch: Option<u32>,
}

pub fn emit_training_plan(source: SourceWeights, overrides: &PlanOverrides) -> Result<TrainingPlan, DatasetError> {
    let scopes = [
        TrainableScope::Heads,
        TrainableScope::Layer4Up,
        TrainableScope::All,
        TrainableScope::All,
    ];
    let lrs = overrides.learning_rates.clone().unwrap_or_else(|| vec![1e-3, 1e-3, 1e-4, 1e-5]);
    if lrs.len() != scopes.len() {
        return Err(DatasetError::Plan(format!(
            "expected {} learning rates, got {}",
            scopes.len(),
            lrs.len()
        )));
    }
    let epochs = overrides.epochs_per_stage.unwrap_or(30);
    let plan = TrainingPlan {
        source,
        stages: scopes
            .iter()
            .zip(lrs)
            .map(|(&scope, learning_rate)| Stage {
                epochs,
                learning_rate,
                scope,
            })
            .collect(),
        momentum: overrides.momentum.unwrap_or(0.9),
        weight_decay: overrides.weight_decay.unwrap_or(1e-4),
        iterations_per_epoch: overrides.iterations_per_epoch.unwrap_or(500),
    };
    plan.validate()?;
    Ok(plan)
}
