use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StimulusResult {
    pub path: String,
    pub reference_id: String,
    pub mos: f64,
    pub predicted: f64,
    pub fold: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub test_references: Vec<String>,
    pub stimuli: usize,
    /// `None` when the correlation is undefined for this fold.
    pub plcc: Option<f64>,
    pub srocc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    pub wall_time_seconds: f64,
    pub config: serde_json::Value,
    pub stimuli: Vec<StimulusResult>,
    pub folds: Vec<FoldResult>,
    /// Arithmetic mean over folds with a defined value.
    pub mean_plcc: Option<f64>,
    pub mean_srocc: Option<f64>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

impl RunReport {
    pub fn new(
        command: &str,
        seed: u64,
        config: serde_json::Value,
        stimuli: Vec<StimulusResult>,
        folds: Vec<FoldResult>,
        wall_time_seconds: f64,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            seed,
            wall_time_seconds,
            config,
            mean_plcc: mean(folds.iter().map(|f| f.plcc)),
            mean_srocc: mean(folds.iter().map(|f| f.srocc)),
            stimuli,
            folds,
        }
    }
}
