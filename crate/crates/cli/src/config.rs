use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use mapcast::dataset::Region;
use mapcast::tensor_nn::UNetConfig;
use mapcast::trainer::SgdConfig;
use serde::{Deserialize, Serialize};

/// Training run description. Every field is optional in the JSON file and
/// defaults to the standard setup.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: UNetConfig,
    pub sgd: SgdConfig,
    pub data: DataOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataOptions {
    /// Required when the data directory holds more than one city.
    pub city: Option<String>,
    /// Distance between consecutive training clip starts.
    pub stride: usize,
    /// The latest `val_days` days are held out for validation.
    pub val_days: usize,
    /// Prediction slots used for the test-slot validation column.
    pub test_slots: Vec<usize>,
    pub region: Option<Region>,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self {
            city: None,
            stride: 1,
            val_days: 1,
            test_slots: Vec::new(),
            region: None,
        }
    }
}

impl TrainConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
