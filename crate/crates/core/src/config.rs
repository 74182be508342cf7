//! TOML run configuration shared by `train`, `evaluate` and `interpret`.
//!
//! ```toml
//! [data]
//! speeds = "speeds.csv"
//! adjacency = "adjacency.csv"   # optional for encoder-only models
//! calendar = true
//!
//! [split]
//! train = 0.7
//! validation = 0.1
//! test = 0.2
//!
//! [model]
//! variant = "full"
//!
//! [train]
//! max_epochs = 50
//!
//! [eval]
//! horizons_minutes = [15, 30, 60]
//!
//! [output]
//! dir = "runs"
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{
    chronological_split, make_windows, zscore_apply, zscore_fit, FeatureTensor, NormalizationStats,
    SpeedTable, SplitSpec, WindowSample,
};
use crate::error::{Error, Result};
use crate::graph::{load_adjacency, SensorGraph};
use crate::metrics::{HorizonLabels, HorizonMode};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub speeds: PathBuf,
    #[serde(default)]
    pub adjacency: Option<PathBuf>,
    /// Append time-of-day and day-of-week channels (needs timestamps).
    #[serde(default = "yes")]
    pub calendar: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub horizons_minutes: Vec<u32>,
    pub mode: HorizonMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            horizons_minutes: vec![15, 30, 60],
            mode: HorizonMode::SingleStep,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses, resolves relative paths against the file's directory and
    /// checks that every input exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.data.speeds);
        if let Some(a) = self.data.adjacency.as_mut() {
            join(a);
        }
        join(&mut self.output.dir);
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.split.validate()?;
        let inputs = std::iter::once(&self.data.speeds).chain(self.data.adjacency.as_ref());
        for p in inputs {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "input file {} does not exist",
                    p.display()
                )));
            }
        }
        let channels = if self.data.calendar { 3 } else { 1 };
        if self.model.input_channels != channels {
            return Err(Error::Config(format!(
                "model.input_channels is {} but the data provides {channels} channel(s)",
                self.model.input_channels
            )));
        }
        Ok(())
    }

    pub fn horizon_labels(&self, timestep_minutes: f64) -> Result<HorizonLabels> {
        HorizonLabels::from_minutes(&self.eval.horizons_minutes, timestep_minutes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "validation" | "val" => Ok(SplitName::Validation),
            "test" => Ok(SplitName::Test),
            _ => Err(Error::Config(format!(
                "unknown split {s:?} (train, validation, test)"
            ))),
        }
    }
}

/// Raw and normalized partitions of one dataset, plus its graph.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub node_ids: Option<Vec<String>>,
    pub graph: Option<SensorGraph>,
    pub stats: NormalizationStats,
    raw: [FeatureTensor<f64>; 3],
    normalized: [FeatureTensor<f64>; 3],
}

impl PreparedData {
    /// Splits `tensor` chronologically and normalizes with training statistics.
    pub fn new(
        tensor: &FeatureTensor<f64>,
        split: &SplitSpec,
        graph: Option<SensorGraph>,
        node_ids: Option<Vec<String>>,
    ) -> Result<Self> {
        if let Some(g) = &graph {
            if g.node_count() != tensor.nodes() {
                return Err(Error::Data(format!(
                    "adjacency has {} nodes, speeds have {}",
                    g.node_count(),
                    tensor.nodes()
                )));
            }
        }
        let splits = chronological_split(tensor, split)?;
        let stats = zscore_fit(&splits.train)?;
        let raw = [splits.train, splits.validation, splits.test];
        let normalized = [
            zscore_apply(&raw[0], &stats),
            zscore_apply(&raw[1], &stats),
            zscore_apply(&raw[2], &stats),
        ];
        Ok(PreparedData {
            node_ids,
            graph,
            stats,
            raw,
            normalized,
        })
    }

    /// Reads the speeds (and adjacency, if configured) named by `config`.
    pub fn load(config: &RunConfig) -> Result<Self> {
        let table = SpeedTable::load(&config.data.speeds)?;
        let tensor = table.to_tensor::<f64>(config.data.calendar)?;
        let graph = config
            .data
            .adjacency
            .as_deref()
            .map(load_adjacency)
            .transpose()?;
        Self::new(&tensor, &config.split, graph, table.node_ids.clone())
    }

    fn index(split: SplitName) -> usize {
        match split {
            SplitName::Train => 0,
            SplitName::Validation => 1,
            SplitName::Test => 2,
        }
    }

    pub fn nodes(&self) -> usize {
        self.raw[0].nodes()
    }

    pub fn timestep_minutes(&self) -> f64 {
        self.raw[0].timestep_minutes
    }

    pub fn raw(&self, split: SplitName) -> &FeatureTensor<f64> {
        &self.raw[Self::index(split)]
    }

    pub fn normalized(&self, split: SplitName) -> &FeatureTensor<f64> {
        &self.normalized[Self::index(split)]
    }

    /// Normalized windows (inputs and targets) for training.
    pub fn windows(&self, split: SplitName, model: &ModelConfig) -> Result<Vec<WindowSample<f64>>> {
        make_windows(self.normalized(split), model.window, model.horizon)
    }

    /// Normalized inputs with targets in physical units.
    pub fn evaluation_windows(
        &self,
        split: SplitName,
        model: &ModelConfig,
    ) -> Result<Vec<WindowSample<f64>>> {
        let inputs = self.windows(split, model)?;
        let raw = make_windows(self.raw(split), model.window, model.horizon)?;
        Ok(inputs
            .into_iter()
            .zip(raw)
            .map(|(w, r)| WindowSample {
                target: r.target,
                ..w
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = RunConfig::parse("[data]\nspeeds = \"s.csv\"\n").unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.eval.horizons_minutes, vec![15, 30, 60]);
        assert!(c.data.calendar);
        assert!(c.data.adjacency.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[data]\nspeeds = \"s.csv\"\ncolour = 1\n").is_err());
        assert!(RunConfig::parse("[data]\nspeeds = \"s.csv\"\n[model]\nlayers = 3\n").is_err());
        assert!(RunConfig::parse("[data]\nspeeds = \"s.csv\"\n[extra]\n").is_err());
    }

    #[test]
    fn paths_resolve_and_must_exist() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[data]\nspeeds = \"s.csv\"\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
        std::fs::write(dir.path().join("s.csv"), "1,2\n3,4\n").unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.data.speeds, dir.path().join("s.csv"));
        assert_eq!(c.output.dir, dir.path().join("runs"));
    }

    #[test]
    fn channel_count_must_match_calendar() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("s.csv"), "1,2\n").unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[data]\nspeeds = \"s.csv\"\ncalendar = false\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
    }
}
