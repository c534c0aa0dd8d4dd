//! The run configuration shared by every pipeline stage.
//!
//! Stage seeds are not part of the file. Each stage derives its own from the
//! root `seed` with [`derive_seed`] and a fixed label:
//!
//! | stage            | label       |
//! |------------------|-------------|
//! | teacher training | `teacher`   |
//! | trajectory store | `synth`     |
//! | distillation     | `distill`   |
//! | KD baseline      | `kd`        |
//! | mismatch sweep   | `analysis`  |
//! | sampling / eval  | `sample`    |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{KdConfig, SweepConfig};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::flow::{TeacherConfig, TimeGrid, ToyDataset};
use crate::seed::derive_seed;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Support points of the training distribution, sampled uniformly.
    pub support: Vec<Vec<f64>>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            support: vec![vec![-3.0], vec![3.0]],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub blocks: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden: 64, blocks: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let t = TeacherConfig::default();
        Self {
            iterations: t.iterations,
            batch_size: t.batch_size,
            lr: t.lr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreSection {
    /// Trajectories N.
    pub count: usize,
    /// Teacher grid steps n.
    pub steps: usize,
}

impl Default for StoreSection {
    fn default() -> Self {
        Self { count: 4096, steps: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub name: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub teacher: TeacherSection,
    pub store: StoreSection,
    pub distill: DistillConfig,
    pub analysis: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            name: "two-point".into(),
            seed: 0,
            out_dir: PathBuf::from("runs/two-point"),
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            teacher: TeacherSection::default(),
            store: StoreSection::default(),
            distill: DistillConfig::default(),
            analysis: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "version: expected {CONFIG_VERSION}, found {}",
                self.version
            )));
        }
        self.dataset()?;
        if self.model.hidden == 0 || self.model.blocks == 0 {
            return Err(Error::Config("model: hidden and blocks must be positive".into()));
        }
        if self.teacher.iterations == 0 || self.teacher.batch_size == 0 || !(self.teacher.lr > 0.0) {
            return Err(Error::Config(
                "teacher: iterations, batch_size and lr must be positive".into(),
            ));
        }
        if self.store.count == 0 {
            return Err(Error::Config("store.count must be positive".into()));
        }
        TimeGrid::uniform(self.store.steps).map_err(|e| Error::Config(format!("store.steps: {e}")))?;
        if self.distill.n != self.store.steps {
            return Err(Error::Config(format!(
                "distill.n ({}) must equal store.steps ({})",
                self.distill.n, self.store.steps
            )));
        }
        self.distill
            .validate()
            .map_err(|e| Error::Config(format!("distill: {e}")))?;
        self.analysis
            .validate()
            .map_err(|e| Error::Config(format!("analysis: {e}")))?;
        self.analysis
            .kd
            .validate(&self.grid()?)
            .map_err(|e| Error::Config(format!("analysis.kd: {e}")))?;
        Ok(())
    }

    pub fn dataset(&self) -> Result<ToyDataset> {
        ToyDataset::new(self.dataset.support.clone()).map_err(|e| Error::Config(format!("dataset.support: {e}")))
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.store.steps)
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            hidden: self.model.hidden,
            blocks: self.model.blocks,
            iterations: self.teacher.iterations,
            batch_size: self.teacher.batch_size,
            lr: self.teacher.lr,
            seed: self.stage_seed("teacher"),
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            seed: self.stage_seed("distill"),
            ..self.distill.clone()
        }
    }

    pub fn kd_config(&self) -> KdConfig {
        KdConfig {
            seed: self.stage_seed("kd"),
            ..self.analysis.kd
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            seed: self.stage_seed("analysis"),
            ..self.analysis.clone()
        }
    }
}
