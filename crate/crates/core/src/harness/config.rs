//! JSON benchmark configuration and the on-disk layout of an output directory.
//!
//! ```text
//! <out>/models/<name>.tabx          standard and adversarial checkpoints
//! <out>/models/<name>/<k>.tabx      LGV snapshots, k = 0..n
//! <out>/victims.json                append-only victim registry
//! <out>/benign.json                 selected test indices
//! <out>/adv/<substitute>.taba       adversarial batches
//! <out>/results.csv, results.json, summary.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::DatasetConfig;
use super::preprocess::Pipeline;
use super::tune::SearchTable;
use super::victims::{Substitute, Victim, VictimEntry, VictimRegistry};
use super::{io_err, HarnessError};
use crate::attack::AttackSpec;
use crate::augment::{AugmentParams, AugmentStack};
use crate::methods::MethodKind;
use crate::models::{load_checkpoint, ModelSpec};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    #[default]
    Standard,
    Adversarial,
    /// Snapshots collected from the model named in `base`.
    Lgv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub role: ModelRole,
    /// Required unless `role` is `lgv`, which reuses the base spec.
    #[serde(default)]
    pub spec: Option<ModelSpec>,
    #[serde(default)]
    pub base: Option<String>,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VictimConfig {
    pub name: String,
    /// Name of a trained model.
    pub model: String,
    #[serde(default)]
    pub pipeline: Pipeline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub substitutes: Vec<String>,
    #[serde(default = "default_examples")]
    pub n_examples: usize,
    /// Maximum number of combinations; the rest are reported as truncated.
    #[serde(default)]
    pub budget: Option<usize>,
}

fn default_examples() -> usize {
    256
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { substitutes: Vec::new(), n_examples: default_examples(), budget: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub method: MethodKind,
    pub substitute: String,
    #[serde(default = "default_validation")]
    pub n_examples: usize,
    /// Defaults to [`SearchTable::default_for`].
    #[serde(default)]
    pub table: Option<SearchTable>,
}

fn default_validation() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    pub models: Vec<ModelConfig>,
    pub victims: Vec<VictimConfig>,
    #[serde(default = "default_attack")]
    pub attack: AttackSpec,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub tune: Option<TuneConfig>,
}

/// I-FGSM with augmentation defaults sized for the 40×40 canvas.
pub fn default_attack() -> AttackSpec {
    AttackSpec { augment: AugmentStack::new([], AugmentParams::for_size(40)).expect("valid"), ..AttackSpec::linf() }
}

impl BenchConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut names: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(HarnessError::Duplicate(w[0].into()));
        }
        for m in &self.models {
            match m.role {
                ModelRole::Lgv => {
                    let base = m.base.as_deref().ok_or_else(|| HarnessError::Config(format!("{}: lgv needs a base", m.name)))?;
                    self.model(base)?;
                }
                _ if m.spec.is_none() => return Err(HarnessError::Config(format!("{}: missing spec", m.name))),
                _ => {}
            }
        }
        for v in &self.victims {
            self.model(&v.model)?;
        }
        for s in &self.grid.substitutes {
            self.model(s)?;
        }
        self.attack.validate()?;
        Ok(())
    }

    pub fn model(&self, name: &str) -> Result<&ModelConfig, HarnessError> {
        self.models.iter().find(|m| m.name == name).ok_or_else(|| HarnessError::Unknown(name.into()))
    }

    /// Architecture of `name`, following LGV entries to their base.
    pub fn spec_of(&self, name: &str) -> Result<ModelSpec, HarnessError> {
        let m = self.model(name)?;
        match (&m.spec, &m.base) {
            (Some(s), _) => Ok(s.clone()),
            (None, Some(b)) => self.spec_of(b),
            _ => Err(HarnessError::Config(format!("{name}: missing spec"))),
        }
    }
}

pub fn checkpoint_path(out: &Path, name: &str) -> PathBuf {
    out.join("models").join(format!("{name}.tabx"))
}

pub fn snapshot_dir(out: &Path, name: &str) -> PathBuf {
    out.join("models").join(name)
}

/// Loads a substitute; LGV entries become a sample-once ensemble of their snapshots.
pub fn load_substitute(cfg: &BenchConfig, out: &Path, name: &str) -> Result<Substitute, HarnessError> {
    if cfg.model(name)?.role != ModelRole::Lgv {
        return Ok(Substitute::single(name, load_checkpoint(checkpoint_path(out, name))?));
    }
    let dir = snapshot_dir(out, name);
    let mut paths: Vec<(usize, PathBuf)> = fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| p.file_stem()?.to_str()?.parse::<usize>().ok().map(|k| (k, p.clone())))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(HarnessError::Config(format!("{name}: no snapshots in {}", dir.display())));
    }
    let models = paths.into_iter().map(|(_, p)| load_checkpoint(p)).collect::<Result<Vec<_>, _>>()?;
    Ok(Substitute { name: name.into(), models })
}

/// Registers the configured victims in `<out>/victims.json` and loads them.
pub fn load_victims(cfg: &BenchConfig, out: &Path) -> Result<Vec<Victim>, HarnessError> {
    let path = out.join("victims.json");
    let mut registry = VictimRegistry::load(&path)?;
    let mut changed = false;
    for v in &cfg.victims {
        let size = cfg.spec_of(&v.model)?.input_size.height;
        let entry = VictimEntry::new(&v.name, checkpoint_path(out, &v.model), v.pipeline.clone(), size);
        changed |= registry.register(entry)?;
    }
    if changed {
        registry.save(&path)?;
    }
    cfg.victims
        .iter()
        .map(|v| {
            let entry = registry.get(&v.name).expect("registered").clone();
            let model = load_checkpoint(&entry.checkpoint)?;
            Victim::new(entry, model)
        })
        .collect()
}
