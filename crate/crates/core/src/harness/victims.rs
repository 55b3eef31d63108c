use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::preprocess::{preprocess, Pipeline};
use super::{io_err, HarnessError};
use crate::engine::Tensor;
use crate::models::Model;
use crate::rng::{self, domain};

/// Registered black-box victim.
///
/// The pipeline is private; every read goes through [`VictimEntry::pipeline`],
/// which bumps a counter shared by all clones of the entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VictimEntry {
    pub name: String,
    pub checkpoint: PathBuf,
    pipeline: Pipeline,
    pub input_size: usize,
    #[serde(skip)]
    reads: Arc<AtomicUsize>,
}

impl PartialEq for VictimEntry {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.checkpoint == other.checkpoint
            && self.pipeline == other.pipeline
            && self.input_size == other.input_size
    }
}

impl VictimEntry {
    pub fn new(name: impl Into<String>, checkpoint: impl Into<PathBuf>, pipeline: Pipeline, input_size: usize) -> Self {
        Self { name: name.into(), checkpoint: checkpoint.into(), pipeline, input_size, reads: Arc::default() }
    }

    pub fn pipeline(&self) -> &Pipeline {
        self.reads.fetch_add(1, Ordering::SeqCst);
        &self.pipeline
    }

    /// Number of times the pipeline has been read.
    pub fn pipeline_reads(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }
}

/// A victim entry with its loaded weights.
#[derive(Clone, Debug)]
pub struct Victim {
    pub entry: VictimEntry,
    pub model: Model,
}

impl Victim {
    pub fn new(entry: VictimEntry, model: Model) -> Result<Self, HarnessError> {
        let s = model.spec().input_size;
        let got = entry.pipeline().output_size(0);
        if s.height != s.width || entry.input_size != s.height || (got != 0 && got != s.height) {
            return Err(HarnessError::PipelineSize { name: entry.name.clone(), got, expected: s.height });
        }
        Ok(Self { entry, model })
    }

    pub fn name(&self) -> &str {
        &self.entry.name
    }

    /// Preprocesses canvas images and classifies them.
    pub fn classify(&self, images: &Tensor) -> Result<Vec<usize>, HarnessError> {
        let x = preprocess(self.entry.pipeline(), images)?;
        let h = x.shape()[2];
        if h != self.entry.input_size {
            return Err(HarnessError::PipelineSize { name: self.entry.name.clone(), got: h, expected: self.entry.input_size });
        }
        Ok(self.model.classify(&x)?)
    }

    pub fn correct(&self, images: &Tensor, labels: &[usize]) -> Result<usize, HarnessError> {
        Ok(self.classify(images)?.iter().zip(labels).filter(|(p, y)| p == y).count())
    }
}

/// Attacker-side model; it sees canvas images resized to its input size.
#[derive(Clone, Debug)]
pub struct Substitute {
    pub name: String,
    /// More than one model means a sample-once ensemble (LGV).
    pub models: Vec<Model>,
}

impl Substitute {
    pub fn single(name: impl Into<String>, model: Model) -> Self {
        Self { name: name.into(), models: vec![model] }
    }
}

/// Append-only list of victim entries stored as JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VictimRegistry {
    pub victims: Vec<VictimEntry>,
}

impl VictimRegistry {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn get(&self, name: &str) -> Option<&VictimEntry> {
        self.victims.iter().find(|v| v.name == name)
    }

    /// Adds `entry` unless an identical entry exists; a different entry with the same name is an error.
    pub fn register(&mut self, entry: VictimEntry) -> Result<bool, HarnessError> {
        match self.get(&entry.name) {
            Some(e) if *e == entry => Ok(false),
            Some(_) => Err(HarnessError::Duplicate(entry.name)),
            None => {
                self.victims.push(entry);
                Ok(true)
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(io_err(path))
    }
}

/// Benign examples chosen for an experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Selection {
    /// Dataset-level indices, ascending.
    pub indices: Vec<usize>,
    /// Positions in the pool passed to [`select_benign`].
    pub rows: Vec<usize>,
    #[serde(skip)]
    pub data: Option<Dataset>,
}

/// Samples `count` pool rows that every victim classifies correctly.
///
/// `pool_indices[i]` is the dataset index of pool row `i`.
pub fn select_benign(
    pool: &Dataset,
    pool_indices: &[usize],
    victims: &[Victim],
    count: usize,
    seed: u64,
) -> Result<Selection, HarnessError> {
    let mut ok = vec![true; pool.len()];
    for v in victims {
        for (i, (p, y)) in v.classify(&pool.images)?.iter().zip(&pool.labels).enumerate() {
            ok[i] &= p == y;
        }
    }
    let mut qualifying: Vec<usize> = (0..pool.len()).filter(|&i| ok[i]).collect();
    if qualifying.len() < count || qualifying.is_empty() {
        return Err(HarnessError::NotEnoughBenign { qualifying: qualifying.len(), requested: count });
    }
    qualifying.shuffle(&mut rng::stream(&[seed, domain::SELECT]));
    let mut rows = qualifying[..count].to_vec();
    rows.sort_unstable();
    Ok(Selection {
        indices: rows.iter().map(|&r| pool_indices[r]).collect(),
        data: Some(pool.subset(&rows)),
        rows,
    })
}

/// One victim's result on a batch of adversarial examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub victim: String,
    pub correct: usize,
    pub n: usize,
    pub accuracy: f64,
    /// The victim is the substitute itself.
    pub masked: bool,
}

/// Victim accuracies on canvas-size `x_adv`, with the substitute's own cell masked.
pub fn evaluate(x_adv: &Tensor, labels: &[usize], substitute: &str, victims: &[Victim]) -> Result<Vec<EvalCell>, HarnessError> {
    victims
        .iter()
        .map(|v| {
            let correct = v.correct(x_adv, labels)?;
            Ok(EvalCell {
                victim: v.name().to_string(),
                correct,
                n: labels.len(),
                accuracy: correct as f64 / labels.len() as f64,
                masked: v.name() == substitute,
            })
        })
        .collect()
}
