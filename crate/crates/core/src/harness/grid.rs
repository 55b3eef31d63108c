use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{metrics, AccuracyMatrix};
use super::report::ReportRecord;
use super::victims::{evaluate, Substitute, Victim};
use super::HarnessError;
use crate::attack::{run_attack_with, AttackOptions, AttackSpec, InitKind, OptimizerKind};
use crate::augment::{AugmentKind, AugmentStack};
use crate::engine::Tensor;
use crate::rng::key_digest;

/// One optimization back-end of the grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Combination {
    pub init: InitKind,
    pub optimizer: OptimizerKind,
    /// Canonically ordered.
    pub augment: Vec<AugmentKind>,
}

const TRANSFORMS: [AugmentKind; 4] = [AugmentKind::Un, AugmentKind::Dp, AugmentKind::Di2, AugmentKind::Ti];

/// init × momentum × subsets of {UN, DP, DI2, TI} × {none, SI, ADMIX}.
pub fn enumerate_grid() -> Vec<Combination> {
    let mut out = Vec::with_capacity(384);
    for init in [InitKind::Zeros, InitKind::UniformRandom] {
        for optimizer in OptimizerKind::ALL {
            for mask in 0..16u32 {
                for scale in [None, Some(AugmentKind::Si), Some(AugmentKind::Admix)] {
                    let mut augment: Vec<AugmentKind> =
                        TRANSFORMS.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &k)| k).collect();
                    augment.extend(scale);
                    out.push(Combination { init, optimizer, augment });
                }
            }
        }
    }
    out
}

impl Combination {
    /// "I-FGSM", "PGD", "MI-FGSM", "UN-DP-DI2-TI-PI-FGSM", "SI-NI-PGD", ...
    pub fn name(&self) -> String {
        let family = match self.init {
            InitKind::Zeros => "FGSM",
            InitKind::UniformRandom => "PGD",
        };
        let mut parts: Vec<&str> = self.augment.iter().map(|k| k.name()).collect();
        if self.optimizer != OptimizerKind::Plain {
            parts.push(self.optimizer.name());
        }
        if parts.is_empty() {
            return if self.init == InitKind::Zeros { "I-FGSM".into() } else { "PGD".into() };
        }
        parts.push(family);
        parts.join("-")
    }

    /// `base` with this back-end's init, optimizer and augmentations.
    pub fn apply(&self, base: &AttackSpec) -> Result<AttackSpec, HarnessError> {
        Ok(AttackSpec {
            init: self.init,
            optimizer: self.optimizer,
            augment: AugmentStack::new(self.augment.iter().copied(), base.augment.params.clone())?,
            ..base.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub combination: String,
    pub aaa: f64,
    pub waa: f64,
    pub baa: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridOutcome {
    /// Sorted by (AAA, name).
    pub ranking: Vec<GridRow>,
    pub records: Vec<ReportRecord>,
    /// Set when the budget stopped enumeration early.
    pub truncated: bool,
    pub evaluated: usize,
    pub total: usize,
}

/// Runs one attack with `spec` from every substitute and evaluates every victim.
#[allow(clippy::too_many_arguments)]
pub fn run_cells(
    spec: &AttackSpec,
    backend: &str,
    method: &str,
    substitutes: &[Substitute],
    victims: &[Victim],
    x: &Tensor,
    y: &[usize],
    opts: &AttackOptions,
) -> Result<Vec<ReportRecord>, HarnessError> {
    let mut records = Vec::new();
    for s in substitutes {
        let x_adv = run_attack_with(&s.models, x, y, spec, opts)?.x_adv;
        for cell in evaluate(&x_adv, y, &s.name, victims)? {
            records.push(ReportRecord {
                substitute: s.name.clone(),
                victim: cell.victim,
                method: method.into(),
                backend: backend.into(),
                norm: spec.norm,
                epsilon: spec.epsilon,
                iterations: spec.iterations,
                seed: spec.seed,
                n_examples: cell.n,
                accuracy: cell.accuracy,
            });
        }
    }
    Ok(records)
}

/// Scores each combination by victim accuracy and ranks them, strongest first.
///
/// `budget` caps the number of combinations evaluated, in enumeration order.
/// Each (combination, substitute) cell draws its randomness from
/// `key_digest([base.seed, combination index, substitute index])`.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    base: &AttackSpec,
    combinations: &[Combination],
    substitutes: &[Substitute],
    victims: &[Victim],
    x: &Tensor,
    y: &[usize],
    budget: Option<usize>,
) -> Result<GridOutcome, HarnessError> {
    let total = combinations.len();
    let evaluated = budget.map_or(total, |b| b.min(total));
    let per_combo = combinations[..evaluated]
        .par_iter()
        .enumerate()
        .map(|(ci, combo)| -> Result<(GridRow, Vec<ReportRecord>), HarnessError> {
            let name = combo.name();
            let mut records = Vec::new();
            for (si, s) in substitutes.iter().enumerate() {
                let seed = key_digest(&[base.seed, ci as u64, si as u64]);
                let spec = combo.apply(&AttackSpec { seed, ..base.clone() })?;
                records.extend(run_cells(&spec, &name, "none", std::slice::from_ref(s), victims, x, y, &AttackOptions::default())?);
            }
            let matrix = AccuracyMatrix::new(
                substitutes.iter().map(|s| s.name.clone()).collect(),
                victims.iter().map(|v| v.name().to_string()).collect(),
                records.chunks(victims.len()).map(|c| c.iter().map(|r| r.accuracy).collect()).collect(),
            )?;
            let m = metrics(&matrix)?;
            Ok((GridRow { combination: name, aaa: m.aaa, waa: m.waa, baa: m.baa }, records))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut ranking = Vec::with_capacity(evaluated);
    let mut records = Vec::new();
    for (row, recs) in per_combo {
        ranking.push(row);
        records.extend(recs);
    }
    ranking.sort_by(|a, b| a.aaa.total_cmp(&b.aaa).then_with(|| a.combination.cmp(&b.combination)));
    ReportRecord::sort(&mut records);
    Ok(GridOutcome { ranking, records, truncated: evaluated < total, evaluated, total })
}
