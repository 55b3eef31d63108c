use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::victims::{evaluate, Substitute, Victim};
use super::HarnessError;
use crate::attack::{run_attack_with, AttackOptions, AttackSpec};
use crate::engine::Tensor;
use crate::methods::{MethodKind, MethodParams};
use crate::models::ModelSpec;

/// One point of a hyper-parameter search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(default)]
    pub layer_index: Option<usize>,
    #[serde(default)]
    pub gamma: Option<f64>,
}

impl Candidate {
    pub fn params(&self, kind: MethodKind) -> MethodParams {
        MethodParams { layer_index: self.layer_index, gamma: self.gamma, ..MethodParams::new(kind) }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTable {
    pub candidates: Vec<Candidate>,
}

impl SearchTable {
    /// Every feature layer for layer-based methods, γ ∈ {0.3, 0.4, …, 1.0} for SGM.
    pub fn default_for(kind: MethodKind, spec: &ModelSpec) -> Self {
        let layered = kind.uses_features() || matches!(kind, MethodKind::LinBp | MethodKind::ConBp);
        let layers: Vec<Option<usize>> =
            if layered { (0..spec.feature_labels().len()).map(Some).collect() } else { vec![None] };
        let gammas: Vec<Option<f64>> =
            if kind == MethodKind::Sgm { (3..=10).map(|i| Some(i as f64 / 10.0)).collect() } else { vec![None] };
        let candidates = layers
            .iter()
            .flat_map(|&l| gammas.iter().map(move |&g| Candidate { layer_index: l, gamma: g }))
            .collect();
        Self { candidates }
    }
}

/// Index of the candidate with the lowest score; ties go to the smaller
/// layer index, then the smaller γ.
pub fn argmin_candidate(
    table: &SearchTable,
    mut score: impl FnMut(&Candidate) -> Result<f64, HarnessError>,
) -> Result<usize, HarnessError> {
    if table.candidates.is_empty() {
        return Err(HarnessError::EmptySearch);
    }
    let mut best: Option<(f64, usize)> = None;
    for (i, c) in table.candidates.iter().enumerate() {
        let s = score(c)?;
        let better = match best {
            None => true,
            Some((bs, bi)) => {
                let b = &table.candidates[bi];
                let key = |c: &Candidate| (c.layer_index.unwrap_or(0), c.gamma.unwrap_or(0.0));
                let (kl, kg) = key(c);
                let (bl, bg) = key(b);
                s < bs || (s == bs && (kl, kg.to_bits()) < (bl, bg.to_bits()))
            }
        };
        if better {
            best = Some((s, i));
        }
    }
    Ok(best.expect("non-empty table").1)
}

/// Picks the candidate whose attack from `substitute` gives the lowest
/// average victim accuracy on the validation rows.
#[allow(clippy::too_many_arguments)]
pub fn tune_hyperparams(
    kind: MethodKind,
    base: &AttackSpec,
    substitute: &Substitute,
    victims: &[Victim],
    validation: (&Tensor, &[usize]),
    validation_indices: &[usize],
    test_indices: &[usize],
    table: &SearchTable,
    stats: Option<&Tensor>,
) -> Result<MethodParams, HarnessError> {
    let test: BTreeSet<usize> = test_indices.iter().copied().collect();
    if validation_indices.iter().any(|i| test.contains(i)) {
        return Err(HarnessError::Overlap);
    }
    let (x, y) = validation;
    let best = argmin_candidate(table, |c| {
        let spec = AttackSpec { method: Some(c.params(kind)), ..base.clone() };
        let opts = AttackOptions { stats, backprop_counter: None };
        let x_adv = run_attack_with(&substitute.models, x, y, &spec, &opts)?.x_adv;
        let cells = evaluate(&x_adv, y, &substitute.name, victims)?;
        let kept: Vec<f64> = cells.iter().filter(|c| !c.masked).map(|c| c.accuracy).collect();
        if kept.is_empty() {
            return Err(HarnessError::MaskedRow(substitute.name.clone()));
        }
        Ok(kept.iter().sum::<f64>() / kept.len() as f64)
    })?;
    Ok(table.candidates[best].params(kind))
}
