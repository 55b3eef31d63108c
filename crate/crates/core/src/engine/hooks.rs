use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::EngineError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookKind {
    /// Multiply the gradient passing through a labeled residual branch by γ.
    ScaleBranchGrad,
    /// Backward treats a labeled ReLU as the identity.
    IdentityReluGrad,
    /// Backward uses σ(x) as the derivative of a labeled ReLU.
    SoftplusReluGrad,
    /// Backward treats a labeled attention-weight tensor as a constant.
    SkipAttentionGrad,
    /// Keep a handle to the labeled forward value.
    CaptureForward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HookDescriptor {
    pub kind: HookKind,
    pub layer_labels: BTreeSet<String>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_gamma() -> f64 {
    1.0
}

impl HookDescriptor {
    pub fn new<I, S>(kind: HookKind, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { kind, layer_labels: labels.into_iter().map(Into::into).collect(), gamma: 1.0 }
    }

    pub fn scale_branch<I, S>(gamma: f64, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { gamma, ..Self::new(HookKind::ScaleBranchGrad, labels) }
    }
}

/// How backward treats a labeled node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BackwardMod {
    Scale(f64),
    IdentityRelu,
    SoftplusRelu,
    Stop,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct LabelHooks {
    backward: Option<BackwardMod>,
    capture: bool,
}

/// Label-to-hook table owned by one attack; copies are cheap and never shared mutably.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HookRegistry {
    entries: BTreeMap<String, LabelHooks>,
}

impl HookRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Validates `desc` against the labels the target model defines, then installs it.
    pub fn install(
        &mut self,
        desc: &HookDescriptor,
        available: &BTreeSet<String>,
    ) -> Result<(), EngineError> {
        if desc.kind == HookKind::ScaleBranchGrad && !(desc.gamma > 0.0 && desc.gamma <= 1.0) {
            return Err(EngineError::InvalidHook(format!(
                "scale_branch_grad needs gamma in (0, 1], got {}",
                desc.gamma
            )));
        }
        if let Some(missing) = desc.layer_labels.iter().find(|l| !available.contains(*l)) {
            return Err(EngineError::UnknownLabel(missing.clone()));
        }
        for label in &desc.layer_labels {
            let entry = self.entries.entry(label.clone()).or_default();
            let m = match desc.kind {
                HookKind::CaptureForward => {
                    entry.capture = true;
                    continue;
                }
                HookKind::ScaleBranchGrad => BackwardMod::Scale(desc.gamma),
                HookKind::IdentityReluGrad => BackwardMod::IdentityRelu,
                HookKind::SoftplusReluGrad => BackwardMod::SoftplusRelu,
                HookKind::SkipAttentionGrad => BackwardMod::Stop,
            };
            if entry.backward.is_some_and(|prev| prev != m) {
                return Err(EngineError::InvalidHook(format!(
                    "label {label:?} already has a different backward hook"
                )));
            }
            entry.backward = Some(m);
        }
        Ok(())
    }

    pub fn backward_mod(&self, label: &str) -> Option<BackwardMod> {
        self.entries.get(label).and_then(|e| e.backward)
    }

    pub fn captures(&self, label: &str) -> bool {
        self.entries.get(label).is_some_and(|e| e.capture)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
