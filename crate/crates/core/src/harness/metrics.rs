use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Victim accuracy on each substitute's adversarial examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub substitutes: Vec<String>,
    pub victims: Vec<String>,
    /// Row-major `[substitute][victim]`.
    pub acc: Vec<Vec<f64>>,
    /// True where the cell is excluded (substitute == victim).
    pub mask: Vec<Vec<bool>>,
}

impl AccuracyMatrix {
    /// Masks every cell whose substitute and victim names coincide.
    pub fn new(substitutes: Vec<String>, victims: Vec<String>, acc: Vec<Vec<f64>>) -> Result<Self, HarnessError> {
        let mask = substitutes.iter().map(|s| victims.iter().map(|v| s == v).collect()).collect();
        let m = Self { substitutes, victims, acc, mask };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let (rows, cols) = (self.substitutes.len(), self.victims.len());
        let acc_ok = self.acc.len() == rows && self.acc.iter().all(|r| r.len() == cols);
        let mask_ok = self.mask.len() == rows && self.mask.iter().all(|r| r.len() == cols);
        if !acc_ok || !mask_ok {
            return Err(HarnessError::Config(format!("matrix is not {rows}x{cols}")));
        }
        for (r, row) in self.acc.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(HarnessError::Accuracy { row: r, col: c, value: v });
                }
            }
        }
        Ok(())
    }
}

/// Per-substitute AA and the three aggregates; lower means a stronger attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub aa: Vec<(String, f64)>,
    pub aaa: f64,
    /// Largest AA.
    pub waa: f64,
    /// Smallest AA.
    pub baa: f64,
}

pub fn metrics(m: &AccuracyMatrix) -> Result<Metrics, HarnessError> {
    m.validate()?;
    if m.substitutes.is_empty() {
        return Err(HarnessError::EmptyMatrix);
    }
    let mut aa = Vec::with_capacity(m.substitutes.len());
    for (s, (row, mask)) in m.substitutes.iter().zip(m.acc.iter().zip(&m.mask)) {
        let kept: Vec<f64> = row.iter().zip(mask).filter(|(_, &masked)| !masked).map(|(&a, _)| a).collect();
        if kept.is_empty() {
            return Err(HarnessError::MaskedRow(s.clone()));
        }
        aa.push((s.clone(), kept.iter().sum::<f64>() / kept.len() as f64));
    }
    let values = aa.iter().map(|(_, a)| *a);
    let aaa = values.clone().sum::<f64>() / aa.len() as f64;
    let waa = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let baa = values.fold(f64::INFINITY, f64::min);
    Ok(Metrics { aa, aaa, waa, baa })
}
