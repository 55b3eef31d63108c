//! Transcribed published accuracies and brute-force references for the harness.

use tabench::attack::{InitKind, OptimizerKind};
use tabench::augment::AugmentKind;
use tabench::harness::{metrics, AccuracyMatrix, Combination};

/// SGM from a ResNet-50 substitute, one row of victim accuracies (percent).
pub const RESNET50_SGM_ROW: [f64; 9] = [2.72, 7.92, 29.42, 28.52, 48.32, 47.64, 36.82, 47.66, 38.70];
pub const RESNET50_SGM_AA: f64 = 31.97;

/// I-FGSM per-substitute AAs (percent) with the published AAA, WAA, BAA.
pub const IFGSM_AAS: [f64; 10] = [87.79, 91.21, 93.71, 95.46, 88.32, 90.28, 90.28, 89.56, 94.81, 94.37];
pub const IFGSM_AAA: f64 = 91.58;
pub const IFGSM_WAA: f64 = 95.46;
pub const IFGSM_BAA: f64 = 87.79;

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Largest deviation, in percentage points, between `metrics` and the published values.
pub fn published_metric_error() -> f64 {
    let row = AccuracyMatrix::new(
        names("s", 1),
        names("v", 9),
        vec![RESNET50_SGM_ROW.iter().map(|a| a / 100.0).collect()],
    )
    .unwrap();
    let aa = metrics(&row).unwrap().aa[0].1 * 100.0;
    // One victim per substitute row, so each AA is the transcribed value itself.
    let table = AccuracyMatrix::new(names("s", 10), names("v", 1), IFGSM_AAS.iter().map(|a| vec![a / 100.0]).collect())
        .unwrap();
    let m = metrics(&table).unwrap();
    [
        aa - RESNET50_SGM_AA,
        m.aaa * 100.0 - IFGSM_AAA,
        m.waa * 100.0 - IFGSM_WAA,
        m.baa * 100.0 - IFGSM_BAA,
    ]
    .iter()
    .map(|d| d.abs())
    .fold(0.0, f64::max)
}

/// Every back-end under the stated exclusion rules, by nested loops over the raw choices.
pub fn brute_force_grid() -> Vec<Combination> {
    let mut out = Vec::new();
    for init in [InitKind::Zeros, InitKind::UniformRandom] {
        for optimizer in [OptimizerKind::Plain, OptimizerKind::Mi, OptimizerKind::Ni, OptimizerKind::Pi] {
            for un in [false, true] {
                for dp in [false, true] {
                    for di in [false, true] {
                        for ti in [false, true] {
                            for scale in [None, Some(AugmentKind::Si), Some(AugmentKind::Admix)] {
                                let mut augment = Vec::new();
                                for (on, k) in
                                    [(un, AugmentKind::Un), (dp, AugmentKind::Dp), (di, AugmentKind::Di2), (ti, AugmentKind::Ti)]
                                {
                                    if on {
                                        augment.push(k);
                                    }
                                }
                                augment.extend(scale);
                                out.push(Combination { init, optimizer, augment });
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
