//! Procedural class-conditional images.
//!
//! Image `i` of a dataset with seed `s` has label `i mod classes` and draws
//! every random quantity, in the order listed, from the stream keyed by
//! `(s, DATASET, i)` (see [`crate::rng::stream`]):
//!
//! 1. background level `b ~ U(0.15, 0.55)`, per-channel tint `t_c ~ U(-0.08, 0.08)`;
//! 2. shape centre offsets `ox, oy ~ U(-0.1, 0.1)·S`, radius `r ~ U(0.24, 0.34)·S`;
//! 3. hue jitter `j ~ U(-25°, 25°)`, saturation `~ U(0.55, 1)`, value `~ U(0.65, 1)`;
//! 4. stripe orientation `θ ~ U(0, π)` and phase `φ ~ U(0, 2π)`;
//! 5. contrast `k ~ U(0.35, 0.7)`;
//! 6. three distractor discs, each centre `~ U(0, S)²`, radius `~ U(0.06, 0.12)·S`
//!    and colour HSV `(U(0, 360), U(0.3, 0.8), U(0.4, 0.9))`;
//! 7. per-pixel noise `n ~ U(-0.06, 0.06)`, row-major, channel-minor.
//!
//! For label `c`: shape `c mod 4` (disc, square, triangle, cross), stripe
//! level `(c / 4) mod 2` (solid, or a cosine grating with period `S/5`), hue
//! `45°·c + j`. The background `g = b + t_c` is first blended towards the
//! colour of the first distractor covering the pixel centre, as
//! `g + k·(colour − g)`. Pixel `(x, y)` at centre coordinates
//! `u = x + 0.5 − S/2 − ox`, `v = y + 0.5 − S/2 − oy` inside the shape then
//! takes `g + k·(colour − g)` with the shape colour (modulated by
//! `0.6 + 0.4·cos(2π(u cos θ + v sin θ)/period + φ)` when striped). Noise is
//! added last and the result clamped to [0, 1].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::rng::{self, domain};

/// Images `[N, 3, S, S]` in [0, 1] with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Rows `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let per = self.images.numel() / self.len().max(1);
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Dataset {
            images: Tensor::new(shape, data).expect("subset of a non-empty dataset"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn range(&self, start: usize, end: usize) -> Dataset {
        self.subset(&(start..end).collect::<Vec<_>>())
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn inside(shape: usize, u: f64, v: f64, r: f64) -> bool {
    match shape {
        0 => u * u + v * v <= r * r,
        1 => u.abs() <= 0.85 * r && v.abs() <= 0.85 * r,
        2 => {
            // apex up, base at v = 0.6 r
            let top = -r;
            let base = 0.6 * r;
            v >= top && v <= base && u.abs() <= (v - top) / (base - top) * r
        }
        _ => (u.abs() <= 0.3 * r && v.abs() <= r) || (v.abs() <= 0.3 * r && u.abs() <= r),
    }
}

const DISTRACTORS: usize = 3;

/// Renders `n` images of side `canvas`.
pub fn gen_dataset(seed: u64, n: usize, classes: usize, canvas: usize) -> Dataset {
    assert!(classes >= 2, "need at least two classes");
    let s = canvas as f64;
    let plane = canvas * canvas;
    let mut data = vec![0.0; n * 3 * plane];
    let mut labels = Vec::with_capacity(n);
    for (i, img) in data.chunks_mut(3 * plane).enumerate() {
        let c = i % classes;
        labels.push(c);
        let mut r = rng::stream(&[seed, domain::DATASET, i as u64]);
        let bg: f64 = r.gen_range(0.15..0.55);
        let tint: [f64; 3] = [r.gen_range(-0.08..0.08), r.gen_range(-0.08..0.08), r.gen_range(-0.08..0.08)];
        let ox = r.gen_range(-0.1..0.1) * s;
        let oy = r.gen_range(-0.1..0.1) * s;
        let radius = r.gen_range(0.24..0.34) * s;
        let hue = 45.0 * c as f64 + r.gen_range(-25.0..25.0);
        let sat = r.gen_range(0.55..1.0);
        let val = r.gen_range(0.65..1.0);
        let theta: f64 = r.gen_range(0.0..std::f64::consts::PI);
        let phase = r.gen_range(0.0..std::f64::consts::TAU);
        let contrast: f64 = r.gen_range(0.35..0.7);
        let distractors: Vec<(f64, f64, f64, [f64; 3])> = (0..DISTRACTORS)
            .map(|_| {
                let cx = r.gen_range(0.0..s);
                let cy = r.gen_range(0.0..s);
                let rad = r.gen_range(0.06..0.12) * s;
                let col = hsv(r.gen_range(0.0..360.0), r.gen_range(0.3..0.8), r.gen_range(0.4..0.9));
                (cx, cy, rad, col)
            })
            .collect();
        let color = hsv(hue, sat, val);
        let striped = (c / 4) % 2 == 1;
        let period = s / 5.0;
        let (ct, st) = (theta.cos(), theta.sin());
        for y in 0..canvas {
            for x in 0..canvas {
                let u = x as f64 + 0.5 - s / 2.0 - ox;
                let v = y as f64 + 0.5 - s / 2.0 - oy;
                let fg = inside(c % 4, u, v, radius);
                let m = if fg && striped {
                    0.6 + 0.4 * (std::f64::consts::TAU * (u * ct + v * st) / period + phase).cos()
                } else {
                    1.0
                };
                for ch in 0..3 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let blob = distractors
                        .iter()
                        .find(|(cx, cy, rad, _)| (px - cx).powi(2) + (py - cy).powi(2) <= rad * rad);
                    let back = match blob {
                        Some((.., col)) => bg + tint[ch] + contrast * (col[ch] - bg - tint[ch]),
                        None => bg + tint[ch],
                    };
                    let base = if fg { back + contrast * (color[ch] * m - back) } else { back };
                    let noise: f64 = r.gen_range(-0.06..0.06);
                    img[ch * plane + y * canvas + x] = (base + noise).clamp(0.0, 1.0);
                }
            }
        }
    }
    Dataset { images: Tensor::new(vec![n, 3, canvas, canvas], data).expect("n > 0"), labels, classes }
}

/// Sizes of the fixed train, test and validation partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub classes: usize,
    pub canvas: usize,
    pub n_train: usize,
    /// Pool from which benign test examples are selected.
    pub n_test: usize,
    /// Pool for hyper-parameter tuning, disjoint from the test pool.
    pub n_validation: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { seed: 0, classes: 8, canvas: 40, n_train: 2048, n_test: 512, n_validation: 192 }
    }
}

/// The generated partition.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub validation: Dataset,
    /// Dataset indices of the test and validation rows.
    pub test_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

impl DatasetConfig {
    pub fn total(&self) -> usize {
        self.n_train + self.n_test + self.n_validation
    }

    pub fn generate(&self) -> Splits {
        let all = gen_dataset(self.seed, self.total(), self.classes, self.canvas);
        let t0 = self.n_train;
        let t1 = t0 + self.n_test;
        let test_indices: Vec<usize> = (t0..t1).collect();
        let validation_indices: Vec<usize> = (t1..self.total()).collect();
        Splits {
            train: all.range(0, t0),
            test: all.subset(&test_indices),
            validation: all.subset(&validation_indices),
            test_indices,
            validation_indices,
        }
    }
}
