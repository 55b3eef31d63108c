use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::engine::{kernels, Tensor};

/// One victim-side preprocessing step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessStep {
    /// Half-pixel bilinear resize to `size × size`.
    ResizeTo(usize),
    /// Central `size × size` window, offset `floor((in − size) / 2)`.
    CenterCrop(usize),
}

/// Ordered steps; empty means no preprocessing.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pipeline(pub Vec<PreprocessStep>);

impl Pipeline {
    pub fn resize(size: usize) -> Self {
        Self(vec![PreprocessStep::ResizeTo(size)])
    }

    pub fn resize_crop(resize: usize, crop: usize) -> Self {
        Self(vec![PreprocessStep::ResizeTo(resize), PreprocessStep::CenterCrop(crop)])
    }

    /// Output side for a square input of side `input`.
    pub fn output_size(&self, input: usize) -> usize {
        self.0.iter().fold(input, |_, s| match s {
            PreprocessStep::ResizeTo(n) | PreprocessStep::CenterCrop(n) => *n,
        })
    }

    pub fn name(&self) -> String {
        if self.0.is_empty() {
            return "none".into();
        }
        self.0
            .iter()
            .map(|s| match s {
                PreprocessStep::ResizeTo(n) => format!("resize{n}"),
                PreprocessStep::CenterCrop(n) => format!("crop{n}"),
            })
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Central crop of a `[N, C, H, W]` batch.
pub fn center_crop(batch: &Tensor, size: usize) -> Result<Tensor, HarnessError> {
    let s = batch.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if size > h || size > w || size == 0 {
        return Err(HarnessError::Crop { crop: size, height: h, width: w });
    }
    let (top, left) = ((h - size) / 2, (w - size) / 2);
    let mut out = Vec::with_capacity(n * c * size * size);
    for plane in batch.data().chunks(h * w) {
        for y in top..top + size {
            out.extend_from_slice(&plane[y * w + left..y * w + left + size]);
        }
    }
    Ok(Tensor::new(vec![n, c, size, size], out)?)
}

/// Half-pixel bilinear resize of a `[N, C, H, W]` batch.
pub fn resize(batch: &Tensor, oh: usize, ow: usize) -> Result<Tensor, HarnessError> {
    let s = batch.shape();
    if s.len() != 4 || oh == 0 || ow == 0 {
        return Err(HarnessError::Config(format!("cannot resize shape {s:?} to {oh}x{ow}")));
    }
    let out = kernels::resize_bilinear(batch.data(), s[0] * s[1], s[2], s[3], oh, ow);
    Ok(Tensor::new(vec![s[0], s[1], oh, ow], out)?)
}

/// Applies `pipeline` to a batch of images.
pub fn preprocess(pipeline: &Pipeline, batch: &Tensor) -> Result<Tensor, HarnessError> {
    let mut x = batch.clone();
    for step in &pipeline.0 {
        x = match *step {
            PreprocessStep::ResizeTo(n) => resize(&x, n, n)?,
            PreprocessStep::CenterCrop(n) => center_crop(&x, n)?,
        };
    }
    Ok(x)
}
