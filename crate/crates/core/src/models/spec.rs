use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    ToyCnn,
    ToyResnet,
    ToyVit,
    ToyMixer,
}

impl ArchKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchKind::ToyCnn => "toy_cnn",
            ArchKind::ToyResnet => "toy_resnet",
            ArchKind::ToyVit => "toy_vit",
            ArchKind::ToyMixer => "toy_mixer",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSize {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for InputSize {
    fn default() -> Self {
        Self { channels: 3, height: 32, width: 32 }
    }
}

/// Declarative architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: ArchKind,
    #[serde(default)]
    pub input_size: InputSize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
}

fn default_classes() -> usize {
    8
}
fn default_width() -> usize {
    16
}
fn default_depth() -> usize {
    3
}

pub(crate) const PATCH: usize = 4;

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn conv(out: &mut Vec<ParamInfo>, name: &str, c_out: usize, c_in: usize, k: usize) {
    out.push(ParamInfo {
        name: format!("{name}.weight"),
        shape: vec![c_out, c_in, k, k],
        init: Init::Uniform { fan_in: c_in * k * k },
    });
    out.push(ParamInfo { name: format!("{name}.bias"), shape: vec![c_out], init: Init::Zeros });
}

fn linear(out: &mut Vec<ParamInfo>, name: &str, d_in: usize, d_out: usize) {
    out.push(ParamInfo {
        name: format!("{name}.weight"),
        shape: vec![d_in, d_out],
        init: Init::Uniform { fan_in: d_in },
    });
    out.push(ParamInfo { name: format!("{name}.bias"), shape: vec![d_out], init: Init::Zeros });
}

fn norm(out: &mut Vec<ParamInfo>, name: &str, d: usize) {
    out.push(ParamInfo { name: format!("{name}.gamma"), shape: vec![d], init: Init::Ones });
    out.push(ParamInfo { name: format!("{name}.beta"), shape: vec![d], init: Init::Zeros });
}

impl ModelSpec {
    pub fn new(arch: ArchKind) -> Self {
        Self {
            arch,
            input_size: InputSize::default(),
            num_classes: default_classes(),
            width: default_width(),
            depth: default_depth(),
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_classes(mut self, k: usize) -> Self {
        self.num_classes = k;
        self
    }

    pub fn with_input(mut self, height: usize, width: usize) -> Self {
        self.input_size = InputSize { channels: 3, height, width };
        self
    }

    /// Head pooling window and pooled grid of toy_resnet.
    pub(crate) fn resnet_pool(&self) -> usize {
        (self.input_size.height.min(self.input_size.width) / 8).max(1)
    }

    pub(crate) fn resnet_grid(&self) -> (usize, usize) {
        let k = self.resnet_pool();
        (self.input_size.height / 2 / k, self.input_size.width / 2 / k)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidSpec(msg));
        let InputSize { channels, height, width } = self.input_size;
        if channels != 3 {
            return bad(format!("expected 3 input channels, got {channels}"));
        }
        if self.num_classes < 2 || self.width == 0 || self.depth == 0 {
            return bad(format!(
                "classes {} / width {} / depth {} out of range",
                self.num_classes, self.width, self.depth
            ));
        }
        match self.arch {
            ArchKind::ToyCnn => {
                let f = 1 << self.depth;
                if height % f != 0 || width % f != 0 {
                    return bad(format!("toy_cnn depth {} needs input divisible by {f}", self.depth));
                }
            }
            ArchKind::ToyResnet => {
                if self.depth < 2 {
                    return bad("toy_resnet needs at least 2 residual blocks".into());
                }
                if height % 8 != 0 || width % 8 != 0 {
                    return bad("toy_resnet needs input sides divisible by 8".into());
                }
            }
            ArchKind::ToyVit | ArchKind::ToyMixer => {
                if self.arch == ArchKind::ToyVit && self.depth < 2 {
                    return bad("toy_vit needs at least 2 attention blocks".into());
                }
                if height % PATCH != 0 || width % PATCH != 0 {
                    return bad(format!("patch size {PATCH} must divide the input"));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn embed_dim(&self) -> usize {
        self.width * 3
    }

    pub(crate) fn tokens(&self) -> usize {
        (self.input_size.height / PATCH) * (self.input_size.width / PATCH)
    }

    pub(crate) fn cnn_channels(&self) -> Vec<usize> {
        (0..self.depth).map(|i| if i == 0 { self.width } else { 2 * self.width }).collect()
    }

    pub(crate) fn param_layout(&self) -> Vec<ParamInfo> {
        let mut p = Vec::new();
        let InputSize { height, width, .. } = self.input_size;
        let k = self.num_classes;
        match self.arch {
            ArchKind::ToyCnn => {
                let mut c_in = 3;
                for (i, &c) in self.cnn_channels().iter().enumerate() {
                    conv(&mut p, &format!("block{}.conv", i + 1), c, c_in, 3);
                    c_in = c;
                }
                let f = 1 << self.depth;
                linear(&mut p, "head", c_in * (height / f) * (width / f), k);
            }
            ArchKind::ToyResnet => {
                let w = self.width;
                conv(&mut p, "stem.conv", w, 3, 3);
                for i in 1..=self.depth {
                    conv(&mut p, &format!("block{i}.conv1"), w, w, 3);
                    conv(&mut p, &format!("block{i}.conv2"), w, w, 3);
                }
                let (gh, gw) = self.resnet_grid();
                linear(&mut p, "head", w * gh * gw, k);
            }
            ArchKind::ToyVit => {
                let d = self.embed_dim();
                let t = self.tokens() + 1;
                conv(&mut p, "embed.patch", d, 3, PATCH);
                p.push(ParamInfo { name: "embed.cls".into(), shape: vec![1, 1, d], init: Init::Uniform { fan_in: d } });
                p.push(ParamInfo { name: "embed.pos".into(), shape: vec![1, t, d], init: Init::Uniform { fan_in: d } });
                for i in 1..=self.depth {
                    norm(&mut p, &format!("block{i}.ln1"), d);
                    for m in ["q", "k", "v", "o"] {
                        linear(&mut p, &format!("block{i}.attn.{m}"), d, d);
                    }
                    norm(&mut p, &format!("block{i}.ln2"), d);
                    linear(&mut p, &format!("block{i}.mlp.fc1"), d, 2 * d);
                    linear(&mut p, &format!("block{i}.mlp.fc2"), 2 * d, d);
                }
                norm(&mut p, "final.ln", d);
                linear(&mut p, "head", d, k);
            }
            ArchKind::ToyMixer => {
                let d = self.embed_dim();
                let t = self.tokens();
                conv(&mut p, "embed.patch", d, 3, PATCH);
                for i in 1..=self.depth {
                    norm(&mut p, &format!("block{i}.ln1"), d);
                    linear(&mut p, &format!("block{i}.token.fc1"), t, t);
                    linear(&mut p, &format!("block{i}.token.fc2"), t, t);
                    norm(&mut p, &format!("block{i}.ln2"), d);
                    linear(&mut p, &format!("block{i}.channel.fc1"), d, 2 * d);
                    linear(&mut p, &format!("block{i}.channel.fc2"), 2 * d, d);
                }
                norm(&mut p, "final.ln", d);
                linear(&mut p, "head", d, k);
            }
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.param_layout().iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }

    /// All hook/capture labels, in forward order.
    pub fn layer_labels(&self) -> Vec<String> {
        let mut l = Vec::new();
        match self.arch {
            ArchKind::ToyCnn => {
                for i in 1..=self.depth {
                    l.push(format!("block{i}.relu"));
                    l.push(format!("block{i}.out"));
                }
            }
            ArchKind::ToyResnet => {
                l.push("stem.relu".into());
                l.push("stem.out".into());
                for i in 1..=self.depth {
                    for s in ["relu1", "skip", "relu2", "out"] {
                        l.push(format!("block{i}.{s}"));
                    }
                }
            }
            ArchKind::ToyVit => {
                l.push("embed.out".into());
                for i in 1..=self.depth {
                    for s in ["attn.weights", "attn.skip", "mlp.skip", "out"] {
                        l.push(format!("block{i}.{s}"));
                    }
                }
            }
            ArchKind::ToyMixer => {
                l.push("embed.out".into());
                for i in 1..=self.depth {
                    for s in ["token.skip", "channel.skip", "out"] {
                        l.push(format!("block{i}.{s}"));
                    }
                }
            }
        }
        l
    }

    pub fn label_set(&self) -> BTreeSet<String> {
        self.layer_labels().into_iter().collect()
    }

    /// Intermediate feature layers addressable by `layer_index`.
    pub fn feature_labels(&self) -> Vec<String> {
        self.layer_labels().into_iter().filter(|l| l.ends_with(".out")).collect()
    }

    pub fn feature_label(&self, layer_index: usize) -> Result<String, ModelError> {
        self.feature_labels().into_iter().nth(layer_index).ok_or_else(|| {
            ModelError::InvalidSpec(format!(
                "layer_index {layer_index} out of range for {} (has {} feature layers)",
                self.arch.name(),
                self.feature_labels().len()
            ))
        })
    }

    pub fn skip_labels(&self) -> Vec<String> {
        self.layer_labels().into_iter().filter(|l| l.ends_with(".skip")).collect()
    }

    pub fn attention_labels(&self) -> Vec<String> {
        self.layer_labels().into_iter().filter(|l| l.ends_with(".weights")).collect()
    }

    pub fn relu_labels(&self) -> Vec<String> {
        self.layer_labels().into_iter().filter(|l| l.contains("relu")).collect()
    }

    /// ReLU labels located in the block of feature layer `layer_index` or later.
    pub fn relu_labels_from(&self, layer_index: usize) -> Result<Vec<String>, ModelError> {
        let feature = self.feature_label(layer_index)?;
        let labels = self.layer_labels();
        let block_of = |l: &str| l.split('.').next().unwrap_or("").to_string();
        let start_block = block_of(&feature);
        let first = labels.iter().position(|l| block_of(l) == start_block).unwrap_or(0);
        Ok(labels[first..].iter().filter(|l| l.contains("relu")).cloned().collect())
    }
}
