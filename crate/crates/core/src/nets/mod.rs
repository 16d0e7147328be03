//! Segmentation networks: the densely-connected encoder-decoder and a
//! plain U-Net baseline, both behind one config/forward/checkpoint surface.

mod builder;
mod checkpoint;
mod plan;
#[cfg(test)]
mod tests;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, MultiContrastSlice, CLASS_FAT, CLASS_IMAT, NUM_CLASSES};
use crate::dropout::DropoutSpec;
use crate::error::{Error, Result};
use crate::tensor::{BnStats, Mode, Parameter, Tape, Tensor, TensorId};
use crate::Rng;

use plan::Plan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Tiramisu,
    UnetBaseline,
}

impl Architecture {
    pub fn as_str(&self) -> &'static str {
        match self {
            Architecture::Tiramisu => "tiramisu",
            Architecture::UnetBaseline => "unet",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Tiramisu103,
    Tiny,
    Custom,
}

/// Which input contrasts feed the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastSelection {
    All,
    Single(usize),
}

impl ContrastSelection {
    pub fn channel_count(&self) -> usize {
        match self {
            ContrastSelection::All => 3,
            ContrastSelection::Single(_) => 1,
        }
    }

    pub fn label(&self) -> String {
        match self {
            ContrastSelection::All => "multi".into(),
            ContrastSelection::Single(i) => format!("mri{}", i + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub preset: Preset,
    /// Dense-block layer counts of the down path; the up path mirrors it.
    pub layers_per_block: Vec<usize>,
    pub bottleneck_layers: usize,
    pub growth_rate: usize,
    pub first_conv_channels: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    pub dropout: DropoutSpec,
    pub contrasts: ContrastSelection,
    /// Width of the U-Net baseline's first level.
    pub unet_base_channels: usize,
    pub bn_momentum: f32,
    pub bn_eps: f32,
}

impl ModelConfig {
    /// Full-scale preset: 103 layers with dense connections, growth 24.
    pub fn tiramisu103(input_channels: usize, num_classes: usize, dropout: DropoutSpec) -> Self {
        ModelConfig {
            architecture: Architecture::Tiramisu,
            preset: Preset::Tiramisu103,
            layers_per_block: vec![4, 5, 7, 10, 12],
            bottleneck_layers: 15,
            growth_rate: 24,
            first_conv_channels: 48,
            input_channels,
            num_classes,
            dropout,
            contrasts: if input_channels == 1 {
                ContrastSelection::Single(0)
            } else {
                ContrastSelection::All
            },
            unet_base_channels: 64,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// Desk-scale preset used by the phantom benchmarks.
    pub fn tiny(input_channels: usize, num_classes: usize, dropout: DropoutSpec) -> Self {
        ModelConfig {
            architecture: Architecture::Tiramisu,
            preset: Preset::Tiny,
            layers_per_block: vec![2, 2],
            bottleneck_layers: 2,
            growth_rate: 8,
            first_conv_channels: 16,
            input_channels,
            num_classes,
            dropout,
            contrasts: if input_channels == 1 {
                ContrastSelection::Single(0)
            } else {
                ContrastSelection::All
            },
            unet_base_channels: 8,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dropout.validate()?;
        if ![3, 5, 6].contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes {} not one of the 2-/4-/5-tissue tasks (3, 5, 6)",
                self.num_classes
            )));
        }
        if self.input_channels != self.contrasts.channel_count() {
            return Err(Error::Config(format!(
                "input_channels {} inconsistent with contrast selection {:?}",
                self.input_channels, self.contrasts
            )));
        }
        if let ContrastSelection::Single(i) = self.contrasts {
            if i >= 3 {
                return Err(Error::Config(format!("contrast index {i} outside 0..3")));
            }
        }
        match self.architecture {
            Architecture::Tiramisu => {
                if self.layers_per_block.is_empty()
                    || self.layers_per_block.iter().any(|&l| l == 0)
                    || self.bottleneck_layers == 0
                    || self.growth_rate == 0
                    || self.first_conv_channels == 0
                {
                    return Err(Error::Config("tiramisu layout parameters must be positive".into()));
                }
            }
            Architecture::UnetBaseline => {
                if self.unet_base_channels == 0 {
                    return Err(Error::Config("unet_base_channels must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Number of 2x down-sampling stages (input spatial dims must divide
    /// by 2^stages).
    pub fn down_stages(&self) -> usize {
        match self.architecture {
            Architecture::Tiramisu => self.layers_per_block.len(),
            Architecture::UnetBaseline => 4,
        }
    }
}

/// Maps between the corpus tissue ids and the model's class indices for
/// the 2-, 4-, and 5-tissue tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    /// Model class index -> original tissue id.
    pub model_classes: Vec<u8>,
}

impl ClassMap {
    pub fn for_num_classes(num_classes: usize) -> Result<ClassMap> {
        let model_classes = match num_classes {
            6 => vec![0, 1, 2, 3, 4, 5],
            5 => vec![0, 1, 2, 4, 5],
            3 => vec![0, 1, 2],
            other => {
                return Err(Error::Config(format!("unsupported class count {other}")));
            }
        };
        Ok(ClassMap { model_classes })
    }

    /// Corpus label -> model class index. IMAT labels are an error for the
    /// 4-tissue task (the class exists in the data but not the config); the
    /// 2-tissue task folds IMAT into fat and bone/marrow into background.
    pub fn encode(&self, label: u8) -> Result<u8> {
        debug_assert!((label as usize) < NUM_CLASSES);
        match self.model_classes.len() {
            6 => Ok(label),
            5 => match label {
                0 | 1 | 2 => Ok(label),
                4 => Ok(3),
                5 => Ok(4),
                CLASS_IMAT => Err(Error::Config(
                    "class 3 (IMAT) present in labels but absent from the 4-tissue config".into(),
                )),
                other => Err(Error::Config(format!("label {other} out of range"))),
            },
            3 => match label {
                0 | 1 | 2 => Ok(label),
                CLASS_IMAT => Ok(CLASS_FAT),
                4 | 5 => Ok(0),
                other => Err(Error::Config(format!("label {other} out of range"))),
            },
            _ => unreachable!("validated in for_num_classes"),
        }
    }

    pub fn decode(&self, model_class: u8) -> u8 {
        self.model_classes[model_class as usize]
    }

    /// Original tissue ids the model predicts, background included.
    pub fn original_classes(&self) -> &[u8] {
        &self.model_classes
    }
}

/// A built network: config, named parameters, batch-norm state, and the
/// layer plan driving the forward pass.
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Parameter>,
    pub bn_stats: Vec<BnStats>,
    pub bn_names: Vec<String>,
    pub epoch: u32,
    pub seed: u64,
    pub(crate) plan: Plan,
}

/// Parameter bindings of one recorded forward pass: which tape tensor each
/// parameter was bound to.
pub type Bindings = Vec<(usize, TensorId)>;

/// Builds the network selected by `config.architecture` with Xavier
/// weights, unit BN gains, and zero biases.
pub fn build_model(config: &ModelConfig, rng: &mut Rng) -> Result<Model> {
    config.validate()?;
    let mut b = builder::Builder::new(rng, config.dropout);
    let plan = match config.architecture {
        Architecture::Tiramisu => Plan::Tiramisu(plan::build_tiramisu(config, &mut b)?),
        Architecture::UnetBaseline => Plan::Unet(plan::build_unet(config, &mut b)?),
    };
    let (params, bn_stats, bn_names) = b.finish();
    Ok(Model { config: config.clone(), params, bn_stats, bn_names, epoch: 0, seed: 0, plan })
}

/// The U-Net baseline under the identical config surface.
pub fn build_unet_baseline(config: &ModelConfig, rng: &mut Rng) -> Result<Model> {
    let mut cfg = config.clone();
    cfg.architecture = Architecture::UnetBaseline;
    build_model(&cfg, rng)
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Adds the tape gradients of a recorded pass into the parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape, bindings: &Bindings) {
        for &(idx, tid) in bindings {
            if let Some(g) = tape.grad(tid) {
                self.params[idx].accumulate_grad(g);
            }
        }
    }

    /// Param indices of the variational log-alpha sites, in plan order.
    pub fn variational_sites(&self) -> Vec<usize> {
        self.plan.variational_sites()
    }

    /// Projects every log-alpha back under the configured clamp.
    pub fn clamp_variational(&mut self) {
        if let DropoutSpec::Variational { log_alpha_max, .. } = self.config.dropout {
            for idx in self.variational_sites() {
                let v = &mut self.params[idx].value.data[0];
                if *v > log_alpha_max {
                    *v = log_alpha_max;
                }
            }
        }
    }

    /// Records a training-mode forward pass on the tape. Mutates the
    /// batch-norm running statistics.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        input: TensorId,
        rng: &mut Rng,
    ) -> Result<(TensorId, Bindings)> {
        let mut stats = std::mem::take(&mut self.bn_stats);
        let result = plan::run_forward(
            &self.plan,
            &self.config,
            &self.params,
            &mut stats,
            tape,
            input,
            Mode::Train,
            Some(rng),
        );
        self.bn_stats = stats;
        result
    }

    /// Eval-mode forward: immutable, shareable across threads.
    pub fn forward_eval(&self, tape: &mut Tape, input: TensorId) -> Result<TensorId> {
        let mut stats = self.bn_stats.clone();
        let (logits, _) = plan::run_forward(
            &self.plan,
            &self.config,
            &self.params,
            &mut stats,
            tape,
            input,
            Mode::Eval,
            None,
        )?;
        Ok(logits)
    }

    /// FNV-1a over parameter names and value bytes; changes whenever any
    /// parameter value changes.
    pub fn param_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for v in &p.value.data {
                eat(&v.to_le_bytes());
            }
        }
        h
    }
}

/// Softmax over the class axis of `[N, C, H, W]` logits.
pub fn softmax_channels(logits: &[f32], shape: &[usize]) -> Vec<f32> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let mut out = vec![0.0f32; logits.len()];
    for ni in 0..n {
        for p in 0..plane {
            let base = ni * c * plane + p;
            let mut maxv = f32::NEG_INFINITY;
            for ci in 0..c {
                maxv = maxv.max(logits[base + ci * plane]);
            }
            let mut sum = 0.0f64;
            for ci in 0..c {
                let e = ((logits[base + ci * plane] - maxv) as f64).exp();
                out[base + ci * plane] = e as f32;
                sum += e;
            }
            let inv = (1.0 / sum) as f32;
            for ci in 0..c {
                out[base + ci * plane] *= inv;
            }
        }
    }
    out
}

/// Per-pixel argmax over the class axis; ties break toward the lowest
/// class index.
pub fn argmax_labels(logits: &[f32], shape: &[usize]) -> Vec<u8> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let mut out = vec![0u8; n * plane];
    for ni in 0..n {
        for p in 0..plane {
            let base = ni * c * plane + p;
            let mut best = 0usize;
            let mut best_v = logits[base];
            for ci in 1..c {
                let v = logits[base + ci * plane];
                if v > best_v {
                    best_v = v;
                    best = ci;
                }
            }
            out[ni * plane + p] = best as u8;
        }
    }
    out
}

/// Stacks slices into a `[N, Cin, H, W]` input tensor, selecting contrast
/// channels and dividing intensities by `intensity_scale`.
pub fn batch_input_tensor(
    slices: &[&MultiContrastSlice],
    contrasts: ContrastSelection,
    intensity_scale: f32,
) -> Tensor {
    assert!(!slices.is_empty());
    let (h, w) = (slices[0].height(), slices[0].width());
    let channels: Vec<usize> = match contrasts {
        ContrastSelection::All => vec![0, 1, 2],
        ContrastSelection::Single(i) => vec![i],
    };
    let inv = 1.0 / intensity_scale;
    let mut data = Vec::with_capacity(slices.len() * channels.len() * h * w);
    for s in slices {
        for &ch in &channels {
            data.extend(s.channels[ch].pixels.iter().map(|&v| v * inv));
        }
    }
    Tensor::new(vec![slices.len(), channels.len(), h, w], data)
}

/// Eval-mode per-pixel prediction for one preprocessed slice, decoded back
/// to corpus tissue ids.
pub fn predict_labels(
    model: &Model,
    slice: &MultiContrastSlice,
    intensity_scale: f32,
) -> Result<LabelMap> {
    let input = batch_input_tensor(&[slice], model.config.contrasts, intensity_scale);
    let mut tape = Tape::new();
    let x = tape.leaf(input.shape.clone(), input.data, false);
    let logits = model.forward_eval(&mut tape, x)?;
    let map = ClassMap::for_num_classes(model.config.num_classes)?;
    let model_labels = argmax_labels(tape.value(logits), tape.shape(logits));
    let classes: Vec<u8> = model_labels.iter().map(|&m| map.decode(m)).collect();
    Ok(LabelMap::new(
        slice.height(),
        slice.width(),
        classes,
        map.original_classes().iter().copied().collect(),
    ))
}

/// Anything that can produce a label map for a slice; lets evaluation and
/// pseudo-labeling run against stub segmenters in tests.
pub trait Segmenter {
    fn predict(&self, slice: &MultiContrastSlice) -> Result<LabelMap>;
    fn name(&self) -> String;
}

pub struct ModelSegmenter<'m> {
    pub model: &'m Model,
    pub intensity_scale: f32,
}

impl Segmenter for ModelSegmenter<'_> {
    fn predict(&self, slice: &MultiContrastSlice) -> Result<LabelMap> {
        predict_labels(self.model, slice, self.intensity_scale)
    }

    fn name(&self) -> String {
        format!(
            "{}-{}-{}",
            self.model.config.architecture.as_str(),
            self.model.config.dropout.name(),
            self.model.config.contrasts.label()
        )
    }
}
