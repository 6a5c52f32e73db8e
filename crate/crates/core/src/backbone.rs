//! TC-ResNet-8 style temporal CNN and the expandable classifier head.
//!
//! MFCC coefficients enter as input channels and every convolution slides
//! along time only. Features are the channel means after the last block.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::FeatureMap;
use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, Float, Mode, Parameters, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_channels: usize,
    /// Stem width followed by one entry per residual block.
    pub channels: Vec<usize>,
    pub stem_kernel: usize,
    pub block_kernel: usize,
    pub block_stride: usize,
    pub bn_momentum: Float,
    pub bn_eps: Float,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_channels: 40,
            channels: vec![16, 24, 32, 48],
            stem_kernel: 3,
            block_kernel: 9,
            block_stride: 2,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return Err(Error::Config(
                "backbone.channels needs a stem width and at least one block, all positive".into(),
            ));
        }
        if self.input_channels == 0 || self.stem_kernel == 0 || self.block_kernel == 0 || self.block_stride == 0 {
            return Err(Error::Config("backbone kernel sizes, stride and input channels must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

fn uniform(rng: &mut impl Rng, n: usize, bound: Float) -> Vec<Float> {
    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    fn new(rng: &mut impl Rng, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = (c_in * kernel) as Float;
        // He-uniform for ReLU networks
        let bound = (6.0 / fan_in).sqrt();
        Self {
            weight: Tensor::param(vec![c_out, c_in, kernel], uniform(rng, c_out * c_in * kernel, bound)).unwrap(),
            bias: Tensor::param(vec![c_out], vec![0.0; c_out]).unwrap(),
            stride,
            padding: kernel / 2,
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.leaf(&self.weight)?;
        let b = tape.leaf(&self.bias)?;
        tape.conv1d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: BatchNormStats,
}

impl BatchNorm1d {
    fn new(channels: usize, momentum: Float, eps: Float) -> Self {
        let mut stats = BatchNormStats::new(channels);
        stats.momentum = momentum;
        stats.eps = eps;
        Self {
            gamma: Tensor::param(vec![channels], vec![1.0; channels]).unwrap(),
            beta: Tensor::param(vec![channels], vec![0.0; channels]).unwrap(),
            stats,
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var, mode: Mode, updates: &mut Vec<BatchNormStats>) -> Result<Var> {
        let g = tape.leaf(&self.gamma)?;
        let b = tape.leaf(&self.beta)?;
        let (y, next) = tape.batch_norm1d(x, g, b, &self.stats, mode)?;
        updates.extend(next);
        Ok(y)
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: Conv1d,
    bn1: BatchNorm1d,
    conv2: Conv1d,
    bn2: BatchNorm1d,
    shortcut: Option<(Conv1d, BatchNorm1d)>,
}

impl ResidualBlock {
    fn forward(&self, tape: &mut Tape, x: Var, mode: Mode, updates: &mut Vec<BatchNormStats>) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = self.bn1.forward(tape, h, mode, updates)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, h)?;
        let h = self.bn2.forward(tape, h, mode, updates)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(tape, x)?;
                let s = bn.forward(tape, s, mode, updates)?;
                tape.relu(s)?
            }
            None => x,
        };
        let sum = tape.add(h, skip)?;
        tape.relu(sum)
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm1d> {
        let mut v = vec![&mut self.bn1, &mut self.bn2];
        if let Some((_, bn)) = &mut self.shortcut {
            v.push(bn);
        }
        v
    }
}

/// Output of a backbone forward pass.
pub struct ForwardOutput {
    pub features: Var,
    /// Updated running statistics, one per batch-norm layer, in train mode.
    pub bn_updates: Vec<BatchNormStats>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    stem: Conv1d,
    blocks: Vec<ResidualBlock>,
}

impl Backbone {
    pub fn new(config: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = &config.channels;
        let stem = Conv1d::new(rng, config.input_channels, c[0], config.stem_kernel, 1);
        let blocks = c
            .windows(2)
            .map(|w| {
                let (c_in, c_out) = (w[0], w[1]);
                let bn = || BatchNorm1d::new(c_out, config.bn_momentum, config.bn_eps);
                let conv1 = Conv1d::new(rng, c_in, c_out, config.block_kernel, config.block_stride);
                let conv2 = Conv1d::new(rng, c_out, c_out, config.block_kernel, 1);
                let shortcut = (c_in != c_out || config.block_stride != 1)
                    .then(|| (Conv1d::new(rng, c_in, c_out, 1, config.block_stride), bn()));
                ResidualBlock {
                    conv1,
                    bn1: bn(),
                    conv2,
                    bn2: bn(),
                    shortcut,
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            stem,
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// `[B, input_channels, F] -> [B, feature_dim]`. Running statistics are not
    /// touched; train-mode updates are returned for [`Backbone::commit_bn`].
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<ForwardOutput> {
        let s = tape.shape(x);
        if s.len() != 3 || s[1] != self.config.input_channels {
            return Err(Error::shape(
                "forward_features",
                format!("expected [B, {}, F], got {s:?}", self.config.input_channels),
            ));
        }
        let mut updates = Vec::new();
        let mut h = self.stem.forward(tape, x)?;
        for block in &self.blocks {
            h = block.forward(tape, h, mode, &mut updates)?;
        }
        let features = tape.global_avg_pool_time(h)?;
        Ok(ForwardOutput {
            features,
            bn_updates: updates,
        })
    }

    /// Train-mode forward that immediately folds batch statistics into the
    /// running averages.
    pub fn forward_train(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let out = self.forward(tape, x, Mode::Train)?;
        self.commit_bn(out.bn_updates)?;
        Ok(out.features)
    }

    pub fn commit_bn(&mut self, updates: Vec<BatchNormStats>) -> Result<()> {
        let bns = self.batch_norms_mut();
        if updates.len() != bns.len() {
            return Err(Error::InvalidArgument(format!(
                "{} batch-norm updates for {} layers",
                updates.len(),
                bns.len()
            )));
        }
        for (bn, u) in bns.into_iter().zip(updates) {
            bn.stats = u;
        }
        Ok(())
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm1d> {
        self.blocks.iter_mut().flat_map(|b| b.batch_norms_mut()).collect()
    }

    /// Eval-mode features for a batch of inputs, outside any training tape.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(&batch.detached())?;
        let out = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(tape.to_tensor(out.features))
    }

    /// Every tensor of the model, trainable or not, under a stable name.
    pub fn named_state(&self) -> Vec<(String, Vec<usize>, Vec<Float>)> {
        let mut out = Vec::new();
        let t = |name: String, t: &Tensor| (name, t.shape().to_vec(), t.data().to_vec());
        out.push(t("stem.weight".into(), &self.stem.weight));
        out.push(t("stem.bias".into(), &self.stem.bias));
        for (i, b) in self.blocks.iter().enumerate() {
            let mut convs = vec![("conv1", &b.conv1, &b.bn1), ("conv2", &b.conv2, &b.bn2)];
            if let Some((c, bn)) = &b.shortcut {
                convs.push(("shortcut", c, bn));
            }
            for (name, conv, bn) in convs {
                let p = format!("block{i}.{name}");
                out.push(t(format!("{p}.weight"), &conv.weight));
                out.push(t(format!("{p}.bias"), &conv.bias));
                out.push(t(format!("{p}.bn.gamma"), &bn.gamma));
                out.push(t(format!("{p}.bn.beta"), &bn.beta));
                let c = bn.stats.running_mean.len();
                out.push((format!("{p}.bn.running_mean"), vec![c], bn.stats.running_mean.clone()));
                out.push((format!("{p}.bn.running_var"), vec![c], bn.stats.running_var.clone()));
            }
        }
        out
    }

    /// Inverse of [`Backbone::named_state`]; every name must be present with
    /// the shape this architecture expects.
    pub fn load_named_state(&mut self, lookup: &dyn Fn(&str) -> Option<(Vec<usize>, Vec<Float>)>) -> Result<()> {
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<Float>> {
            let (s, d) = lookup(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if s != shape {
                return Err(Error::Checkpoint(format!("tensor {name} has shape {s:?}, expected {shape:?}")));
            }
            Ok(d)
        };
        let set = |name: &str, t: &mut Tensor| -> Result<()> {
            let d = fetch(name, t.shape())?;
            t.data_mut().copy_from_slice(&d);
            Ok(())
        };
        set("stem.weight", &mut self.stem.weight)?;
        set("stem.bias", &mut self.stem.bias)?;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let mut convs = vec![("conv1", &mut b.conv1, &mut b.bn1), ("conv2", &mut b.conv2, &mut b.bn2)];
            if let Some((c, bn)) = &mut b.shortcut {
                convs.push(("shortcut", c, bn));
            }
            for (name, conv, bn) in convs {
                let p = format!("{}{i}.{name}", "block");
                set(&format!("{p}.weight"), &mut conv.weight)?;
                set(&format!("{p}.bias"), &mut conv.bias)?;
                set(&format!("{p}.bn.gamma"), &mut bn.gamma)?;
                set(&format!("{p}.bn.beta"), &mut bn.beta)?;
                let c = bn.stats.running_mean.len();
                bn.stats.running_mean = fetch(&format!("{p}.bn.running_mean"), &[c])?;
                bn.stats.running_var = fetch(&format!("{p}.bn.running_var"), &[c])?;
            }
        }
        Ok(())
    }

    /// Deep copy with gradients disabled.
    fn frozen(&self) -> Self {
        let mut copy = self.clone();
        for p in copy.parameters_mut() {
            *p = p.detached();
        }
        copy
    }
}

impl Parameters for Backbone {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.stem.weight, &self.stem.bias];
        for b in &self.blocks {
            v.extend([&b.conv1.weight, &b.conv1.bias, &b.bn1.gamma, &b.bn1.beta]);
            v.extend([&b.conv2.weight, &b.conv2.bias, &b.bn2.gamma, &b.bn2.beta]);
            if let Some((c, bn)) = &b.shortcut {
                v.extend([&c.weight, &c.bias, &bn.gamma, &bn.beta]);
            }
        }
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.stem.weight, &mut self.stem.bias];
        for b in &mut self.blocks {
            v.extend([&mut b.conv1.weight, &mut b.conv1.bias, &mut b.bn1.gamma, &mut b.bn1.beta]);
            v.extend([&mut b.conv2.weight, &mut b.conv2.bias, &mut b.bn2.gamma, &mut b.bn2.beta]);
            if let Some((c, bn)) = &mut b.shortcut {
                v.extend([&mut c.weight, &mut c.bias, &mut bn.gamma, &mut bn.beta]);
            }
        }
        v
    }
}

/// Initialisation rule for classifier rows added by [`ClassifierHead::expand`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// Uniform in ±1/√feature_dim, zero bias.
    #[default]
    KaimingUniform,
    Zeros,
}

/// Fully connected classifier over every class seen so far.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn new(feature_dim: usize, num_classes: usize, init: HeadInit, rng: &mut impl Rng) -> Result<Self> {
        let empty = Self {
            weight: Tensor::param(vec![0, feature_dim], Vec::new())?,
            bias: Tensor::param(vec![0], Vec::new())?,
        };
        if num_classes == 0 {
            return Ok(empty);
        }
        empty.expand(num_classes, init, rng)
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (ws, bs) = (weight.shape(), bias.shape());
        if ws.len() != 2 || bs.len() != 1 || ws[0] != bs[0] {
            return Err(Error::shape("classifier_head", format!("weight {ws:?} with bias {bs:?}")));
        }
        Ok(Self {
            weight: weight.with_requires_grad(true),
            bias: bias.with_requires_grad(true),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn classify(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let s = tape.shape(features);
        if s.len() != 2 || s[1] != self.feature_dim() {
            return Err(Error::shape(
                "classify",
                format!("features {s:?} do not match head feature dim {}", self.feature_dim()),
            ));
        }
        let w = tape.leaf(&self.weight)?;
        let b = tape.leaf(&self.bias)?;
        tape.linear(features, w, b)
    }

    /// Logits for a `[B, feature_dim]` tensor without recording gradients.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = tape.leaf(&features.detached())?;
        let w = tape.leaf(&self.weight.detached())?;
        let b = tape.leaf(&self.bias.detached())?;
        if tape.shape(f).len() != 2 || tape.shape(f)[1] != self.feature_dim() {
            return Err(Error::shape("classify", format!("features {:?}", features.shape())));
        }
        let o = tape.linear(f, w, b)?;
        Ok(tape.to_tensor(o))
    }

    /// Appends `n_new` class rows; existing rows are copied bit for bit.
    pub fn expand(&self, n_new: usize, init: HeadInit, rng: &mut impl Rng) -> Result<Self> {
        if n_new == 0 {
            return Err(Error::InvalidArgument("expand_head needs at least one new class".into()));
        }
        let d = self.feature_dim();
        let c = self.num_classes();
        let mut w = self.weight.data().to_vec();
        let mut b = self.bias.data().to_vec();
        match init {
            HeadInit::KaimingUniform => {
                w.extend(uniform(rng, n_new * d, 1.0 / (d as Float).sqrt()));
            }
            HeadInit::Zeros => w.extend(std::iter::repeat(0.0).take(n_new * d)),
        }
        b.extend(std::iter::repeat(0.0).take(n_new));
        Ok(Self {
            weight: Tensor::param(vec![c + n_new, d], w)?,
            bias: Tensor::param(vec![c + n_new], b)?,
        })
    }
}

impl Parameters for ClassifierHead {
    fn parameters(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Frozen copy of the backbone and head from the end of a previous task.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    backbone: Backbone,
    head: ClassifierHead,
}

impl ModelSnapshot {
    pub fn capture(backbone: &Backbone, head: &ClassifierHead) -> Self {
        Self {
            backbone: backbone.frozen(),
            head: ClassifierHead {
                weight: head.weight.detached(),
                bias: head.bias.detached(),
            },
        }
    }

    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        self.backbone.features(batch)
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.head.logits(&self.features(batch)?)
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }
}

/// Stacks feature maps into a `[B, n_coeffs, frames]` tensor.
pub fn batch_tensor(maps: &[&FeatureMap]) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot batch zero feature maps".into()))?;
    let (c, f) = (first.n_coeffs, first.frames);
    let mut data = Vec::with_capacity(maps.len() * c * f);
    for m in maps {
        if m.n_coeffs != c || m.frames != f {
            return Err(Error::shape(
                "batch",
                format!(
                    "clip {} is {}x{}, batch expects {c}x{f}",
                    m.clip_id, m.n_coeffs, m.frames
                ),
            ));
        }
        data.extend(m.data.iter().map(|&v| v as Float));
    }
    Tensor::new(vec![maps.len(), c, f], data)
}

/// Index of the largest value in each row of a `[B, C]` tensor; ties go to
/// the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    if c == 0 {
        return vec![0; logits.shape()[0]];
    }
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, Float::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc })
                .0
        })
        .collect()
}
