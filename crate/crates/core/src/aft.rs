//! Feature transformation network and the incremental training objective.
//!
//! The objective for task `t > 0` is
//!
//! ```text
//! total = ce + α·kfd + β·trans + γ·fs
//! ```
//!
//! where `kfd` ties current features to the frozen previous model, `trans`
//! ties them to the previous features mapped through the transformation
//! network, and `fs` classifies transformed prototype samples of old classes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ClassifierHead;
use crate::error::{Error, Result};
use crate::feature_space::FeatureSpace;
use crate::tensor::{Float, Parameters, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AftArchitecture {
    /// `x + W₂·relu(W₁x + b₁) + b₂`, with `W₂` and `b₂` zero at init.
    ResidualMlp { hidden: usize },
    /// `Wx + b`, with `W = I` and `b = 0` at init.
    Linear,
}

impl Default for AftArchitecture {
    fn default() -> Self {
        AftArchitecture::ResidualMlp { hidden: 96 }
    }
}

#[derive(Debug, Clone)]
pub struct AftNetwork {
    dim: usize,
    architecture: AftArchitecture,
    w1: Tensor,
    b1: Tensor,
    // absent for the linear architecture
    w2: Option<Tensor>,
    b2: Option<Tensor>,
}

impl AftNetwork {
    /// A freshly initialised network that maps every input to itself.
    pub fn identity(dim: usize, architecture: AftArchitecture, rng: &mut impl Rng) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("AFT network dimension must be positive".into()));
        }
        match architecture {
            AftArchitecture::ResidualMlp { hidden } => {
                if hidden == 0 {
                    return Err(Error::InvalidArgument("AFT hidden width must be positive".into()));
                }
                let bound = (6.0 / dim as Float).sqrt();
                let w1 = (0..hidden * dim).map(|_| rng.gen_range(-bound..=bound)).collect();
                Ok(Self {
                    dim,
                    architecture,
                    w1: Tensor::param(vec![hidden, dim], w1)?,
                    b1: Tensor::param(vec![hidden], vec![0.0; hidden])?,
                    w2: Some(Tensor::param(vec![dim, hidden], vec![0.0; dim * hidden])?),
                    b2: Some(Tensor::param(vec![dim], vec![0.0; dim])?),
                })
            }
            AftArchitecture::Linear => {
                let mut w = vec![0.0; dim * dim];
                (0..dim).for_each(|i| w[i * dim + i] = 1.0);
                Ok(Self {
                    dim,
                    architecture,
                    w1: Tensor::param(vec![dim, dim], w)?,
                    b1: Tensor::param(vec![dim], vec![0.0; dim])?,
                    w2: None,
                    b2: None,
                })
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn architecture(&self) -> AftArchitecture {
        self.architecture
    }

    /// Differentiable forward pass over `[B, dim]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::shape(
                "aft_forward",
                format!("expected [B, {}], got {s:?}", self.dim),
            ));
        }
        let w1 = tape.leaf(&self.w1)?;
        let b1 = tape.leaf(&self.b1)?;
        let h = tape.linear(x, w1, b1)?;
        match (&self.w2, &self.b2) {
            (Some(w2), Some(b2)) => {
                let h = tape.relu(h)?;
                let w2 = tape.leaf(w2)?;
                let b2 = tape.leaf(b2)?;
                let delta = tape.linear(h, w2, b2)?;
                tape.add(x, delta)
            }
            _ => Ok(h),
        }
    }

    /// Applies the network to a `[K, dim]` tensor without recording
    /// gradients.
    pub fn map(&self, x: &Tensor) -> Result<Tensor> {
        let mut frozen = self.clone();
        for p in frozen.parameters_mut() {
            *p = p.detached();
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(&x.detached())?;
        let y = frozen.forward(&mut tape, xv)?;
        Ok(tape.to_tensor(y))
    }
}

impl Parameters for AftNetwork {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.w1, &self.b1];
        v.extend(self.w2.iter());
        v.extend(self.b2.iter());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.w1, &mut self.b1];
        v.extend(self.w2.iter_mut());
        v.extend(self.b2.iter_mut());
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: Float,
    pub beta: Float,
    pub gamma: Float,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 5.0,
            gamma: 5.0,
        }
    }
}

impl LossWeights {
    pub const ZERO: Self = Self {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: Float,
    pub kfd: Float,
    pub trans: Float,
    pub fs: Float,
    pub total: Float,
}

/// Weighted sum of already computed loss values. Any non-finite component
/// is reported by name.
pub fn total_loss(ce: Float, kfd: Float, trans: Float, fs: Float, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("ce", ce), ("kfd", kfd), ("trans", trans), ("fs", fs)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: name.into(),
                step: None,
            });
        }
    }
    Ok(LossBreakdown {
        ce,
        kfd,
        trans,
        fs,
        total: ce + w.alpha * kfd + w.beta * trans + w.gamma * fs,
    })
}

fn require_no_grad(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.requires_grad(v) {
        return Err(Error::InvalidArgument(format!(
            "{what} must come from the frozen previous model (no gradient)"
        )));
    }
    Ok(())
}

/// Batch-mean L2 distance between current and previous-model features.
pub fn loss_kfd(tape: &mut Tape, current: Var, previous: Var) -> Result<Var> {
    require_no_grad(tape, previous, "previous features")?;
    tape.l2_distance(current, previous)
}

/// Batch-mean L2 distance between current features and previous features
/// mapped through the transformation network.
pub fn loss_trans(tape: &mut Tape, current: Var, previous: Var, net: &AftNetwork) -> Result<Var> {
    require_no_grad(tape, previous, "previous features")?;
    let mapped = net.forward(tape, previous)?;
    tape.l2_distance(current, mapped)
}

/// Cross-entropy of the current head on transformed prototype samples.
///
/// Zero on the base task (`task_index == 0`); an empty space on a later task
/// is an error.
pub fn loss_fs(
    tape: &mut Tape,
    net: &AftNetwork,
    space: &FeatureSpace,
    head: &ClassifierHead,
    samples_per_class: usize,
    task_index: usize,
    rng: &mut impl Rng,
) -> Result<Var> {
    loss_fs_with(tape, net, space, head, samples_per_class, task_index, true, rng)
}

/// [`loss_fs`] with a switch for whether the transformation network is
/// trained by the replay term. When off, replayed samples are mapped
/// through a constant copy of the network and only the head learns from
/// them.
#[allow(clippy::too_many_arguments)]
pub fn loss_fs_with(
    tape: &mut Tape,
    net: &AftNetwork,
    space: &FeatureSpace,
    head: &ClassifierHead,
    samples_per_class: usize,
    task_index: usize,
    train_network: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    if task_index == 0 {
        return tape.constant(Vec::new(), vec![0.0]);
    }
    if space.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "feature space is empty while learning task {task_index}"
        )));
    }
    let (samples, labels) = space.sample_all(samples_per_class, rng)?;
    let mapped = if train_network {
        let s = tape.leaf(&samples)?;
        net.forward(tape, s)?
    } else {
        let m = net.map(&samples)?;
        tape.constant(m.shape().to_vec(), m.into_data())?
    };
    let logits = head.classify(tape, mapped)?;
    tape.softmax_cross_entropy(logits, &labels)
}
