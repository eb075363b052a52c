use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{ArchSpec, ConvShape, TRUNK_CONVS};
use super::HfcnError;
use crate::parttree::LEVELS;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub shape: ConvShape,
    /// `cout x cin x k x k`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv {
    /// Weights uniform on `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`, zero bias.
    pub fn init<R: Rng>(shape: ConvShape, rng: &mut R) -> Conv {
        let bound = (6.0 / shape.fan_in() as f64).sqrt();
        Conv {
            shape,
            weight: (0..shape.weight_len())
                .map(|_| rng.random_range(-bound..=bound))
                .collect(),
            bias: vec![0.0; shape.cout],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64], momentum: f64) {
        for (r, &m) in self.running_mean.iter_mut().zip(mean) {
            *r = momentum * *r + (1.0 - momentum) * m;
        }
        for (r, &v) in self.running_var.iter_mut().zip(var) {
            *r = momentum * *r + (1.0 - momentum) * v;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub first: Conv,
    pub first_bn: BatchNorm,
    pub mid: Conv,
    pub out: Conv,
}

/// All weights of the network plus the descriptor they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchSpec,
    pub seed: u64,
    pub trunk: Vec<Conv>,
    pub trunk_bn: Vec<BatchNorm>,
    pub branches: Vec<Branch>,
}

/// Trainable tensors per trunk layer (weight, bias, gamma, beta).
pub(crate) const TRUNK_SLOTS: usize = 4;
/// Trainable tensors per branch.
pub(crate) const BRANCH_SLOTS: usize = 8;
pub(crate) const TENSOR_COUNT: usize = TRUNK_CONVS * TRUNK_SLOTS + LEVELS * BRANCH_SLOTS;

pub(crate) fn trunk_slot(layer: usize) -> usize {
    layer * TRUNK_SLOTS
}

pub(crate) fn branch_slot(branch: usize) -> usize {
    TRUNK_CONVS * TRUNK_SLOTS + branch * BRANCH_SLOTS
}

/// Deterministic initialization from `seed`.
pub fn init_params(arch: &ArchSpec, seed: u64) -> Result<ModelParams, HfcnError> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trunk: Vec<Conv> = arch
        .trunk_shapes()
        .into_iter()
        .map(|s| Conv::init(s, &mut rng))
        .collect();
    let trunk_bn = arch.trunk_widths.iter().map(|&c| BatchNorm::new(c)).collect();
    let branches = arch
        .branch_shapes()
        .into_iter()
        .map(|b| Branch {
            first: Conv::init(b.first, &mut rng),
            first_bn: BatchNorm::new(b.first.cout),
            mid: Conv::init(b.mid, &mut rng),
            out: Conv::init(b.out, &mut rng),
        })
        .collect();
    Ok(ModelParams {
        arch: arch.clone(),
        seed,
        trunk,
        trunk_bn,
        branches,
    })
}

impl ModelParams {
    /// Trainable tensors in canonical order: per trunk layer weight, bias,
    /// gamma, beta; then per branch the first conv, its batch norm, the
    /// hidden 1x1 conv and the output conv.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut v = Vec::with_capacity(TENSOR_COUNT);
        for (c, bn) in self.trunk.iter().zip(&self.trunk_bn) {
            v.extend([&c.weight, &c.bias, &bn.gamma, &bn.beta]);
        }
        for b in &self.branches {
            v.extend([
                &b.first.weight,
                &b.first.bias,
                &b.first_bn.gamma,
                &b.first_bn.beta,
                &b.mid.weight,
                &b.mid.bias,
                &b.out.weight,
                &b.out.bias,
            ]);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = Vec::with_capacity(TENSOR_COUNT);
        for (c, bn) in self.trunk.iter_mut().zip(self.trunk_bn.iter_mut()) {
            v.extend([&mut c.weight, &mut c.bias, &mut bn.gamma, &mut bn.beta]);
        }
        for b in self.branches.iter_mut() {
            v.extend([
                &mut b.first.weight,
                &mut b.first.bias,
                &mut b.first_bn.gamma,
                &mut b.first_bn.beta,
                &mut b.mid.weight,
                &mut b.mid.bias,
                &mut b.out.weight,
                &mut b.out.bias,
            ]);
        }
        v
    }

    /// Batch-norm layers in order: trunk first, then branches.
    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        self.trunk_bn
            .iter()
            .chain(self.branches.iter().map(|b| &b.first_bn))
            .collect()
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        self.trunk_bn
            .iter_mut()
            .chain(self.branches.iter_mut().map(|b| &mut b.first_bn))
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .into_iter()
            .chain(self.batch_norms().into_iter().flat_map(|b| [&b.running_mean, &b.running_var]))
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Gradients laid out like [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Gradients {
        Gradients(params.tensors().iter().map(|t| vec![0.0; t.len()]).collect())
    }
}
