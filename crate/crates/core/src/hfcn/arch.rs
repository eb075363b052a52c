use super::HfcnError;
use crate::parttree::{CLASSES, LEVELS};
use crate::rdosim::SB_SIZE;

/// Number of 3x3 convolutions in the trunk; a 2x2 max pool follows every
/// second one.
pub const TRUNK_CONVS: usize = 8;

/// Channel widths of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub trunk_widths: [usize; TRUNK_CONVS],
    /// Output channels of each branch's 4x4 stride-4 convolution.
    pub branch_first_widths: [usize; LEVELS],
    /// Output channels of each branch's hidden 1x1 convolution.
    pub branch_mid_widths: [usize; LEVELS],
    /// The QP plane carries `q / qp_norm_divisor`.
    pub qp_norm_divisor: f64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            trunk_widths: [8, 8, 12, 12, 16, 16, 20, 20],
            branch_first_widths: [12, 12, 16, 16],
            branch_mid_widths: [16, 16, 24, 32],
            qp_norm_divisor: 255.0,
        }
    }
}

/// Shape of one convolution in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Input spatial side.
    pub in_size: usize,
}

impl ConvShape {
    pub fn out_size(&self) -> usize {
        (self.in_size + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.fan_in()
    }

    pub fn params(&self) -> usize {
        self.weight_len() + self.cout
    }

    /// Two FLOPs per multiply-accumulate; the bias add is folded into the
    /// accumulate.
    pub fn flops(&self) -> usize {
        let o = self.out_size();
        2 * self.weight_len() * o * o
    }
}

/// Convolution shapes of one output branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchShape {
    pub first: ConvShape,
    pub mid: ConvShape,
    pub out: ConvShape,
}

impl ArchSpec {
    /// Every width doubled; used for scaling checks.
    pub fn scaled(&self, factor: usize) -> ArchSpec {
        ArchSpec {
            trunk_widths: self.trunk_widths.map(|w| w * factor),
            branch_first_widths: self.branch_first_widths.map(|w| w * factor),
            branch_mid_widths: self.branch_mid_widths.map(|w| w * factor),
            qp_norm_divisor: self.qp_norm_divisor,
        }
    }

    pub fn validate(&self) -> Result<(), HfcnError> {
        let widths = self
            .trunk_widths
            .iter()
            .chain(&self.branch_first_widths)
            .chain(&self.branch_mid_widths);
        if widths.clone().any(|&w| w == 0 || w > 1024) {
            return Err(HfcnError::BadArch(format!(
                "channel widths must be in 1..=1024: {self:?}"
            )));
        }
        if !(self.qp_norm_divisor.is_finite() && self.qp_norm_divisor > 0.0) {
            return Err(HfcnError::BadArch(format!(
                "qp_norm_divisor must be positive, got {}",
                self.qp_norm_divisor
            )));
        }
        Ok(())
    }

    pub fn trunk_shapes(&self) -> [ConvShape; TRUNK_CONVS] {
        std::array::from_fn(|l| ConvShape {
            cin: if l == 0 { 1 } else { self.trunk_widths[l - 1] },
            cout: self.trunk_widths[l],
            kernel: 3,
            stride: 1,
            pad: 1,
            in_size: SB_SIZE >> (l / 2),
        })
    }

    /// Branch `b` reads the trunk after its `(b + 1)`-th pooling.
    pub fn branch_shapes(&self) -> [BranchShape; LEVELS] {
        std::array::from_fn(|b| {
            let tap_size = SB_SIZE >> (b + 1);
            let first = ConvShape {
                cin: self.trunk_widths[2 * b + 1],
                cout: self.branch_first_widths[b],
                kernel: 4,
                stride: 4,
                pad: 0,
                in_size: tap_size,
            };
            let out_size = first.out_size();
            let mid = ConvShape {
                cin: self.branch_first_widths[b] + 1,
                cout: self.branch_mid_widths[b],
                kernel: 1,
                stride: 1,
                pad: 0,
                in_size: out_size,
            };
            let out = ConvShape {
                cin: self.branch_mid_widths[b],
                cout: CLASSES,
                kernel: 1,
                stride: 1,
                pad: 0,
                in_size: out_size,
            };
            BranchShape { first, mid, out }
        })
    }
}

/// Trainable parameters: convolution weights and biases plus batch-norm
/// scale and shift. Running moments are not counted.
pub fn param_count(arch: &ArchSpec) -> Result<usize, HfcnError> {
    arch.validate()?;
    let trunk: usize = arch
        .trunk_shapes()
        .iter()
        .map(|c| c.params() + 2 * c.cout)
        .sum();
    let branches: usize = arch
        .branch_shapes()
        .iter()
        .map(|b| b.first.params() + 2 * b.first.cout + b.mid.params() + b.out.params())
        .sum();
    Ok(trunk + branches)
}

/// Inference FLOPs per sample. Convolutions count two per multiply-add;
/// ReLU one per element; inference batch norm two per element (scale and
/// shift); 2x2 max pooling three comparisons per output; softmax three per
/// element (exponential, sum, division).
pub fn flop_count(arch: &ArchSpec) -> Result<usize, HfcnError> {
    arch.validate()?;
    let mut flops = 0;
    for (l, c) in arch.trunk_shapes().iter().enumerate() {
        let o = c.out_size();
        let elems = c.cout * o * o;
        flops += c.flops() + elems + 2 * elems;
        if l % 2 == 1 {
            flops += 3 * elems / 4;
        }
    }
    for b in arch.branch_shapes() {
        let o = b.first.out_size();
        let first_elems = b.first.cout * o * o;
        flops += b.first.flops() + 3 * first_elems;
        flops += b.mid.flops() + b.mid.cout * o * o;
        flops += b.out.flops() + 3 * CLASSES * o * o;
    }
    Ok(flops)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_3x3_conv_parameter_count() {
        let c = ConvShape {
            cin: 1,
            cout: 8,
            kernel: 3,
            stride: 1,
            pad: 1,
            in_size: 64,
        };
        assert_eq!(c.params(), 80);
        assert_eq!(c.out_size(), 64);
    }

    #[test]
    fn branch_outputs_match_matrix_sizes() {
        let shapes = ArchSpec::default().branch_shapes();
        let sizes: Vec<usize> = shapes.iter().map(|b| b.first.out_size()).collect();
        assert_eq!(sizes, vec![8, 4, 2, 1]);
        assert_eq!(shapes[0].first.in_size, 32);
        assert_eq!(shapes[3].first.in_size, 4);
    }

    #[test]
    fn default_counts() {
        // Hand count: trunk 13 656, branches 1 864 + 2 632 + 4 676 + 5 876.
        assert_eq!(param_count(&ArchSpec::default()).unwrap(), 28_704);
        let p = param_count(&ArchSpec::default()).unwrap();
        assert!((15_000..=40_000).contains(&p));
        assert!(flop_count(&ArchSpec::default()).unwrap() > 0);
    }

    #[test]
    fn doubling_widths_roughly_quadruples_parameters() {
        let a = ArchSpec::default();
        let ratio = param_count(&a.scaled(2)).unwrap() as f64 / param_count(&a).unwrap() as f64;
        assert!((3.5..=4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn rejects_bad_arch() {
        let mut a = ArchSpec::default();
        a.trunk_widths[3] = 0;
        assert!(matches!(param_count(&a), Err(HfcnError::BadArch(_))));
        let mut a = ArchSpec::default();
        a.qp_norm_divisor = 0.0;
        assert!(matches!(flop_count(&a), Err(HfcnError::BadArch(_))));
    }
}
