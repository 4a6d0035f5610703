//! Parallel multi-scale attention (PMA).
//!
//! The left branch runs 3x3/5x5/7x7 convolutions over one avg/max channel
//! descriptor and averages the three sigmoid maps. The right branch first
//! extracts features at the three scales, then applies a spatial-attention
//! map to each and averages. A 1x1 convolution fuses the two maps.

use alloc::vec::Vec;

use crate::error::Result;
use crate::init::xavier_init;
use crate::scalar::Real;
use crate::shape_err;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const SCALES: [usize; 3] = [3, 5, 7];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PmaBranch {
    #[default]
    Both,
    LeftOnly,
    RightOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureActivation {
    #[default]
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PmaConfig {
    pub branch: PmaBranch,
    pub right_activation: FeatureActivation,
    pub att_kernel: usize,
}

impl Default for PmaConfig {
    fn default() -> Self {
        Self {
            branch: PmaBranch::Both,
            right_activation: FeatureActivation::Relu,
            att_kernel: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn xavier(k: usize, cin: usize, cout: usize, seed: u64) -> Self {
        Self {
            w: xavier_init(&[k, k, cin, cout], seed),
            b: Tensor::zeros(&[cout]),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> ConvVars {
        ConvVars {
            w: tape.leaf(self.w.clone(), requires_grad),
            b: tape.leaf(self.b.clone(), requires_grad),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvVars {
    pub w: Var,
    pub b: Var,
}

impl ConvVars {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var, stride: usize) -> Result<Var> {
        tape.conv2d(x, self.w, self.b, stride)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmaParams<T> {
    /// Descriptor (2 ch) -> map (1 ch), one per scale.
    pub left: Vec<ConvParams<T>>,
    /// Features C -> C, one per scale.
    pub right: Vec<ConvParams<T>>,
    /// Spatial attention on each right-branch feature, 2 -> 1.
    pub right_att: Vec<ConvParams<T>>,
    /// 1x1, 2 -> 1.
    pub fuse: ConvParams<T>,
}

impl<T: Real> PmaParams<T> {
    pub fn xavier(c: usize, att_kernel: usize, seed: u64) -> Self {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_add(0x9e37_79b9_7f4a_7c15);
            s
        };
        Self {
            left: SCALES.iter().map(|&k| ConvParams::xavier(k, 2, 1, next())).collect(),
            right: SCALES.iter().map(|&k| ConvParams::xavier(k, c, c, next())).collect(),
            right_att: SCALES.iter().map(|_| ConvParams::xavier(att_kernel, 2, 1, next())).collect(),
            fuse: ConvParams::xavier(1, 2, 1, next()),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> PmaVars {
        PmaVars {
            left: self.left.iter().map(|p| p.bind(tape, requires_grad)).collect(),
            right: self.right.iter().map(|p| p.bind(tape, requires_grad)).collect(),
            right_att: self.right_att.iter().map(|p| p.bind(tape, requires_grad)).collect(),
            fuse: self.fuse.bind(tape, requires_grad),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PmaVars {
    pub left: Vec<ConvVars>,
    pub right: Vec<ConvVars>,
    pub right_att: Vec<ConvVars>,
    pub fuse: ConvVars,
}

impl PmaVars {
    fn check<T: Real>(&self, tape: &Tape<T>) -> Result<()> {
        for (name, convs) in [("left", &self.left), ("right", &self.right)] {
            let mut sizes: Vec<usize> = convs.iter().map(|c| tape.value(c.w).shape()[0]).collect();
            sizes.sort_unstable();
            if sizes != SCALES {
                return Err(shape_err!("pma", "{name} branch kernel sizes {sizes:?}, expected {:?}", SCALES));
            }
        }
        if self.right_att.len() != SCALES.len() {
            return Err(shape_err!("pma", "expected {} spatial-attention convs", SCALES.len()));
        }
        Ok(())
    }
}

/// Channel-wise `[mean, max]` descriptor, `H x W x 2`.
pub fn descriptor<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let avg = tape.channel_mean(x)?;
    let max = tape.channel_max(x)?;
    tape.concat(&[avg, max])
}

/// `sigmoid(conv(descriptor(x)))`, `H x W x 1`.
pub fn spatial_attention<T: Real>(tape: &mut Tape<T>, x: Var, conv: &ConvVars) -> Result<Var> {
    let d = descriptor(tape, x)?;
    let z = conv.apply(tape, d, 1)?;
    Ok(tape.sigmoid(z))
}

/// Multi-scale attention on single-scale features, `H x W x 1`.
pub fn left_branch<T: Real>(tape: &mut Tape<T>, x: Var, p: &PmaVars) -> Result<Var> {
    let d = descriptor(tape, x)?;
    let maps = p
        .left
        .iter()
        .map(|conv| {
            let z = conv.apply(tape, d, 1)?;
            Ok(tape.sigmoid(z))
        })
        .collect::<Result<Vec<_>>>()?;
    tape.mean_of(&maps)
}

/// Attention on multi-scale features, `H x W x 1`.
pub fn right_branch<T: Real>(tape: &mut Tape<T>, x: Var, p: &PmaVars, cfg: &PmaConfig) -> Result<Var> {
    let maps = p
        .right
        .iter()
        .zip(&p.right_att)
        .map(|(conv, att)| {
            let z = conv.apply(tape, x, 1)?;
            let f = match cfg.right_activation {
                FeatureActivation::Relu => tape.relu(z),
                FeatureActivation::Sigmoid => tape.sigmoid(z),
            };
            spatial_attention(tape, f, att)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.mean_of(&maps)
}

/// `sigmoid(conv1x1([a_l, a_r]))`.
pub fn fuse<T: Real>(tape: &mut Tape<T>, a_l: Var, a_r: Var, conv: &ConvVars) -> Result<Var> {
    let (sl, sr) = (tape.value(a_l).shape(), tape.value(a_r).shape());
    if sl != sr {
        return Err(shape_err!("fuse", "attention maps {sl:?} and {sr:?} differ"));
    }
    let cat = tape.concat(&[a_l, a_r])?;
    let z = conv.apply(tape, cat, 1)?;
    Ok(tape.sigmoid(z))
}

pub struct PmaOutput {
    pub left: Option<Var>,
    pub right: Option<Var>,
    pub fused: Var,
}

/// Full PMA map for `x`; single-branch variants feed the same map to both
/// fusion inputs.
pub fn pma<T: Real>(tape: &mut Tape<T>, x: Var, p: &PmaVars, cfg: &PmaConfig) -> Result<PmaOutput> {
    tape.value(x).dims3("pma")?;
    p.check(tape)?;
    let left = matches!(cfg.branch, PmaBranch::Both | PmaBranch::LeftOnly)
        .then(|| left_branch(tape, x, p))
        .transpose()?;
    let right = matches!(cfg.branch, PmaBranch::Both | PmaBranch::RightOnly)
        .then(|| right_branch(tape, x, p, cfg))
        .transpose()?;
    let (a, b) = match (left, right) {
        (Some(l), Some(r)) => (l, r),
        (Some(l), None) => (l, l),
        (None, Some(r)) => (r, r),
        (None, None) => unreachable!(),
    };
    let fused = fuse(tape, a, b, &p.fuse)?;
    Ok(PmaOutput { left, right, fused })
}

/// Evaluate PMA outside of training; returns `(A_l, A_r, A_f)` as `H x W` maps
/// (absent branches are `None`).
#[allow(clippy::type_complexity)]
pub fn pma_eval<T: Real>(
    x: &Tensor<T>,
    params: &PmaParams<T>,
    cfg: &PmaConfig,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = params.bind(&mut tape, false);
    let out = pma(&mut tape, xv, &pv, cfg)?;
    let get = |v: Var| tape.value(v).to_map();
    Ok((
        out.left.map(get).transpose()?,
        out.right.map(get).transpose()?,
        get(out.fused)?,
    ))
}
