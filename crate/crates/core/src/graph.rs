//! Relational reasoning on data-dependent graphs built directly from a
//! feature map, in the spatial (pixels as vertices) and channel (channels as
//! vertices) directions, plus an embedded-Gaussian non-local block.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::init::xavier_init;
use crate::ops;
use crate::scalar::Real;
use crate::shape_err;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_DEGREE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphMode {
    /// `H*W` vertices, `C` features each.
    Spatial,
    /// `C` vertices, `H*W` features each.
    Channel,
}

/// Vertex-feature matrix reshaped from an `H x W x C` map.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFeatures<T> {
    pub matrix: Tensor<T>,
    pub origin_shape: (usize, usize, usize),
    pub mode: GraphMode,
}

impl<T: Real> GraphFeatures<T> {
    pub fn build(x: &Tensor<T>, mode: GraphMode) -> Result<Self> {
        let (h, w, c) = x.dims3("build_graph")?;
        let spatial = x.clone().reshape(&[h * w, c])?;
        let matrix = match mode {
            GraphMode::Spatial => spatial,
            GraphMode::Channel => spatial.transpose2()?,
        };
        Ok(Self {
            matrix,
            origin_shape: (h, w, c),
            mode,
        })
    }

    pub fn vertices(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// Inverse of [`GraphFeatures::build`].
    pub fn to_feature_map(&self) -> Result<Tensor<T>> {
        let (h, w, c) = self.origin_shape;
        let spatial = match self.mode {
            GraphMode::Spatial => self.matrix.clone(),
            GraphMode::Channel => self.matrix.transpose2()?,
        };
        spatial.reshape(&[h, w, c])
    }
}

pub fn feature_dim(mode: GraphMode, h: usize, w: usize, c: usize) -> usize {
    match mode {
        GraphMode::Spatial => c,
        GraphMode::Channel => h * w,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReasoningConfig {
    /// One projection for both sides of the dot product; keeps the adjacency
    /// symmetric.
    pub shared_projection: bool,
    /// Add the input back onto the reasoning output.
    pub residual: bool,
    pub degree_eps: f64,
}

impl Default for ReasoningConfig {
    fn default() -> Self {
        Self {
            shared_projection: true,
            residual: false,
            degree_eps: DEFAULT_DEGREE_EPS,
        }
    }
}

/// Weights of one reasoning module over `a2`-dimensional vertex features.
#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningParams<T> {
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    /// Second projection for the `j` side, used only without sharing.
    pub proj_j: Option<(Tensor<T>, Tensor<T>)>,
    pub lambda_w: Tensor<T>,
    pub lambda_b: Tensor<T>,
    pub theta: Tensor<T>,
}

impl<T: Real> ReasoningParams<T> {
    pub fn xavier(a2: usize, shared_projection: bool, seed: u64) -> Self {
        let sq = [a2, a2];
        Self {
            proj_w: xavier_init(&sq, seed),
            proj_b: Tensor::zeros(&[a2]),
            proj_j: (!shared_projection).then(|| (xavier_init(&sq, seed ^ 0x5a5a), Tensor::zeros(&[a2]))),
            lambda_w: xavier_init(&sq, seed.wrapping_add(1)),
            lambda_b: Tensor::zeros(&[a2]),
            theta: xavier_init(&sq, seed.wrapping_add(2)),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> ReasoningVars {
        ReasoningVars {
            proj_w: tape.leaf(self.proj_w.clone(), requires_grad),
            proj_b: tape.leaf(self.proj_b.clone(), requires_grad),
            proj_j: self
                .proj_j
                .as_ref()
                .map(|(w, b)| (tape.leaf(w.clone(), requires_grad), tape.leaf(b.clone(), requires_grad))),
            lambda_w: tape.leaf(self.lambda_w.clone(), requires_grad),
            lambda_b: tape.leaf(self.lambda_b.clone(), requires_grad),
            theta: tape.leaf(self.theta.clone(), requires_grad),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReasoningVars {
    pub proj_w: Var,
    pub proj_b: Var,
    pub proj_j: Option<(Var, Var)>,
    pub lambda_w: Var,
    pub lambda_b: Var,
    pub theta: Var,
}

impl ReasoningVars {
    fn check<T: Real>(&self, tape: &Tape<T>, a2: usize) -> Result<()> {
        let sq = [a2, a2];
        let checks = [
            ("proj_w", tape.value(self.proj_w).shape() == sq),
            ("proj_b", tape.value(self.proj_b).shape() == [a2]),
            ("lambda_w", tape.value(self.lambda_w).shape() == sq),
            ("lambda_b", tape.value(self.lambda_b).shape() == [a2]),
            ("theta", tape.value(self.theta).shape() == sq),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(shape_err!("relational reasoning", "{name} does not match feature dim {a2}"));
            }
        }
        Ok(())
    }
}

fn pointwise<T: Real>(tape: &mut Tape<T>, g: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(g, w)?;
    let y = tape.add(y, b)?;
    Ok(tape.relu(y))
}

/// Data-dependent adjacency `A_ij = p_i diag(lambda) p_j^T` with
/// `p = relu(G W + b)` per vertex and `lambda = relu(mean_i(G) W' + b')`.
pub fn adjacency<T: Real>(tape: &mut Tape<T>, g: Var, p: &ReasoningVars) -> Result<Var> {
    let (_, a2) = tape.value(g).dims2("adjacency")?;
    p.check(tape, a2)?;
    let proj = pointwise(tape, g, p.proj_w, p.proj_b)?;
    let avg = tape.row_mean(g)?;
    let lambda = pointwise(tape, avg, p.lambda_w, p.lambda_b)?;
    let adj = match p.proj_j {
        None => tape.weighted_gram(proj, lambda)?,
        Some((wj, bj)) => {
            let proj_j = pointwise(tape, g, wj, bj)?;
            let scaled = tape.mul(proj, lambda)?;
            let pt = tape.transpose(proj_j)?;
            tape.matmul(scaled, pt)?
        }
    };
    if !tape.value(adj).all_finite() {
        return Err(Error::NonFinite { op: "adjacency" });
    }
    Ok(adj)
}

/// `relu(L G Theta)` on graph matrix `g` (`a1 x a2`), returned as `a1 x a2`.
///
/// Vertices are processed in a canonical order (rows sorted
/// lexicographically), so reordering the input vertices reorders the output
/// rows bit-for-bit.
pub fn graph_reason_matrix<T: Real>(
    tape: &mut Tape<T>,
    g: Var,
    p: &ReasoningVars,
    cfg: &ReasoningConfig,
) -> Result<Var> {
    let order = ops::canonical_row_order(tape.value(g))?;
    let inverse = ops::invert_permutation(&order);
    let gs = tape.permute_rows(g, order)?;
    let adj = adjacency(tape, gs, p)?;
    let lap = tape.normalized_laplacian(adj, T::cst(cfg.degree_eps))?;
    let lg = tape.matmul(lap, gs)?;
    let lgt = tape.matmul(lg, p.theta)?;
    let mut out = tape.relu(lgt);
    if cfg.residual {
        out = tape.add(out, gs)?;
    }
    tape.permute_rows(out, inverse)
}

/// Reshape `H x W x C` into the graph matrix for `mode`.
pub fn to_graph<T: Real>(tape: &mut Tape<T>, x: Var, mode: GraphMode) -> Result<Var> {
    let (h, w, c) = tape.value(x).dims3("build_graph")?;
    let s = tape.reshape(x, &[h * w, c])?;
    match mode {
        GraphMode::Spatial => Ok(s),
        GraphMode::Channel => tape.transpose(s),
    }
}

pub fn from_graph<T: Real>(tape: &mut Tape<T>, g: Var, mode: GraphMode, origin: (usize, usize, usize)) -> Result<Var> {
    let (h, w, c) = origin;
    let s = match mode {
        GraphMode::Spatial => g,
        GraphMode::Channel => tape.transpose(g)?,
    };
    tape.reshape(s, &[h, w, c])
}

/// Reasoning over a feature map in the given graph direction; output has the
/// input shape.
pub fn reason<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    mode: GraphMode,
    p: &ReasoningVars,
    cfg: &ReasoningConfig,
) -> Result<Var> {
    let origin = tape.value(x).dims3("relational reasoning")?;
    let g = to_graph(tape, x, mode)?;
    let r = graph_reason_matrix(tape, g, p, cfg)?;
    from_graph(tape, r, mode, origin)
}

/// Spatial relational reasoning.
pub fn srr<T: Real>(tape: &mut Tape<T>, x: Var, p: &ReasoningVars, cfg: &ReasoningConfig) -> Result<Var> {
    reason(tape, x, GraphMode::Spatial, p, cfg)
}

/// Channel relational reasoning.
pub fn crr<T: Real>(tape: &mut Tape<T>, x: Var, p: &ReasoningVars, cfg: &ReasoningConfig) -> Result<Var> {
    reason(tape, x, GraphMode::Channel, p, cfg)
}

/// Evaluate a reasoning module outside of training.
pub fn reason_eval<T: Real>(
    x: &Tensor<T>,
    mode: GraphMode,
    params: &ReasoningParams<T>,
    cfg: &ReasoningConfig,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = params.bind(&mut tape, false);
    let y = reason(&mut tape, xv, mode, &pv, cfg)?;
    Ok(tape.value(y).clone())
}

pub fn adjacency_eval<T: Real>(g: &GraphFeatures<T>, params: &ReasoningParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let gv = tape.constant(g.matrix.clone());
    let pv = params.bind(&mut tape, false);
    let a = adjacency(&mut tape, gv, &pv)?;
    Ok(tape.value(a).clone())
}

/// Embedded-Gaussian non-local block weights (no biases).
#[derive(Debug, Clone, PartialEq)]
pub struct NonLocalParams<T> {
    pub theta: Tensor<T>,
    pub phi: Tensor<T>,
    pub g: Tensor<T>,
    pub out: Tensor<T>,
}

pub fn nonlocal_inner(c: usize) -> usize {
    (c / 2).max(1)
}

impl<T: Real> NonLocalParams<T> {
    pub fn xavier(c: usize, seed: u64) -> Self {
        let ci = nonlocal_inner(c);
        Self {
            theta: xavier_init(&[c, ci], seed),
            phi: xavier_init(&[c, ci], seed.wrapping_add(1)),
            g: xavier_init(&[c, ci], seed.wrapping_add(2)),
            out: xavier_init(&[ci, c], seed.wrapping_add(3)),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> NonLocalVars {
        NonLocalVars {
            theta: tape.leaf(self.theta.clone(), requires_grad),
            phi: tape.leaf(self.phi.clone(), requires_grad),
            g: tape.leaf(self.g.clone(), requires_grad),
            out: tape.leaf(self.out.clone(), requires_grad),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NonLocalVars {
    pub theta: Var,
    pub phi: Var,
    pub g: Var,
    pub out: Var,
}

pub struct NonLocalOutput {
    pub output: Var,
    pub attention: Var,
}

/// `x + softmax(theta(x) phi(x)^T) g(x) W_out`, over the `H*W` positions.
pub fn non_local_block<T: Real>(tape: &mut Tape<T>, x: Var, p: &NonLocalVars) -> Result<NonLocalOutput> {
    let (h, w, c) = tape.value(x).dims3("non_local_block")?;
    for (name, v) in [("theta", p.theta), ("phi", p.phi), ("g", p.g)] {
        let s = tape.value(v).shape();
        if s.len() != 2 || s[0] != c {
            return Err(shape_err!("non_local_block", "{name} is {s:?}, input has {c} channels"));
        }
    }
    let ci = tape.value(p.theta).shape()[1];
    if tape.value(p.phi).shape()[1] != ci || tape.value(p.g).shape()[1] != ci || tape.value(p.out).shape() != [ci, c] {
        return Err(shape_err!("non_local_block", "inconsistent embedding widths"));
    }
    let xm = tape.reshape(x, &[h * w, c])?;
    let th = tape.matmul(xm, p.theta)?;
    let ph = tape.matmul(xm, p.phi)?;
    let gg = tape.matmul(xm, p.g)?;
    let pht = tape.transpose(ph)?;
    let logits = tape.matmul(th, pht)?;
    let attention = tape.softmax_rows(logits)?;
    let y = tape.matmul(attention, gg)?;
    let z = tape.matmul(y, p.out)?;
    let sum = tape.add(xm, z)?;
    let output = tape.reshape(sum, &[h, w, c])?;
    Ok(NonLocalOutput { output, attention })
}

pub fn non_local_eval<T: Real>(x: &Tensor<T>, params: &NonLocalParams<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = params.bind(&mut tape, false);
    let out = non_local_block(&mut tape, xv, &pv)?;
    Ok((tape.value(out.output).clone(), tape.value(out.attention).clone()))
}

/// Rows of `perm` applied to an `H x W x C` map's pixels (pixel `i` of the
/// result is pixel `perm[i]` of the input).
pub fn permute_pixels<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let (h, w, c) = x.dims3("permute_pixels")?;
    let m = x.clone().reshape(&[h * w, c])?;
    ops::permute_rows(&m, perm)?.reshape(&[h, w, c])
}

pub fn permute_channels<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let (h, w, c) = x.dims3("permute_channels")?;
    if perm.len() != c {
        return Err(shape_err!("permute_channels", "permutation of length {} for {c} channels", perm.len()));
    }
    let mut out = Vec::with_capacity(x.len());
    for px in x.data().chunks_exact(c) {
        out.extend(perm.iter().map(|&p| px[p]));
    }
    Tensor::new(alloc::vec![h, w, c], out)
}
