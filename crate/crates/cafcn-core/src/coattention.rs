//! Cross-image co-attention: pairwise positional affinities between two
//! feature maps, softmax-normalized attention in both directions, attended
//! feature mixing, and a learned residual gate per branch.
//!
//! For feature maps `x` and `y` of shape `H x W x C` (flattened to `N x C`
//! with `N = H*W`):
//!
//! - affinity `S[i][j] = <Wf x_i, Wg y_j>` through two learned projections
//!   into a reduced `C/8` subspace;
//! - normalizing `S` over `j` gives the attention used for branch `x`, whose
//!   output mixes projected `y` features; normalizing over `i` gives the
//!   attention for branch `y`, mixing projected `x` features;
//! - each branch adds its attended output back through a scalar gate:
//!   `x_w = gamma1 * o_x + x`, `y_w = gamma2 * o_y + y`. The gates start at 0
//!   so the module is an exact identity until training moves them.
//!
//! [`group_average_attention`] extends the pair mechanism to `n` images in
//! O(n): every image attends against the group mean representation once.

use crate::error::{Error, Result};
use crate::tensor::{matmul, softmax_rows, softmax_rows_backward, Tensor};

/// Projection weights and residual gates of the co-attention module.
///
/// `wf`/`wg` map features into the reduced affinity subspace, `wh1`/`wh2`
/// project the mixed values, and the gammas gate each branch's residual.
#[derive(Debug, Clone, PartialEq)]
pub struct CoAttentionParams {
    pub wf: Tensor,
    pub wg: Tensor,
    pub wh1: Tensor,
    pub wh2: Tensor,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl CoAttentionParams {
    /// Validates that all four projections agree on the channel counts.
    pub fn new(
        wf: Tensor,
        wg: Tensor,
        wh1: Tensor,
        wh2: Tensor,
        gamma1: f64,
        gamma2: f64,
    ) -> Result<Self> {
        if wf.rank() != 2 || wg.rank() != 2 || wh1.rank() != 2 || wh2.rank() != 2 {
            return Err(Error::Dimension("projection weights must be matrices".into()));
        }
        let c = wf.shape()[1];
        if wg.shape() != wf.shape() {
            return Err(Error::Dimension(format!(
                "wf {:?} and wg {:?} must match",
                wf.shape(),
                wg.shape()
            )));
        }
        if wh1.shape() != [c, c] || wh2.shape() != [c, c] {
            return Err(Error::Dimension(format!(
                "value projections must be {c}x{c}, got {:?} and {:?}",
                wh1.shape(),
                wh2.shape()
            )));
        }
        Ok(Self { wf, wg, wh1, wh2, gamma1, gamma2 })
    }

    /// Random initialization with the standard `C/8` affinity reduction.
    /// Projections are uniform in `[-1/sqrt(C), 1/sqrt(C)]`; gates start at 0.
    pub fn init(channels: usize, reduction: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Dimension(format!(
                "channels {channels} must be divisible by reduction {reduction}"
            )));
        }
        let c_bar = channels / reduction;
        let bound = 1.0 / (channels as f64).sqrt();
        let mut sample = |shape: &[usize]| {
            let len: usize = shape.iter().product();
            let values = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::new(shape, values)
        };
        Ok(Self {
            wf: sample(&[c_bar, channels])?,
            wg: sample(&[c_bar, channels])?,
            wh1: sample(&[channels, channels])?,
            wh2: sample(&[channels, channels])?,
            gamma1: 0.0,
            gamma2: 0.0,
        })
    }

    pub fn channels(&self) -> usize {
        self.wf.shape()[1]
    }

    pub fn reduced_channels(&self) -> usize {
        self.wf.shape()[0]
    }

    /// Parameters with the two branch roles exchanged: (wf,wg), (wh1,wh2)
    /// and (gamma1,gamma2) swapped.
    pub fn swapped(&self) -> Self {
        Self {
            wf: self.wg.clone(),
            wg: self.wf.clone(),
            wh1: self.wh2.clone(),
            wh2: self.wh1.clone(),
            gamma1: self.gamma2,
            gamma2: self.gamma1,
        }
    }
}

/// Which axis of the `N x N` attention matrix was softmax-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizedAxis {
    /// Each row sums to 1 (normalization over the second index `j`).
    Rows,
    /// Each column sums to 1 (normalization over the first index `i`).
    Columns,
}

/// A normalized attention matrix plus the axis that was normalized.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub alpha: Tensor,
    pub normalized: NormalizedAxis,
}

impl AttentionMap {
    /// True when every normalized slice sums to 1 within `tol` and all
    /// weights lie in [0, 1].
    pub fn is_normalized(&self, tol: f64) -> bool {
        let n = self.alpha.shape()[0];
        let m = self.alpha.shape()[1];
        if self.alpha.values().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return false;
        }
        match self.normalized {
            NormalizedAxis::Rows => (0..n).all(|r| {
                let sum: f64 = (0..m).map(|c| self.alpha.at2(r, c)).sum();
                (sum - 1.0).abs() <= tol
            }),
            NormalizedAxis::Columns => (0..m).all(|c| {
                let sum: f64 = (0..n).map(|r| self.alpha.at2(r, c)).sum();
                (sum - 1.0).abs() <= tol
            }),
        }
    }
}

/// Output of [`attend`]: both branches' mixed features and attention maps.
#[derive(Debug, Clone)]
pub struct Attended {
    /// `N x C` attended output for branch x (mixes projected y features).
    pub o_x: Tensor,
    /// `N x C` attended output for branch y (mixes projected x features).
    pub o_y: Tensor,
    pub alpha_x: AttentionMap,
    pub alpha_y: AttentionMap,
}

fn feature_matrix(x: &Tensor, what: &str) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::Dimension(format!(
            "{what} must be H x W x C, got rank {}",
            x.rank()
        )));
    }
    let s = x.shape();
    x.reshape(&[s[0] * s[1], s[2]])
}

fn check_pair(x: &Tensor, y: &Tensor, params: &CoAttentionParams) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Dimension(format!(
            "co-attention inputs must match: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let c = x.shape()[x.rank() - 1];
    if c != params.channels() {
        return Err(Error::Dimension(format!(
            "features have {c} channels, params expect {}",
            params.channels()
        )));
    }
    Ok(())
}

/// Projects each row of `features` (`N x C`) by `w` (`Cb x C`): `F = X W^T`.
fn project(features: &Tensor, w: &Tensor) -> Result<Tensor> {
    matmul(features, &w.transpose2())
}

/// Raw affinity scores `S[i][j] = <Wf x_i, Wg y_j>` between all position
/// pairs of the two feature maps.
pub fn affinity(x: &Tensor, y: &Tensor, params: &CoAttentionParams) -> Result<Tensor> {
    check_pair(x, y, params)?;
    let xm = feature_matrix(x, "affinity x")?;
    let ym = feature_matrix(y, "affinity y")?;
    let f = project(&xm, &params.wf)?;
    let g = project(&ym, &params.wg)?;
    matmul(&f, &g.transpose2())
}

/// Computes both attention directions from the shared affinity matrix and
/// mixes the projected features.
pub fn attend(x: &Tensor, y: &Tensor, params: &CoAttentionParams) -> Result<Attended> {
    check_pair(x, y, params)?;
    let xm = feature_matrix(x, "attend x")?;
    let ym = feature_matrix(y, "attend y")?;
    let s = affinity(x, y, params)?;

    // Branch x normalizes over j; branch y over i (rows of the transpose).
    let a_x = softmax_rows(&s)?;
    let a_yt = softmax_rows(&s.transpose2())?;

    let h1 = project(&xm, &params.wh1)?;
    let h2 = project(&ym, &params.wh2)?;
    let o_x = matmul(&a_x, &h2)?;
    let o_y = matmul(&a_yt, &h1)?;

    Ok(Attended {
        o_x,
        o_y,
        alpha_x: AttentionMap { alpha: a_x, normalized: NormalizedAxis::Rows },
        alpha_y: AttentionMap { alpha: a_yt.transpose2(), normalized: NormalizedAxis::Columns },
    })
}

/// Full module forward: gated residual mixing of both branches.
///
/// With both gammas at 0 the inputs pass through bit-identically.
pub fn coattention_forward(
    x: &Tensor,
    y: &Tensor,
    params: &CoAttentionParams,
) -> Result<(Tensor, Tensor)> {
    let att = attend(x, y, params)?;
    let x_w = apply_gate(x, &att.o_x, params.gamma1)?;
    let y_w = apply_gate(y, &att.o_y, params.gamma2)?;
    Ok((x_w, y_w))
}

fn apply_gate(input: &Tensor, attended: &Tensor, gamma: f64) -> Result<Tensor> {
    if gamma == 0.0 {
        return Ok(input.clone());
    }
    let o = attended.reshape(input.shape())?;
    input.add(&o.scale(gamma))
}

/// Gradients of the co-attention module for both inputs and every parameter.
#[derive(Debug, Clone)]
pub struct CoAttentionGrads {
    pub input_x: Tensor,
    pub input_y: Tensor,
    pub wf: Tensor,
    pub wg: Tensor,
    pub wh1: Tensor,
    pub wh2: Tensor,
    pub gamma1: f64,
    pub gamma2: f64,
}

/// Exact backward pass through the gated residual attention composition,
/// including the softmax Jacobian on both normalization directions.
pub fn coattention_backward(
    x: &Tensor,
    y: &Tensor,
    params: &CoAttentionParams,
    grad_xw: &Tensor,
    grad_yw: &Tensor,
) -> Result<CoAttentionGrads> {
    check_pair(x, y, params)?;
    if grad_xw.shape() != x.shape() || grad_yw.shape() != y.shape() {
        return Err(Error::Dimension(format!(
            "upstream gradient shapes {:?}/{:?} must match inputs {:?}",
            grad_xw.shape(),
            grad_yw.shape(),
            x.shape()
        )));
    }
    let xm = feature_matrix(x, "backward x")?;
    let ym = feature_matrix(y, "backward y")?;
    let n = xm.shape()[0];
    let c = xm.shape()[1];

    // Recompute the forward intermediates.
    let f = project(&xm, &params.wf)?;
    let g = project(&ym, &params.wg)?;
    let s = matmul(&f, &g.transpose2())?;
    let a_x = softmax_rows(&s)?;
    let a_yt = softmax_rows(&s.transpose2())?;
    let h1 = project(&xm, &params.wh1)?;
    let h2 = project(&ym, &params.wh2)?;
    let o_x = matmul(&a_x, &h2)?;
    let o_y = matmul(&a_yt, &h1)?;

    let d_xw = grad_xw.reshape(&[n, c])?;
    let d_yw = grad_yw.reshape(&[n, c])?;

    // Residual gates.
    let gamma1_grad = d_xw.dot(&o_x)?;
    let gamma2_grad = d_yw.dot(&o_y)?;
    let d_ox = d_xw.scale(params.gamma1);
    let d_oy = d_yw.scale(params.gamma2);
    let mut d_x = d_xw.clone();
    let mut d_y = d_yw.clone();

    // Attended mixes.
    let d_ax = matmul(&d_ox, &h2.transpose2())?;
    let d_h2 = matmul(&a_x.transpose2(), &d_ox)?;
    let d_ayt = matmul(&d_oy, &h1.transpose2())?;
    let d_h1 = matmul(&a_yt.transpose2(), &d_oy)?;

    // Softmax Jacobians; the affinity feeds both normalizations.
    let d_s_rows = softmax_rows_backward(&a_x, &d_ax);
    let d_s_cols = softmax_rows_backward(&a_yt, &d_ayt).transpose2();
    let d_s = d_s_rows.add(&d_s_cols)?;

    // Affinity projections.
    let d_f = matmul(&d_s, &g)?;
    let d_g = matmul(&d_s.transpose2(), &f)?;
    d_x.add_assign(&matmul(&d_f, &params.wf)?)?;
    d_y.add_assign(&matmul(&d_g, &params.wg)?)?;
    let wf_grad = matmul(&d_f.transpose2(), &xm)?;
    let wg_grad = matmul(&d_g.transpose2(), &ym)?;

    // Value projections.
    d_x.add_assign(&matmul(&d_h1, &params.wh1)?)?;
    d_y.add_assign(&matmul(&d_h2, &params.wh2)?)?;
    let wh1_grad = matmul(&d_h1.transpose2(), &xm)?;
    let wh2_grad = matmul(&d_h2.transpose2(), &ym)?;

    Ok(CoAttentionGrads {
        input_x: d_x.reshape(x.shape())?,
        input_y: d_y.reshape(y.shape())?,
        wf: wf_grad,
        wg: wg_grad,
        wh1: wh1_grad,
        wh2: wh2_grad,
        gamma1: gamma1_grad,
        gamma2: gamma2_grad,
    })
}

/// Per-image weighted features plus the shared group representation.
#[derive(Debug, Clone)]
pub struct GroupAttention {
    /// Aggregate semantic representation shared by the whole group.
    pub shared: Tensor,
    /// Each image's attention-weighted feature map.
    pub weighted: Vec<Tensor>,
}

/// Group attention in O(n): each image attends once against the group mean
/// representation instead of against every other image.
///
/// For exactly two images this is defined to coincide with the pairwise
/// [`coattention_forward`] path, so group inference and pair inference agree.
pub fn group_average_attention(
    features: &[Tensor],
    params: &CoAttentionParams,
) -> Result<GroupAttention> {
    if features.len() < 2 {
        return Err(Error::Usage(format!(
            "group attention needs at least 2 feature maps, got {}",
            features.len()
        )));
    }
    for f in &features[1..] {
        if f.shape() != features[0].shape() {
            return Err(Error::Dimension("group features must share a shape".into()));
        }
    }
    if features.len() == 2 {
        let (w0, w1) = coattention_forward(&features[0], &features[1], params)?;
        let shared = w0.add(&w1)?.scale(0.5);
        return Ok(GroupAttention { shared, weighted: vec![w0, w1] });
    }

    let inv_n = 1.0 / features.len() as f64;
    let mut mean = Tensor::zeros(features[0].shape());
    for f in features {
        mean.add_assign(f)?;
    }
    let mean = mean.scale(inv_n);

    let mut weighted = Vec::with_capacity(features.len());
    let mut shared = Tensor::zeros(features[0].shape());
    for f in features {
        let (fw, mw) = coattention_forward(f, &mean, params)?;
        shared.add_assign(&mw)?;
        weighted.push(fw);
    }
    Ok(GroupAttention { shared: shared.scale(inv_n), weighted })
}
