//! Layer normalization with an explicit scale/shift pair, so the same code
//! path serves both learned (static) and generated (dynamic) parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Scale (`alpha`) and shift (`beta`) for one normalized vector of length N.
#[derive(Clone, Debug, PartialEq)]
pub struct LnParams {
    scale: Vec<f64>,
    shift: Vec<f64>,
}

impl LnParams {
    pub fn new(scale: Vec<f64>, shift: Vec<f64>) -> Result<Self> {
        if scale.len() != shift.len() {
            return Err(Error::ShapeMismatch {
                op: "ln_params",
                left: vec![scale.len()],
                right: vec![shift.len()],
            });
        }
        Ok(Self { scale, shift })
    }

    /// Unit scale, zero shift.
    pub fn identity(n: usize) -> Self {
        Self {
            scale: vec![1.0; n],
            shift: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale.is_empty()
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }
}

/// `eps` is added to the variance before the square root.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LnConfig {
    pub eps: f64,
}

impl Default for LnConfig {
    fn default() -> Self {
        Self { eps: DEFAULT_EPS }
    }
}

impl LnConfig {
    pub fn new(eps: f64) -> Result<Self> {
        let cfg = Self { eps };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `eps = 0`. Only meaningful for non-constant inputs; used for exact
    /// algebraic checks.
    pub fn unstabilized() -> Self {
        Self { eps: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps > 0.0 && self.eps.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("ln eps must be positive, got {}", self.eps)))
        }
    }
}

/// Mean and stabilized population standard deviation of `x`.
pub fn ln_stats(x: &[f64], cfg: LnConfig) -> Result<(f64, f64)> {
    if x.is_empty() {
        return Err(Error::Empty("ln_stats"));
    }
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    Ok((mu, (var + cfg.eps).sqrt()))
}

/// `scale ⊙ (x − μ)/σ + shift` on a plain vector.
pub fn layer_norm(x: &[f64], p: &LnParams, cfg: LnConfig) -> Result<Vec<f64>> {
    if x.len() != p.len() {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            left: vec![x.len()],
            right: vec![p.len()],
        });
    }
    let (mu, sigma) = ln_stats(x, cfg)?;
    let out: Vec<f64> = x
        .iter()
        .zip(p.scale.iter().zip(&p.shift))
        .map(|(v, (a, b))| a * ((v - mu) / sigma) + b)
        .collect();
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NonFinite { op: "layer_norm" })
    }
}

/// Differentiable layer normalization of every row of `x` (or of every
/// `group`-wide segment of each row), followed by the affine map.
///
/// `scale` and `shift` are either row vectors broadcast over all rows or
/// full matrices matching `x`; a `None` shift means zero.
pub fn layer_norm_graph(
    g: &mut Graph,
    x: Var,
    group: usize,
    scale: Var,
    shift: Option<Var>,
    cfg: LnConfig,
) -> Result<Var> {
    let normed = g.layer_norm(x, group, cfg.eps)?;
    let scaled = affine_mul(g, normed, scale)?;
    match shift {
        Some(b) => affine_add(g, scaled, b),
        None => Ok(scaled),
    }
}

pub(crate) fn affine_mul(g: &mut Graph, x: Var, s: Var) -> Result<Var> {
    if g.value(s).rows() == 1 && g.value(x).rows() != 1 {
        g.mul_row(x, s)
    } else if g.value(s).shape() == g.value(x).shape() {
        g.mul(x, s)
    } else {
        g.mul_row(x, s)
    }
}

pub(crate) fn affine_add(g: &mut Graph, x: Var, b: Var) -> Result<Var> {
    if g.value(b).rows() == 1 && g.value(x).rows() != 1 {
        g.add_row(x, b)
    } else if g.value(b).shape() == g.value(x).shape() {
        g.add(x, b)
    } else {
        g.add_row(x, b)
    }
}

impl LnParams {
    /// Registers the pair on `g` as constants, in row-vector form.
    pub fn to_graph(&self, g: &mut Graph) -> (Var, Var) {
        let s = g.constant(Tensor::vector(self.scale.clone()));
        let b = g.constant(Tensor::vector(self.shift.clone()));
        (s, b)
    }
}
