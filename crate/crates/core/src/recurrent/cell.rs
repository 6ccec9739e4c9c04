//! The layer-normalized LSTMP cell and the bidirectional layer built on it.
//!
//! Gate order everywhere is input, forget, output, candidate (`i f o g`).
//! The four gate weight matrices are stacked row-wise so a single matrix
//! product serves all gates; LN is still applied to each gate's block of `d`
//! values independently.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::norm::{affine_add, affine_mul, LnConfig};
use crate::params::{ParamId, ParamVars};
use crate::tensor::Tensor;

use super::AdapterParams;

pub const GATES: [&str; 4] = ["i", "f", "o", "g"];

/// Scan direction of one half of a bidirectional layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Forward, Direction::Backward];

    pub fn tag(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "fwd" => Some(Direction::Forward),
            "bwd" => Some(Direction::Backward),
            _ => None,
        }
    }
}

/// Learned gate LN parameters of a static (non-adaptive) direction.
#[derive(Clone, Debug)]
pub struct StaticGateLn {
    pub scale_x: [ParamId; 4],
    pub scale_h: [ParamId; 4],
    pub shift: [ParamId; 4],
}

/// Parameters of one direction of one layer.
///
/// There are no gate or projection biases: each gate has a single LN shift,
/// added on the input-to-hidden branch. Exactly one of `gate_ln` and
/// `adapter` is present.
#[derive(Clone, Debug)]
pub struct LstmpLayerParams {
    pub input_dim: usize,
    pub cell_size: usize,
    pub proj_size: usize,
    /// `[d, in]` per gate.
    pub w: [ParamId; 4],
    /// `[d, d']` per gate.
    pub u: [ParamId; 4],
    /// `[d', d]`.
    pub w_p: ParamId,
    pub gate_ln: Option<StaticGateLn>,
    /// `(scale_c, shift_c)`; absent when the cell LN is generated.
    pub cell_ln: Option<(ParamId, ParamId)>,
    pub adapter: Option<AdapterParams>,
}

/// Effective gate LN parameters for one direction, each `[1, 4d]` (shared
/// by every utterance) or `[B, 4d]` (one row per utterance).
#[derive(Clone, Copy, Debug)]
pub struct GateNorm {
    pub scale_x: Var,
    pub scale_h: Var,
    pub shift: Var,
}

/// Effective cell LN parameters, `[1, d]` or `[B, d]`.
#[derive(Clone, Copy, Debug)]
pub struct CellNorm {
    pub scale: Var,
    pub shift: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EffectiveLn {
    pub gates: GateNorm,
    pub cell: CellNorm,
}

/// Stacked weights of one direction on a graph.
#[derive(Clone, Copy, Debug)]
pub struct DirectionWeights {
    /// `[4d, in]`.
    pub w_all: Var,
    /// `[4d, d']`.
    pub u_all: Var,
    /// `[d', d]`.
    pub w_p: Var,
    pub cell_size: usize,
    pub proj_size: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct CellState {
    /// `[B, d']`.
    pub h: Var,
    /// `[B, d]`.
    pub c: Var,
}

impl CellState {
    pub fn zeros(g: &mut Graph, batch: usize, cell_size: usize, proj_size: usize) -> Self {
        Self {
            h: g.constant(Tensor::zeros(&[batch, proj_size])),
            c: g.constant(Tensor::zeros(&[batch, cell_size])),
        }
    }
}

impl LstmpLayerParams {
    pub fn weights(&self, g: &mut Graph, vars: &ParamVars) -> Result<DirectionWeights> {
        let w: Vec<Var> = self.w.iter().map(|&id| vars[id]).collect();
        let u: Vec<Var> = self.u.iter().map(|&id| vars[id]).collect();
        Ok(DirectionWeights {
            w_all: g.concat_rows(&w)?,
            u_all: g.concat_rows(&u)?,
            w_p: vars[self.w_p],
            cell_size: self.cell_size,
            proj_size: self.proj_size,
        })
    }

    /// Static gate LN as `[1, 4d]` rows, if this direction has one.
    pub fn static_gate_norm(&self, g: &mut Graph, vars: &ParamVars) -> Result<Option<GateNorm>> {
        let Some(ln) = &self.gate_ln else {
            return Ok(None);
        };
        let mut cat = |ids: &[ParamId; 4]| -> Result<Var> {
            let parts: Vec<Var> = ids.iter().map(|&id| vars[id]).collect();
            g.concat_cols(&parts)
        };
        Ok(Some(GateNorm {
            scale_x: cat(&ln.scale_x)?,
            scale_h: cat(&ln.scale_h)?,
            shift: cat(&ln.shift)?,
        }))
    }

    pub fn static_cell_norm(&self, vars: &ParamVars) -> Option<CellNorm> {
        self.cell_ln.map(|(s, b)| CellNorm {
            scale: vars[s],
            shift: vars[b],
        })
    }
}

/// Input-to-hidden branch for a block of rows: `LN(x Wᵀ; α, β)` per gate.
///
/// `rows_per_param` is the number of consecutive row blocks sharing one
/// row of a per-utterance LN matrix (the sequence length when `x` covers a
/// whole time-major batch, 1 for a single step).
pub fn input_branch(
    g: &mut Graph,
    weights: &DirectionWeights,
    gates: &GateNorm,
    x: Var,
    rows_per_param: usize,
    cfg: LnConfig,
) -> Result<Var> {
    let xw = g.matmul_t(x, weights.w_all)?;
    let normed = g.layer_norm(xw, weights.cell_size, cfg.eps)?;
    let (mut scale, mut shift) = (gates.scale_x, gates.shift);
    if rows_per_param > 1 && g.value(scale).rows() > 1 {
        scale = g.tile_rows(scale, rows_per_param)?;
    }
    if rows_per_param > 1 && g.value(shift).rows() > 1 {
        shift = g.tile_rows(shift, rows_per_param)?;
    }
    let scaled = affine_mul(g, normed, scale)?;
    affine_add(g, scaled, shift)
}

/// One recurrence step given the already-normalized input branch
/// `LN(W x_t; α, β)` for this step (`[B, 4d]`).
pub fn step_from_input(
    g: &mut Graph,
    weights: &DirectionWeights,
    ln: &EffectiveLn,
    input: Var,
    prev: &CellState,
    cfg: LnConfig,
) -> Result<CellState> {
    let d = weights.cell_size;
    let hu = g.matmul_t(prev.h, weights.u_all)?;
    let hu = g.layer_norm(hu, d, cfg.eps)?;
    let hu = affine_mul(g, hu, ln.gates.scale_h)?;
    let pre = g.add(input, hu)?;

    let sig_part = g.slice_cols(pre, 0, 3 * d)?;
    let sig = g.sigmoid(sig_part)?;
    let i = g.slice_cols(sig, 0, d)?;
    let f = g.slice_cols(sig, d, d)?;
    let o = g.slice_cols(sig, 2 * d, d)?;
    let cand_part = g.slice_cols(pre, 3 * d, d)?;
    let cand = g.tanh(cand_part)?;

    let keep = g.mul(f, prev.c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;

    let cn = g.layer_norm(c, d, cfg.eps)?;
    let cn = affine_mul(g, cn, ln.cell.scale)?;
    let cn = affine_add(g, cn, ln.cell.shift)?;
    let ct = g.tanh(cn)?;
    let gated = g.mul(o, ct)?;
    let h = g.matmul_t(gated, weights.w_p)?;
    if !g.value(h).all_finite() {
        return Err(Error::NonFinite { op: "lstmp_step" });
    }
    Ok(CellState { h, c })
}

/// A single LN-LSTMP step on `x_t: [B, in]`.
pub fn lstmp_step(
    g: &mut Graph,
    weights: &DirectionWeights,
    ln: &EffectiveLn,
    x_t: Var,
    prev: &CellState,
    cfg: LnConfig,
) -> Result<CellState> {
    let input = input_branch(g, weights, &ln.gates, x_t, 1, cfg)?;
    step_from_input(g, weights, ln, input, prev, cfg)
}

/// Runs one direction over a time-major sequence `[T·B, in]` and returns
/// the projected states `[T·B, d']` in time order.
///
/// Each direction starts from the zero state. After every step the state
/// of padded rows is reset to zero, so the backward scan of a short
/// utterance starts fresh at its own last frame.
pub fn scan_direction(
    g: &mut Graph,
    weights: &DirectionWeights,
    ln: &EffectiveLn,
    inputs: Var,
    batch: &Batch,
    direction: Direction,
    cfg: LnConfig,
) -> Result<Var> {
    let (b, steps) = (batch.batch_size, batch.max_len);
    if steps == 0 {
        return Err(Error::Empty("scan_direction"));
    }
    let projected = input_branch(g, weights, &ln.gates, inputs, steps, cfg)?;
    let mut state = CellState::zeros(g, b, weights.cell_size, weights.proj_size);
    let mut outputs: Vec<Option<Var>> = vec![None; steps];
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..steps).collect(),
        Direction::Backward => (0..steps).rev().collect(),
    };
    for t in order {
        let input_t = g.slice_rows(projected, t * b, b)?;
        let mut next = step_from_input(g, weights, ln, input_t, &state, cfg)?;
        if batch.step_has_padding(t) {
            let m = &batch.mask[t * b..(t + 1) * b];
            let mask_h = g.constant(row_mask(m, weights.proj_size));
            let mask_c = g.constant(row_mask(m, weights.cell_size));
            next.h = g.mul(next.h, mask_h)?;
            next.c = g.mul(next.c, mask_c)?;
        }
        outputs[t] = Some(next.h);
        state = next;
    }
    let outputs: Vec<Var> = outputs.into_iter().map(|o| o.expect("every step visited")).collect();
    g.concat_rows(&outputs)
}

fn row_mask(mask: &[f64], width: usize) -> Tensor {
    let data = mask.iter().flat_map(|&m| std::iter::repeat_n(m, width)).collect();
    Tensor::matrix(mask.len(), width, data).expect("mask shape")
}

/// Both directions over the same input; output row `t·B + b` is
/// `[fwd_h_t ; bwd_h_t]`.
#[allow(clippy::too_many_arguments)]
pub fn bidir_layer(
    g: &mut Graph,
    fwd: &DirectionWeights,
    fwd_ln: &EffectiveLn,
    bwd: &DirectionWeights,
    bwd_ln: &EffectiveLn,
    inputs: Var,
    batch: &Batch,
    cfg: LnConfig,
) -> Result<Var> {
    let f = scan_direction(g, fwd, fwd_ln, inputs, batch, Direction::Forward, cfg)?;
    let b = scan_direction(g, bwd, bwd_ln, inputs, batch, Direction::Backward, cfg)?;
    g.concat_cols(&[f, b])
}
