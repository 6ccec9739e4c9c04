//! Dynamic layer normalization: per-utterance summaries, generation of LN
//! scale/shift vectors from them, and the summary variance penalty.
//!
//! For each layer and direction a summarizer maps the layer's input
//! sequence to `a = mean_t tanh(W_a h_t + b_a)` over the valid frames.
//! Linear generators then produce every gate's `scale_x`, `scale_h` and
//! `shift` as `W a + b`, replacing the learned static LN parameters.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamVars};
use crate::recurrent::{CellNorm, GateNorm};
use crate::tensor::Tensor;

/// Targets generated for each gate, in parameter order.
pub const GATE_TARGETS: [&str; 3] = ["scale_x", "scale_h", "shift"];
pub const CELL_TARGETS: [&str; 2] = ["scale", "shift"];

/// `W: [d, p']`, `b: [d]`.
#[derive(Clone, Copy, Debug)]
pub struct GenPair {
    pub w: ParamId,
    pub b: ParamId,
}

/// `W_a: [p', in]`, `b_a: [p']`.
#[derive(Clone, Copy, Debug)]
pub struct SummarizerParams {
    pub w_a: ParamId,
    pub b_a: ParamId,
}

/// Generators for one direction of one layer: `gates[gate][target]`, plus
/// the cell LN pair when the cell state is adapted too.
#[derive(Clone, Debug)]
pub struct GeneratorParams {
    pub gates: [[GenPair; 3]; 4],
    pub cell: Option<[GenPair; 2]>,
}

#[derive(Clone, Debug)]
pub struct AdapterParams {
    pub summarizer: SummarizerParams,
    pub generators: GeneratorParams,
}

/// Mean over each utterance's valid frames of `tanh(h W_aᵀ + b_a)`.
///
/// `h_seq` is time-major `[T·B, in]`; the result is `[B, p']`.
pub fn summarize(g: &mut Graph, sp: &SummarizerParams, vars: &ParamVars, h_seq: Var, batch: &Batch) -> Result<Var> {
    summarize_vars(g, vars[sp.w_a], vars[sp.b_a], h_seq, batch)
}

pub fn summarize_vars(g: &mut Graph, w_a: Var, b_a: Var, h_seq: Var, batch: &Batch) -> Result<Var> {
    if batch.lengths.contains(&0) {
        return Err(Error::Empty("summarize: utterance without valid frames"));
    }
    let proj = g.matmul_t(h_seq, w_a)?;
    let proj = g.add_row(proj, b_a)?;
    let act = g.tanh(proj)?;
    let pool = g.constant(batch.pooling_matrix());
    g.matmul(pool, act)
}

fn generate(g: &mut Graph, pair: &GenPair, vars: &ParamVars, a: Var) -> Result<Var> {
    let v = g.matmul_t(a, vars[pair.w])?;
    g.add_row(v, vars[pair.b])
}

/// Generated LN parameters for a batch of summaries `a: [B, p']`.
///
/// Gate targets come back concatenated across the four gates, `[B, 4d]`,
/// matching the stacked gate layout of the recurrent cell.
pub fn generate_ln_params(
    g: &mut Graph,
    gp: &GeneratorParams,
    vars: &ParamVars,
    a: Var,
) -> Result<(GateNorm, Option<CellNorm>)> {
    let mut targets: [Vec<Var>; 3] = Default::default();
    for gate in &gp.gates {
        for (k, pair) in gate.iter().enumerate() {
            targets[k].push(generate(g, pair, vars, a)?);
        }
    }
    let gates = GateNorm {
        scale_x: g.concat_cols(&targets[0])?,
        scale_h: g.concat_cols(&targets[1])?,
        shift: g.concat_cols(&targets[2])?,
    };
    let cell = match &gp.cell {
        Some([s, b]) => Some(CellNorm {
            scale: generate(g, s, vars, a)?,
            shift: generate(g, b, vars, a)?,
        }),
        None => None,
    };
    Ok((gates, cell))
}

/// Per-feature population variance across the rows of `s: [B, p']`,
/// averaged over features.
fn mean_feature_variance(g: &mut Graph, s: Var) -> Result<Var> {
    let (b, p) = (g.value(s).rows(), g.value(s).cols());
    let avg = g.constant(Tensor::full(&[1, b], 1.0 / b as f64));
    let mean = g.matmul(avg, s)?;
    let neg_mean = g.scale(mean, -1.0)?;
    let centered = g.add_row(s, neg_mean)?;
    let sq = g.mul(centered, centered)?;
    let total = g.sum(sq)?;
    g.scale(total, 1.0 / (b as f64 * p as f64))
}

/// Unscaled summary variance: `(1/L) Σ_l (1/p') Σ_i var(a^l_i)`, with each
/// layer's forward and backward variances averaged.
///
/// `summaries[l]` holds the `[B, p']` summaries of layer `l`, one entry per
/// direction.
pub fn summary_variance(g: &mut Graph, summaries: &[Vec<Var>]) -> Result<Var> {
    if summaries.is_empty() || summaries.iter().any(Vec::is_empty) {
        return Err(Error::Empty("summary_variance"));
    }
    let mut layer_terms = Vec::with_capacity(summaries.len());
    for dirs in summaries {
        let vars = dirs
            .iter()
            .map(|&s| mean_feature_variance(g, s))
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.concat_cols(&vars)?;
        let sum = g.sum(stacked)?;
        layer_terms.push(g.scale(sum, 1.0 / dirs.len() as f64)?);
    }
    let stacked = g.concat_cols(&layer_terms)?;
    let sum = g.sum(stacked)?;
    g.scale(sum, 1.0 / summaries.len() as f64)
}

/// `L_var = −λ · summary_variance`. Variances use the population (divide
/// by B) form, so a batch of one contributes zero.
pub fn variance_penalty(g: &mut Graph, summaries: &[Vec<Var>], lambda: f64) -> Result<Var> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
    }
    let v = summary_variance(g, summaries)?;
    g.scale(v, -lambda)
}
