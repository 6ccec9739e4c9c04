//! Straight-line reference implementations used as test oracles. They work
//! on plain vectors, one gate and one time step at a time, and read
//! parameters by checkpoint name, sharing no code with the graph-based
//! model.

#![allow(dead_code)]

use dln::data::Utterance;
use dln::params::ParamKind;
use dln::{StackConfig, StackModel, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GATES: [&str; 4] = ["i", "f", "o", "g"];

pub fn random_model(cfg: StackConfig, seed: u64) -> StackModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    StackModel::build(cfg, |_, shape, kind| {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let u: f64 = rng.random_range(-0.6..0.6);
                match kind {
                    ParamKind::Scale => 1.0 + u,
                    _ => u,
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data)
    })
    .unwrap()
}

pub fn random_utterance(id: &str, len: usize, dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Utterance {
    let frames = Tensor::matrix(len, dim, (0..len * dim).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let labels = (0..len).map(|_| rng.random_range(0..classes)).collect();
    Utterance::new(id, "spk", frames, labels).unwrap()
}

pub fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(cols, x.len());
    (0..rows)
        .map(|r| (0..cols).map(|c| w.data()[r * cols + c] * x[c]).sum())
        .collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn ln(x: &[f64], scale: &[f64], shift: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let sigma = (var + eps).sqrt();
    (0..x.len()).map(|i| scale[i] * (x[i] - mu) / sigma + shift[i]).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Effective LN parameters of one direction for one utterance.
pub struct OracleLn {
    pub scale_x: Vec<Vec<f64>>,
    pub scale_h: Vec<Vec<f64>>,
    pub shift: Vec<Vec<f64>>,
    pub scale_c: Vec<f64>,
    pub shift_c: Vec<f64>,
}

fn p<'a>(m: &'a StackModel, name: &str) -> &'a Tensor {
    m.params().by_name(name).unwrap_or_else(|| panic!("no parameter {name}"))
}

/// `summary` must be given for DLN models.
pub fn oracle_ln(m: &StackModel, prefix: &str, summary: Option<&[f64]>) -> OracleLn {
    let gen = |name: String| -> Vec<f64> {
        let a = summary.expect("summary for generated params");
        add(&matvec(p(m, &format!("{name}.W")), a), p(m, &format!("{name}.b")).data())
    };
    let mut out = OracleLn {
        scale_x: vec![],
        scale_h: vec![],
        shift: vec![],
        scale_c: vec![],
        shift_c: vec![],
    };
    for g in GATES {
        if m.config().dln {
            out.scale_x.push(gen(format!("{prefix}.gen.{g}.scale_x")));
            out.scale_h.push(gen(format!("{prefix}.gen.{g}.scale_h")));
            out.shift.push(gen(format!("{prefix}.gen.{g}.shift")));
        } else {
            out.scale_x.push(p(m, &format!("{prefix}.scale_x_{g}")).data().to_vec());
            out.scale_h.push(p(m, &format!("{prefix}.scale_h_{g}")).data().to_vec());
            out.shift.push(p(m, &format!("{prefix}.shift_{g}")).data().to_vec());
        }
    }
    if m.config().dln_cell_state {
        out.scale_c = gen(format!("{prefix}.gen.cell.scale"));
        out.shift_c = gen(format!("{prefix}.gen.cell.shift"));
    } else {
        out.scale_c = p(m, &format!("{prefix}.scale_c")).data().to_vec();
        out.shift_c = p(m, &format!("{prefix}.shift_c")).data().to_vec();
    }
    out
}

/// One step of the LN-LSTMP recurrence, transcribed gate by gate.
pub fn oracle_step(m: &StackModel, prefix: &str, ln_p: &OracleLn, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let eps = m.config().eps;
    let d = c.len();
    let zero = vec![0.0; d];
    let mut pre = Vec::new();
    for (k, g) in GATES.iter().enumerate() {
        let wx = matvec(p(m, &format!("{prefix}.W_{g}")), x);
        let uh = matvec(p(m, &format!("{prefix}.U_{g}")), h);
        let a = ln(&wx, &ln_p.scale_x[k], &ln_p.shift[k], eps);
        let b = ln(&uh, &ln_p.scale_h[k], &zero, eps);
        pre.push(add(&a, &b));
    }
    let i: Vec<f64> = pre[0].iter().map(|&v| sigmoid(v)).collect();
    let f: Vec<f64> = pre[1].iter().map(|&v| sigmoid(v)).collect();
    let o: Vec<f64> = pre[2].iter().map(|&v| sigmoid(v)).collect();
    let cand: Vec<f64> = pre[3].iter().map(|&v| v.tanh()).collect();
    let c_new: Vec<f64> = (0..d).map(|j| f[j] * c[j] + i[j] * cand[j]).collect();
    let cn = ln(&c_new, &ln_p.scale_c, &ln_p.shift_c, eps);
    let gated: Vec<f64> = (0..d).map(|j| o[j] * cn[j].tanh()).collect();
    let h_new = matvec(p(m, &format!("{prefix}.W_p")), &gated);
    (h_new, c_new)
}

pub fn oracle_summary(m: &StackModel, prefix: &str, inputs: &[Vec<f64>]) -> Vec<f64> {
    let w = p(m, &format!("{prefix}.W_a"));
    let b = p(m, &format!("{prefix}.b_a")).data();
    let mut acc = vec![0.0; b.len()];
    for x in inputs {
        let z = add(&matvec(w, x), b);
        for (a, v) in acc.iter_mut().zip(z) {
            *a += v.tanh();
        }
    }
    acc.iter().map(|v| v / inputs.len() as f64).collect()
}

/// Whole-stack forward for one utterance: per-frame logits and, for DLN
/// models, `summaries[layer][dir]`.
pub fn oracle_forward(m: &StackModel, u: &Utterance) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let cfg = m.config();
    let (d, dp) = (cfg.cell_size, cfg.proj_size);
    let t_len = u.len();
    let mut seq: Vec<Vec<f64>> = (0..t_len).map(|t| u.frames.row(t).to_vec()).collect();
    let mut summaries = Vec::new();
    for l in 1..=cfg.num_layers {
        let mut outs: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut layer_summaries = Vec::new();
        for dir in ["fwd", "bwd"] {
            let prefix = format!("layer{l}.{dir}");
            let summary = if cfg.dln {
                let s = oracle_summary(m, &prefix, &seq);
                layer_summaries.push(s.clone());
                Some(s)
            } else {
                None
            };
            let ln_p = oracle_ln(m, &prefix, summary.as_deref());
            let (mut h, mut c) = (vec![0.0; dp], vec![0.0; d]);
            let mut out = vec![vec![]; t_len];
            let order: Vec<usize> = if dir == "fwd" { (0..t_len).collect() } else { (0..t_len).rev().collect() };
            for t in order {
                let (h2, c2) = oracle_step(m, &prefix, &ln_p, &seq[t], &h, &c);
                h = h2;
                c = c2;
                out[t] = h.clone();
            }
            outs.push(out);
        }
        seq = (0..t_len).map(|t| [outs[0][t].clone(), outs[1][t].clone()].concat()).collect();
        if cfg.dln {
            summaries.push(layer_summaries);
        }
    }
    let w_y = p(m, "output.W_y");
    let b_y = p(m, "output.b_y").data();
    let logits = seq.iter().map(|h| add(&matvec(w_y, h), b_y)).collect();
    (logits, summaries)
}
