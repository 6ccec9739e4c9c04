mod common;

use std::collections::HashMap;

use common::*;
use dln::adapt::{summarize_vars, variance_penalty};
use dln::data::{Batch, Utterance};
use dln::gradcheck::grad_check;
use dln::graph::Graph;
use dln::norm::{layer_norm, LnConfig, LnParams};
use dln::params::ParamVars;
use dln::recurrent::{lstmp_step, CellState, EffectiveLn};
use dln::train::batch_loss;
use dln::{Error, StackConfig, StackModel, Tensor};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(dln: bool) -> StackConfig {
    StackConfig {
        num_layers: 2,
        cell_size: 4,
        proj_size: 3,
        input_dim: 3,
        num_classes: 4,
        dln,
        summary_size: 3,
        ..StackConfig::default()
    }
}

fn batch_of(utts: &[Utterance]) -> Batch {
    let refs: Vec<&Utterance> = utts.iter().collect();
    Batch::from_utterances(&refs).unwrap()
}

fn utterances(lengths: &[usize], dim: usize, classes: usize, seed: u64) -> Vec<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    lengths
        .iter()
        .enumerate()
        .map(|(i, &l)| random_utterance(&format!("u{i}"), l, dim, classes, &mut rng))
        .collect()
}

/// One-layer, one-step harness: returns `(h, c)` after a single step of the
/// forward direction of layer 1.
fn run_step(model: &StackModel, x: &[f64], h0: &[f64], c0: &[f64], steps: usize) -> (Vec<f64>, Vec<f64>) {
    let cfg = model.config();
    let mut g = Graph::new();
    let vars = model.params().register(&mut g, false);
    let layer = &model.layers()[0][0];
    let weights = layer.weights(&mut g, &vars).unwrap();
    let ln = EffectiveLn {
        gates: layer.static_gate_norm(&mut g, &vars).unwrap().unwrap(),
        cell: layer.static_cell_norm(&vars).unwrap(),
    };
    let mut state = CellState {
        h: g.constant(Tensor::matrix(1, cfg.proj_size, h0.to_vec()).unwrap()),
        c: g.constant(Tensor::matrix(1, cfg.cell_size, c0.to_vec()).unwrap()),
    };
    let xv = g.constant(Tensor::matrix(1, cfg.input_dim, x.to_vec()).unwrap());
    for _ in 0..steps {
        state = lstmp_step(&mut g, &weights, &ln, xv, &state, model.ln_config()).unwrap();
    }
    (g.value(state.h).data().to_vec(), g.value(state.c).data().to_vec())
}

fn one_layer() -> StackConfig {
    StackConfig {
        num_layers: 1,
        ..small(false)
    }
}

fn named_model(cfg: StackConfig, mut value: impl FnMut(&str, usize) -> f64) -> StackModel {
    StackModel::build(cfg, |name, shape, _| {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| value(name, n)).collect())
    })
    .unwrap()
}

#[test]
fn zero_network_halves_memory_and_emits_zero() {
    let model = named_model(one_layer(), |name, _| if name.contains("scale") { 1.0 } else { 0.0 });
    let c0 = [0.8, -0.4, 0.2, 1.6];
    let (h, c) = run_step(&model, &[0.3, -1.0, 2.0], &[0.1, 0.2, -0.3], &c0, 1);
    assert!(h.iter().all(|&v| v == 0.0));
    // all gate pre-activations are zero: i = f = o = 1/2 and the candidate is 0
    for (cv, c0v) in c.iter().zip(c0) {
        assert!((cv - 0.5 * c0v).abs() < 1e-15);
    }
}

#[test]
fn saturated_forget_gate_carries_memory() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = named_model(one_layer(), |name, _| {
        if name.ends_with("shift_f") {
            40.0
        } else if name.ends_with("shift_i") {
            -40.0
        } else if name.contains("scale") {
            1.0
        } else if name.contains("shift") {
            0.0
        } else {
            rng.random_range(-0.5..0.5)
        }
    });
    let c0 = [0.8, -0.4, 0.2, 1.6];
    let (_, c) = run_step(&model, &[0.3, -1.0, 2.0], &[0.1, 0.2, -0.3], &c0, 50);
    for (cv, c0v) in c.iter().zip(c0) {
        assert!((cv - c0v).abs() < 1e-12, "{cv} vs {c0v}");
    }
}

/// Builds the mirror image of `model`: forward and backward parameters
/// exchanged, and every consumer of a bidirectional output (the inputs of
/// layers above the first, their summarizers, and the output layer) with its
/// two column halves swapped.
fn mirrored(model: &StackModel) -> StackModel {
    let dp = model.config().proj_size;
    let swap_halves = |t: &Tensor| -> Tensor {
        let (rows, cols) = (t.rows(), t.cols());
        assert_eq!(cols, 2 * dp);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[dp..]);
            data.extend_from_slice(&t.row(r)[..dp]);
        }
        Tensor::matrix(rows, cols, data).unwrap()
    };
    let mut named = HashMap::new();
    for (name, t) in model.params().iter() {
        let renamed = if name.contains(".fwd.") {
            name.replace(".fwd.", ".bwd.")
        } else {
            name.replace(".bwd.", ".fwd.")
        };
        let upper_input = !name.starts_with("layer1.")
            && (name.contains(".W_") && !name.ends_with("W_p") || name == "output.W_y");
        let upper_input = upper_input && t.cols() == 2 * dp && !name.contains(".U_");
        named.insert(renamed, if upper_input { swap_halves(t) } else { t.clone() });
    }
    StackModel::from_named(model.config().clone(), named).unwrap()
}

fn reversed(u: &Utterance) -> Utterance {
    let rows: Vec<Vec<f64>> = (0..u.len()).rev().map(|t| u.frames.row(t).to_vec()).collect();
    let labels = u.labels.iter().rev().copied().collect();
    Utterance::new(format!("{}-rev", u.id), u.speaker.clone(), Tensor::from_rows(&rows).unwrap(), labels).unwrap()
}

#[test]
fn time_reversal_with_swapped_directions() {
    for dln in [false, true] {
        let model = random_model(StackConfig { num_layers: 3, ..small(dln) }, 17);
        let mirror = mirrored(&model);
        for u in utterances(&[1, 2, 7], 3, 4, 5) {
            let a = model.forward(&Batch::single(&u).unwrap()).unwrap().logits;
            let b = mirror.forward(&Batch::single(&reversed(&u)).unwrap()).unwrap().logits;
            let t_len = u.len();
            for t in 0..t_len {
                for c in 0..4 {
                    assert!((a.at(t, c) - b.at(t_len - 1 - t, c)).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn single_frame_with_shared_directions_gives_equal_halves() {
    let base = random_model(one_layer(), 23);
    let mut named: HashMap<String, Tensor> = HashMap::new();
    for (name, t) in base.params().iter() {
        if !name.starts_with("layer1.bwd.") {
            named.insert(name.to_string(), t.clone());
        }
        if let Some(rest) = name.strip_prefix("layer1.fwd.") {
            named.insert(format!("layer1.bwd.{rest}"), t.clone());
        }
    }
    // output row 0 reads the forward half, row 1 the backward half
    let dp = base.config().proj_size;
    let mut w_y = vec![0.0; 4 * 2 * dp];
    w_y[0] = 1.0;
    w_y[2 * dp + dp] = 1.0;
    named.insert("output.W_y".into(), Tensor::matrix(4, 2 * dp, w_y).unwrap());
    named.insert("output.b_y".into(), Tensor::zeros(&[4]));
    let model = StackModel::from_named(base.config().clone(), named).unwrap();
    let u = &utterances(&[1], 3, 4, 8)[0];
    let logits = model.forward(&Batch::single(u).unwrap()).unwrap().logits;
    assert_eq!(logits.at(0, 0), logits.at(0, 1));
}

#[test]
fn padding_does_not_change_results() {
    for dln in [false, true] {
        let model = random_model(small(dln), 29);
        let utts = utterances(&[3, 9, 1, 5], 3, 4, 30);
        let batch = batch_of(&utts);
        let joint = model.forward(&batch).unwrap();
        for (b, u) in utts.iter().enumerate() {
            let alone = model.forward(&Batch::single(u).unwrap()).unwrap();
            for t in 0..u.len() {
                for c in 0..4 {
                    assert!((joint.logits.at(t * utts.len() + b, c) - alone.logits.at(t, c)).abs() < 1e-12);
                }
            }
            for (l, dirs) in alone.summaries.iter().enumerate() {
                for (d, s) in dirs.iter().enumerate() {
                    for k in 0..s.cols() {
                        assert!((joint.summaries[l][d].at(b, k) - s.at(0, k)).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn dln_with_constant_generators_equals_static_model() {
    let base = random_model(small(false), 37);
    let dln_cfg = small(true);
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    let mut named: HashMap<String, Tensor> = HashMap::new();
    let shape_source = StackModel::zeroed(dln_cfg.clone()).unwrap();
    for (name, t) in shape_source.params().iter() {
        let value = if let Some(static_t) = base.params().by_name(name) {
            static_t.clone()
        } else if name.contains(".gen.") {
            let (prefix, rest) = name.split_once(".gen.").unwrap();
            let parts: Vec<&str> = rest.split('.').collect();
            let static_name = format!("{prefix}.{}_{}", parts[1], parts[0]);
            if parts[2] == "W" {
                Tensor::zeros(t.shape())
            } else {
                base.params().by_name(&static_name).unwrap().clone()
            }
        } else {
            let n = t.len();
            Tensor::new(t.shape().to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        named.insert(name.to_string(), value);
    }
    let dln_model = StackModel::from_named(dln_cfg, named).unwrap();
    let utts = utterances(&[4, 6, 2], 3, 4, 39);
    let batch = batch_of(&utts);
    let a = base.forward(&batch).unwrap().logits;
    let b = dln_model.forward(&batch).unwrap().logits;
    assert!(a.max_abs_diff(&b) < 1e-12);
}

fn loss_grad_check(cfg: StackConfig, lengths: &[usize], seed: u64) -> f64 {
    let model = random_model(cfg.clone(), seed);
    let batch = batch_of(&utterances(lengths, cfg.input_dim, cfg.num_classes, seed + 1));
    let report = grad_check(
        |g, vars| {
            let vars = ParamVars::from_vars(vars.to_vec());
            Ok(batch_loss(&model, g, &vars, &batch)?.total)
        },
        model.params().tensors(),
        1e-5,
    )
    .unwrap();
    report.max_rel_error
}

#[test]
fn grad_check_static_two_layer_loss() {
    let err = loss_grad_check(small(false), &[4, 2, 3], 51);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn grad_check_dln_loss_with_penalty() {
    let cfg = StackConfig {
        lambda: 10.0,
        ..small(true)
    };
    let err = loss_grad_check(cfg, &[4, 2, 3], 52);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn grad_check_dln_cell_generation() {
    let cfg = StackConfig {
        num_layers: 1,
        lambda: 1.0,
        dln_cell_state: true,
        ..small(true)
    };
    let err = loss_grad_check(cfg, &[3, 5], 53);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn grad_check_single_step() {
    let cfg = one_layer();
    let model = random_model(cfg.clone(), 61);
    let layer = model.layers()[0][0].clone();
    let mut params = model.params().tensors().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    // x, h and c for a batch of two
    for cols in [cfg.input_dim, cfg.proj_size, cfg.cell_size] {
        params.push(Tensor::matrix(2, cols, (0..2 * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
    }
    let n = model.params().len();
    let report = grad_check(
        |g, vars| {
            let pv = ParamVars::from_vars(vars[..n].to_vec());
            let weights = layer.weights(g, &pv)?;
            let ln = EffectiveLn {
                gates: layer.static_gate_norm(g, &pv)?.unwrap(),
                cell: layer.static_cell_norm(&pv).unwrap(),
            };
            let prev = CellState {
                h: vars[n + 1],
                c: vars[n + 2],
            };
            let next = lstmp_step(g, &weights, &ln, vars[n], &prev, model.ln_config())?;
            let hc = g.mul(next.h, next.h)?;
            let cc = g.tanh(next.c)?;
            let a = g.sum(hc)?;
            let b = g.sum(cc)?;
            g.add(a, b)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn gradients_are_bit_identical_across_runs() {
    let model = random_model(StackConfig { lambda: 3.0, ..small(true) }, 71);
    let batch = batch_of(&utterances(&[5, 2, 4], 3, 4, 72));
    let run = || {
        let mut g = Graph::new();
        let vars = model.params().register(&mut g, true);
        let loss = batch_loss(&model, &mut g, &vars, &batch).unwrap().total;
        let grads = g.backward(loss).unwrap();
        vars.as_slice()
            .iter()
            .flat_map(|&v| grads.get(v).unwrap().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<u64>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn unused_leaf_gets_zero_gradient_and_graph_is_single_use() {
    let mut g = Graph::new();
    let a = g.param(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let unused = g.param(Tensor::vector(vec![5.0, 6.0, 7.0]));
    let t = g.tanh(a).unwrap();
    let s = g.sum(t).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
}

fn vec_strategy(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, n).prop_filter("needs spread", |v| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64 > 1e-3
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ln_output_is_standardized(x in vec_strategy(2..40)) {
        let y = layer_norm(&x, &LnParams::identity(x.len()), LnConfig::unstabilized()).unwrap();
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-12);
        prop_assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ln_ignores_positive_affine_input_maps(x in vec_strategy(2..20), a in 0.1f64..20.0, b in -30.0f64..30.0) {
        let p = LnParams::identity(x.len());
        let cfg = LnConfig::unstabilized();
        let y = layer_norm(&x, &p, cfg).unwrap();
        let moved: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let z = layer_norm(&moved, &p, cfg).unwrap();
        for (u, v) in y.iter().zip(&z) {
            prop_assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn cell_state_growth_and_output_are_bounded(seed in 0u64..1000, steps in 1usize..6) {
        let model = random_model(one_layer(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
        let h0: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
        let c0: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
        let (h, c) = run_step(&model, &x, &h0, &c0, steps);
        // each step: |c_t| < |c_{t-1}| + 1, since f, i lie in (0, 1) and |c'| < 1
        for (cv, c0v) in c.iter().zip(&c0) {
            prop_assert!(cv.abs() < c0v.abs() + steps as f64);
        }
        // h = W_p (o ⊙ tanh(·)) with every factor of the product in (−1, 1)
        let w_p = model.params().by_name("layer1.fwd.W_p").unwrap();
        for (j, hv) in h.iter().enumerate() {
            let bound: f64 = w_p.row(j).iter().map(|w| w.abs()).sum();
            prop_assert!(hv.abs() < bound);
        }
    }

    #[test]
    fn penalty_is_never_positive(rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..8), lambda in 0.0f64..20.0) {
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(&rows).unwrap());
        let p = variance_penalty(&mut g, &[vec![s, s]], lambda).unwrap();
        prop_assert!(g.value(p).item().unwrap() <= 0.0);
    }

    #[test]
    fn summaries_follow_utterance_permutations(seed in 0u64..500, perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let utts = utterances(&[2, 5, 3, 4], 3, 4, seed);
        let permuted: Vec<Utterance> = perm.iter().map(|&i| utts[i].clone()).collect();
        let (b1, b2) = (batch_of(&utts), batch_of(&permuted));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::matrix(2, 3, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let bias = Tensor::vector(vec![0.1, -0.2]);
        let summary = |batch: &Batch| {
            let mut g = Graph::new();
            let (wv, bv) = (g.constant(w.clone()), g.constant(bias.clone()));
            let x = g.constant(batch.frames.clone());
            let a = summarize_vars(&mut g, wv, bv, x, batch).unwrap();
            g.value(a).clone()
        };
        let (s1, s2) = (summary(&b1), summary(&b2));
        for (row, &src) in perm.iter().enumerate() {
            for k in 0..2 {
                prop_assert!((s2.at(row, k) - s1.at(src, k)).abs() < 1e-12);
            }
        }
    }
}
