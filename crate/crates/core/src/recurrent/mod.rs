//! Deep bidirectional LN-LSTMP stacks with a softmax output layer.

mod cell;
pub mod checkpoint;
mod count;

pub use cell::{
    bidir_layer, input_branch, lstmp_step, scan_direction, step_from_input, CellNorm, CellState,
    Direction, DirectionWeights, EffectiveLn, GateNorm, LstmpLayerParams, StaticGateLn, GATES,
};
pub use count::{count_params, format_millions, format_thousands};

pub use crate::adapt::AdapterParams;
use crate::adapt::{
    generate_ln_params, summarize, GenPair, GeneratorParams, SummarizerParams, CELL_TARGETS,
    GATE_TARGETS,
};
use crate::config::StackConfig;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::norm::LnConfig;
use crate::params::{ParamId, ParamKind, ParamStore, ParamVars};
use crate::tensor::Tensor;

/// `W_y: [C, 2d']`, `b_y: [C]`.
#[derive(Clone, Copy, Debug)]
pub struct OutputParams {
    pub w_y: ParamId,
    pub b_y: ParamId,
}

/// A deep bidirectional LSTMP acoustic model.
#[derive(Clone, Debug)]
pub struct StackModel {
    cfg: StackConfig,
    params: ParamStore,
    layers: Vec<[LstmpLayerParams; 2]>,
    output: OutputParams,
}

/// Graph nodes produced by [`StackModel::forward_graph`].
#[derive(Clone, Debug)]
pub struct StackOutput {
    /// Pre-softmax scores, time-major `[T·B, C]`.
    pub logits: Var,
    /// `summaries[l][dir]` is `[B, p']`; empty for static models.
    pub summaries: Vec<Vec<Var>>,
}

/// Values of a forward pass, detached from any graph.
#[derive(Clone, Debug)]
pub struct ForwardValues {
    pub logits: Tensor,
    pub summaries: Vec<Vec<Tensor>>,
}

pub fn param_name(layer: usize, dir: Direction, local: &str) -> String {
    format!("layer{}.{}.{}", layer + 1, dir.tag(), local)
}

impl StackModel {
    /// Builds the parameter layout for `cfg`, asking `fill` for every
    /// tensor in order.
    pub fn build(
        cfg: StackConfig,
        mut fill: impl FnMut(&str, &[usize], ParamKind) -> Result<Tensor>,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, dp, p) = (cfg.cell_size, cfg.proj_size, cfg.summary_size);
        let mut store = ParamStore::new();
        let mut add = |store: &mut ParamStore, name: String, shape: &[usize], kind| -> Result<ParamId> {
            let t = fill(&name, shape, kind)?;
            if t.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "parameter",
                    left: shape.to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            Ok(store.add(name, kind, t))
        };

        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let in_dim = cfg.layer_input_dim(l);
            let mut dirs = Vec::with_capacity(2);
            for dir in Direction::BOTH {
                let name = |local: &str| param_name(l, dir, local);
                let mut w = Vec::new();
                for gate in GATES {
                    w.push(add(&mut store, name(&format!("W_{gate}")), &[d, in_dim], ParamKind::Weight)?);
                }
                let mut u = Vec::new();
                for gate in GATES {
                    u.push(add(&mut store, name(&format!("U_{gate}")), &[d, dp], ParamKind::Weight)?);
                }
                let gate_ln = if cfg.dln {
                    None
                } else {
                    let mut ids = [[None; 4]; 3];
                    for (k, gate) in GATES.iter().enumerate() {
                        ids[0][k] = Some(add(&mut store, name(&format!("scale_x_{gate}")), &[d], ParamKind::Scale)?);
                        ids[1][k] = Some(add(&mut store, name(&format!("scale_h_{gate}")), &[d], ParamKind::Scale)?);
                        ids[2][k] = Some(add(&mut store, name(&format!("shift_{gate}")), &[d], ParamKind::Bias)?);
                    }
                    let unwrap = |row: [Option<ParamId>; 4]| row.map(|id| id.expect("filled"));
                    Some(StaticGateLn {
                        scale_x: unwrap(ids[0]),
                        scale_h: unwrap(ids[1]),
                        shift: unwrap(ids[2]),
                    })
                };
                let cell_ln = if cfg.dln_cell_state {
                    None
                } else {
                    Some((
                        add(&mut store, name("scale_c"), &[d], ParamKind::Scale)?,
                        add(&mut store, name("shift_c"), &[d], ParamKind::Bias)?,
                    ))
                };
                let w_p = add(&mut store, name("W_p"), &[dp, d], ParamKind::Weight)?;
                let adapter = if cfg.dln {
                    let summarizer = SummarizerParams {
                        w_a: add(&mut store, name("W_a"), &[p, in_dim], ParamKind::Weight)?,
                        b_a: add(&mut store, name("b_a"), &[p], ParamKind::Bias)?,
                    };
                    let mut pair = |store: &mut ParamStore, prefix: String, bias_kind| -> Result<GenPair> {
                        Ok(GenPair {
                            w: add(store, format!("{prefix}.W"), &[d, p], ParamKind::Weight)?,
                            b: add(store, format!("{prefix}.b"), &[d], bias_kind)?,
                        })
                    };
                    let mut gates = Vec::with_capacity(4);
                    for gate in GATES {
                        let mut targets = Vec::with_capacity(3);
                        for target in GATE_TARGETS {
                            let kind = if target == "shift" { ParamKind::Bias } else { ParamKind::Scale };
                            targets.push(pair(&mut store, name(&format!("gen.{gate}.{target}")), kind)?);
                        }
                        gates.push([targets[0], targets[1], targets[2]]);
                    }
                    let cell = if cfg.dln_cell_state {
                        let s = pair(&mut store, name(&format!("gen.cell.{}", CELL_TARGETS[0])), ParamKind::Scale)?;
                        let b = pair(&mut store, name(&format!("gen.cell.{}", CELL_TARGETS[1])), ParamKind::Bias)?;
                        Some([s, b])
                    } else {
                        None
                    };
                    Some(AdapterParams {
                        summarizer,
                        generators: GeneratorParams {
                            gates: [gates[0], gates[1], gates[2], gates[3]],
                            cell,
                        },
                    })
                } else {
                    None
                };
                dirs.push(LstmpLayerParams {
                    input_dim: in_dim,
                    cell_size: d,
                    proj_size: dp,
                    w: [w[0], w[1], w[2], w[3]],
                    u: [u[0], u[1], u[2], u[3]],
                    w_p,
                    gate_ln,
                    cell_ln,
                    adapter,
                });
            }
            let bwd = dirs.pop().expect("two directions");
            let fwd = dirs.pop().expect("two directions");
            layers.push([fwd, bwd]);
        }
        let output = OutputParams {
            w_y: add(&mut store, "output.W_y".into(), &[cfg.num_classes, 2 * dp], ParamKind::Weight)?,
            b_y: add(&mut store, "output.b_y".into(), &[cfg.num_classes], ParamKind::Bias)?,
        };
        Ok(Self {
            cfg,
            params: store,
            layers,
            output,
        })
    }

    /// All weights zero, LN scales one, all additive terms zero.
    pub fn zeroed(cfg: StackConfig) -> Result<Self> {
        Self::build(cfg, |_, shape, kind| {
            Ok(match kind {
                ParamKind::Scale => Tensor::full(shape, 1.0),
                _ => Tensor::zeros(shape),
            })
        })
    }

    /// Rebuilds a model from named tensors, e.g. a loaded checkpoint. Every
    /// expected name must be present with the right shape and no others.
    pub fn from_named(cfg: StackConfig, mut named: std::collections::HashMap<String, Tensor>) -> Result<Self> {
        let model = Self::build(cfg, |name, _, _| {
            named
                .remove(name)
                .ok_or_else(|| Error::CorruptContainer(format!("missing parameter {name}")))
        })?;
        if let Some(extra) = named.keys().min() {
            return Err(Error::CorruptContainer(format!("unexpected parameter {extra}")));
        }
        Ok(model)
    }

    pub fn config(&self) -> &StackConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layers(&self) -> &[[LstmpLayerParams; 2]] {
        &self.layers
    }

    pub fn output(&self) -> &OutputParams {
        &self.output
    }

    pub fn ln_config(&self) -> LnConfig {
        LnConfig { eps: self.cfg.eps }
    }

    /// Records the full forward pass on `g`.
    pub fn forward_graph(&self, g: &mut Graph, vars: &ParamVars, batch: &Batch) -> Result<StackOutput> {
        if batch.frames.cols() != self.cfg.input_dim {
            return Err(Error::ShapeMismatch {
                op: "stack_forward",
                left: vec![self.cfg.input_dim],
                right: vec![batch.frames.cols()],
            });
        }
        let cfg = self.ln_config();
        let mut h = g.constant(batch.frames.clone());
        let mut summaries = Vec::new();
        for layer in &self.layers {
            let mut dir_summaries = Vec::new();
            let mut outs = Vec::with_capacity(2);
            for (params, dir) in layer.iter().zip(Direction::BOTH) {
                let weights = params.weights(g, vars)?;
                let ln = match &params.adapter {
                    Some(adapter) => {
                        let a = summarize(g, &adapter.summarizer, vars, h, batch)?;
                        dir_summaries.push(a);
                        let (gates, cell) = generate_ln_params(g, &adapter.generators, vars, a)?;
                        let cell = match cell {
                            Some(c) => c,
                            None => params.static_cell_norm(vars).expect("static cell LN"),
                        };
                        EffectiveLn { gates, cell }
                    }
                    None => EffectiveLn {
                        gates: params.static_gate_norm(g, vars)?.expect("static gate LN"),
                        cell: params.static_cell_norm(vars).expect("static cell LN"),
                    },
                };
                outs.push(scan_direction(g, &weights, &ln, h, batch, dir, cfg)?);
            }
            h = g.concat_cols(&outs)?;
            if !dir_summaries.is_empty() {
                summaries.push(dir_summaries);
            }
        }
        let scores = g.matmul_t(h, vars[self.output.w_y])?;
        let logits = g.add_row(scores, vars[self.output.b_y])?;
        Ok(StackOutput { logits, summaries })
    }

    /// Forward pass without gradient tracking.
    pub fn forward(&self, batch: &Batch) -> Result<ForwardValues> {
        let mut g = Graph::new();
        let vars = self.params.register(&mut g, false);
        let out = self.forward_graph(&mut g, &vars, batch)?;
        Ok(ForwardValues {
            logits: g.value(out.logits).clone(),
            summaries: out
                .summaries
                .iter()
                .map(|dirs| dirs.iter().map(|&v| g.value(v).clone()).collect())
                .collect(),
        })
    }

    /// Exact trainable parameter count of this instance.
    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dln: bool) -> StackConfig {
        StackConfig {
            num_layers: 2,
            cell_size: 4,
            proj_size: 2,
            input_dim: 3,
            num_classes: 5,
            dln,
            summary_size: 2,
            ..Default::default()
        }
    }

    #[test]
    fn layout_names() {
        let m = StackModel::zeroed(tiny(false)).unwrap();
        let p = m.params();
        assert_eq!(p.by_name("layer1.fwd.W_i").unwrap().shape(), &[4, 3]);
        assert_eq!(p.by_name("layer2.bwd.W_g").unwrap().shape(), &[4, 4]);
        assert_eq!(p.by_name("layer1.bwd.U_o").unwrap().shape(), &[4, 2]);
        assert_eq!(p.by_name("layer1.fwd.W_p").unwrap().shape(), &[2, 4]);
        assert!(p.by_name("layer1.fwd.shift_f").is_some());
        assert!(p.by_name("layer1.fwd.W_a").is_none());
        assert_eq!(p.by_name("output.W_y").unwrap().shape(), &[5, 4]);

        let m = StackModel::zeroed(tiny(true)).unwrap();
        let p = m.params();
        assert!(p.by_name("layer1.fwd.shift_f").is_none());
        assert_eq!(p.by_name("layer1.fwd.W_a").unwrap().shape(), &[2, 3]);
        assert_eq!(p.by_name("layer2.fwd.W_a").unwrap().shape(), &[2, 4]);
        assert_eq!(p.by_name("layer2.bwd.gen.g.shift.W").unwrap().shape(), &[4, 2]);
        assert_eq!(p.by_name("layer2.bwd.gen.g.scale_h.b").unwrap().data(), &[1.0; 4]);
        assert!(p.by_name("layer1.fwd.scale_c").is_some());
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        use crate::data::Utterance;
        let cfg = StackConfig { num_layers: 1, num_classes: 2, ..tiny(false) };
        let m = StackModel::build(cfg, |_, shape, _| Ok(Tensor::zeros(shape))).unwrap();
        let frames = Tensor::matrix(3, 3, vec![0.5, -1.0, 2.0, 0.1, 0.2, 0.3, 1.0, 1.0, -1.0]).unwrap();
        let u = Utterance::new("u", "s", frames, vec![0, 1, 0]).unwrap();
        let out = m.forward(&Batch::single(&u).unwrap()).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_dim_mismatch() {
        use crate::data::Utterance;
        let m = StackModel::zeroed(tiny(false)).unwrap();
        let u = Utterance::new("u", "s", Tensor::zeros(&[2, 4]), vec![0, 0]).unwrap();
        assert!(matches!(
            m.forward(&Batch::single(&u).unwrap()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn from_named_rejects_missing_and_extra() {
        let m = StackModel::zeroed(tiny(false)).unwrap();
        let mut named: std::collections::HashMap<String, Tensor> =
            m.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        assert!(StackModel::from_named(tiny(false), named.clone()).is_ok());
        named.insert("bogus".into(), Tensor::scalar(1.0));
        assert!(StackModel::from_named(tiny(false), named.clone()).is_err());
        named.remove("bogus");
        named.remove("output.b_y");
        assert!(StackModel::from_named(tiny(false), named).is_err());
    }
}
