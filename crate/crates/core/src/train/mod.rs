//! Frame-level NLL training with Adam, and frame error rate.

mod adam;
mod init;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use init::{init_model, orthogonal_init};

use crate::adapt::{summary_variance, variance_penalty};
use crate::config::TrainConfig;
use crate::data::{Batch, Utterance};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::recurrent::{StackModel, StackOutput};
use crate::tensor::Tensor;

/// Mean over utterances of the mean NLL over each utterance's valid frames.
pub fn nll_loss(g: &mut Graph, logits: Var, batch: &Batch) -> Result<Var> {
    g.cross_entropy(logits, &batch.targets, &batch.loss_weights())
}

/// Loss nodes of one mini-batch.
#[derive(Clone, Debug)]
pub struct LossTerms {
    /// `nll + penalty`.
    pub total: Var,
    pub nll: Var,
    /// Variance penalty (`−λ · variance`); absent for static models.
    pub penalty: Option<Var>,
    pub output: StackOutput,
}

pub fn batch_loss(model: &StackModel, g: &mut Graph, vars: &crate::params::ParamVars, batch: &Batch) -> Result<LossTerms> {
    let output = model.forward_graph(g, vars, batch)?;
    let nll = nll_loss(g, output.logits, batch)?;
    let (total, penalty) = if output.summaries.is_empty() {
        (nll, None)
    } else {
        let pen = variance_penalty(g, &output.summaries, model.config().lambda)?;
        (g.add(nll, pen)?, Some(pen))
    };
    Ok(LossTerms {
        total,
        nll,
        penalty,
        output,
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `(errors, valid frames)` of time-major logits against a batch.
pub fn count_errors(logits: &Tensor, batch: &Batch) -> (usize, usize) {
    let mut errors = 0;
    let mut frames = 0;
    for (row, (&m, &target)) in batch.mask.iter().zip(&batch.targets).enumerate() {
        if m == 0.0 {
            continue;
        }
        frames += 1;
        if argmax(logits.row(row)) != target {
            errors += 1;
        }
    }
    (errors, frames)
}

/// Percentage of valid frames whose argmax class differs from the target.
pub fn frame_error_rate(model: &StackModel, dataset: &[Utterance], batch_size: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("frame_error_rate"));
    }
    let mut errors = 0;
    let mut frames = 0;
    for chunk in dataset.chunks(batch_size.max(1)) {
        let refs: Vec<&Utterance> = chunk.iter().collect();
        let batch = Batch::from_utterances(&refs)?;
        let out = model.forward(&batch)?;
        let (e, f) = count_errors(&out.logits, &batch);
        errors += e;
        frames += f;
    }
    Ok(100.0 * errors as f64 / frames as f64)
}

/// Unscaled mean summary variance of one batch under `model`.
pub fn batch_summary_variance(model: &StackModel, batch: &Batch) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.params().register(&mut g, false);
    let out = model.forward_graph(&mut g, &vars, batch)?;
    if out.summaries.is_empty() {
        return Err(Error::DlnDisabled);
    }
    let v = summary_variance(&mut g, &out.summaries)?;
    g.value(v).item()
}

/// Statistics of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub nll: f64,
    pub penalty: f64,
    pub errors: usize,
    pub frames: usize,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_penalty: f64,
    pub train_fer: f64,
    pub dev_fer: Option<f64>,
    pub wall_secs: f64,
}

impl EpochMetrics {
    pub const HEADER: &'static str = "epoch\tloss\tpenalty\ttrain_fer\tdev_fer";

    /// Tab-separated log line. Wall time is only included on request since
    /// it would make otherwise identical runs produce different logs.
    pub fn log_line(&self, with_wall_time: bool) -> String {
        let dev = self.dev_fer.map_or_else(|| "-".to_string(), |f| format!("{f:.4}"));
        let mut line = format!(
            "{}\t{:.6}\t{:.6}\t{:.4}\t{}",
            self.epoch, self.mean_loss, self.mean_penalty, self.train_fer, dev
        );
        if with_wall_time {
            line.push_str(&format!("\t{:.3}", self.wall_secs));
        }
        line
    }
}

/// Groups utterance indices into mini-batches of similar length.
///
/// Indices are shuffled, cut into buckets of several batches, sorted by
/// length inside each bucket, sliced into batches, and the batch order is
/// shuffled again.
pub fn make_batches(dataset: &[Utterance], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    const BUCKET_BATCHES: usize = 8;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for bucket in order.chunks_mut(batch_size * BUCKET_BATCHES) {
        bucket.sort_by_key(|&i| dataset[i].len());
        batches.extend(bucket.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Model plus optimizer state and the shuffling stream.
pub struct Trainer {
    pub model: StackModel,
    pub cfg: TrainConfig,
    adam: AdamState,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: StackModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(
            model.params().tensors(),
            AdamConfig {
                lr: cfg.learning_rate,
                ..Default::default()
            },
        );
        // distinct stream from the initializer's, which uses `seed` itself
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c_0000_0001);
        Ok(Self {
            model,
            cfg,
            adam,
            rng,
            epoch: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// Forward, backward and one Adam update on `batch`.
    pub fn step(&mut self, batch: &Batch) -> Result<StepStats> {
        let mut g = Graph::new();
        let vars = self.model.params().register(&mut g, true);
        let terms = batch_loss(&self.model, &mut g, &vars, batch).map_err(|e| match e {
            Error::NonFinite { op } => Error::NonFinite { op },
            other => other,
        })?;
        let loss = g.value(terms.total).item()?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        let nll = g.value(terms.nll).item()?;
        let penalty = match terms.penalty {
            Some(p) => g.value(p).item()?,
            None => 0.0,
        };
        let (errors, frames) = count_errors(g.value(terms.output.logits), batch);

        let mut grads = g.backward(terms.total)?;
        let mut flat: Vec<Tensor> = vars
            .as_slice()
            .iter()
            .map(|&v| grads.take(v).expect("parameter gradient"))
            .collect();
        if let Some(max) = self.cfg.clip_norm {
            clip_global_norm(&mut flat, max);
        }
        self.adam.step(self.model.params_mut().tensors_mut(), &flat)?;
        Ok(StepStats {
            loss,
            nll,
            penalty,
            errors,
            frames,
        })
    }

    /// One pass over `train`; `dev`, when non-empty, is scored afterwards.
    pub fn train_epoch(&mut self, train: &[Utterance], dev: &[Utterance]) -> Result<EpochMetrics> {
        if train.is_empty() {
            return Err(Error::Empty("train_epoch"));
        }
        let start = Instant::now();
        let batches = make_batches(train, self.cfg.batch_size, &mut self.rng);
        let (mut loss, mut penalty) = (0.0, 0.0);
        let (mut errors, mut frames) = (0, 0);
        for (k, idx) in batches.iter().enumerate() {
            let refs: Vec<&Utterance> = idx.iter().map(|&i| &train[i]).collect();
            let batch = Batch::from_utterances(&refs)?;
            let stats = self.step(&batch).map_err(|e| match e {
                Error::NonFinite { op } => Error::InvalidArgument(format!(
                    "non-finite value in {op} at epoch {} batch {k}; aborting epoch",
                    self.epoch + 1
                )),
                other => other,
            })?;
            loss += stats.loss;
            penalty += stats.penalty;
            errors += stats.errors;
            frames += stats.frames;
        }
        self.epoch += 1;
        let n = batches.len() as f64;
        let dev_fer = if dev.is_empty() {
            None
        } else {
            Some(frame_error_rate(&self.model, dev, self.cfg.batch_size)?)
        };
        Ok(EpochMetrics {
            epoch: self.epoch,
            mean_loss: loss / n,
            mean_penalty: penalty / n,
            train_fer: 100.0 * errors as f64 / frames as f64,
            dev_fer,
            wall_secs: start.elapsed().as_secs_f64(),
        })
    }
}

/// Result of [`train`]: the best-dev (or final, without dev data) model and
/// the per-epoch log.
pub struct TrainOutcome {
    pub best: StackModel,
    pub best_epoch: usize,
    pub log: Vec<EpochMetrics>,
    pub last: StackModel,
}

/// Trains for `cfg.epochs` epochs, keeping the parameters with the lowest
/// dev FER. `on_epoch` sees every log entry as it is produced.
pub fn train(
    model: StackModel,
    train_set: &[Utterance],
    dev_set: &[Utterance],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut best = trainer.model.clone();
    let mut best_epoch = 0;
    let mut best_fer = f64::INFINITY;
    let mut log = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let m = trainer.train_epoch(train_set, dev_set)?;
        on_epoch(&m);
        let score = m.dev_fer.unwrap_or(0.0);
        if m.dev_fer.is_none() || score < best_fer {
            best_fer = score;
            best = trainer.model.clone();
            best_epoch = m.epoch;
        }
        log.push(m);
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        log,
        last: trainer.model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::StackConfig;

    fn logits_batch(rows: &[Vec<f64>], targets: Vec<usize>) -> (Tensor, Batch) {
        let frames = Tensor::zeros(&[rows.len(), 1]);
        let u = Utterance::new("u", "s", frames, targets).unwrap();
        (Tensor::from_rows(rows).unwrap(), Batch::single(&u).unwrap())
    }

    fn nll_value(rows: &[Vec<f64>], targets: Vec<usize>) -> f64 {
        let (logits, batch) = logits_batch(rows, targets);
        let mut g = Graph::new();
        let z = g.constant(logits);
        let l = nll_loss(&mut g, z, &batch).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let v = nll_value(&[vec![0.0; 4], vec![0.0; 4]], vec![1, 3]);
        assert!((v - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_correct_logit_gives_zero() {
        let v = nll_value(&[vec![500.0, 0.0, 0.0]], vec![0]);
        assert!(v.abs() < 1e-200);
    }

    #[test]
    fn two_frame_hand_computation() {
        let rows = vec![vec![1.0, 2.0, 0.5], vec![-1.0, 0.0, 3.0]];
        // -log softmax by hand
        let f0 = -(2.0f64.exp() / (1f64.exp() + 2f64.exp() + 0.5f64.exp())).ln();
        let f1 = -((-1f64).exp() / ((-1f64).exp() + 1.0 + 3f64.exp())).ln();
        let v = nll_value(&rows, vec![1, 0]);
        assert!((v - (f0 + f1) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn out_of_range_target() {
        let (logits, mut batch) = logits_batch(&[vec![0.0, 0.0]], vec![0]);
        batch.targets[0] = 2;
        let mut g = Graph::new();
        let z = g.constant(logits);
        assert!(matches!(nll_loss(&mut g, z, &batch), Err(Error::TargetOutOfRange { .. })));
    }

    #[test]
    fn error_counting() {
        assert_eq!(argmax(&[0.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0, 1.0, 1.0]), 1);
        let (logits, batch) = logits_batch(&vec![vec![0.0, 0.0]; 5], vec![1; 5]);
        assert_eq!(count_errors(&logits, &batch), (5, 5));
        let rows: Vec<Vec<f64>> = (0..10).map(|i| if i < 3 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect();
        let (logits, batch) = logits_batch(&rows, vec![1; 10]);
        let (e, f) = count_errors(&logits, &batch);
        assert_eq!(100.0 * e as f64 / f as f64, 30.0);
    }

    #[test]
    fn batches_cover_everything_once() {
        let utts: Vec<Utterance> = (0..37)
            .map(|i| Utterance::new(format!("u{i}"), "s", Tensor::zeros(&[1 + i % 5, 2]), vec![0; 1 + i % 5]).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = make_batches(&utts, 4, &mut rng);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..37).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| b.len() <= 4 && !b.is_empty()));
        let again = make_batches(&utts, 4, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(batches, again);
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let model = init_model(StackConfig { num_layers: 1, ..Default::default() }, 2).unwrap();
        let u = Utterance::new("u", "s", Tensor::zeros(&[3, 16]), vec![0; 3]).unwrap();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let out = train(model.clone(), &[u], &[], &cfg, |_| {}).unwrap();
        assert_eq!(out.best.params(), model.params());
        assert!(out.log.is_empty());
    }
}
