use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One labelled utterance: `frames` is `[T, D]`, one class id per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub frames: Tensor,
    pub labels: Vec<usize>,
}

impl Utterance {
    pub fn new(id: impl Into<String>, speaker: impl Into<String>, frames: Tensor, labels: Vec<usize>) -> Result<Self> {
        let u = Self {
            id: id.into(),
            speaker: speaker.into(),
            frames,
            labels,
        };
        u.validate()?;
        Ok(u)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.frames.is_matrix() || self.frames.rows() == 0 {
            return Err(Error::InvalidArgument(format!(
                "utterance {} needs a non-empty [T, D] frame matrix, got {:?}",
                self.id,
                self.frames.shape()
            )));
        }
        if self.labels.len() != self.frames.rows() {
            return Err(Error::ShapeMismatch {
                op: "utterance",
                left: self.frames.shape().to_vec(),
                right: vec![self.labels.len()],
            });
        }
        if !self.frames.all_finite() {
            return Err(Error::NonFinite { op: "utterance" });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Utterances padded to a common length and laid out time-major: row
/// `t * batch_size + b` holds frame `t` of utterance `b`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub frames: Tensor,
    pub targets: Vec<usize>,
    /// 1.0 for real frames, 0.0 for padding, per row of `frames`.
    pub mask: Vec<f64>,
    pub lengths: Vec<usize>,
    pub batch_size: usize,
    pub max_len: usize,
}

impl Batch {
    pub fn from_utterances(utts: &[&Utterance]) -> Result<Self> {
        let first = utts.first().ok_or(Error::Empty("batch"))?;
        let dim = first.dim();
        let b = utts.len();
        let max_len = utts.iter().map(|u| u.len()).max().unwrap_or(0);
        let mut frames = vec![0.0; max_len * b * dim];
        let mut targets = vec![0; max_len * b];
        let mut mask = vec![0.0; max_len * b];
        for (j, u) in utts.iter().enumerate() {
            if u.dim() != dim {
                return Err(Error::ShapeMismatch {
                    op: "batch",
                    left: vec![dim],
                    right: vec![u.dim()],
                });
            }
            if u.is_empty() {
                return Err(Error::Empty("utterance"));
            }
            for t in 0..u.len() {
                let row = t * b + j;
                frames[row * dim..(row + 1) * dim].copy_from_slice(u.frames.row(t));
                targets[row] = u.labels[t];
                mask[row] = 1.0;
            }
        }
        Ok(Self {
            frames: Tensor::matrix(max_len * b, dim, frames)?,
            targets,
            mask,
            lengths: utts.iter().map(|u| u.len()).collect(),
            batch_size: b,
            max_len,
        })
    }

    pub fn single(u: &Utterance) -> Result<Self> {
        Self::from_utterances(&[u])
    }

    pub fn valid_frames(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Whether any row of time step `t` is padding.
    pub fn step_has_padding(&self, t: usize) -> bool {
        self.mask[t * self.batch_size..(t + 1) * self.batch_size].contains(&0.0)
    }

    /// Per-row loss weights giving the mean over utterances of each
    /// utterance's mean frame loss.
    pub fn loss_weights(&self) -> Vec<f64> {
        let b = self.batch_size;
        self.mask
            .iter()
            .enumerate()
            .map(|(row, &m)| m / (self.lengths[row % b] as f64 * b as f64))
            .collect()
    }

    /// `[B, T·B]` matrix that averages each utterance's valid rows.
    pub fn pooling_matrix(&self) -> Tensor {
        let b = self.batch_size;
        let rows = self.max_len * b;
        let mut data = vec![0.0; b * rows];
        for row in 0..rows {
            let j = row % b;
            data[j * rows + row] = self.mask[row] / self.lengths[j] as f64;
        }
        Tensor::matrix(b, rows, data).expect("pooling shape")
    }
}
