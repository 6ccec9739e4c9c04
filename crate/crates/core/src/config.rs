//! Model and training configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::DEFAULT_EPS;

/// Shape of a deep bidirectional LSTMP stack.
///
/// Defaults describe the small model used for synthetic experiments; the
/// published configurations are available through [`StackConfig::preset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackConfig {
    /// Number of bidirectional layers (default 2).
    pub num_layers: usize,
    /// LSTM cells per direction (default 32).
    pub cell_size: usize,
    /// Recurrent projection units per direction (default 16).
    pub proj_size: usize,
    /// Frame dimension (default 16).
    pub input_dim: usize,
    /// Output classes (default 8).
    pub num_classes: usize,
    /// Generate gate LN parameters per utterance (default false).
    pub dln: bool,
    /// Length of the utterance summary vector (default 8).
    pub summary_size: usize,
    /// Also generate the cell-state LN parameters (default false).
    pub dln_cell_state: bool,
    /// Weight of the summary variance penalty (default 0).
    pub lambda: f64,
    /// LN stabilizer added under the square root (default 1e-5).
    pub eps: f64,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            cell_size: 32,
            proj_size: 16,
            input_dim: 16,
            num_classes: 8,
            dln: false,
            summary_size: 8,
            dln_cell_state: false,
            lambda: 0.0,
            eps: DEFAULT_EPS,
        }
    }
}

pub const PRESETS: [&str; 4] = ["wsj-baseline", "wsj-dln", "ted-baseline", "ted-dln"];

impl StackConfig {
    /// Three layers of 512 cells with 256 projection units over 123-dim
    /// frames. `wsj-*` has 3436 output states and lambda 0, `ted-*` has 4174
    /// states and lambda 10; `*-dln` enables generation with a 64-dim summary.
    pub fn preset(name: &str) -> Option<Self> {
        let (classes, lambda) = match name.split_once('-')?.0 {
            "wsj" => (3436, 0.0),
            "ted" => (4174, 10.0),
            _ => return None,
        };
        let dln = match name.split_once('-')?.1 {
            "baseline" => false,
            "dln" => true,
            _ => return None,
        };
        Some(Self {
            num_layers: 3,
            cell_size: 512,
            proj_size: 256,
            input_dim: 123,
            num_classes: classes,
            dln,
            summary_size: 64,
            dln_cell_state: false,
            lambda,
            eps: DEFAULT_EPS,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        for (name, v) in [
            ("cell_size", self.cell_size),
            ("proj_size", self.proj_size),
            ("input_dim", self.input_dim),
            ("num_classes", self.num_classes),
            ("summary_size", self.summary_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.proj_size >= self.cell_size {
            return bad(format!(
                "proj_size {} must be smaller than cell_size {}",
                self.proj_size, self.cell_size
            ));
        }
        if self.dln && self.summary_size >= self.cell_size {
            return bad(format!(
                "summary_size {} must be smaller than cell_size {}",
                self.summary_size, self.cell_size
            ));
        }
        if self.dln_cell_state && !self.dln {
            return bad("dln_cell_state requires dln".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a finite non-negative number, got {}", self.lambda));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }

    /// Input width of layer `l` (0-based).
    pub fn layer_input_dim(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim
        } else {
            2 * self.proj_size
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Utterances per mini-batch (default 16).
    pub batch_size: usize,
    /// Passes over the training set (default 10).
    pub epochs: usize,
    /// Seed for initialization and shuffling (default 1).
    pub seed: u64,
    /// Adam learning rate (default 0.001).
    pub learning_rate: f64,
    /// Global gradient-norm clip; `None` disables clipping (default).
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 10,
            seed: 1,
            learning_rate: 1e-3,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidConfig("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}
