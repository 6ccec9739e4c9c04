//! A multi-speaker frame classification corpus.
//!
//! Each class has a prototype frame. Each speaker distorts every feature
//! dimension with its own gain and offset, so a frame of class `c` spoken
//! by `s` is `gain_s ⊙ prototype_c + offset_s + noise`. Frame labels follow
//! a sticky random walk over classes. The last `dev_speakers +
//! test_speakers` speakers are held out of training.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blob::round_f32;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Utterance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub frame_dim: usize,
    pub num_classes: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Standard deviation of the additive frame noise.
    pub noise: f64,
    /// Log-gains are drawn with this standard deviation.
    pub gain_spread: f64,
    /// Offsets are drawn with this standard deviation.
    pub offset_spread: f64,
    /// Probability that the next frame keeps the current label.
    pub stay_prob: f64,
    /// Held-out speakers whose utterances form the dev split.
    pub dev_speakers: usize,
    /// Held-out speakers whose utterances form the test split.
    pub test_speakers: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_speakers: 16,
            utterances_per_speaker: 167,
            frame_dim: 16,
            num_classes: 8,
            min_len: 20,
            max_len: 40,
            noise: 0.5,
            gain_spread: 0.4,
            offset_spread: 1.0,
            stay_prob: 0.85,
            dev_speakers: 2,
            test_speakers: 2,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_speakers < 2 {
            return bad(format!("need at least 2 speakers, got {}", self.num_speakers));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.frame_dim == 0 || self.utterances_per_speaker == 0 {
            return bad("frame_dim and utterances_per_speaker must be positive".into());
        }
        if self.min_len == 0 || self.max_len < self.min_len {
            return bad(format!("invalid length range [{}, {}]", self.min_len, self.max_len));
        }
        let held_out = self.dev_speakers + self.test_speakers;
        if held_out >= self.num_speakers {
            return bad(format!(
                "{held_out} held-out speakers requested but only {} exist (at least one must remain for training)",
                self.num_speakers
            ));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("gain_spread", self.gain_spread),
            ("offset_spread", self.offset_spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.stay_prob) {
            return bad("stay_prob must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn train_speakers(&self) -> usize {
        self.num_speakers - self.dev_speakers - self.test_speakers
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerProfile {
    pub id: String,
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub prototypes: Vec<Vec<f64>>,
    pub speakers: Vec<SpeakerProfile>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.frame_dim;
    let prototypes: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..dim).map(|_| normal(&mut rng)).collect())
        .collect();
    let speakers: Vec<SpeakerProfile> = (0..spec.num_speakers)
        .map(|s| SpeakerProfile {
            id: format!("spk{s:02}"),
            gain: (0..dim).map(|_| (spec.gain_spread * normal(&mut rng)).exp()).collect(),
            offset: (0..dim).map(|_| spec.offset_spread * normal(&mut rng)).collect(),
        })
        .collect();

    let n_train = spec.train_speakers();
    let mut corpus = SyntheticCorpus {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        prototypes,
        speakers,
    };
    for s in 0..spec.num_speakers {
        for k in 0..spec.utterances_per_speaker {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let mut labels = Vec::with_capacity(len);
            let mut class = rng.random_range(0..spec.num_classes);
            for t in 0..len {
                if t > 0 && rng.random::<f64>() >= spec.stay_prob {
                    // uniform over the other classes
                    let step = rng.random_range(1..spec.num_classes);
                    class = (class + step) % spec.num_classes;
                }
                labels.push(class);
            }
            let spk = &corpus.speakers[s];
            let mut frames = Vec::with_capacity(len * dim);
            for &c in &labels {
                for j in 0..dim {
                    let v = spk.gain[j] * corpus.prototypes[c][j] + spk.offset[j] + spec.noise * normal(&mut rng);
                    frames.push(round_f32(v));
                }
            }
            let utt = Utterance::new(
                format!("{}-u{k:04}", spk.id),
                spk.id.clone(),
                Tensor::matrix(len, dim, frames)?,
                labels,
            )?;
            if s < n_train {
                corpus.train.push(utt);
            } else if s < n_train + spec.dev_speakers {
                corpus.dev.push(utt);
            } else {
                corpus.test.push(utt);
            }
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_speakers: 6,
            utterances_per_speaker: 3,
            dev_speakers: 1,
            test_speakers: 2,
            ..Default::default()
        }
    }

    #[test]
    fn identity_speakers_reproduce_prototypes() {
        let spec = SyntheticSpec {
            noise: 0.0,
            gain_spread: 0.0,
            offset_spread: 0.0,
            ..small()
        };
        let corpus = gen_synthetic(&spec).unwrap();
        for u in &corpus.train {
            for (t, &c) in u.labels.iter().enumerate() {
                let proto: Vec<f64> = corpus.prototypes[c].iter().map(|&v| round_f32(v)).collect();
                assert_eq!(u.frames.row(t), proto.as_slice());
            }
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(gen_synthetic(&small()).unwrap(), gen_synthetic(&small()).unwrap());
    }

    #[test]
    fn splits_have_disjoint_speakers() {
        let c = gen_synthetic(&small()).unwrap();
        let set = |v: &[Utterance]| v.iter().map(|u| u.speaker.clone()).collect::<HashSet<_>>();
        let (tr, dv, te) = (set(&c.train), set(&c.dev), set(&c.test));
        assert_eq!((tr.len(), dv.len(), te.len()), (3, 1, 2));
        assert!(tr.is_disjoint(&dv) && tr.is_disjoint(&te) && dv.is_disjoint(&te));
    }

    #[test]
    fn lengths_and_labels_in_range() {
        let spec = small();
        let c = gen_synthetic(&spec).unwrap();
        for u in c.train.iter().chain(&c.dev).chain(&c.test) {
            assert!((spec.min_len..=spec.max_len).contains(&u.len()));
            assert!(u.labels.iter().all(|&l| l < spec.num_classes));
        }
    }

    #[test]
    fn too_many_held_out() {
        let spec = SyntheticSpec {
            num_speakers: 3,
            dev_speakers: 2,
            test_speakers: 1,
            ..Default::default()
        };
        assert!(gen_synthetic(&spec).is_err());
        let spec = SyntheticSpec { num_speakers: 1, ..Default::default() };
        assert!(gen_synthetic(&spec).is_err());
    }
}
