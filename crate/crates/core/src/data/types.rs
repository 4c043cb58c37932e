use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 6;

/// Emotion names in label order (label index 1..=6).
pub const EMOTIONS: [&str; NUM_CLASSES] = ["happy", "sad", "anger", "surprise", "disgust", "fear"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Modality {
    /// Verbal.
    L,
    /// Visual.
    V,
    /// Acoustic.
    A,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::L, Modality::V, Modality::A];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::L => "L",
            Modality::V => "V",
            Modality::A => "A",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One modality's time series.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySequence {
    pub modality: Modality,
    pub dim: usize,
    pub features: Vec<Vec<f64>>,
    pub intervals: Vec<(f64, f64)>,
    pub mask: Vec<bool>,
}

impl ModalitySequence {
    /// A sequence with every timestep valid.
    pub fn new(modality: Modality, features: Vec<Vec<f64>>, intervals: Vec<(f64, f64)>) -> Result<Self> {
        let dim = features.first().map(Vec::len).unwrap_or(0);
        let mask = vec![true; features.len()];
        let s = Self {
            modality,
            dim,
            features,
            intervals,
            mask,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::Empty(format!("{} sequence", self.modality)));
        }
        Tensor::new(&[self.len(), self.dim], self.features.concat())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Data { line: None, msg: format!("{}: {msg}", self.modality) });
        if self.features.is_empty() {
            return bad("sequence has no timesteps".into());
        }
        if self.dim == 0 {
            return bad("zero feature width".into());
        }
        if self.intervals.len() != self.features.len() || self.mask.len() != self.features.len() {
            return bad(format!(
                "{} feature rows, {} intervals, {} mask entries",
                self.features.len(),
                self.intervals.len(),
                self.mask.len()
            ));
        }
        for (t, row) in self.features.iter().enumerate() {
            if row.len() != self.dim {
                return bad(format!("row {t} has width {} (expected {})", row.len(), self.dim));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return bad(format!("row {t} has a non-finite value"));
            }
            if !self.mask[t] && row.iter().any(|&v| v != 0.0) {
                return bad(format!("padded row {t} is not all-zero"));
            }
        }
        let mut prev = f64::NEG_INFINITY;
        for (t, &(s, e)) in self.intervals.iter().enumerate() {
            if !(s.is_finite() && e.is_finite()) || s > e {
                return bad(format!("interval {t} [{s}, {e}] is invalid"));
            }
            if s < prev {
                return bad(format!("interval {t} starts before its predecessor"));
            }
            prev = s;
        }
        Ok(())
    }
}

/// The three streams of one utterance plus its label vector
/// `(sentiment, happy, sad, anger, surprise, disgust, fear)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedSample {
    pub id: String,
    pub l: ModalitySequence,
    pub v: ModalitySequence,
    pub a: ModalitySequence,
    pub labels: [f64; 7],
}

impl AlignedSample {
    pub fn seq(&self, m: Modality) -> &ModalitySequence {
        match m {
            Modality::L => &self.l,
            Modality::V => &self.v,
            Modality::A => &self.a,
        }
    }

    pub fn seq_mut(&mut self, m: Modality) -> &mut ModalitySequence {
        match m {
            Modality::L => &mut self.l,
            Modality::V => &mut self.v,
            Modality::A => &mut self.a,
        }
    }

    /// Emotion intensities (labels 1..=6).
    pub fn intensities(&self) -> [f64; NUM_CLASSES] {
        let mut out = [0.0; NUM_CLASSES];
        out.copy_from_slice(&self.labels[1..]);
        out
    }

    /// Single-label target: argmax intensity, ties to the lowest index.
    pub fn class(&self) -> usize {
        let mut best = 0;
        for c in 1..NUM_CLASSES {
            if self.labels[1 + c] > self.labels[1 + best] {
                best = c;
            }
        }
        best
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Data { line, msg } => Error::Data {
                line,
                msg: format!("sample {:?}: {msg}", self.id),
            },
            other => other,
        };
        for m in Modality::ALL {
            let s = self.seq(m);
            if s.modality != m {
                return Err(Error::Data {
                    line: None,
                    msg: format!("sample {:?}: slot {m} holds a {} sequence", self.id, s.modality),
                });
            }
            s.validate().map_err(wrap)?;
        }
        if !(-3.0..=3.0).contains(&self.labels[0]) {
            return Err(Error::Data {
                line: None,
                msg: format!("sample {:?}: sentiment {} outside [-3, 3]", self.id, self.labels[0]),
            });
        }
        if let Some(v) = self.labels[1..].iter().find(|v| !(0.0..=3.0).contains(*v)) {
            return Err(Error::Data {
                line: None,
                msg: format!("sample {:?}: emotion intensity {v} outside [0, 3]", self.id),
            });
        }
        Ok(())
    }
}
