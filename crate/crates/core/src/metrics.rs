//! Six-way emotion metrics.

use serde::{Deserialize, Serialize};

use crate::data::{EMOTIONS, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub acc6: f64,
    /// Per-emotion binary accuracy of "predicted class is c".
    pub acc2: [f64; NUM_CLASSES],
    pub f1: [f64; NUM_CLASSES],
    /// F1 averaged with weights equal to true-class support.
    pub weighted_f1: f64,
    /// Mean over samples and emotions of `|3·p_c − intensity_c|`.
    pub mae: f64,
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl MetricsReport {
    /// Scores predicted class probabilities against emotion intensities.
    pub fn score(probs: &[[f64; NUM_CLASSES]], intensities: &[[f64; NUM_CLASSES]]) -> Result<Self> {
        if probs.len() != intensities.len() {
            return Err(Error::shape("score", &[probs.len()], &[intensities.len()]));
        }
        if probs.is_empty() {
            return Err(Error::Empty("nothing to score".into()));
        }
        let n = probs.len();
        let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
        let mut abs_err = 0.0;
        for (p, y) in probs.iter().zip(intensities) {
            confusion[argmax(y)][argmax(p)] += 1;
            abs_err += p.iter().zip(y).map(|(p, y)| (3.0 * p - y).abs()).sum::<f64>();
        }
        let correct: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
        let mut acc2 = [0.0; NUM_CLASSES];
        let mut f1 = [0.0; NUM_CLASSES];
        let mut weighted = 0.0;
        for c in 0..NUM_CLASSES {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = (0..NUM_CLASSES).map(|r| confusion[r][c]).sum();
            let (fp, fn_) = (predicted - tp, support - tp);
            let tn = n - tp - fp - fn_;
            acc2[c] = (tp + tn) as f64 / n as f64;
            f1[c] = if tp == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            };
            weighted += f1[c] * support as f64;
        }
        Ok(Self {
            samples: n,
            acc6: correct as f64 / n as f64,
            acc2,
            f1,
            weighted_f1: weighted / n as f64,
            mae: abs_err / (n * NUM_CLASSES) as f64,
            confusion,
        })
    }

    pub fn tsv_header() -> String {
        let mut cols = vec!["samples".to_string(), "acc6".into(), "weighted_f1".into(), "mae".into()];
        for e in EMOTIONS {
            cols.push(format!("acc2_{e}"));
            cols.push(format!("f1_{e}"));
        }
        cols.join("\t")
    }

    /// One tab-separated line matching [`MetricsReport::tsv_header`].
    pub fn tsv_line(&self) -> String {
        let mut cols = vec![
            self.samples.to_string(),
            self.acc6.to_string(),
            self.weighted_f1.to_string(),
            self.mae.to_string(),
        ];
        for c in 0..NUM_CLASSES {
            cols.push(self.acc2[c].to_string());
            cols.push(self.f1[c].to_string());
        }
        cols.join("\t")
    }

    /// Full report as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("metrics serialise")
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "samples      {}", self.samples)?;
        writeln!(f, "acc6         {:.4}", self.acc6)?;
        writeln!(f, "weighted_f1  {:.4}", self.weighted_f1)?;
        writeln!(f, "mae          {:.4}", self.mae)?;
        writeln!(f, "{:<10} {:>7} {:>7}", "emotion", "acc2", "f1")?;
        for (c, e) in EMOTIONS.iter().enumerate() {
            writeln!(f, "{e:<10} {:>7.4} {:>7.4}", self.acc2[c], self.f1[c])?;
        }
        writeln!(f, "confusion (rows true, columns predicted)")?;
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
            writeln!(f, "{}", cells.join(""))?;
        }
        Ok(())
    }
}
