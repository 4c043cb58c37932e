//! Pad-and-stack alignment against a reference modality.

use serde::{Deserialize, Serialize};

use super::types::{AlignedSample, Modality, ModalitySequence};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    /// Group every stream under the verbal intervals.
    #[default]
    Aligned,
    /// Streams pass through untouched; only masks are used.
    Unaligned,
}

impl AlignMode {
    pub fn parse(s: &str) -> Option<AlignMode> {
        match s {
            "aligned" => Some(AlignMode::Aligned),
            "unaligned" => Some(AlignMode::Unaligned),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AlignMode::Aligned => "aligned",
            AlignMode::Unaligned => "unaligned",
        }
    }
}

/// Applies the preprocessing path for `mode`.
pub fn prepare(sample: &AlignedSample, mode: AlignMode) -> Result<AlignedSample> {
    match mode {
        AlignMode::Aligned => align_to_reference(sample, Modality::L),
        AlignMode::Unaligned => Ok(sample.clone()),
    }
}

fn overlaps(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0.max(b.0) < a.1.min(b.1)
}

/// Groups each non-reference timestep under the earliest reference interval
/// it overlaps with positive measure, pads every group to a common size with
/// zero rows, and drops content outside all reference intervals. Padded
/// input rows are ignored, so aligning twice is the same as aligning once.
pub fn align_to_reference(sample: &AlignedSample, reference: Modality) -> Result<AlignedSample> {
    let rseq = sample.seq(reference);
    let refs: Vec<(usize, (f64, f64))> = (0..rseq.len())
        .filter(|&t| rseq.mask[t])
        .map(|t| (t, rseq.intervals[t]))
        .collect();
    if refs.is_empty() {
        return Err(Error::Empty(format!("reference modality {reference} has no valid timesteps")));
    }

    // groups[m][i] = rows of modality m assigned to reference interval i
    let mut groups: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); refs.len()]; 3];
    for m in Modality::ALL {
        let s = sample.seq(m);
        if m == reference {
            for (i, &(t, _)) in refs.iter().enumerate() {
                groups[m.index()][i].push(t);
            }
            continue;
        }
        for t in (0..s.len()).filter(|&t| s.mask[t]) {
            if let Some(i) = refs.iter().position(|&(_, r)| overlaps(s.intervals[t], r)) {
                groups[m.index()][i].push(t);
            }
        }
    }
    let sizes: Vec<usize> = (0..refs.len())
        .map(|i| groups.iter().map(|g| g[i].len()).max().unwrap_or(0).max(1))
        .collect();

    let mut out = sample.clone();
    for m in Modality::ALL {
        let s = sample.seq(m);
        let total: usize = sizes.iter().sum();
        let mut features = Vec::with_capacity(total);
        let mut intervals = Vec::with_capacity(total);
        let mut mask = Vec::with_capacity(total);
        let mut last_start = f64::NEG_INFINITY;
        for (i, &size) in sizes.iter().enumerate() {
            let rows = &groups[m.index()][i];
            for &t in rows {
                features.push(s.features[t].clone());
                intervals.push(s.intervals[t]);
                mask.push(true);
                last_start = last_start.max(s.intervals[t].0);
            }
            let pad_at = last_start.max(refs[i].1 .0);
            for _ in rows.len()..size {
                features.push(vec![0.0; s.dim]);
                intervals.push((pad_at, pad_at));
                mask.push(false);
                last_start = pad_at;
            }
        }
        *out.seq_mut(m) = ModalitySequence {
            modality: m,
            dim: s.dim,
            features,
            intervals,
            mask,
        };
    }
    Ok(out)
}

/// Per-modality validity masks in `L, V, A` order.
pub fn build_masks(sample: &AlignedSample) -> [Vec<bool>; 3] {
    Modality::ALL.map(|m| sample.seq(m).mask.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(m: Modality, iv: &[(f64, f64)], base: f64) -> ModalitySequence {
        let feats = (0..iv.len()).map(|i| vec![base + i as f64 + 1.0]).collect();
        ModalitySequence::new(m, feats, iv.to_vec()).unwrap()
    }

    fn sample(l: &[(f64, f64)], v: &[(f64, f64)], a: &[(f64, f64)]) -> AlignedSample {
        AlignedSample {
            id: "s".into(),
            l: seq(Modality::L, l, 0.0),
            v: seq(Modality::V, v, 100.0),
            a: seq(Modality::A, a, 200.0),
            labels: [0.0; 7],
        }
    }

    #[test]
    fn matching_intervals_are_a_fixed_point() {
        let iv = [(0.0, 1.0), (1.0, 2.0), (2.0, 3.0)];
        let s = sample(&iv, &iv, &iv);
        let out = align_to_reference(&s, Modality::L).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn single_reference_interval_stacks_everything() {
        let s = sample(
            &[(0.0, 10.0)],
            &[(0.0, 1.0), (1.0, 2.0), (2.0, 3.0)],
            &[(0.0, 5.0), (5.0, 10.0)],
        );
        let out = align_to_reference(&s, Modality::L).unwrap();
        assert_eq!(out.l.len(), 3);
        assert_eq!(out.l.mask, vec![true, false, false]);
        assert_eq!(out.v.mask, vec![true, true, true]);
        assert_eq!(out.a.mask, vec![true, true, false]);
        assert_eq!(out.a.features[2], vec![0.0]);
        out.l.validate().unwrap();
        out.a.validate().unwrap();
    }

    #[test]
    fn empty_reference_is_an_error() {
        let mut s = sample(&[(0.0, 1.0)], &[(0.0, 1.0)], &[(0.0, 1.0)]);
        s.l.mask = vec![false];
        s.l.features = vec![vec![0.0]];
        assert!(align_to_reference(&s, Modality::L).is_err());
    }

    #[test]
    fn boundary_frames_go_to_the_earlier_interval() {
        // the V frame straddles both words; the A frame only touches the boundary
        let s = sample(&[(0.0, 1.0), (1.0, 2.0)], &[(0.5, 1.5)], &[(1.0, 1.0), (1.0, 1.8)]);
        let out = align_to_reference(&s, Modality::L).unwrap();
        assert_eq!(out.v.mask, vec![true, false]);
        assert_eq!(out.a.mask, vec![false, true]);
        assert_eq!(out.a.features[1], vec![202.0]);
    }

    #[test]
    fn masks_are_copied_out() {
        let s = sample(&[(0.0, 10.0)], &[(0.0, 1.0), (1.0, 2.0)], &[(0.0, 1.0)]);
        let out = align_to_reference(&s, Modality::L).unwrap();
        let [l, v, a] = build_masks(&out);
        assert_eq!(l, vec![true, false]);
        assert_eq!(v, vec![true, true]);
        assert_eq!(a, vec![true, false]);
        let [l, v, a] = build_masks(&s);
        assert!(l.iter().chain(&v).chain(&a).all(|&m| m));
    }
}
