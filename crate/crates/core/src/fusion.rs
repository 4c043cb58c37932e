//! Attention over the fused sequence, the emotion head, and the
//! parameter accounting against a six-module cross-modal transformer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::ModalityEncoder;
use crate::config::ModelConfig;
use crate::data::{Modality, NUM_CLASSES};
use crate::dcca::ViewEncoderParams;
use crate::error::{Error, Result};
use crate::gradcheck::Parameters;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Single-head attention over the fused sequence plus the linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedAttentionParams {
    /// `[(d_r + 1) x d_t]`
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// `[(d_t + 1) x 6]`
    pub w_cls: Tensor,
}

impl FusedAttentionParams {
    pub fn new<R: Rng + ?Sized>(d_r: usize, d_t: usize, rng: &mut R) -> Self {
        Self {
            w_q: Tensor::glorot(&[d_r + 1, d_t], d_r, d_t, rng),
            w_k: Tensor::glorot(&[d_r + 1, d_t], d_r, d_t, rng),
            w_v: Tensor::glorot(&[d_r + 1, d_t], d_r, d_t, rng),
            w_cls: Tensor::glorot(&[d_t + 1, NUM_CLASSES], d_t, NUM_CLASSES, rng),
        }
    }

    pub fn closed_form_count(d_r: usize, d_t: usize) -> usize {
        3 * (d_r + 1) * d_t + (d_t + 1) * NUM_CLASSES
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundFused {
        BoundFused {
            w_q: tape.param(&self.w_q),
            w_k: tape.param(&self.w_k),
            w_v: tape.param(&self.w_v),
            w_cls: tape.param(&self.w_cls),
        }
    }
}

impl Parameters for FusedAttentionParams {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w_q, &self.w_k, &self.w_v, &self.w_cls]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_cls]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundFused {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_cls: Var,
}

/// `softmax(Q Kᵀ / √d_t) V` over the fused sequence. Padded keys get zero
/// weight; padded query rows attend to themselves only.
pub fn multimodal_attention(tape: &mut Tape, y: Var, p: &BoundFused, mask: &[bool]) -> Result<Var> {
    let t = tape.value(y).rows();
    if mask.len() != t {
        return Err(Error::shape("multimodal_attention", tape.value(y).shape(), &[mask.len()]));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Empty("fused sequence has no valid timesteps".into()));
    }
    let q = tape.linear(y, p.w_q)?;
    let k = tape.linear(y, p.w_k)?;
    let v = tape.linear(y, p.w_v)?;
    let d_t = tape.value(q).cols();
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (d_t as f64).sqrt())?;
    let full = crate::attention::attention_mask(mask, None, false);
    let w = tape.masked_softmax(logits, Some(&full))?;
    tape.matmul(w, v)
}

/// Mean over valid timesteps followed by the linear head; `[1 x 6]` logits.
pub fn class_logits(tape: &mut Tape, z: Var, mask: &[bool], w_cls: Var) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Empty("nothing to pool".into()));
    }
    let pooled = tape.masked_mean_rows(z, mask)?;
    tape.linear(pooled, w_cls)
}

/// Class probabilities for a fused attention output.
pub fn classify(z: &Tensor, mask: &[bool], w_cls: &Tensor) -> Result<[f64; NUM_CLASSES]> {
    let mut tape = Tape::new();
    let z = tape.constant(z.clone());
    let w = tape.constant(w_cls.clone());
    let logits = class_logits(&mut tape, z, mask, w)?;
    let mut out = [0.0; NUM_CLASSES];
    out.copy_from_slice(tape.value(logits).data());
    Ok(softmax(&out))
}

pub fn softmax(logits: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.map(|l| (l - max).exp());
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= s);
    out
}

/// Weights of one cross-modal attention head: queries from the target,
/// keys and values from the source. Bias in the last row.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossModalWeights {
    /// `[(d_α + 1) x d_k]`
    pub w_q: Tensor,
    /// `[(d_β + 1) x d_k]`
    pub w_k: Tensor,
    /// `[(d_β + 1) x d_v]`
    pub w_v: Tensor,
}

/// `softmax(Q_α K_βᵀ / √d_k) V_β`, shape `[T_α x d_v]`.
pub fn cross_modal_attention(x_alpha: &Tensor, x_beta: &Tensor, w: &CrossModalWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xa = tape.constant(x_alpha.clone());
    let xb = tape.constant(x_beta.clone());
    let (wq, wk, wv) = (
        tape.constant(w.w_q.clone()),
        tape.constant(w.w_k.clone()),
        tape.constant(w.w_v.clone()),
    );
    let q = tape.linear(xa, wq)?;
    let k = tape.linear(xb, wk)?;
    let v = tape.linear(xb, wv)?;
    if tape.value(q).cols() != tape.value(k).cols() {
        return Err(Error::shape("cross_modal_attention", w.w_q.shape(), w.w_k.shape()));
    }
    let d_k = tape.value(q).cols();
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (d_k as f64).sqrt())?;
    let a = tape.masked_softmax(logits, None)?;
    let y = tape.matmul(a, v)?;
    Ok(tape.value(y).clone())
}

/// Dimensions of the six-module cross-modal transformer used for the
/// parameter comparison. Normalisation layers are not counted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultReferenceConfig {
    /// Input feature widths in `L, V, A` order.
    pub input_dims: [usize; 3],
    /// Shared model width after the embedding convolutions.
    pub d: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub heads: usize,
    pub depth: usize,
    pub kernel: usize,
    /// Hidden width of each block's feed-forward sublayer (0 drops it).
    pub ff_hidden: usize,
    /// Sequence lengths; positions are sinusoidal, so these add no parameters.
    pub seq_lens: [usize; 3],
}

impl MultReferenceConfig {
    /// Reference dimensions matched to `cfg`: the shared width is the
    /// embedding width, heads and depth follow the delta encoders.
    pub fn matched(cfg: &ModelConfig) -> Self {
        Self {
            input_dims: Modality::ALL.map(|m| cfg.input_dim(m)),
            d: cfg.d_ch,
            d_k: cfg.d_k,
            d_v: cfg.d_v,
            heads: cfg.heads,
            depth: cfg.layers,
            kernel: cfg.kernel,
            ff_hidden: 4 * cfg.d_ch,
            seq_lens: [cfg.t_max; 3],
        }
    }

    /// One cross-modal attention sublayer (all heads and the output projection).
    pub fn attention_block_count(&self) -> usize {
        let d = self.d;
        self.heads * (2 * (d + 1) * self.d_k + (d + 1) * self.d_v) + (self.heads * self.d_v + 1) * d
    }

    /// Every trainable tensor of the reference, named, with its shape.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let d = self.d;
        for (m, &dm) in Modality::ALL.iter().zip(&self.input_dims) {
            out.push((format!("embed.{m}"), vec![self.kernel, dm, d]));
        }
        for target in Modality::ALL {
            for source in Modality::ALL.into_iter().filter(|&s| s != target) {
                for i in 0..self.depth {
                    let p = format!("{source}->{target}.{i}");
                    for h in 0..self.heads {
                        out.push((format!("{p}.h{h}.w_q"), vec![d + 1, self.d_k]));
                        out.push((format!("{p}.h{h}.w_k"), vec![d + 1, self.d_k]));
                        out.push((format!("{p}.h{h}.w_v"), vec![d + 1, self.d_v]));
                    }
                    out.push((format!("{p}.w_o"), vec![self.heads * self.d_v + 1, d]));
                    if self.ff_hidden > 0 {
                        out.push((format!("{p}.ff1"), vec![d + 1, self.ff_hidden]));
                        out.push((format!("{p}.ff2"), vec![self.ff_hidden + 1, d]));
                    }
                }
            }
        }
        if self.depth > 0 {
            out.push(("head".into(), vec![6 * d + 1, NUM_CLASSES]));
        }
        out
    }
}

/// Closed-form count of the cross-modal reference.
pub fn mult_reference_param_count(cfg: &MultReferenceConfig) -> usize {
    let d = cfg.d;
    let embed: usize = cfg.input_dims.iter().map(|&dm| cfg.kernel * dm * d).sum();
    if cfg.depth == 0 {
        return embed;
    }
    let ff = if cfg.ff_hidden > 0 {
        (d + 1) * cfg.ff_hidden + (cfg.ff_hidden + 1) * d
    } else {
        0
    };
    embed + 6 * cfg.depth * (cfg.attention_block_count() + ff) + (6 * d + 1) * NUM_CLASSES
}

/// Closed-form count over every trainable tensor of the proposed pipeline:
/// three delta encoders with their heads, three view encoders and the fused
/// attention head.
pub fn model_param_count(cfg: &ModelConfig) -> usize {
    let encoders: usize = Modality::ALL
        .iter()
        .map(|&m| ModalityEncoder::closed_form_count(&cfg.attention(m)))
        .sum();
    let views = 3 * ViewEncoderParams::closed_form_count(cfg.view_kernel, cfg.d_o, cfg.d_mid, cfg.d_r);
    encoders + views + FusedAttentionParams::closed_form_count(cfg.d_r, cfg.d_t)
}

/// Parameters in the attention modules alone, `(proposed, reference)`:
/// three delta self-attention stacks against six cross-modal stacks, with
/// the relative-position tables optionally left out.
pub fn attention_module_counts(cfg: &ModelConfig, reference: &MultReferenceConfig, include_relpos: bool) -> (usize, usize) {
    let ours: usize = Modality::ALL
        .iter()
        .map(|&m| {
            let a = cfg.attention(m);
            let per_layer = a.heads * (2 * (a.d_ch + 1) * a.d_k + (a.d_ch + 1) * a.d_v)
                + (a.heads * a.d_v + 1) * a.d_o
                + if include_relpos { a.d_ch * a.t_max } else { 0 };
            a.layers * per_layer
        })
        .sum();
    (ours, 6 * reference.depth * reference.attention_block_count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bound(tape: &mut Tape, p: &FusedAttentionParams) -> BoundFused {
        p.bind(tape)
    }

    #[test]
    fn single_row_returns_its_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = FusedAttentionParams::new(3, 4, &mut rng);
        let mut tape = Tape::new();
        let b = bound(&mut tape, &p);
        let y = tape.constant(Tensor::from_vec(&[1, 3], vec![0.5, -1.0, 2.0]));
        let z = multimodal_attention(&mut tape, y, &b, &[true]).unwrap();
        let v = tape.linear(y, b.w_v).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(v).data());
    }

    #[test]
    fn all_masked_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = FusedAttentionParams::new(2, 2, &mut rng);
        let mut tape = Tape::new();
        let b = bound(&mut tape, &p);
        let y = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(multimodal_attention(&mut tape, y, &b, &[false, false]).is_err());
    }

    #[test]
    fn zero_head_is_uniform() {
        let z = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = classify(&z, &[true, true], &Tensor::zeros(&[4, 6])).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn duplicating_timesteps_keeps_the_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::glorot(&[4, 6], 3, 6, &mut rng);
        let z = Tensor::glorot(&[3, 3], 3, 3, &mut rng);
        let mut rows = z.to_rows();
        rows.extend(z.to_rows());
        let z2 = Tensor::from_rows(&rows).unwrap();
        let a = classify(&z, &[true; 3], &w).unwrap();
        let b = classify(&z2, &[true; 6], &w).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn single_source_row_broadcasts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = CrossModalWeights {
            w_q: Tensor::glorot(&[3, 2], 2, 2, &mut rng),
            w_k: Tensor::glorot(&[4, 2], 3, 2, &mut rng),
            w_v: Tensor::glorot(&[4, 5], 3, 5, &mut rng),
        };
        let xa = Tensor::glorot(&[4, 2], 1, 1, &mut rng);
        let xb = Tensor::from_vec(&[1, 3], vec![1.0, -2.0, 0.5]);
        let y = cross_modal_attention(&xa, &xb, &w).unwrap();
        assert_eq!(y.shape(), &[4, 5]);
        let v = [xb.data(), &[1.0]].concat();
        for r in 0..4 {
            for c in 0..5 {
                let expect: f64 = (0..4).map(|k| v[k] * w.w_v.get(k, c)).sum();
                assert!((y.get(r, c) - expect).abs() < 1e-14);
            }
        }
        let bad = Tensor::zeros(&[1, 2]);
        assert!(cross_modal_attention(&xa, &bad, &w).is_err());
    }

    #[test]
    fn reference_count_matches_enumeration() {
        let cfg = MultReferenceConfig::matched(&ModelConfig::default());
        let enumerated: usize = cfg.shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        assert_eq!(enumerated, mult_reference_param_count(&cfg));
        let zero = MultReferenceConfig { depth: 0, ..cfg };
        assert_eq!(mult_reference_param_count(&zero), 3 * (8 + 12 + 10) * 16);
    }

    #[test]
    fn more_heads_do_not_add_relpos_tables() {
        let base = ModelConfig::default();
        let more = ModelConfig { heads: base.heads + 1, ..base.clone() };
        let per_head = 2 * (base.d_ch + 1) * base.d_k + (base.d_ch + 1) * base.d_v;
        let w_o_growth = base.d_v * base.d_o;
        assert_eq!(
            model_param_count(&more) - model_param_count(&base),
            3 * (per_head + w_o_growth)
        );
    }
}
