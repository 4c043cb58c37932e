//! Per-modality delta self-attention.
//!
//! Logits combine the usual `Q Kᵀ` term with relative-position logits built
//! from feature differences between timesteps, so a constant per-feature
//! shift of the embedded sequence leaves the positional term untouched.

use rand::Rng;

use crate::config::AttentionConfig;
use crate::data::{Modality, ModalitySequence, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::gradcheck::Parameters;
use crate::tape::{relpos_forward, Tape, Var};
use crate::tensor::Tensor;

/// Query/key/value projections of one head; the bias is the last row.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaHeadParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

/// One multi-head layer. The relative-position table is shared by all heads.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaLayer {
    pub heads: Vec<DeltaHeadParams>,
    /// `[d_ch x T_max]`
    pub w_relpos: Tensor,
    /// `[(H·d_v + 1) x d_o]`
    pub w_o: Tensor,
}

/// Head weights registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

impl DeltaHeadParams {
    pub fn bind(&self, tape: &mut Tape) -> BoundHead {
        BoundHead {
            w_q: tape.param(&self.w_q),
            w_k: tape.param(&self.w_k),
            w_v: tape.param(&self.w_v),
        }
    }
}

/// `mask[i][j] = |i − j| ≤ w`; `None` is an unbounded window.
pub fn window_mask(t: usize, w: Option<usize>) -> Vec<bool> {
    let mut out = vec![true; t * t];
    if let Some(w) = w {
        for i in 0..t {
            for j in 0..t {
                out[i * t + j] = i.abs_diff(j) <= w;
            }
        }
    }
    out
}

/// Full `T x T` attention mask: valid keys inside the window, restricted to
/// keys at or after the query when `causal`. Padded query rows keep their
/// own diagonal so no row is ever empty.
pub fn attention_mask(valid: &[bool], window: Option<usize>, causal: bool) -> Vec<bool> {
    let t = valid.len();
    let mut out = window_mask(t, window);
    for i in 0..t {
        for j in 0..t {
            let keep = (valid[j] || (i == j && !valid[i])) && (!causal || i <= j);
            out[i * t + j] = out[i * t + j] && keep;
        }
    }
    out
}

/// `RPE[i][j] = (x̂_j − x̂_i) · column_j(W_RelPos)`.
pub fn relative_position_logits(x_hat: &Tensor, w_relpos: &Tensor) -> Result<Tensor> {
    relpos_forward(x_hat, w_relpos)
}

/// Attention weights `softmax((Q Kᵀ + RPE) / √d_k)` and the value rows.
pub fn delta_attention(
    tape: &mut Tape,
    x_hat: Var,
    head: &BoundHead,
    w_relpos: Var,
    mask: &[bool],
) -> Result<(Var, Var)> {
    let q = tape.linear(x_hat, head.w_q)?;
    let k = tape.linear(x_hat, head.w_k)?;
    let v = tape.linear(x_hat, head.w_v)?;
    let d_k = tape.value(q).cols();
    let kt = tape.transpose(k)?;
    let qk = tape.matmul(q, kt)?;
    let rpe = tape.relative_position(x_hat, w_relpos)?;
    let logits = tape.add(qk, rpe)?;
    let logits = tape.scale(logits, 1.0 / (d_k as f64).sqrt())?;
    let weights = tape.masked_softmax(logits, Some(mask))?;
    Ok((weights, v))
}

pub fn delta_head(tape: &mut Tape, x_hat: Var, head: &BoundHead, w_relpos: Var, mask: &[bool]) -> Result<Var> {
    let (w, v) = delta_attention(tape, x_hat, head, w_relpos, mask)?;
    tape.matmul(w, v)
}

/// Concatenates every head's output on the feature axis and projects with `W_O`.
pub fn multi_head_delta(
    tape: &mut Tape,
    x_hat: Var,
    heads: &[BoundHead],
    w_relpos: Var,
    w_o: Var,
    mask: &[bool],
) -> Result<Var> {
    if heads.is_empty() {
        return Err(Error::Config("multi-head attention needs at least one head".into()));
    }
    let outs = heads
        .iter()
        .map(|h| delta_head(tape, x_hat, h, w_relpos, mask))
        .collect::<Result<Vec<_>>>()?;
    let z = tape.concat(&outs, 1)?;
    tape.linear(z, w_o)
}

/// Convolves over time; padded rows are zeroed on the way in and out.
pub fn temporal_embed(tape: &mut Tape, x: Var, kernel: Var, mask: &[bool]) -> Result<Var> {
    let x = tape.mask_rows(x, mask)?;
    let y = tape.conv1d(x, kernel)?;
    tape.mask_rows(y, mask)
}

/// Temporal convolution, stacked delta self-attention layers, a learned
/// classification token and a 6-way unimodal head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityEncoder {
    pub modality: Modality,
    pub cfg: AttentionConfig,
    /// `[k x d_in x d_ch]`
    pub kernel: Tensor,
    pub layers: Vec<DeltaLayer>,
    /// `[1 x d_ch]`
    pub cls_token: Tensor,
    /// `[(d_o + 1) x 6]`
    pub head: Tensor,
}

/// Tape handles produced by [`ModalityEncoder::forward`].
pub struct EncoderOutput {
    /// `[1 x 6]`
    pub logits: Var,
    /// `[(T + 1) x d_o]`, classification token first.
    pub sequence: Var,
    /// Validity mask of `sequence`.
    pub mask: Vec<bool>,
}

impl ModalityEncoder {
    pub fn new<R: Rng + ?Sized>(modality: Modality, cfg: AttentionConfig, rng: &mut R) -> Self {
        let kernel = Tensor::glorot(
            &[cfg.kernel, cfg.d_in, cfg.d_ch],
            cfg.kernel * cfg.d_in,
            cfg.d_ch,
            rng,
        );
        let layers = (0..cfg.layers)
            .map(|_| {
                let heads = (0..cfg.heads)
                    .map(|_| DeltaHeadParams {
                        w_q: Tensor::glorot(&[cfg.d_ch + 1, cfg.d_k], cfg.d_ch, cfg.d_k, rng),
                        w_k: Tensor::glorot(&[cfg.d_ch + 1, cfg.d_k], cfg.d_ch, cfg.d_k, rng),
                        w_v: Tensor::glorot(&[cfg.d_ch + 1, cfg.d_v], cfg.d_ch, cfg.d_v, rng),
                    })
                    .collect();
                DeltaLayer {
                    heads,
                    w_relpos: Tensor::zeros(&[cfg.d_ch, cfg.t_max]).into_param(),
                    w_o: Tensor::glorot(&[cfg.heads * cfg.d_v + 1, cfg.d_o], cfg.heads * cfg.d_v, cfg.d_o, rng),
                }
            })
            .collect();
        let cls_token = Tensor::glorot(&[1, cfg.d_ch], 1, cfg.d_ch, rng);
        let head = Tensor::glorot(&[cfg.d_o + 1, NUM_CLASSES], cfg.d_o, NUM_CLASSES, rng);
        Self {
            modality,
            cfg,
            kernel,
            layers,
            cls_token,
            head,
        }
    }

    /// Closed-form parameter count for `cfg`.
    pub fn closed_form_count(cfg: &AttentionConfig) -> usize {
        let conv = cfg.kernel * cfg.d_in * cfg.d_ch;
        let per_head = 2 * (cfg.d_ch + 1) * cfg.d_k + (cfg.d_ch + 1) * cfg.d_v;
        let per_layer = cfg.heads * per_head + cfg.d_ch * cfg.t_max + (cfg.heads * cfg.d_v + 1) * cfg.d_o;
        conv + cfg.layers * per_layer + cfg.d_ch + (cfg.d_o + 1) * NUM_CLASSES
    }

    /// Parameters in the relative-position tables.
    pub fn relpos_count(cfg: &AttentionConfig) -> usize {
        cfg.layers * cfg.d_ch * cfg.t_max
    }

    /// Embeds, prefixes the classification token and runs every layer.
    pub fn forward(&self, tape: &mut Tape, seq: &ModalitySequence) -> Result<EncoderOutput> {
        if seq.modality != self.modality {
            return Err(Error::Config(format!(
                "{} encoder given a {} sequence",
                self.modality, seq.modality
            )));
        }
        if seq.is_empty() || seq.valid_count() == 0 {
            return Err(Error::Empty(format!("{} sequence has no valid timesteps", seq.modality)));
        }
        if seq.dim != self.cfg.d_in {
            return Err(Error::shape("temporal_embed", &[seq.len(), seq.dim], self.kernel.shape()));
        }
        if seq.len() + 1 > self.cfg.t_max {
            return Err(Error::Capacity {
                len: seq.len() + 1,
                capacity: self.cfg.t_max,
            });
        }
        let x = tape.constant(seq.to_tensor()?);
        let kernel = tape.param(&self.kernel);
        let x_hat = temporal_embed(tape, x, kernel, &seq.mask)?;
        let cls = tape.param(&self.cls_token);
        let mut h = tape.concat(&[cls, x_hat], 0)?;

        let mut mask = Vec::with_capacity(seq.len() + 1);
        mask.push(true);
        mask.extend_from_slice(&seq.mask);
        let attn_mask = attention_mask(&mask, self.cfg.window, self.cfg.causal);

        for layer in &self.layers {
            let heads: Vec<BoundHead> = layer.heads.iter().map(|p| p.bind(tape)).collect();
            let w_rel = tape.param(&layer.w_relpos);
            let w_o = tape.param(&layer.w_o);
            h = multi_head_delta(tape, h, &heads, w_rel, w_o, &attn_mask)?;
        }
        let token = tape.slice_rows(h, 0, 1)?;
        let w_head = tape.param(&self.head);
        let logits = tape.linear(token, w_head)?;
        Ok(EncoderOutput {
            logits,
            sequence: h,
            mask,
        })
    }

    /// Unimodal class logits.
    pub fn unimodal_forward(&self, seq: &ModalitySequence) -> Result<[f64; NUM_CLASSES]> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, seq)?;
        let mut logits = [0.0; NUM_CLASSES];
        logits.copy_from_slice(tape.value(out.logits).data());
        Ok(logits)
    }

    /// Self-attended sequence `[(T + 1) x d_o]`: the classification token
    /// row first, then the data timesteps with padded rows zeroed.
    pub fn representation(&self, seq: &ModalitySequence) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, seq)?;
        let y = tape.mask_rows(out.sequence, &out.mask)?;
        Ok(tape.value(y).clone())
    }
}

impl Parameters for ModalityEncoder {
    fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.kernel];
        for l in &self.layers {
            for h in &l.heads {
                out.extend([&h.w_q, &h.w_k, &h.w_v]);
            }
            out.extend([&l.w_relpos, &l.w_o]);
        }
        out.extend([&self.cls_token, &self.head]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.kernel];
        for l in &mut self.layers {
            for h in &mut l.heads {
                out.extend([&mut h.w_q, &mut h.w_k, &mut h.w_v]);
            }
            out.extend([&mut l.w_relpos, &mut l.w_o]);
        }
        out.extend([&mut self.cls_token, &mut self.head]);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> AttentionConfig {
        AttentionConfig {
            d_in: 3,
            d_ch: 4,
            d_k: 2,
            d_v: 4,
            d_o: 4,
            heads: 2,
            layers: 1,
            kernel: 3,
            window: None,
            causal: false,
            t_max: 8,
        }
    }

    fn seq(t: usize, seed: u64) -> ModalitySequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = (0..t).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let iv = (0..t).map(|i| (i as f64, i as f64 + 1.0)).collect();
        ModalitySequence::new(Modality::V, feats, iv).unwrap()
    }

    #[test]
    fn window_mask_examples() {
        assert!(window_mask(4, Some(3)).iter().all(|&m| m));
        assert!(window_mask(4, None).iter().all(|&m| m));
        let eye = window_mask(3, Some(0));
        assert_eq!(eye, vec![true, false, false, false, true, false, false, false, true]);
        let tri = window_mask(3, Some(1));
        assert_eq!(tri, vec![true, true, false, true, true, true, false, true, true]);
    }

    #[test]
    fn causal_mask_keeps_later_keys() {
        let m = attention_mask(&[true, true, true], None, true);
        assert_eq!(m, vec![true, true, true, false, true, true, false, false, true]);
    }

    #[test]
    fn padded_queries_keep_their_diagonal() {
        let m = attention_mask(&[true, false, true], Some(0), false);
        assert_eq!(m, vec![true, false, false, false, true, false, false, false, true]);
    }

    #[test]
    fn rpe_zero_for_constant_sequences() {
        let x = Tensor::from_vec(&[3, 2], vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
        let w = Tensor::from_vec(&[2, 4], (0..8).map(|i| i as f64 * 0.3 - 1.0).collect());
        let r = relative_position_logits(&x, &w).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_timestep_returns_its_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = DeltaHeadParams {
            w_q: Tensor::glorot(&[3, 2], 2, 2, &mut rng),
            w_k: Tensor::glorot(&[3, 2], 2, 2, &mut rng),
            w_v: Tensor::glorot(&[3, 2], 2, 2, &mut rng),
        };
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[1, 2], vec![0.3, -0.7]));
        let h = head.bind(&mut tape);
        let w = tape.constant(Tensor::full(&[2, 4], 0.9));
        let out = delta_head(&mut tape, x, &h, w, &[true]).unwrap();
        let v = tape.linear(x, h.w_v).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(v).data());
    }

    #[test]
    fn encoder_param_count_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for layers in [1, 2] {
            let c = AttentionConfig { layers, ..cfg() };
            let enc = ModalityEncoder::new(Modality::V, c.clone(), &mut rng);
            assert_eq!(enc.param_count(), ModalityEncoder::closed_form_count(&c));
        }
    }

    #[test]
    fn extra_head_adds_only_projections() {
        let one = cfg();
        let two = AttentionConfig { heads: 2, ..one.clone() };
        let one = AttentionConfig { heads: 1, ..one };
        let diff = ModalityEncoder::closed_form_count(&two) - ModalityEncoder::closed_form_count(&one);
        let qkv = 2 * (one.d_ch + 1) * one.d_k + (one.d_ch + 1) * one.d_v;
        assert_eq!(diff, qkv + one.d_v * one.d_o);
    }

    #[test]
    fn extra_layer_adds_one_relpos_table() {
        let c1 = cfg();
        let c2 = AttentionConfig { layers: 2, ..cfg() };
        assert_eq!(
            ModalityEncoder::relpos_count(&c2) - ModalityEncoder::relpos_count(&c1),
            c1.d_ch * c1.t_max
        );
    }

    #[test]
    fn pad_values_do_not_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = ModalityEncoder::new(Modality::V, cfg(), &mut rng);
        let mut s = seq(5, 9);
        s.mask[1] = false;
        s.features[1] = vec![0.0; 3];
        s.mask[3] = false;
        s.features[3] = vec![0.0; 3];
        let base = enc.unimodal_forward(&s).unwrap();
        s.features[1] = vec![5.0, -2.0, 7.0];
        s.features[3] = vec![-1.0, 0.5, 3.0];
        assert_eq!(enc.unimodal_forward(&s).unwrap(), base);
        s.features.swap(1, 3);
        assert_eq!(enc.unimodal_forward(&s).unwrap(), base);
    }

    #[test]
    fn rejects_long_and_empty_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = ModalityEncoder::new(Modality::V, cfg(), &mut rng);
        assert!(matches!(enc.unimodal_forward(&seq(8, 1)), Err(Error::Capacity { .. })));
        let mut s = seq(2, 1);
        s.mask = vec![false, false];
        s.features = vec![vec![0.0; 3]; 2];
        assert!(enc.unimodal_forward(&s).is_err());
    }
}
