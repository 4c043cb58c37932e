//! The assembled pipeline: three delta encoders, three view encoders, a
//! fitted CCA solution and the fused attention head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::ModalityEncoder;
use crate::config::{ModelConfig, StageTag};
use crate::data::{AlignedSample, Modality, NUM_CLASSES};
use crate::dcca::{self, CcaSolution, ViewEncoderParams};
use crate::error::{Error, Result};
use crate::fusion::{self, FusedAttentionParams};
use crate::gradcheck::Parameters;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Independent random stream for one component, so any subset of stages
/// initialises identically regardless of what else is built.
pub fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline {
    pub cfg: ModelConfig,
    /// `L, V, A` order.
    pub encoders: [ModalityEncoder; 3],
    pub views: [ViewEncoderParams; 3],
    pub cca: CcaSolution,
    pub fused: FusedAttentionParams,
}

impl Pipeline {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let encoders = Modality::ALL.map(|m| {
            ModalityEncoder::new(m, cfg.attention(m), &mut component_rng(seed, m.index() as u64))
        });
        let views = Modality::ALL.map(|m| {
            ViewEncoderParams::new(
                cfg.view_kernel,
                cfg.d_o,
                cfg.d_mid,
                cfg.d_r,
                &mut component_rng(seed, 3 + m.index() as u64),
            )
        });
        let fused = FusedAttentionParams::new(cfg.d_r, cfg.d_t, &mut component_rng(seed, 6));
        Ok(Self {
            cca: CcaSolution {
                reg: cfg.cca_reg,
                components: cfg.components(),
                ..CcaSolution::identity(cfg.d_r)
            },
            cfg,
            encoders,
            views,
            fused,
        })
    }

    pub fn encoder(&self, m: Modality) -> &ModalityEncoder {
        &self.encoders[m.index()]
    }

    /// Unimodal class probabilities.
    pub fn unimodal_probs(&self, m: Modality, s: &AlignedSample) -> Result<[f64; NUM_CLASSES]> {
        Ok(fusion::softmax(&self.encoder(m).unimodal_forward(s.seq(m))?))
    }

    /// Self-attended sequences of every stream (`[(T_M + 1) x d_o]`, token first).
    pub fn representations(&self, s: &AlignedSample) -> Result<[Tensor; 3]> {
        let [l, v, a] = &self.encoders;
        Ok([
            l.representation(&s.l)?,
            v.representation(&s.v)?,
            a.representation(&s.a)?,
        ])
    }

    /// View-encoder outputs for precomputed representations.
    pub fn encode_views(&self, reps: &[Tensor; 3]) -> Result<[Tensor; 3]> {
        let mut tape = Tape::new();
        let mut out = Vec::with_capacity(3);
        for (rep, view) in reps.iter().zip(&self.views) {
            let y = tape.constant(rep.clone());
            let e = dcca::encode_view(&mut tape, y, view)?;
            out.push(tape.value(e).clone());
        }
        Ok(out.try_into().expect("three views"))
    }

    /// Fused sequence and mask fed to the final attention block.
    pub fn fused_input(&self, s: &AlignedSample) -> Result<(Tensor, Vec<bool>)> {
        let enc = self.encode_views(&self.representations(s)?)?;
        let [ml, mv, ma] = Modality::ALL.map(|m| dcca::token_mask(s.seq(m)));
        dcca::fused_representation([&enc[0], &enc[1], &enc[2]], [&ml, &mv, &ma], &self.cca)
    }

    /// Fused class logits for a precomputed fused input.
    pub fn fused_logits(&self, fused: &Tensor, mask: &[bool]) -> Result<[f64; NUM_CLASSES]> {
        let mut tape = Tape::new();
        let p = self.fused.bind(&mut tape);
        let y = tape.constant(fused.clone());
        let z = fusion::multimodal_attention(&mut tape, y, &p, mask)?;
        let logits = fusion::class_logits(&mut tape, z, mask, p.w_cls)?;
        let mut out = [0.0; NUM_CLASSES];
        out.copy_from_slice(tape.value(logits).data());
        Ok(out)
    }

    /// Fused class probabilities for one (already preprocessed) sample.
    pub fn predict(&self, s: &AlignedSample) -> Result<[f64; NUM_CLASSES]> {
        let (fused, mask) = self.fused_input(s)?;
        Ok(fusion::softmax(&self.fused_logits(&fused, &mask)?))
    }

    /// Loss through every stage on one tape: unimodal and fused
    /// cross-entropy averaged over `batch`, minus the summed canonical
    /// correlations of the batch. The CCA projections are held fixed.
    pub fn joint_loss(&self, tape: &mut Tape, batch: &[&AlignedSample]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Empty("empty batch".into()));
        }
        let fused_p = self.fused.bind(tape);
        let mut ce_terms = Vec::new();
        let mut encoded: Vec<[Var; 3]> = Vec::new();
        for s in batch {
            let mut e = Vec::with_capacity(3);
            let mut masks = Vec::with_capacity(3);
            for m in Modality::ALL {
                let out = self.encoder(m).forward(tape, s.seq(m))?;
                ce_terms.push(tape.cross_entropy(out.logits, s.class())?);
                let y = tape.mask_rows(out.sequence, &out.mask)?;
                e.push(dcca::encode_view(tape, y, &self.views[m.index()])?);
                masks.push(out.mask);
            }
            let e: [Var; 3] = e.try_into().expect("three views");
            let y = fused_var(tape, e, [&masks[0], &masks[1], &masks[2]], &self.cca)?;
            let mask: Vec<bool> = masks.concat();
            let z = fusion::multimodal_attention(tape, y, &fused_p, &mask)?;
            let logits = fusion::class_logits(tape, z, &mask, fused_p.w_cls)?;
            ce_terms.push(tape.cross_entropy(logits, s.class())?);
            encoded.push(e);
        }
        let ce = tape.concat(&ce_terms, 1)?;
        let ce = tape.sum(ce)?;
        let ce = tape.scale(ce, 1.0 / batch.len() as f64)?;
        let pairs = pooled_pairs(tape, batch, &encoded)?;
        let cca = dcca::multiview_cca_loss(tape, &pairs, self.cfg.cca_reg, self.cfg.components())?;
        tape.add(ce, cca)
    }

    /// Named tensors owned by one stage, in a fixed order.
    pub fn stage_tensors(&self, tag: StageTag) -> Vec<(String, Tensor)> {
        match tag {
            StageTag::SelfattnL | StageTag::SelfattnV | StageTag::SelfattnA => {
                let m = tag.modality().expect("unimodal stage");
                let e = self.encoder(m);
                encoder_names(e).into_iter().zip(e.params().into_iter().cloned()).collect()
            }
            StageTag::Dcca => {
                let mut out = Vec::new();
                for (m, v) in Modality::ALL.iter().zip(&self.views) {
                    out.push((format!("view.{m}.k1"), v.k1.clone()));
                    out.push((format!("view.{m}.k2"), v.k2.clone()));
                }
                out.extend(self.cca.tensors());
                out
            }
            StageTag::CrossattnFused => ["w_q", "w_k", "w_v", "w_cls"]
                .iter()
                .map(|n| format!("fused.{n}"))
                .zip(self.fused.params().into_iter().cloned())
                .collect(),
        }
    }

    /// Replaces one stage's tensors; names and shapes must match exactly.
    pub fn set_stage_tensors(&mut self, tag: StageTag, tensors: Vec<(String, Tensor)>) -> Result<()> {
        let expected = self.stage_tensors(tag);
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{tag}: expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((en, et), (gn, gt)) in expected.iter().zip(&tensors) {
            if en != gn || et.shape() != gt.shape() {
                return Err(Error::Checkpoint(format!(
                    "{tag}: expected {en} {:?}, found {gn} {:?}",
                    et.shape(),
                    gt.shape()
                )));
            }
        }
        let mut values: Vec<Tensor> = tensors.into_iter().map(|(_, t)| t).collect();
        match tag {
            StageTag::SelfattnL | StageTag::SelfattnV | StageTag::SelfattnA => {
                let m = tag.modality().expect("unimodal stage");
                assign(self.encoders[m.index()].params_mut(), values);
            }
            StageTag::Dcca => {
                let cca = values.split_off(6);
                let views: Vec<&mut Tensor> = self.views.iter_mut().flat_map(|v| v.params_mut()).collect();
                assign(views, values);
                self.cca = CcaSolution::from_tensors(&cca, self.cfg.cca_reg, self.cfg.components())?;
            }
            StageTag::CrossattnFused => assign(self.fused.params_mut(), values),
        }
        Ok(())
    }
}

fn assign(slots: Vec<&mut Tensor>, values: Vec<Tensor>) {
    for (slot, v) in slots.into_iter().zip(values) {
        let requires_grad = slot.requires_grad;
        *slot = v;
        slot.requires_grad = requires_grad;
        slot.grad = None;
    }
}

fn encoder_names(e: &ModalityEncoder) -> Vec<String> {
    let m = e.modality;
    let mut out = vec![format!("enc.{m}.kernel")];
    for (li, layer) in e.layers.iter().enumerate() {
        for hi in 0..layer.heads.len() {
            for w in ["w_q", "w_k", "w_v"] {
                out.push(format!("enc.{m}.l{li}.h{hi}.{w}"));
            }
        }
        out.push(format!("enc.{m}.l{li}.w_relpos"));
        out.push(format!("enc.{m}.l{li}.w_o"));
    }
    out.push(format!("enc.{m}.cls"));
    out.push(format!("enc.{m}.head"));
    out
}

/// Differentiable counterpart of [`dcca::fused_representation`] with the
/// projections treated as constants.
pub fn fused_var(tape: &mut Tape, encoded: [Var; 3], masks: [&[bool]; 3], sol: &CcaSolution) -> Result<Var> {
    let mut blocks = Vec::with_capacity(3);
    for (m, (e, mask)) in Modality::ALL.iter().zip(encoded.into_iter().zip(masks)) {
        let (mean, proj) = sol.view(*m);
        let (t, d_r) = (tape.value(e).rows(), tape.value(e).cols());
        let means = tape.constant(Tensor::from_vec(&[t, d_r], mean.repeat(t)));
        let centered = tape.sub(e, means)?;
        let p = tape.constant(proj.clone());
        let mut y = tape.matmul(centered, p)?;
        if proj.cols() < d_r {
            let pad = tape.constant(Tensor::zeros(&[t, d_r - proj.cols()]));
            y = tape.concat(&[y, pad], 1)?;
        }
        blocks.push(tape.mask_rows(y, mask)?);
    }
    tape.concat(&blocks, 0)
}

/// Stacks each stream pair's timestep pairs across a batch into the two
/// sample matrices handed to the CCA objective.
pub fn pooled_pairs(tape: &mut Tape, batch: &[&AlignedSample], encoded: &[[Var; 3]]) -> Result<[(Var, Var); 3]> {
    let mut out = Vec::with_capacity(3);
    for (a, b) in dcca::VIEW_PAIRS {
        let (mut left, mut right) = (Vec::new(), Vec::new());
        for (s, e) in batch.iter().zip(encoded) {
            let idx = dcca::token_pairs(s.seq(a), s.seq(b));
            if idx.is_empty() {
                continue;
            }
            let (ia, ib): (Vec<usize>, Vec<usize>) = idx.into_iter().unzip();
            left.push(tape.gather_rows(e[a.index()], &ia)?);
            right.push(tape.gather_rows(e[b.index()], &ib)?);
        }
        if left.is_empty() {
            return Err(Error::TooFewSamples { needed: 2, got: 0 });
        }
        out.push((tape.concat(&left, 0)?, tape.concat(&right, 0)?));
    }
    Ok(out.try_into().expect("three pairs"))
}

impl Parameters for Pipeline {
    fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.encoders.iter().flat_map(|e| e.params()).collect();
        out.extend(self.views.iter().flat_map(|v| v.params()));
        out.extend(self.fused.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.encoders.iter_mut().flat_map(|e| e.params_mut()).collect();
        out.extend(self.views.iter_mut().flat_map(|v| v.params_mut()));
        out.extend(self.fused.params_mut());
        out
    }
}
