//! Staged training: unimodal encoders, then the view encoders under the
//! multiview CCA objective, then the fused attention head. Each stage sees
//! the earlier ones only through precomputed, frozen outputs.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attention::ModalityEncoder;
use crate::config::{StageConfig, StagePlan, StageTag};
use crate::data::{prepare, AlignMode, AlignedSample, Modality, NUM_CLASSES};
use crate::dcca::{self, CcaSolution, PairProjection, ViewEncoderParams, VIEW_PAIRS};
use crate::error::{Error, Result};
use crate::fusion::{self, FusedAttentionParams};
use crate::gradcheck::Parameters;
use crate::metrics::{argmax, MetricsReport};
use crate::model::{component_rng, Pipeline};
use crate::optim::AdamState;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: StageTag,
    pub epoch: usize,
    /// Mean per-sample loss (stage 2: mean batch objective).
    pub loss: f64,
    /// Training accuracy measured on the forward passes of the epoch.
    pub train_acc: Option<f64>,
}

impl EpochLog {
    pub fn tsv_header() -> &'static str {
        "stage\tepoch\tloss\ttrain_acc"
    }

    pub fn tsv_line(&self) -> String {
        let acc = self.train_acc.map(|a| a.to_string()).unwrap_or_else(|| "-".into());
        format!("{}\t{}\t{}\t{acc}", self.stage, self.epoch, self.loss)
    }
}

impl Parameters for [ViewEncoderParams; 3] {
    fn params(&self) -> Vec<&Tensor> {
        self.iter().flat_map(|v| v.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().flat_map(|v| v.params_mut()).collect()
    }
}

fn shuffle_stream(tag: StageTag) -> u64 {
    100 + tag as u64
}

fn param_norms<P: Parameters + ?Sized>(p: &P) -> String {
    let norms: Vec<String> = p
        .params()
        .iter()
        .map(|t| format!("{:.3e}", t.data().iter().map(|x| x * x).sum::<f64>().sqrt()))
        .collect();
    format!("[{}]", norms.join(", "))
}

/// What a batch closure reports back: the mean loss node and how many of
/// the batch's forward passes predicted the right class (if applicable).
struct BatchOut {
    loss: Var,
    correct: Option<usize>,
}

/// Shuffled minibatches, one Adam step per batch, last partial batch kept.
fn run_epochs<P, F>(tag: StageTag, params: &mut P, n: usize, cfg: &StageConfig, seed: u64, mut batch_loss: F) -> Result<Vec<EpochLog>>
where
    P: Parameters + ?Sized,
    F: FnMut(&P, &mut Tape, &[usize]) -> Result<BatchOut>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Empty(format!("{tag}: empty training set")));
    }
    let mut rng = component_rng(seed, shuffle_stream(tag));
    let mut adam = AdamState::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut correct, mut tracked) = (0.0, 0usize, false);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |p: &P, what: String| Error::Diverged {
                stage: tag.to_string(),
                detail: format!("epoch {epoch} batch {b}: {what}; parameter norms {}", param_norms(p)),
            };
            let mut tape = Tape::new();
            let out = batch_loss(params, &mut tape, batch)?;
            let value = tape.value(out.loss).item();
            if !value.is_finite() {
                return Err(diverged(params, format!("loss {value}")));
            }
            if let Err(e) = tape.backward(out.loss) {
                return Err(diverged(params, e.to_string()));
            }
            tape.accumulate_grads(params.params_mut());
            adam.step(&mut params.params_mut(), cfg.lr, cfg.weight_decay)?;
            total += value * batch.len() as f64;
            if let Some(c) = out.correct {
                correct += c;
                tracked = true;
            }
        }
        logs.push(EpochLog {
            stage: tag,
            epoch,
            loss: total / n as f64,
            train_acc: tracked.then(|| correct as f64 / n as f64),
        });
    }
    Ok(logs)
}

/// Sums per-sample losses on the tape and divides by the batch size.
fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let stacked = tape.concat(terms, 1)?;
    let s = tape.sum(stacked)?;
    tape.scale(s, 1.0 / terms.len() as f64)
}

/// Cross-entropy training of one modality encoder's unimodal head.
pub fn train_stage1_unimodal(
    encoder: &mut ModalityEncoder,
    data: &[AlignedSample],
    cfg: &StageConfig,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    let m = encoder.modality;
    let tag = StageTag::unimodal(m);
    run_epochs(tag, encoder, data.len(), cfg, seed, |enc, tape, batch| {
        let mut terms = Vec::with_capacity(batch.len());
        let mut correct = 0;
        for &i in batch {
            let s = &data[i];
            let out = enc.forward(tape, s.seq(m))?;
            if argmax(tape.value(out.logits).data()) == s.class() {
                correct += 1;
            }
            terms.push(tape.cross_entropy(out.logits, s.class())?);
        }
        Ok(BatchOut {
            loss: mean_of(tape, &terms)?,
            correct: Some(correct),
        })
    })
}

/// Frozen stage-1 outputs and the timestep pairing of every view pair.
pub struct DccaInputs {
    pub reps: Vec<[Tensor; 3]>,
    pub pairs: Vec<[(Vec<usize>, Vec<usize>); 3]>,
}

impl DccaInputs {
    pub fn new(encoders: &[ModalityEncoder; 3], data: &[AlignedSample]) -> Result<Self> {
        let mut reps = Vec::with_capacity(data.len());
        let mut pairs = Vec::with_capacity(data.len());
        for s in data {
            let [l, v, a] = encoders;
            reps.push([l.representation(&s.l)?, v.representation(&s.v)?, a.representation(&s.a)?]);
            pairs.push(VIEW_PAIRS.map(|(x, y)| dcca::token_pairs(s.seq(x), s.seq(y)).into_iter().unzip()));
        }
        Ok(Self { reps, pairs })
    }
}

fn pair_name(k: usize) -> String {
    let (a, b) = VIEW_PAIRS[k];
    format!("{a}-{b}")
}

fn degenerate(k: usize, e: Error) -> Error {
    match e {
        Error::NotPositiveDefinite(what) => Error::NotPositiveDefinite(format!("{} pair ({what})", pair_name(k))),
        Error::TooFewSamples { needed, got } => Error::Diverged {
            stage: StageTag::Dcca.to_string(),
            detail: format!("{} pair has {got} paired timesteps, need {needed}", pair_name(k)),
        },
        other => other,
    }
}

/// Multiview CCA training of the view encoders on frozen representations,
/// followed by fitting linear projections on the whole training set.
pub fn train_stage2_dcca(
    views: &mut [ViewEncoderParams; 3],
    inputs: &DccaInputs,
    cfg: &StageConfig,
    reg: f64,
    components: usize,
    seed: u64,
) -> Result<(Vec<EpochLog>, CcaSolution)> {
    let logs = run_epochs(StageTag::Dcca, views, inputs.reps.len(), cfg, seed, |views, tape, batch| {
        let mut total: Option<Var> = None;
        let mut encoded = Vec::with_capacity(batch.len());
        for &i in batch {
            let mut e = Vec::with_capacity(3);
            for (rep, view) in inputs.reps[i].iter().zip(views.iter()) {
                let y = tape.constant(rep.clone());
                e.push(dcca::encode_view(tape, y, view)?);
            }
            encoded.push(e);
        }
        for (k, (a, b)) in VIEW_PAIRS.iter().enumerate() {
            let (mut left, mut right) = (Vec::new(), Vec::new());
            for (&i, e) in batch.iter().zip(&encoded) {
                let (ia, ib) = &inputs.pairs[i][k];
                if ia.is_empty() {
                    continue;
                }
                left.push(tape.gather_rows(e[a.index()], ia)?);
                right.push(tape.gather_rows(e[b.index()], ib)?);
            }
            if left.is_empty() {
                return Err(degenerate(k, Error::TooFewSamples { needed: 2, got: 0 }));
            }
            let h1 = tape.concat(&left, 0)?;
            let h2 = tape.concat(&right, 0)?;
            let corr = dcca::cca_corr_var(tape, h1, h2, reg, components).map_err(|e| degenerate(k, e))?;
            total = Some(match total {
                Some(t) => tape.add(t, corr)?,
                None => corr,
            });
        }
        let loss = tape.scale(total.expect("three pairs"), -1.0)?;
        Ok(BatchOut { loss, correct: None })
    })?;
    let solution = fit_cca(views, inputs, reg, components)?;
    Ok((logs, solution))
}

/// Linear CCA on the encoded views of every training sample.
pub fn fit_cca(
    views: &[ViewEncoderParams; 3],
    inputs: &DccaInputs,
    reg: f64,
    components: usize,
) -> Result<CcaSolution> {
    let encoded: Vec<[Tensor; 3]> = inputs
        .reps
        .iter()
        .map(|reps| {
            let mut tape = Tape::new();
            let mut out = Vec::with_capacity(3);
            for (rep, view) in reps.iter().zip(views) {
                let y = tape.constant(rep.clone());
                let e = dcca::encode_view(&mut tape, y, view)?;
                out.push(tape.value(e).clone());
            }
            Ok(out.try_into().expect("three views"))
        })
        .collect::<Result<_>>()?;
    let mut pairs = Vec::with_capacity(3);
    for (k, (a, b)) in VIEW_PAIRS.iter().enumerate() {
        let (mut left, mut right) = (Vec::new(), Vec::new());
        for (e, p) in encoded.iter().zip(&inputs.pairs) {
            let (ia, ib) = &p[k];
            left.extend(ia.iter().flat_map(|&t| e[a.index()].row(t).to_vec()));
            right.extend(ib.iter().flat_map(|&t| e[b.index()].row(t).to_vec()));
        }
        let d_r = encoded.first().map(|e| e[0].cols()).unwrap_or(0);
        let rows = left.len().checked_div(d_r).unwrap_or(0);
        if rows < 2 {
            return Err(degenerate(k, Error::TooFewSamples { needed: 2, got: rows }));
        }
        let h1 = Tensor::from_vec(&[rows, d_r], left);
        let h2 = Tensor::from_vec(&[rows, d_r], right);
        pairs.push(PairProjection::fit(&h1, &h2, reg, components).map_err(|e| degenerate(k, e))?);
    }
    Ok(CcaSolution { pairs, reg, components })
}

/// Cross-entropy training of the fused attention head on frozen fused inputs.
pub fn train_stage3_fusion(
    fused: &mut FusedAttentionParams,
    inputs: &[(Tensor, Vec<bool>)],
    labels: &[usize],
    cfg: &StageConfig,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    if inputs.len() != labels.len() {
        return Err(Error::shape("train_stage3_fusion", &[inputs.len()], &[labels.len()]));
    }
    run_epochs(StageTag::CrossattnFused, fused, inputs.len(), cfg, seed, |p, tape, batch| {
        let b = p.bind(tape);
        let mut terms = Vec::with_capacity(batch.len());
        let mut correct = 0;
        for &i in batch {
            let (x, mask) = &inputs[i];
            let y = tape.constant(x.clone());
            let z = fusion::multimodal_attention(tape, y, &b, mask)?;
            let logits = fusion::class_logits(tape, z, mask, b.w_cls)?;
            if argmax(tape.value(logits).data()) == labels[i] {
                correct += 1;
            }
            terms.push(tape.cross_entropy(logits, labels[i])?);
        }
        Ok(BatchOut {
            loss: mean_of(tape, &terms)?,
            correct: Some(correct),
        })
    })
}

/// Options for [`train_pipeline`].
#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub seed: u64,
    /// Concurrent stage-1 trainings. Results do not depend on this value.
    pub jobs: usize,
    /// Stages to run, in pipeline order; others keep their current weights.
    pub stages: Vec<StageTag>,
    /// Train all parameters jointly instead of stage by stage.
    pub end_to_end: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 1,
            stages: StageTag::ALL.to_vec(),
            end_to_end: false,
        }
    }
}

/// Applies the preprocessing path for `mode` to every sample.
pub fn prepare_all(data: &[AlignedSample], mode: AlignMode) -> Result<Vec<AlignedSample>> {
    data.iter().map(|s| prepare(s, mode)).collect()
}

/// Runs the selected stages on preprocessed `data`.
pub fn train_pipeline(
    p: &mut Pipeline,
    data: &[AlignedSample],
    plan: &StagePlan,
    opts: &TrainOptions,
) -> Result<Vec<EpochLog>> {
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if opts.end_to_end {
        return train_end_to_end(p, data, plan.get(StageTag::CrossattnFused), opts.seed)
            .map_err(|e| e.in_stage("end_to_end"));
    }
    let mut logs = Vec::new();
    let seed = opts.seed;

    let mut unimodal: Vec<&mut ModalityEncoder> = p
        .encoders
        .iter_mut()
        .filter(|e| opts.stages.contains(&StageTag::unimodal(e.modality)))
        .collect();
    let jobs = opts.jobs.max(1);
    while !unimodal.is_empty() {
        let rest = unimodal.split_off(jobs.min(unimodal.len()));
        let results: Vec<Result<Vec<EpochLog>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = unimodal
                .into_iter()
                .map(|enc| {
                    let cfg = plan.get(StageTag::unimodal(enc.modality)).clone();
                    let tag = StageTag::unimodal(enc.modality);
                    scope.spawn(move || train_stage1_unimodal(enc, data, &cfg, seed).map_err(|e| e.in_stage(tag)))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("stage-1 thread panicked")).collect()
        });
        for r in results {
            logs.extend(r?);
        }
        unimodal = rest;
    }

    if opts.stages.contains(&StageTag::Dcca) {
        let in_dcca = |e: Error| e.in_stage(StageTag::Dcca);
        let inputs = DccaInputs::new(&p.encoders, data).map_err(in_dcca)?;
        let (l, sol) = train_stage2_dcca(
            &mut p.views,
            &inputs,
            plan.get(StageTag::Dcca),
            p.cfg.cca_reg,
            p.cfg.components(),
            seed,
        )
        .map_err(in_dcca)?;
        p.cca = sol;
        logs.extend(l);
    }

    if opts.stages.contains(&StageTag::CrossattnFused) {
        let in_fused = |e: Error| e.in_stage(StageTag::CrossattnFused);
        let inputs = data
            .iter()
            .map(|s| p.fused_input(s))
            .collect::<Result<Vec<_>>>()
            .map_err(in_fused)?;
        let labels: Vec<usize> = data.iter().map(AlignedSample::class).collect();
        logs.extend(
            train_stage3_fusion(&mut p.fused, &inputs, &labels, plan.get(StageTag::CrossattnFused), seed)
                .map_err(in_fused)?,
        );
    }
    Ok(logs)
}

/// Joint training of every parameter on [`Pipeline::joint_loss`]; the CCA
/// projections are refitted at the start of each epoch.
fn train_end_to_end(p: &mut Pipeline, data: &[AlignedSample], cfg: &StageConfig, seed: u64) -> Result<Vec<EpochLog>> {
    let mut logs = Vec::with_capacity(cfg.epochs);
    let one_epoch = StageConfig { epochs: 1, ..cfg.clone() };
    for epoch in 0..cfg.epochs {
        let inputs = DccaInputs::new(&p.encoders, data)?;
        p.cca = fit_cca(&p.views, &inputs, p.cfg.cca_reg, p.cfg.components())?;
        let mut l = run_epochs(StageTag::CrossattnFused, p, data.len(), &one_epoch, seed ^ epoch as u64, |p, tape, batch| {
            let refs: Vec<&AlignedSample> = batch.iter().map(|&i| &data[i]).collect();
            Ok(BatchOut {
                loss: p.joint_loss(tape, &refs)?,
                correct: None,
            })
        })?;
        l[0].epoch = epoch;
        logs.extend(l);
    }
    let inputs = DccaInputs::new(&p.encoders, data)?;
    p.cca = fit_cca(&p.views, &inputs, p.cfg.cca_reg, p.cfg.components())?;
    Ok(logs)
}

/// Fused metrics on preprocessed `data`.
pub fn evaluate(p: &Pipeline, data: &[AlignedSample]) -> Result<MetricsReport> {
    let probs = data.iter().map(|s| p.predict(s)).collect::<Result<Vec<_>>>()?;
    score(&probs, data)
}

/// Metrics of one modality's unimodal head on preprocessed `data`.
pub fn evaluate_unimodal(p: &Pipeline, m: Modality, data: &[AlignedSample]) -> Result<MetricsReport> {
    let probs = data.iter().map(|s| p.unimodal_probs(m, s)).collect::<Result<Vec<_>>>()?;
    score(&probs, data)
}

fn score(probs: &[[f64; NUM_CLASSES]], data: &[AlignedSample]) -> Result<MetricsReport> {
    let ys: Vec<[f64; NUM_CLASSES]> = data.iter().map(AlignedSample::intensities).collect();
    MetricsReport::score(probs, &ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{synth_generate, SynthSpec};

    fn data(n: usize) -> Vec<AlignedSample> {
        let raw = synth_generate(&SynthSpec { samples: n, seed: 11, ..Default::default() }).unwrap();
        prepare_all(&raw, AlignMode::Aligned).unwrap()
    }

    fn stage(epochs: usize, lr: f64, batch: usize) -> StageConfig {
        StageConfig { epochs, lr, batch_size: batch, weight_decay: 0.0 }
    }

    #[test]
    fn one_epoch_does_not_increase_loss_on_four_samples() {
        let d = data(4);
        let mut p = Pipeline::new(ModelConfig::default(), 0).unwrap();
        let enc = &mut p.encoders[0];
        let before = train_stage1_unimodal(&mut enc.clone(), &d, &stage(1, 0.0, 4), 0).unwrap()[0].loss;
        let logs = train_stage1_unimodal(enc, &d, &stage(2, 1e-2, 4), 0).unwrap();
        assert_eq!(logs[0].loss, before);
        assert!(logs[1].loss <= before, "{} > {before}", logs[1].loss);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let d = data(3);
        let p = Pipeline::new(ModelConfig::default(), 0).unwrap();
        let mut enc = p.encoders[1].clone();
        train_stage1_unimodal(&mut enc, &d, &stage(2, 0.0, 2), 0).unwrap();
        assert_eq!(enc.params(), p.encoders[1].params());
    }

    #[test]
    fn identical_views_approach_minus_three_c() {
        let d = data(6);
        let p = Pipeline::new(ModelConfig::default(), 0).unwrap();
        let mut inputs = DccaInputs::new(&p.encoders, &d).unwrap();
        for r in &mut inputs.reps {
            let shared = r[0].clone();
            *r = [shared.clone(), shared.clone(), shared];
        }
        for pr in &mut inputs.pairs {
            let same = pr[0].0.clone();
            *pr = [(same.clone(), same.clone()), (same.clone(), same.clone()), (same.clone(), same)];
        }
        let v = p.views[0].clone();
        let mut views = [v.clone(), v.clone(), v];
        let c = p.cfg.components();
        let (logs, _) = train_stage2_dcca(&mut views, &inputs, &stage(1, 0.0, 6), 1e-9, c, 0).unwrap();
        assert!((logs[0].loss + 3.0 * c as f64).abs() < 1e-3, "{}", logs[0].loss);
    }

    #[test]
    fn staged_run_is_deterministic_and_freezes_earlier_stages() {
        let d = data(8);
        let mut plan = StagePlan::desk();
        for tag in StageTag::ALL {
            plan.get_mut(tag).epochs = 1;
        }
        let opts = TrainOptions { seed: 4, ..Default::default() };
        let run = || {
            let mut p = Pipeline::new(ModelConfig::default(), 4).unwrap();
            let logs = train_pipeline(&mut p, &d, &plan, &opts).unwrap();
            (p, logs)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.len(), 5);

        let mut c = a.clone();
        let only3 = TrainOptions { stages: vec![StageTag::CrossattnFused], ..opts.clone() };
        train_pipeline(&mut c, &d, &plan, &only3).unwrap();
        assert_eq!(c.encoders, a.encoders);
        assert_eq!(c.views, a.views);
        assert_eq!(c.cca, a.cca);
        assert_ne!(c.fused, a.fused);
    }

    #[test]
    fn parallel_stage_one_matches_sequential() {
        let d = data(6);
        let mut plan = StagePlan::desk();
        for tag in StageTag::ALL {
            plan.get_mut(tag).epochs = 1;
        }
        let stages = vec![StageTag::SelfattnL, StageTag::SelfattnV, StageTag::SelfattnA];
        let mut a = Pipeline::new(ModelConfig::default(), 1).unwrap();
        let mut b = a.clone();
        train_pipeline(&mut a, &d, &plan, &TrainOptions { stages: stages.clone(), ..Default::default() }).unwrap();
        train_pipeline(&mut b, &d, &plan, &TrainOptions { stages, jobs: 3, ..Default::default() }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn end_to_end_runs() {
        let d = data(4);
        let mut plan = StagePlan::desk();
        plan.get_mut(StageTag::CrossattnFused).epochs = 2;
        let mut p = Pipeline::new(ModelConfig::default(), 1).unwrap();
        let logs = train_pipeline(&mut p, &d, &plan, &TrainOptions { end_to_end: true, ..Default::default() }).unwrap();
        assert_eq!(logs.len(), 2);
        assert!(logs.iter().all(|l| l.loss.is_finite()));
    }
}
