//! Central finite-difference verification of recorded gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::{prepare, synth_generate, AlignMode, AlignedSample, SynthSpec, NUM_CLASSES};
use crate::dcca::cca_corr_var;
use crate::error::{Error, Result};
use crate::model::Pipeline;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

/// Anything that owns trainable tensors in a fixed order.
pub trait Parameters {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }
}

impl Parameters for Vec<Tensor> {
    fn params(&self) -> Vec<&Tensor> {
        self.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().collect()
    }
}

pub const DEFAULT_STEP: f64 = 1e-3;

/// Compares analytic gradients of `loss_fn` with central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for every trainable entry of `model`.
///
/// Returns the largest relative error, with denominator
/// `max(|analytic|, |numeric|, 1e-8)`. `model` is restored on return.
pub fn finite_diff_check<M, F>(model: &mut M, loss_fn: F, step: f64) -> Result<f64>
where
    M: Parameters,
    F: FnMut(&M, &mut Tape) -> Result<Var>,
{
    finite_diff_check_floored(model, loss_fn, step, 1e-8)
}

/// [`finite_diff_check`] with a caller-chosen denominator floor. Entries whose
/// analytic and numeric gradients both sit below `floor` are then judged on
/// absolute error, which keeps rounding noise on structurally zero gradients
/// (such as a key bias under softmax) from dominating the report.
pub fn finite_diff_check_floored<M, F>(model: &mut M, mut loss_fn: F, step: f64, floor: f64) -> Result<f64>
where
    M: Parameters,
    F: FnMut(&M, &mut Tape) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step {step} must be positive")));
    }
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let root = loss_fn(model, &mut tape)?;
        tape.backward(root)?;
        model
            .params()
            .iter()
            .map(|p| {
                tape.param_grad(p)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.numel()])
            })
            .collect()
    };

    let mut eval = |model: &M| -> Result<f64> {
        let mut tape = Tape::new();
        let root = loss_fn(model, &mut tape)?;
        let v = tape.value(root).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("loss at perturbed point".into()));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    let n_params = model.params().len();
    for pi in 0..n_params {
        if !model.params()[pi].requires_grad {
            continue;
        }
        let len = model.params()[pi].numel();
        for e in 0..len {
            let orig = model.params()[pi].data()[e];
            model.params_mut()[pi].data_mut()[e] = orig + step;
            let plus = eval(model);
            model.params_mut()[pi].data_mut()[e] = orig - step;
            let minus = eval(model);
            model.params_mut()[pi].data_mut()[e] = orig;
            let numeric = (plus? - minus?) / (2.0 * step);
            let a = analytic[pi][e];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}


/// Tolerance used by [`gradcheck_suite`].
pub const SUITE_TOLERANCE: f64 = 1e-4;
/// Finite-difference step used by [`gradcheck_suite`].
pub const SUITE_STEP: f64 = 1e-4;
/// Denominator floor for the pipeline entry. At a loss near 7 and this step,
/// central differences carry about 1e-11 of rounding noise.
pub const PIPELINE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < SUITE_TOLERANCE
    }
}

/// Tiny configuration for checking the whole pipeline loss.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_l: 4,
        d_vis: 4,
        d_a: 4,
        d_ch: 4,
        d_k: 4,
        d_v: 4,
        d_o: 4,
        heads: 2,
        layers: 1,
        kernel: 3,
        window: None,
        causal: false,
        t_max: 7,
        d_mid: 3,
        d_r: 2,
        view_kernel: 3,
        cca_reg: 1e-3,
        cca_components: None,
        d_t: 4,
    }
}

/// Three short unaligned utterances (at most six steps per stream).
pub fn tiny_batch(seed: u64) -> Result<Vec<AlignedSample>> {
    let spec = SynthSpec {
        samples: 3,
        d_l: 4,
        d_v: 4,
        d_a: 4,
        duration: [1.2, 1.5],
        word_duration: [0.3, 0.4],
        visual_rate: 4.0,
        acoustic_rate: 3.0,
        motif_seconds: 0.6,
        seed,
        ..Default::default()
    };
    synth_generate(&spec)?
        .iter()
        .map(|s| prepare(s, AlignMode::Unaligned))
        .collect()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Values bounded away from zero so relu never sits on its kink.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = random(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (0.2 + v.abs());
    }
    t
}

/// `sum(out * probe)` for a fixed random probe, so every output entry carries
/// a distinct weight.
fn contract(tape: &mut Tape, out: Var, probe: &Tensor) -> Result<Var> {
    let r = tape.constant(probe.clone());
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

type OpLoss = Box<dyn Fn(&Vec<Tensor>, &mut Tape) -> Result<Var>>;

fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, OpLoss) {
    let p = |t: Tensor| t.into_param();
    let probe = |shape: &[usize], rng: &mut ChaCha8Rng| random(shape, rng);
    match kind {
        OpKind::MatMul => {
            let r = probe(&[3, 2], rng);
            (
                vec![p(random(&[3, 4], rng)), p(random(&[4, 2], rng))],
                Box::new(move |m, t| {
                    let (a, b) = (t.param(&m[0]), t.param(&m[1]));
                    let o = t.matmul(a, b)?;
                    contract(t, o, &r)
                }),
            )
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let r = probe(&[3, 4], rng);
            (
                vec![p(random(&[3, 4], rng)), p(random(&[3, 4], rng))],
                Box::new(move |m, t| {
                    let (a, b) = (t.param(&m[0]), t.param(&m[1]));
                    let o = match kind {
                        OpKind::Add => t.add(a, b)?,
                        OpKind::Sub => t.sub(a, b)?,
                        _ => t.mul(a, b)?,
                    };
                    // Mul is checked through its own output, not the probe contraction.
                    if kind == OpKind::Mul {
                        let sq = t.mul(o, o)?;
                        return t.sum(sq);
                    }
                    contract(t, o, &r)
                }),
            )
        }
        OpKind::Scale => {
            let r = probe(&[2, 3], rng);
            (
                vec![p(random(&[2, 3], rng))],
                Box::new(move |m, t| {
                    let a = t.param(&m[0]);
                    let o = t.scale(a, -1.7)?;
                    contract(t, o, &r)
                }),
            )
        }
        OpKind::AppendOnes => {
            let r = probe(&[3, 3], rng);
            (
                vec![p(random(&[3, 2], rng))],
                Box::new(move |m, t| {
                    let a = t.param(&m[0]);
                    let o = t.append_ones(a)?;
                    let sq = t.mul(o, o)?;
                    contract(t, sq, &r)
                }),
            )
        }
        OpKind::Concat => {
            let r0 = probe(&[5, 2], rng);
            let r1 = probe(&[3, 4], rng);
            (
                vec![p(random(&[3, 2], rng)), p(random(&[2, 2], rng)), p(random(&[3, 2], rng))],
                Box::new(move |m, t| {
                    let (a, b, c) = (t.param(&m[0]), t.param(&m[1]), t.param(&m[2]));
                    let rows = t.concat(&[a, b], 0)?;
                    let cols = t.concat(&[a, c], 1)?;
                    let l0 = contract(t, rows, &r0)?;
                    let l1 = contract(t, cols, &r1)?;
                    t.add(l0, l1)
                }),
            )
        }
        OpKind::Transpose => {
            let r = probe(&[4, 3], rng);
            (
                vec![p(random(&[3, 4], rng))],
                Box::new(move |m, t| {
                    let a = t.param(&m[0]);
                    let o = t.transpose(a)?;
                    contract(t, o, &r)
                }),
            )
        }
        OpKind::Relu => {
            let r = probe(&[3, 4], rng);
            (
                vec![p(off_kink(&[3, 4], rng))],
                Box::new(move |m, t| {
                    let a = t.param(&m[0]);
                    let o = t.relu(a)?;
                    contract(t, o, &r)
                }),
            )
        }
        OpKind::MaskedSoftmax => {
            let r = probe(&[3, 4], rng);
            let cols = vec![true, false, true, true];
            let elems = vec![true, true, false, true, false, true, true, true, true, true, true, false];
            (
                vec![p(random(&[3, 4], rng))],
                Box::new(move |m, t| {
                    let a = t.param(&m[0]);
                    let s0 = t.masked_softmax(a, Some(&cols))?;
                    let s1 = t.masked_softmax(a, Some(&elems))?;
                    let s2 = t.masked_softmax(a, None)?;
                    let l0 = contract(t, s0, &r)?;
                    let l1 = contract(t, s1, &r)?;
                    let l2 = contract(t, s2, &r)?;
                    let l = t.add(l0, l1)?;
                    t.add(l, l2)
                }),
            )
        }
        OpKind::Conv1d => {
            let r = probe(&[5, 2], rng);
            (
                vec![p(random(&[5, 3], rng)), p(random(&[3, 3, 2], rng))],
                Box::new(move |m, t| {
                    let (x, k) = (t.param(&m[0]), t.param(&m[1]));
                    let o = t.conv1d(x, k)?;
                    contract(t, o, &r)
                }),
            )
        }
        OpKind::MaskRows => {
            let r = probe(&[4, 3], rng);
            (
                vec![p(random(&[4, 3], rng))],
                Box::new(move |m, t| {
                    let a = t.param(&m[0]);
                    let o = t.mask_rows(a, &[true, false, true, false])?;
                    contract(t, o, &r)
                }),
            )
        }
        OpKind::SliceRows => {
            let r = probe(&[2, 3], rng);
            (
                vec![p(random(&[5, 3], rng))],
                Box::new(move |m, t| {
                    let a = t.param(&m[0]);
                    let o = t.slice_rows(a, 1, 2)?;
                    contract(t, o, &r)
                }),
            )
        }
        OpKind::GatherRows => {
            let r = probe(&[5, 3], rng);
            (
                vec![p(random(&[4, 3], rng))],
                Box::new(move |m, t| {
                    let a = t.param(&m[0]);
                    let o = t.gather_rows(a, &[2, 0, 2, 3, 2])?;
                    contract(t, o, &r)
                }),
            )
        }
        OpKind::MaskedMeanRows => {
            let r = probe(&[1, 3], rng);
            (
                vec![p(random(&[4, 3], rng))],
                Box::new(move |m, t| {
                    let a = t.param(&m[0]);
                    let o = t.masked_mean_rows(a, &[true, true, false, true])?;
                    contract(t, o, &r)
                }),
            )
        }
        OpKind::Sum => (
            vec![p(random(&[3, 3], rng))],
            Box::new(|m, t| {
                let a = t.param(&m[0]);
                t.sum(a)
            }),
        ),
        OpKind::CrossEntropy => (
            vec![p(random(&[1, NUM_CLASSES], rng))],
            Box::new(|m, t| {
                let a = t.param(&m[0]);
                t.cross_entropy(a, 4)
            }),
        ),
        OpKind::RelPos => {
            let r = probe(&[5, 5], rng);
            (
                vec![p(random(&[5, 3], rng)), p(random(&[3, 7], rng))],
                Box::new(move |m, t| {
                    let (x, w) = (t.param(&m[0]), t.param(&m[1]));
                    let o = t.relative_position(x, w)?;
                    contract(t, o, &r)
                }),
            )
        }
        OpKind::Cca => (
            vec![p(random(&[12, 3], rng)), p(random(&[12, 3], rng))],
            Box::new(|m, t| {
                let (a, b) = (t.param(&m[0]), t.param(&m[1]));
                cca_corr_var(t, a, b, 1e-3, 2)
            }),
        ),
        OpKind::Leaf => unreachable!("leaves carry no gradient rule"),
    }
}

/// Every differentiable op followed by the full joint pipeline loss, each
/// checked once. `fault` corrupts the gradient rule of one op kind on every
/// tape the suite records.
pub fn gradcheck_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<GradCheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(OpKind::ALL.len());
    for kind in OpKind::ALL.into_iter().filter(|k| *k != OpKind::Leaf) {
        let (mut params, loss) = op_case(kind, &mut rng);
        let err = finite_diff_check(
            &mut params,
            |m, tape| {
                if let Some(f) = fault {
                    tape.inject_fault(f);
                }
                loss(m, tape)
            },
            SUITE_STEP,
        )?;
        out.push(GradCheckEntry { name: kind.name().to_string(), max_rel_error: err });
    }

    let data = tiny_batch(seed)?;
    let batch: Vec<&AlignedSample> = data.iter().collect();
    let mut pipeline = Pipeline::new(tiny_config(), seed)?;
    // Nonzero relative-position tables so their input gradients are exercised.
    for enc in &mut pipeline.encoders {
        for layer in &mut enc.layers {
            let shape = layer.w_relpos.shape().to_vec();
            layer.w_relpos = random(&shape, &mut rng).into_param();
        }
    }
    let err = finite_diff_check_floored(
        &mut pipeline,
        |p, tape| {
            if let Some(f) = fault {
                tape.inject_fault(f);
            }
            p.joint_loss(tape, &batch)
        },
        SUITE_STEP,
        PIPELINE_FLOOR,
    )?;
    out.push(GradCheckEntry { name: "pipeline".into(), max_rel_error: err });
    Ok(out)
}
