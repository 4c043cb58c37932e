//! Deep canonical correlation across the three self-attended streams.
//!
//! Each stream's representation passes through its own two-layer
//! convolutional encoder. Encoders are trained to maximise the sum of the
//! pairwise canonical correlations between streams; afterwards linear
//! canonical projections are fitted and used to build the fused sequence.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::data::{Modality, ModalitySequence};
use crate::error::{Error, Result};
use crate::gradcheck::Parameters;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

/// Eigenvalues below this are clamped before inverting square roots.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// The three stream pairs, in the order their correlations are summed.
pub const VIEW_PAIRS: [(Modality, Modality); 3] = [
    (Modality::L, Modality::V),
    (Modality::L, Modality::A),
    (Modality::V, Modality::A),
];

/// Two same-length convolutions with a rectifier in between.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewEncoderParams {
    /// `[k x d_o x d_mid]`
    pub k1: Tensor,
    /// `[k x d_mid x d_r]`
    pub k2: Tensor,
}

impl ViewEncoderParams {
    pub fn new<R: Rng + ?Sized>(kernel: usize, d_o: usize, d_mid: usize, d_r: usize, rng: &mut R) -> Self {
        Self {
            k1: Tensor::glorot(&[kernel, d_o, d_mid], kernel * d_o, d_mid, rng),
            k2: Tensor::glorot(&[kernel, d_mid, d_r], kernel * d_mid, d_r, rng),
        }
    }

    pub fn closed_form_count(kernel: usize, d_o: usize, d_mid: usize, d_r: usize) -> usize {
        kernel * d_o * d_mid + kernel * d_mid * d_r
    }
}

impl Parameters for ViewEncoderParams {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.k1, &self.k2]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.k1, &mut self.k2]
    }
}

/// `conv → relu → conv`, output `[T x d_r]`.
pub fn encode_view(tape: &mut Tape, y: Var, p: &ViewEncoderParams) -> Result<Var> {
    let k1 = tape.param(&p.k1);
    let k2 = tape.param(&p.k2);
    let h = tape.conv1d(y, k1)?;
    let h = tape.relu(h)?;
    tape.conv1d(h, k2)
}

fn to_mat(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_mat(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            data.push(m[(i, j)]);
        }
    }
    Tensor::from_vec(&[m.nrows(), m.ncols()], data)
}

fn centered(h: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let m = h.nrows() as f64;
    let mean = DVector::from_iterator(h.ncols(), h.column_iter().map(|c| c.sum() / m));
    let mut out = h.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    (out, mean)
}

fn check_samples(h1: &Tensor, h2: &Tensor) -> Result<()> {
    if h1.rows() != h2.rows() {
        return Err(Error::shape("cca", h1.shape(), h2.shape()));
    }
    if h1.rows() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: h1.rows(),
        });
    }
    Ok(())
}

/// Centred covariances `(Σ11, Σ22, Σ12)` with `r·I` added to the diagonal
/// blocks. Rows of `h1`/`h2` are paired samples.
pub fn regularized_covariances(h1: &Tensor, h2: &Tensor, r: f64) -> Result<(Tensor, Tensor, Tensor)> {
    check_samples(h1, h2)?;
    let c = Covariances::new(&to_mat(h1), &to_mat(h2), r);
    Ok((from_mat(&c.s11), from_mat(&c.s22), from_mat(&c.s12)))
}

struct Covariances {
    h1: DMatrix<f64>,
    h2: DMatrix<f64>,
    mean1: DVector<f64>,
    mean2: DVector<f64>,
    s11: DMatrix<f64>,
    s22: DMatrix<f64>,
    s12: DMatrix<f64>,
}

impl Covariances {
    fn new(h1: &DMatrix<f64>, h2: &DMatrix<f64>, r: f64) -> Self {
        let (h1, mean1) = centered(h1);
        let (h2, mean2) = centered(h2);
        let scale = 1.0 / (h1.nrows() as f64 - 1.0);
        let mut s11 = h1.transpose() * &h1 * scale;
        let mut s22 = h2.transpose() * &h2 * scale;
        let s12 = h1.transpose() * &h2 * scale;
        for i in 0..s11.nrows() {
            s11[(i, i)] += r;
        }
        for i in 0..s22.nrows() {
            s22[(i, i)] += r;
        }
        Self { h1, h2, mean1, mean2, s11, s22, s12 }
    }
}

fn inv_sqrt(s: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = s.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::NotPositiveDefinite(what.to_string()));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.max(EIGEN_FLOOR).sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Everything needed for the value, the gradient and the projections.
struct CcaCore {
    cov: Covariances,
    w1: DMatrix<f64>,
    w2: DMatrix<f64>,
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    sigma: Vec<f64>,
}

fn cca_core(h1: &Tensor, h2: &Tensor, r: f64, c: usize) -> Result<CcaCore> {
    check_samples(h1, h2)?;
    let (a, b) = (h1.cols(), h2.cols());
    if c == 0 || c > a.min(b) {
        return Err(Error::Config(format!("canonical components {c} must lie in 1..={}", a.min(b))));
    }
    if !(r > 0.0) {
        return Err(Error::Config("cca regularisation must be positive".into()));
    }
    let cov = Covariances::new(&to_mat(h1), &to_mat(h2), r);
    let w1 = inv_sqrt(&cov.s11, "view 1")?;
    let w2 = inv_sqrt(&cov.s22, "view 2")?;
    let t = &w1 * &cov.s12 * &w2;
    let svd = t.svd(true, true);
    let (u_all, vt_all) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let order = &order[..c];
    let u = DMatrix::from_columns(&order.iter().map(|&i| u_all.column(i)).collect::<Vec<_>>());
    let v = DMatrix::from_columns(&order.iter().map(|&i| vt_all.row(i).transpose()).collect::<Vec<_>>());
    let sigma = order.iter().map(|&i| svd.singular_values[i]).collect();
    Ok(CcaCore { cov, w1, w2, u, v, sigma })
}

/// Sum of the top-`c` canonical correlations between paired rows of `h1` and `h2`.
pub fn cca_corr(h1: &Tensor, h2: &Tensor, r: f64, c: usize) -> Result<f64> {
    Ok(cca_core(h1, h2, r, c)?.sigma.iter().sum())
}

/// Individual canonical correlations, largest first.
pub fn canonical_correlations(h1: &Tensor, h2: &Tensor, r: f64, c: usize) -> Result<Vec<f64>> {
    Ok(cca_core(h1, h2, r, c)?.sigma)
}

/// Differentiable [`cca_corr`].
pub fn cca_corr_var(tape: &mut Tape, h1: Var, h2: Var, r: f64, c: usize) -> Result<Var> {
    let core = cca_core(tape.value(h1), tape.value(h2), r, c)?;
    let m = core.cov.h1.nrows() as f64;
    let d = DMatrix::from_diagonal(&DVector::from_vec(core.sigma.clone()));
    let grad12 = &core.w1 * &core.u * core.v.transpose() * &core.w2;
    let grad11 = &core.w1 * &core.u * &d * core.u.transpose() * &core.w1 * -0.5;
    let grad22 = &core.w2 * &core.v * &d * core.v.transpose() * &core.w2 * -0.5;
    let scale = 1.0 / (m - 1.0);
    let g1 = (&core.cov.h2 * grad12.transpose() + &core.cov.h1 * &grad11 * 2.0) * scale;
    let g2 = (&core.cov.h1 * &grad12 + &core.cov.h2 * &grad22 * 2.0) * scale;
    let value = core.sigma.iter().sum();
    tape.custom_scalar(
        value,
        &[h1, h2],
        vec![from_mat(&g1).into_data(), from_mat(&g2).into_data()],
        OpKind::Cca,
    )
}

/// `−(corr(L,V) + corr(L,A) + corr(V,A))` over paired sample matrices given
/// in [`VIEW_PAIRS`] order.
pub fn multiview_cca_loss(tape: &mut Tape, pairs: &[(Var, Var); 3], r: f64, c: usize) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(a, b) in pairs {
        let corr = cca_corr_var(tape, a, b, r, c)?;
        total = Some(match total {
            Some(t) => tape.add(t, corr)?,
            None => corr,
        });
    }
    tape.scale(total.expect("three pairs"), -1.0)
}

/// Loss for three views whose rows are already paired sample-for-sample.
pub fn multiview_cca_loss_aligned(tape: &mut Tape, views: [Var; 3], r: f64, c: usize) -> Result<Var> {
    let [l, v, a] = views;
    multiview_cca_loss(tape, &[(l, v), (l, a), (v, a)], r, c)
}

/// Timestep pairs used as CCA samples between two streams of one utterance.
///
/// Equal-length streams (the aligned case) pair index-for-index where both
/// are valid. Otherwise each valid step of `a` is paired with the valid step
/// of `b` whose interval midpoint is nearest.
pub fn pair_timesteps(a: &ModalitySequence, b: &ModalitySequence) -> Vec<(usize, usize)> {
    if a.len() == b.len() {
        return (0..a.len()).filter(|&t| a.mask[t] && b.mask[t]).map(|t| (t, t)).collect();
    }
    let mid = |iv: (f64, f64)| 0.5 * (iv.0 + iv.1);
    let bvalid: Vec<usize> = (0..b.len()).filter(|&t| b.mask[t]).collect();
    if bvalid.is_empty() {
        return Vec::new();
    }
    (0..a.len())
        .filter(|&t| a.mask[t])
        .map(|i| {
            let ma = mid(a.intervals[i]);
            let j = *bvalid
                .iter()
                .min_by(|&&x, &&y| (mid(b.intervals[x]) - ma).abs().total_cmp(&(mid(b.intervals[y]) - ma).abs()))
                .expect("non-empty");
            (i, j)
        })
        .collect()
}

/// Validity of a self-attended sequence whose classification token is row 0.
pub fn token_mask(seq: &ModalitySequence) -> Vec<bool> {
    std::iter::once(true).chain(seq.mask.iter().copied()).collect()
}

/// [`pair_timesteps`] for token-prefixed sequences: the two token rows form
/// one pair and data rows are shifted down by one.
pub fn token_pairs(a: &ModalitySequence, b: &ModalitySequence) -> Vec<(usize, usize)> {
    std::iter::once((0, 0))
        .chain(pair_timesteps(a, b).into_iter().map(|(i, j)| (i + 1, j + 1)))
        .collect()
}

/// Linear canonical projections for one stream pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairProjection {
    pub mean_a: Vec<f64>,
    pub mean_b: Vec<f64>,
    /// `[d_r x c]`
    pub proj_a: Tensor,
    /// `[d_r x c]`
    pub proj_b: Tensor,
    pub correlations: Vec<f64>,
}

impl PairProjection {
    pub fn fit(h1: &Tensor, h2: &Tensor, r: f64, c: usize) -> Result<Self> {
        let core = cca_core(h1, h2, r, c)?;
        Ok(Self {
            mean_a: core.cov.mean1.iter().copied().collect(),
            mean_b: core.cov.mean2.iter().copied().collect(),
            proj_a: from_mat(&(&core.w1 * &core.u)),
            proj_b: from_mat(&(&core.w2 * &core.v)),
            correlations: core.sigma,
        })
    }
}

/// Fitted projections for all three stream pairs, in [`VIEW_PAIRS`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct CcaSolution {
    pub pairs: Vec<PairProjection>,
    pub reg: f64,
    pub components: usize,
}

impl CcaSolution {
    /// Mean and projection applied to stream `m` when building the fused
    /// sequence: L and V use their shared pair, A its pair with L.
    pub fn view(&self, m: Modality) -> (&[f64], &Tensor) {
        match m {
            Modality::L => (&self.pairs[0].mean_a, &self.pairs[0].proj_a),
            Modality::V => (&self.pairs[0].mean_b, &self.pairs[0].proj_b),
            Modality::A => (&self.pairs[1].mean_b, &self.pairs[1].proj_b),
        }
    }

    /// Identity projections with zero means; `d_r` columns.
    pub fn identity(d_r: usize) -> Self {
        let p = PairProjection {
            mean_a: vec![0.0; d_r],
            mean_b: vec![0.0; d_r],
            proj_a: Tensor::eye(d_r),
            proj_b: Tensor::eye(d_r),
            correlations: vec![1.0; d_r],
        };
        Self {
            pairs: vec![p.clone(), p.clone(), p],
            reg: 0.0,
            components: d_r,
        }
    }

    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (p, (a, b)) in self.pairs.iter().zip(VIEW_PAIRS) {
            let tag = format!("{a}{b}");
            let row = |v: &[f64]| Tensor::from_vec(&[1, v.len()], v.to_vec());
            out.push((format!("cca.{tag}.mean_a"), row(&p.mean_a)));
            out.push((format!("cca.{tag}.mean_b"), row(&p.mean_b)));
            out.push((format!("cca.{tag}.proj_a"), p.proj_a.clone()));
            out.push((format!("cca.{tag}.proj_b"), p.proj_b.clone()));
            out.push((format!("cca.{tag}.corr"), row(&p.correlations)));
        }
        out
    }

    pub fn from_tensors(tensors: &[Tensor], reg: f64, components: usize) -> Result<Self> {
        if tensors.len() != 15 {
            return Err(Error::Checkpoint(format!("expected 15 CCA tensors, found {}", tensors.len())));
        }
        let pairs = tensors
            .chunks(5)
            .map(|c| PairProjection {
                mean_a: c[0].data().to_vec(),
                mean_b: c[1].data().to_vec(),
                proj_a: c[2].clone(),
                proj_b: c[3].clone(),
                correlations: c[4].data().to_vec(),
            })
            .collect();
        Ok(Self { pairs, reg, components })
    }
}

/// Centres and projects each encoded stream, pads to `d_r` columns, and
/// stacks the three along time. Returns the fused sequence and its mask.
pub fn fused_representation(
    encoded: [&Tensor; 3],
    masks: [&[bool]; 3],
    sol: &CcaSolution,
) -> Result<(Tensor, Vec<bool>)> {
    let d_r = encoded[0].cols();
    let total: usize = encoded.iter().map(|e| e.rows()).sum();
    let mut data = Vec::with_capacity(total * d_r);
    let mut mask = Vec::with_capacity(total);
    for (m, (e, mk)) in Modality::ALL.iter().zip(encoded.iter().zip(masks)) {
        let (mean, proj) = sol.view(*m);
        if e.cols() != d_r || mean.len() != d_r || proj.rows() != d_r || proj.cols() > d_r {
            return Err(Error::shape("fused_representation", e.shape(), proj.shape()));
        }
        if mk.len() != e.rows() {
            return Err(Error::shape("fused_representation", e.shape(), &[mk.len()]));
        }
        let c = proj.cols();
        for t in 0..e.rows() {
            if !mk[t] {
                data.extend(std::iter::repeat_n(0.0, d_r));
                mask.push(false);
                continue;
            }
            let row = e.row(t);
            for j in 0..c {
                let mut acc = 0.0;
                for k in 0..d_r {
                    acc += (row[k] - mean[k]) * proj.get(k, j);
                }
                data.push(acc);
            }
            data.extend(std::iter::repeat_n(0.0, d_r - c));
            mask.push(true);
        }
    }
    Ok((Tensor::from_vec(&[total, d_r], data), mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn col(v: &[f64]) -> Tensor {
        Tensor::from_vec(&[v.len(), 1], v.to_vec())
    }

    fn random(m: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[m, d], (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn covariance_hand_example() {
        let (s11, s22, s12) = regularized_covariances(&col(&[-1.0, 1.0]), &col(&[-2.0, 2.0]), 0.0).unwrap();
        assert_eq!((s11.item(), s22.item(), s12.item()), (2.0, 8.0, 4.0));
    }

    #[test]
    fn constant_column_contributes_only_regulariser() {
        let h = Tensor::from_vec(&[3, 2], vec![1.0, 5.0, 2.0, 5.0, 4.0, 5.0]);
        let (s11, _, _) = regularized_covariances(&h, &h, 0.1).unwrap();
        assert_eq!(s11.get(1, 1), 0.1);
        assert_eq!(s11.get(0, 1), 0.0);
    }

    #[test]
    fn self_cross_covariance_is_unregularised() {
        let h = random(20, 3, 1);
        let (s11, _, s12) = regularized_covariances(&h, &h, 0.5).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = s11.get(i, j) - if i == j { 0.5 } else { 0.0 };
                assert!((s12.get(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(
            regularized_covariances(&col(&[1.0]), &col(&[1.0]), 0.1),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn scaled_copy_is_perfectly_correlated() {
        let h1 = col(&[0.3, -1.2, 2.0, 0.7, -0.4]);
        let h2 = col(&[0.6, -2.4, 4.0, 1.4, -0.8]);
        let c = cca_corr(&h1, &h2, 1e-10, 1).unwrap();
        assert!((c - 1.0).abs() < 1e-8, "{c}");
    }

    #[test]
    fn symmetric_in_its_arguments() {
        let (a, b) = (random(50, 3, 2), random(50, 2, 3));
        let x = cca_corr(&a, &b, 1e-3, 2).unwrap();
        let y = cca_corr(&b, &a, 1e-3, 2).unwrap();
        assert!((x - y).abs() < 1e-9);
    }

    #[test]
    fn pairing_by_index_or_midpoint() {
        let s = |m, iv: &[(f64, f64)]| {
            ModalitySequence::new(m, vec![vec![1.0]; iv.len()], iv.to_vec()).unwrap()
        };
        let mut a = s(Modality::L, &[(0.0, 1.0), (1.0, 2.0), (2.0, 3.0)]);
        let b = s(Modality::V, &[(0.0, 1.0), (1.0, 2.0), (2.0, 3.0)]);
        a.mask[1] = false;
        assert_eq!(pair_timesteps(&a, &b), vec![(0, 0), (2, 2)]);
        let c = s(Modality::A, &[(0.0, 0.5), (0.5, 1.0), (1.0, 1.5), (1.5, 2.5), (2.5, 3.0)]);
        assert_eq!(pair_timesteps(&a, &c), vec![(0, 0), (2, 4)]);
    }

    #[test]
    fn identity_solution_passes_blocks_through() {
        let e = random(4, 3, 5);
        let sol = CcaSolution::identity(3);
        let m = [true, true, false, true];
        let (fused, mask) = fused_representation([&e, &e, &e], [&m, &m, &m], &sol).unwrap();
        assert_eq!(fused.rows(), 12);
        assert_eq!(mask.len(), 12);
        for blk in 0..3 {
            for t in 0..4 {
                let expect: Vec<f64> = if m[t] { e.row(t).to_vec() } else { vec![0.0; 3] };
                assert_eq!(fused.row(blk * 4 + t), &expect[..]);
            }
        }
    }

    #[test]
    fn view_encoder_shapes_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ViewEncoderParams::new(3, 4, 5, 2, &mut rng);
        assert_eq!(p.param_count(), ViewEncoderParams::closed_form_count(3, 4, 5, 2));
        let mut tape = Tape::new();
        let y = tape.constant(random(7, 4, 1));
        let e = encode_view(&mut tape, y, &p).unwrap();
        assert_eq!(tape.value(e).shape(), &[7, 2]);

        let id = ViewEncoderParams {
            k1: Tensor::from_vec(&[1, 1, 1], vec![1.0]),
            k2: Tensor::from_vec(&[1, 1, 1], vec![1.0]),
        };
        let x = tape.constant(col(&[0.0, 0.5, 2.0, 3.25]));
        let e = encode_view(&mut tape, x, &id).unwrap();
        assert_eq!(tape.value(e).data(), &[0.0, 0.5, 2.0, 3.25]);
        let z = tape.constant(Tensor::zeros(&[5, 4]));
        let e = encode_view(&mut tape, z, &p).unwrap();
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
    }
}
