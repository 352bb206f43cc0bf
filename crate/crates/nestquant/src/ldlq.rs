//! Feedback weight quantization driven by second-order activation
//! statistics: Hessian accumulation, LDLᵀ factorization, block LDLQ, its
//! noise-aware variant, and the supporting loss diagnostics.
//!
//! The proxy objective is `tr((W−Û)H(W−Û)ᵀ)` with `H = E[xxᵀ]` the
//! activation second-moment matrix. LDLQ processes columns from last to
//! first; when quantizing column block `J` it adds the feedback
//! `Σ_{i>J} (W−Û)_i L_{iJ}` from already-quantized columns, where
//! `H = LDLᵀ` with `L` unit lower triangular.

use crate::codec::{self, QuantizerConfig};
use crate::error::{Error, Result};
use crate::lattice::{round_half_up, DIM};
use crate::mat::Mat;
use crate::sampling;
use rand_distr::StandardNormal;
use rand::Rng;

/// Streaming estimate of the activation second-moment matrix `E[xxᵀ]`.
///
/// Stores the running sum so that independently accumulated instances can be
/// merged exactly; [`Hessian::matrix`] divides by the sample count.
#[derive(Debug, Clone)]
pub struct Hessian {
    sum: Mat,
    count: usize,
}

impl Hessian {
    pub fn new(dim: usize) -> Result<Hessian> {
        if dim == 0 {
            return Err(Error::invalid("Hessian dimension must be positive"));
        }
        Ok(Hessian { sum: Mat::zeros(dim, dim), count: 0 })
    }

    pub fn dim(&self) -> usize {
        self.sum.rows()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Add one activation vector.
    pub fn accumulate(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::shape(format!(
                "sample has {} entries, Hessian dimension is {}",
                x.len(),
                self.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite activation sample"));
        }
        let n = self.dim();
        for i in 0..n {
            let row = &mut self.sum.as_mut_slice()[i * n..(i + 1) * n];
            let xi = x[i];
            for j in 0..n {
                row[j] += xi * x[j];
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Add every row of a batch.
    pub fn accumulate_batch(&mut self, batch: &Mat) -> Result<()> {
        for i in 0..batch.rows() {
            self.accumulate(batch.row(i))?;
        }
        Ok(())
    }

    /// Fold another accumulator (e.g. from a parallel shard) into this one.
    pub fn merge(&mut self, other: &Hessian) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(Error::shape("merging Hessians of different dimensions"));
        }
        for (a, b) in self
            .sum
            .as_mut_slice()
            .iter_mut()
            .zip(other.sum.as_slice())
        {
            *a += *b;
        }
        self.count += other.count;
        Ok(())
    }

    /// The mean `E[xxᵀ]` over everything accumulated so far.
    pub fn matrix(&self) -> Result<Mat> {
        if self.count == 0 {
            return Err(Error::invalid("no samples accumulated"));
        }
        let mut m = self.sum.clone();
        let inv = 1.0 / self.count as f64;
        for v in m.as_mut_slice() {
            *v *= inv;
        }
        Ok(m)
    }
}

/// Unit-lower-triangular LDLᵀ factors of a (ridge-stabilized) SPD matrix.
#[derive(Debug, Clone)]
pub struct LdlFactors {
    l: Mat,
    d: Vec<f64>,
}

impl LdlFactors {
    pub fn dim(&self) -> usize {
        self.d.len()
    }

    /// Unit lower-triangular factor.
    pub fn l(&self) -> &Mat {
        &self.l
    }

    /// Positive pivot diagonal.
    pub fn d(&self) -> &[f64] {
        &self.d
    }

    /// `L·D·Lᵀ` (diagnostics; equals the factored matrix up to roundoff).
    pub fn reconstruct(&self) -> Mat {
        let n = self.dim();
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..=i.min(j) {
                    acc += self.l[(i, k)] * self.d[k] * self.l[(j, k)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    /// Solve `(LDLᵀ)x = b` in place.
    pub fn solve_in_place(&self, x: &mut [f64]) -> Result<()> {
        let n = self.dim();
        if x.len() != n {
            return Err(Error::shape("right-hand side length mismatch"));
        }
        // forward: L y = b
        for i in 0..n {
            let mut acc = x[i];
            for j in 0..i {
                acc -= self.l[(i, j)] * x[j];
            }
            x[i] = acc;
        }
        // diagonal
        for i in 0..n {
            x[i] /= self.d[i];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in i + 1..n {
                acc -= self.l[(j, i)] * x[j];
            }
            x[i] = acc;
        }
        Ok(())
    }

    /// Map a standard Gaussian vector `g` to `L·diag(√d)·g`, which has
    /// covariance `LDLᵀ` — the factored matrix. Used to sample activations
    /// with a prescribed second-moment matrix.
    pub fn apply_sqrt(&self, g: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        if g.len() != n {
            return Err(Error::shape("input length mismatch"));
        }
        let scaled: Vec<f64> = (0..n).map(|i| self.d[i].sqrt() * g[i]).collect();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = scaled[i]; // unit diagonal
            for j in 0..i {
                acc += self.l[(i, j)] * scaled[j];
            }
            out[i] = acc;
        }
        Ok(out)
    }
}

/// Default stabilization: `10⁻⁶ · tr(H)/n`.
pub fn default_ridge(h: &Mat) -> f64 {
    let n = h.rows().max(1);
    let tr: f64 = (0..h.rows().min(h.cols())).map(|i| h[(i, i)]).sum();
    1e-6 * tr / n as f64
}

/// Factor `H + ridge·I = LDLᵀ`. Fails with a numerical error (suggesting a
/// larger ridge) when a pivot is not strictly positive.
pub fn ldl_decompose(h: &Mat, ridge: f64) -> Result<LdlFactors> {
    if h.rows() != h.cols() {
        return Err(Error::shape(format!(
            "Hessian must be square, got {}×{}",
            h.rows(),
            h.cols()
        )));
    }
    if ridge < 0.0 || !ridge.is_finite() || !h.is_finite() {
        return Err(Error::invalid("ridge must be a nonnegative finite number"));
    }
    let n = h.rows();
    let mut l = Mat::eye(n);
    let mut d = vec![0.0f64; n];
    for j in 0..n {
        let mut dj = h[(j, j)] + ridge;
        for k in 0..j {
            dj -= l[(j, k)] * l[(j, k)] * d[k];
        }
        if dj.is_nan() || dj <= 0.0 {
            return Err(Error::Numerical(format!(
                "nonpositive pivot {dj:.3e} at column {j}; the matrix is not \
                 positive definite at this ridge — increase it (default is \
                 1e-6·tr(H)/n)"
            )));
        }
        d[j] = dj;
        for i in j + 1..n {
            let mut acc = h[(i, j)];
            for k in 0..j {
                acc -= l[(i, k)] * l[(j, k)] * d[k];
            }
            l[(i, j)] = acc / dj;
        }
    }
    Ok(LdlFactors { l, d })
}

/// An 8-block quantizer used inside LDLQ. `Code` is whatever compressed
/// representation the quantizer emits alongside the reconstruction.
pub trait BlockQuantizer {
    type Code;

    /// Quantize a raw block (absolute scale — LDLQ does not normalize).
    /// Returns the reconstruction and its code.
    fn quantize_block8(&self, v: &[f64; 8]) -> ([f64; 8], Self::Code);
}

/// A scalar quantizer for the width-1 (fully sequential) LDLQ variant.
pub trait ScalarQuantizer {
    fn quantize_scalar(&self, x: f64) -> f64;
}

/// Residues and β index of one nested-lattice block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NestedBlockCode {
    pub residues: [u8; 8],
    pub beta_idx: u8,
}

/// Nested-lattice block quantizer over an absolute-β ladder.
#[derive(Debug, Clone)]
pub struct NestQuantBlockQuantizer {
    cfg: QuantizerConfig,
}

impl NestQuantBlockQuantizer {
    pub fn new(cfg: QuantizerConfig) -> NestQuantBlockQuantizer {
        NestQuantBlockQuantizer { cfg }
    }

    pub fn config(&self) -> &QuantizerConfig {
        &self.cfg
    }
}

impl BlockQuantizer for NestQuantBlockQuantizer {
    type Code = NestedBlockCode;

    fn quantize_block8(&self, v: &[f64; 8]) -> ([f64; 8], NestedBlockCode) {
        let (rep, code, idx) = codec::quantize_block_multibeta(v, &self.cfg);
        let beta = self.cfg.betas()[idx as usize];
        let mut out = [0.0f64; 8];
        let mut residues = [0u8; 8];
        for i in 0..8 {
            out[i] = beta * rep[i];
            residues[i] = code.residues[i] as u8;
        }
        (out, NestedBlockCode { residues, beta_idx: idx })
    }
}

/// Round-to-nearest on a uniform grid of the given step (baseline).
#[derive(Debug, Clone, Copy)]
pub struct RtnQuantizer {
    step: f64,
}

impl RtnQuantizer {
    pub fn new(step: f64) -> Result<RtnQuantizer> {
        if step <= 0.0 || !step.is_finite() {
            return Err(Error::invalid("RTN step must be positive and finite"));
        }
        Ok(RtnQuantizer { step })
    }

    pub fn step(&self) -> f64 {
        self.step
    }
}

impl ScalarQuantizer for RtnQuantizer {
    fn quantize_scalar(&self, x: f64) -> f64 {
        self.step * round_half_up(x / self.step)
    }
}

impl BlockQuantizer for RtnQuantizer {
    type Code = ();

    fn quantize_block8(&self, v: &[f64; 8]) -> ([f64; 8], ()) {
        let mut out = [0.0f64; 8];
        for i in 0..8 {
            out[i] = self.quantize_scalar(v[i]);
        }
        (out, ())
    }
}

/// LDLQ result: the reconstruction and the per-row, per-block codes.
#[derive(Debug, Clone)]
pub struct LdlqOutput<C> {
    pub u_hat: Mat,
    pub codes: Vec<Vec<C>>,
}

fn check_ldlq_shapes(w: &Mat, factors: &LdlFactors) -> Result<()> {
    if w.cols() != factors.dim() {
        return Err(Error::shape(format!(
            "weights have {} columns, factors are {}-dimensional",
            w.cols(),
            factors.dim()
        )));
    }
    if w.rows() == 0 || w.cols() == 0 {
        return Err(Error::shape("empty weight matrix"));
    }
    if !w.is_finite() {
        return Err(Error::invalid("non-finite weight entry"));
    }
    Ok(())
}

/// Block LDLQ: quantize 8-column groups from last to first, feeding the
/// accumulated quantization error of later columns back through `L`.
/// Within a block the 8 columns are quantized jointly by the block
/// quantizer, which drops the intra-block feedback terms.
pub fn ldlq_quantize<Q: BlockQuantizer>(
    w: &Mat,
    factors: &LdlFactors,
    quantizer: &Q,
) -> Result<LdlqOutput<Q::Code>> {
    check_ldlq_shapes(w, factors)?;
    if !w.cols().is_multiple_of(DIM) {
        return Err(Error::shape(format!(
            "column count {} is not a multiple of {DIM}",
            w.cols()
        )));
    }
    let (rows, n) = (w.rows(), w.cols());
    let nblocks = n / DIM;
    let mut u_hat = Mat::zeros(rows, n);
    let mut err = Mat::zeros(rows, n); // (W − Û) on processed columns
    let mut codes: Vec<Vec<Option<Q::Code>>> =
        (0..rows).map(|_| (0..nblocks).map(|_| None).collect()).collect();
    for b in (0..nblocks).rev() {
        let j0 = b * DIM;
        let tail = j0 + DIM; // first already-processed column
        for r in 0..rows {
            let mut v = [0.0f64; 8];
            let werr = err.row(r);
            for (t, slot) in v.iter_mut().enumerate() {
                let j = j0 + t;
                let mut acc = w[(r, j)];
                for i in tail..n {
                    acc += werr[i] * factors.l[(i, j)];
                }
                *slot = acc;
            }
            let (rec, code) = quantizer.quantize_block8(&v);
            codes[r][b] = Some(code);
            for t in 0..DIM {
                let j = j0 + t;
                u_hat[(r, j)] = rec[t];
                err[(r, j)] = w[(r, j)] - rec[t];
            }
        }
    }
    let codes = codes
        .into_iter()
        .map(|row| row.into_iter().map(|c| c.expect("all blocks visited")).collect())
        .collect();
    Ok(LdlqOutput { u_hat, codes })
}

/// Fully sequential (width-1) LDLQ with a scalar quantizer. Returns the
/// reconstruction; the loss identity
/// `tr((W−Û)(LDLᵀ)(W−Û)ᵀ) = Σ_j d_j‖V_j − Û_j‖²` holds exactly for this
/// variant.
pub fn ldlq_quantize_scalar<Q: ScalarQuantizer>(
    w: &Mat,
    factors: &LdlFactors,
    quantizer: &Q,
) -> Result<Mat> {
    check_ldlq_shapes(w, factors)?;
    let (rows, n) = (w.rows(), w.cols());
    let mut u_hat = Mat::zeros(rows, n);
    let mut err = Mat::zeros(rows, n);
    for j in (0..n).rev() {
        for r in 0..rows {
            let mut v = w[(r, j)];
            let werr = err.row(r);
            for i in j + 1..n {
                v += werr[i] * factors.l[(i, j)];
            }
            let q = quantizer.quantize_scalar(v);
            u_hat[(r, j)] = q;
            err[(r, j)] = w[(r, j)] - q;
        }
    }
    Ok(u_hat)
}

/// Additive white noise on the quantized operand, variance ε² per
/// coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub eps2: f64,
}

/// Noise-aware LDLQ: solve for the noise-shrunk target
/// `W̃ = W·H·(H+ε²I)⁻¹` and run LDLQ against `H + ε²I`.
///
/// With `ε² = 0` this takes the plain LDLQ path literally, so the outputs
/// are bitwise identical to [`ldlq_quantize`].
pub fn qa_ldlq_quantize<Q: BlockQuantizer>(
    w: &Mat,
    h: &Mat,
    noise: NoiseModel,
    ridge: f64,
    quantizer: &Q,
) -> Result<LdlqOutput<Q::Code>> {
    if noise.eps2 < 0.0 || !noise.eps2.is_finite() {
        return Err(Error::invalid("ε² must be nonnegative and finite"));
    }
    if noise.eps2 == 0.0 {
        let factors = ldl_decompose(h, ridge)?;
        return ldlq_quantize(w, &factors, quantizer);
    }
    if h.rows() != h.cols() || h.rows() != w.cols() {
        return Err(Error::shape("weight/Hessian dimension mismatch"));
    }
    let n = h.rows();
    let mut h_eff = h.clone();
    for i in 0..n {
        h_eff[(i, i)] += noise.eps2;
    }
    let factors = ldl_decompose(&h_eff, ridge)?;
    // W̃ rows: (H+ε²I)⁻¹ · H · wᵀ
    let mut w_tilde = Mat::zeros(w.rows(), n);
    let mut tmp = vec![0.0f64; n];
    for r in 0..w.rows() {
        let wr = w.row(r);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += h[(i, j)] * wr[j];
            }
            tmp[i] = acc;
        }
        factors.solve_in_place(&mut tmp)?;
        w_tilde.row_mut(r).copy_from_slice(&tmp);
    }
    ldlq_quantize(&w_tilde, &factors, quantizer)
}

/// Proxy loss `tr((W−U)·H·(W−U)ᵀ)`.
pub fn proxy_loss(w: &Mat, u: &Mat, h: &Mat) -> Result<f64> {
    if w.rows() != u.rows() || w.cols() != u.cols() {
        return Err(Error::shape("W and U shapes differ"));
    }
    if h.rows() != h.cols() || h.rows() != w.cols() {
        return Err(Error::shape("Hessian dimension mismatch"));
    }
    let n = w.cols();
    let mut total = 0.0;
    let mut e = vec![0.0f64; n];
    for r in 0..w.rows() {
        for j in 0..n {
            e[j] = w[(r, j)] - u[(r, j)];
        }
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += h[(i, j)] * e[j];
            }
            total += e[i] * acc;
        }
    }
    Ok(total)
}

/// Expected loss under activation noise `z ~ N(0, ε²I)` on the quantized
/// operand: `E‖Wx − U(x+z)‖² = tr((W−U)H(W−U)ᵀ) + ε²‖U‖²_F`.
pub fn noisy_loss(w: &Mat, u: &Mat, h: &Mat, eps2: f64) -> Result<f64> {
    if eps2 < 0.0 || !eps2.is_finite() {
        return Err(Error::invalid("ε² must be nonnegative and finite"));
    }
    let base = proxy_loss(w, u, h)?;
    let ufro: f64 = u.as_slice().iter().map(|v| v * v).sum();
    Ok(base + eps2 * ufro)
}

/// The U-independent part of the noisy loss:
/// `C(W, H, ε²) = tr(W·(H − H(H+ε²I)⁻¹H)·Wᵀ)`, so that
/// `noisy_loss(W, U, H, ε²) = C + tr((W̃−U)(H+ε²I)(W̃−U)ᵀ)` with
/// `W̃ = WH(H+ε²I)⁻¹`.
pub fn irreducible_noisy_loss(w: &Mat, h: &Mat, eps2: f64, ridge: f64) -> Result<f64> {
    if h.rows() != h.cols() || h.rows() != w.cols() {
        return Err(Error::shape("weight/Hessian dimension mismatch"));
    }
    if eps2 < 0.0 || !eps2.is_finite() {
        return Err(Error::invalid("ε² must be nonnegative and finite"));
    }
    let n = h.rows();
    let mut h_eff = h.clone();
    for i in 0..n {
        h_eff[(i, i)] += eps2;
    }
    let factors = ldl_decompose(&h_eff, ridge)?;
    let mut total = 0.0;
    let mut hw = vec![0.0f64; n];
    let mut shw = vec![0.0f64; n];
    for r in 0..w.rows() {
        let wr = w.row(r);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += h[(i, j)] * wr[j];
            }
            hw[i] = acc;
        }
        shw.copy_from_slice(&hw);
        factors.solve_in_place(&mut shw)?;
        // wᵀHw − (Hw)ᵀ(H+ε²I)⁻¹(Hw)
        for i in 0..n {
            total += wr[i] * hw[i] - hw[i] * shw[i];
        }
    }
    Ok(total)
}

/// Estimate the codec's effective per-coordinate noise ε² as the mean
/// squared reconstruction error of [`codec::quantize_row`] over the given
/// calibration rows (row normalization included).
pub fn estimate_noise(calibration: &Mat, cfg: &QuantizerConfig) -> Result<f64> {
    if calibration.rows() == 0 {
        return Err(Error::invalid("no calibration rows"));
    }
    let mut se = 0.0;
    for r in 0..calibration.rows() {
        let row = calibration.row(r);
        let qv = codec::quantize_row(row, cfg)?;
        let back = codec::dequantize_row(&qv, cfg)?;
        for (x, y) in row.iter().zip(&back) {
            let d = x - y;
            se += d * d;
        }
    }
    Ok(se / (calibration.rows() * calibration.cols()) as f64)
}

/// Spectral-direction sensitivity diagnostic
/// `α(W, Z)/α(W, X)` with `α(W, V) = E‖Wv‖₂ / E‖v‖₂`:
/// how much more a generic (Gaussian) direction is amplified by `W` than the
/// observed activation directions. Zero-norm samples are excluded; the
/// Gaussian expectation uses `mc_samples` seeded draws.
pub fn amplification_ratio(
    w: &Mat,
    activations: &Mat,
    mc_samples: usize,
    seed: u64,
) -> Result<f64> {
    if activations.cols() != w.cols() {
        return Err(Error::shape(format!(
            "activations have {} columns, weights expect {}",
            activations.cols(),
            w.cols()
        )));
    }
    if mc_samples == 0 {
        return Err(Error::invalid("mc_samples must be positive"));
    }
    let norm_pair = |v: &[f64]| -> (f64, f64) {
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 == 0.0 {
            return (0.0, 0.0);
        }
        let mut wn2 = 0.0;
        for r in 0..w.rows() {
            let row = w.row(r);
            let mut acc = 0.0;
            for j in 0..v.len() {
                acc += row[j] * v[j];
            }
            wn2 += acc * acc;
        }
        (wn2.sqrt(), n2.sqrt())
    };

    let mut data_num = 0.0;
    let mut data_den = 0.0;
    for i in 0..activations.rows() {
        let (a, b) = norm_pair(activations.row(i));
        data_num += a;
        data_den += b;
    }
    if data_den == 0.0 {
        return Err(Error::invalid("all activation samples have zero norm"));
    }

    let n = w.cols();
    let (mc_num, mc_den) = sampling::map_reduce_chunks(
        seed,
        mc_samples,
        |rng, len| {
            let mut acc = (0.0f64, 0.0f64);
            let mut g = vec![0.0f64; n];
            for _ in 0..len {
                for v in g.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let (a, b) = norm_pair(&g);
                acc.0 += a;
                acc.1 += b;
            }
            acc
        },
        |a, b| (a.0 + b.0, a.1 + b.1),
        (0.0, 0.0),
    );
    if mc_den == 0.0 {
        return Err(Error::Numerical("degenerate Monte-Carlo draw".into()));
    }

    let alpha_gauss = mc_num / mc_den;
    let alpha_data = data_num / data_den;
    if alpha_data == 0.0 {
        return Err(Error::Numerical(
            "activations are annihilated by W; ratio is unbounded".into(),
        ));
    }
    Ok(alpha_gauss / alpha_data)
}
