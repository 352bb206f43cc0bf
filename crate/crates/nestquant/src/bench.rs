//! Synthetic Gaussian matrix-multiplication benchmark.
//!
//! Measures the rate-distortion frontier of the nested-lattice codec against
//! uniform scalar-quantization baselines on `A·Bᵀ` with iid standard Gaussian
//! operands, and emits the Γ(R) lower-bound reference alongside each point.

use crate::beta::{self, MarginKind, Preset};
use crate::bounds;
use crate::codec::{self, QuantizerConfig, Strategy};
use crate::error::{Error, Result};
use crate::lattice::DIM;
use crate::mat::Mat;
use crate::sampling;

/// Largest `n` the in-memory benchmark accepts. Above this the four dense
/// operand/reconstruction matrices no longer fit comfortably and the product
/// must be streamed in row blocks, which this routine does not do.
pub const MAX_IN_MEMORY_N: usize = 4096;

/// Profile at most this many blocks when optimizing β ladders.
const PROFILE_BLOCK_CAP: usize = 1 << 15;

/// One measured point on the bits-per-entry vs error frontier.
///
/// `rmse` is the per-entry root mean squared error of the approximate product,
/// `‖A·Bᵀ − Â·B̂ᵀ‖_F / √(rows_a · rows_b)`; each product entry is an inner
/// product of length `n`, so `mse` is the mean squared inner-product error.
/// `lower_bound_rmse = √(n·Γ(bits_entropy))` is the information-theoretic
/// floor for that error at the measured entropy rate.
#[derive(Debug, Clone)]
pub struct RateDistortionPoint {
    pub label: String,
    pub bits_fixed: f64,
    pub bits_entropy: f64,
    pub rmse: f64,
    pub lower_bound_rmse: f64,
    pub mse: f64,
    pub mse_stderr: f64,
}

/// A quantization scheme to benchmark.
#[derive(Debug, Clone)]
pub enum BenchScheme {
    /// Nested-lattice codec with `k` β's chosen by dynamic programming over
    /// `universe` (in normalized β̂ = β·q units) on blocks subsampled from the
    /// normalized rows of the operands.
    NestQuant {
        q: u16,
        k: usize,
        universe: Vec<f64>,
    },
    /// Per-row uniform scalar quantizer with `bits` bits per entry.
    Uniform { bits: u32 },
}

/// A labeled benchmark configuration.
#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub label: String,
    pub scheme: BenchScheme,
}

impl BenchSpec {
    /// Nested-lattice configuration drawing β candidates from `preset`.
    pub fn nestquant(q: u16, k: usize, preset: Preset) -> Self {
        BenchSpec {
            label: format!("nestquant_q{q}_k{k}"),
            scheme: BenchScheme::NestQuant {
                q,
                k,
                universe: beta::preset_universe(preset),
            },
        }
    }

    /// Uniform scalar baseline at `bits` bits per entry.
    pub fn uniform(bits: u32) -> Self {
        BenchSpec {
            label: format!("uniform_{bits}bit"),
            scheme: BenchScheme::Uniform { bits },
        }
    }
}

/// Default frontier sweep: the codec across a ladder of nesting ratios with
/// four β's each, plus uniform baselines from 2 to 5 bits.
pub fn default_configs() -> Vec<BenchSpec> {
    let mut specs: Vec<BenchSpec> = [6u16, 8, 10, 12, 14, 16, 18]
        .iter()
        .map(|&q| BenchSpec::nestquant(q, 4, Preset::Wide))
        .collect();
    specs.extend((2..=5).map(BenchSpec::uniform));
    specs
}

/// Runs the synthetic benchmark: samples `A, B` as iid `N(0,1)` `n×n`
/// matrices from `seed` and measures every configuration on `A·Bᵀ`.
///
/// `n` must be a positive multiple of 8 and at most [`MAX_IN_MEMORY_N`];
/// larger products need streamed row-block computation.
pub fn synthetic_matmul_benchmark(
    n: usize,
    specs: &[BenchSpec],
    seed: u64,
) -> Result<Vec<RateDistortionPoint>> {
    if n == 0 || !n.is_multiple_of(DIM) {
        return Err(Error::invalid(format!(
            "benchmark size n={n} must be a positive multiple of {DIM}"
        )));
    }
    if n > MAX_IN_MEMORY_N {
        return Err(Error::invalid(format!(
            "n={n} exceeds the in-memory limit {MAX_IN_MEMORY_N}; computing the \
             product needs streamed row-block evaluation — run row blocks \
             separately and merge the per-block statistics"
        )));
    }
    let a = sampling::gaussian_mat(seed, n, n);
    let b = sampling::gaussian_mat(seed ^ 0x42d9_a11c_e8b1_7f03, n, n);
    benchmark_pair(&a, &b, specs)
}

/// Measures every configuration on the product `A·Bᵀ` of caller-provided
/// operands. Column counts must match and be a positive multiple of 8.
pub fn benchmark_pair(a: &Mat, b: &Mat, specs: &[BenchSpec]) -> Result<Vec<RateDistortionPoint>> {
    if a.cols() != b.cols() || a.cols() == 0 || !a.cols().is_multiple_of(DIM) {
        return Err(Error::invalid(format!(
            "operand columns {}x{} must match and be a positive multiple of {DIM}",
            a.cols(),
            b.cols()
        )));
    }
    let exact = a.matmul_nt(b)?;
    specs
        .iter()
        .map(|spec| measure_spec(a, b, &exact, spec))
        .collect()
}

fn measure_spec(a: &Mat, b: &Mat, exact: &Mat, spec: &BenchSpec) -> Result<RateDistortionPoint> {
    let n = a.cols() as f64;
    let (approx, bits_fixed, bits_entropy) = match &spec.scheme {
        BenchScheme::NestQuant { q, k, universe } => {
            let cfg = fit_nestquant_config(
                &[a, b],
                *q,
                *k,
                universe,
                Some(MarginKind::Activations),
            )?;
            let qa = codec::quantize_matrix(a, &cfg)?;
            let qb = codec::quantize_matrix(b, &cfg)?;
            let approx = codec::quantized_matmul(&qa, &qb)?;
            // Pool the β usage of both operands; they hold equally many
            // blocks, so the pooled histogram is the plain average.
            let ha = codec::beta_histogram(&qa);
            let hb = codec::beta_histogram(&qb);
            let pooled: Vec<f64> = ha
                .iter()
                .zip(&hb)
                .map(|(x, y)| 0.5 * (x + y))
                .collect();
            let (fixed, entropy) = codec::effective_rate(&cfg, &pooled)?;
            (approx, fixed, entropy)
        }
        BenchScheme::Uniform { bits } => {
            let ahat = uniform_quantize_matrix(a, *bits)?;
            let bhat = uniform_quantize_matrix(b, *bits)?;
            // The baseline spends its bit budget as-is; no entropy coding.
            (ahat.matmul_nt(&bhat)?, *bits as f64, *bits as f64)
        }
    };

    // Per-entry squared errors, aggregated per product row so the spread
    // estimate works on (nearly) exchangeable units. Rows of the product
    // share columns of B, so `mse_stderr` neglects that cross-row coupling;
    // it is used only as a slack term.
    let rows = exact.rows();
    let mut row_means = Vec::with_capacity(rows);
    for i in 0..rows {
        let e = exact.row(i);
        let h = approx.row(i);
        let sum: f64 = e.iter().zip(h).map(|(x, y)| (x - y) * (x - y)).sum();
        row_means.push(sum / e.len() as f64);
    }
    let mse = row_means.iter().sum::<f64>() / rows as f64;
    let var = if rows > 1 {
        row_means
            .iter()
            .map(|m| (m - mse) * (m - mse))
            .sum::<f64>()
            / (rows - 1) as f64
    } else {
        0.0
    };
    let mse_stderr = (var / rows as f64).sqrt();

    Ok(RateDistortionPoint {
        label: spec.label.clone(),
        bits_fixed,
        bits_entropy,
        rmse: mse.sqrt(),
        lower_bound_rmse: (n * bounds::gamma_lower_bound(bits_entropy)?).sqrt(),
        mse,
        mse_stderr,
    })
}

/// Chooses a β ladder for `(q, k)` by profiling blocks subsampled from the
/// normalized rows of the given matrices and running the DP selector.
/// `universe` is in normalized β̂ = β·q units; `margin`, when given, widens
/// the largest β so blocks outside the profiled subsample cannot saturate
/// the ladder. Matrices must share a column count divisible by 8.
pub fn fit_nestquant_config(
    mats: &[&Mat],
    q: u16,
    k: usize,
    universe: &[f64],
    margin: Option<MarginKind>,
) -> Result<QuantizerConfig> {
    let cols = match mats {
        [] => return Err(Error::invalid("no matrices to profile")),
        [first, rest @ ..] => {
            if rest.iter().any(|m| m.cols() != first.cols()) {
                return Err(Error::shape("profiled matrices differ in column count"));
            }
            first.cols()
        }
    };
    if cols == 0 || cols % DIM != 0 {
        return Err(Error::shape(format!(
            "columns {cols} must be a positive multiple of {DIM}"
        )));
    }
    let absolute = beta::absolute_universe(universe, q)?;
    let total_blocks = mats.iter().map(|m| m.rows()).sum::<usize>() * (cols / DIM);
    let stride = total_blocks.div_ceil(PROFILE_BLOCK_CAP).max(1);
    let mut samples: Vec<[f64; DIM]> = Vec::with_capacity(total_blocks.div_ceil(stride));
    let mut index = 0usize;
    for m in mats {
        for i in 0..m.rows() {
            let row = m.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let factor = if norm > 0.0 {
                (row.len() as f64).sqrt() / norm
            } else {
                0.0
            };
            for block in row.chunks_exact(DIM) {
                if index.is_multiple_of(stride) {
                    let mut s = [0.0f64; DIM];
                    for (dst, src) in s.iter_mut().zip(block) {
                        *dst = src * factor;
                    }
                    samples.push(s);
                }
                index += 1;
            }
        }
    }
    let mut betas = if samples.iter().all(|s| s.iter().all(|v| *v == 0.0)) {
        // Degenerate (all-zero) input: any ladder works because every row
        // quantizes to scale 0; keep the k smallest candidates.
        absolute.iter().take(k).copied().collect::<Vec<f64>>()
    } else {
        let profile = beta::profile_errors(&samples, &absolute, q)?;
        let (chosen, _) = beta::dp_optimal_betas(&profile, k)?;
        chosen.iter().map(|&i| absolute[i]).collect()
    };
    if let Some(kind) = margin {
        beta::apply_margin(&mut betas, kind, q)?;
    }
    QuantizerConfig::new(q, betas, Strategy::Opt)
}

fn uniform_quantize_matrix(m: &Mat, bits: u32) -> Result<Mat> {
    let mut out = Mat::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let qrow = codec::uniform_quantize_row(m.row(i), bits)?;
        out.row_mut(i).copy_from_slice(&qrow);
    }
    Ok(out)
}

/// Predicted per-entry RMSE of the product under independent-error
/// propagation: with per-coordinate reconstruction errors `E = Â−A`,
/// `F = B̂−B`, each inner product of length `n` picks up
/// `n·(σ_E²·c_B + σ_F²·c_A + σ_E²·σ_F²)` of squared error, where `c` is the
/// per-coordinate second moment of the clean operand. Used to cross-check
/// measured benchmark error against the block reconstruction error.
pub fn propagation_prediction(a: &Mat, a_hat: &Mat, b: &Mat, b_hat: &Mat) -> Result<f64> {
    if a.rows() != a_hat.rows()
        || a.cols() != a_hat.cols()
        || b.rows() != b_hat.rows()
        || b.cols() != b_hat.cols()
        || a.cols() != b.cols()
    {
        return Err(Error::invalid("propagation prediction: shape mismatch"));
    }
    let n = a.cols() as f64;
    let msq = |m: &Mat| m.frobenius().powi(2) / (m.rows() * m.cols()) as f64;
    let diff_msq = |m: &Mat, mh: &Mat| {
        m.as_slice()
            .iter()
            .zip(mh.as_slice())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / (m.rows() * m.cols()) as f64
    };
    let (se2, sf2) = (diff_msq(a, a_hat), diff_msq(b, b_hat));
    let (ca, cb) = (msq(a), msq(b));
    Ok((n * (se2 * cb + sf2 * ca + se2 * sf2)).sqrt())
}

/// Writes benchmark points as CSV with a header row; plot-ready.
pub fn write_benchmark_csv<W: std::io::Write>(
    points: &[RateDistortionPoint],
    seed: u64,
    n: usize,
    w: &mut W,
) -> Result<()> {
    writeln!(
        w,
        "config,bits_fixed,bits_entropy,rmse,lower_bound_rmse,seed,n"
    )?;
    for p in points {
        writeln!(
            w,
            "{},{},{},{},{},{seed},{n}",
            p.label, p.bits_fixed, p.bits_entropy, p.rmse, p.lower_bound_rmse
        )?;
    }
    Ok(())
}
