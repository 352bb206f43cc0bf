//! Closed-form rate-distortion limits, Gaussian shaping-region measures,
//! and Monte-Carlo normalized-second-moment estimation.

use crate::error::{Error, Result};
use crate::lattice;
use crate::sampling;
use rand::Rng;

/// Rate below which the inner-product distortion lower bound switches to its
/// linear (time-sharing) segment.
pub const CRITICAL_RATE: f64 = 0.906;

fn check_rate(r: f64) -> Result<()> {
    if !r.is_finite() || r < 0.0 {
        return Err(Error::invalid(format!(
            "rate must be a nonnegative finite number, got {r}"
        )));
    }
    Ok(())
}

/// Lower bound Γ(R) on the per-dimension inner-product distortion of any
/// R-bit quantizer (inputs on the unit sphere):
/// `Γ(R) = 2·2^{−2R} − 2^{−4R}` for `R ≥ R* = 0.906`, extended linearly
/// through the origin below R* (time sharing with the zero-rate scheme), so
/// `Γ(0) = 1`.
pub fn gamma_lower_bound(r: f64) -> Result<f64> {
    check_rate(r)?;
    let g = |x: f64| 2.0 * 2f64.powf(-2.0 * x) - 2f64.powf(-4.0 * x);
    if r >= CRITICAL_RATE {
        Ok(g(r))
    } else {
        let g_star = g(CRITICAL_RATE);
        Ok(1.0 - (1.0 - g_star) * r / CRITICAL_RATE)
    }
}

/// Shannon distortion-rate function of a unit Gaussian source:
/// `D(R) = 2^{−2R}`.
pub fn rate_distortion_gaussian(r: f64) -> Result<f64> {
    check_rate(r)?;
    Ok(2f64.powf(-2.0 * r))
}

/// `P(‖X‖₂ ≤ radius)` for `X ~ N(0, I₈)` — the χ²₈ CDF in closed form:
/// `1 − e^{−t}·Σ_{j<4} t^j/j!` with `t = radius²/2`.
pub fn gaussian_measure_ball(radius: f64) -> Result<f64> {
    if radius.is_nan() || radius < 0.0 {
        return Err(Error::invalid("radius must be nonnegative"));
    }
    if radius == f64::INFINITY {
        return Ok(1.0);
    }
    let t = radius * radius / 2.0;
    let series = 1.0 + t + t * t / 2.0 + t * t * t / 6.0;
    Ok(1.0 - (-t).exp() * series)
}

/// Unit-volume shaping regions, dilated by a scale factor.
///
/// Both regions have volume `scale⁸`: the cube is `[−scale/2, scale/2]⁸`
/// and the Voronoi region of E8 (determinant 1) is dilated by `scale`. The
/// ball of equal volume has radius `scale·(24/π⁴)^{1/8}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapingRegion {
    Cube,
    E8Voronoi,
}

/// Radius of the ball whose volume equals the region's at this scale
/// (`vol B₈(r) = π⁴r⁸/24`).
pub fn equal_volume_ball_radius(scale: f64) -> Result<f64> {
    if scale < 0.0 || !scale.is_finite() {
        return Err(Error::invalid("scale must be nonnegative and finite"));
    }
    let pi4 = std::f64::consts::PI.powi(4);
    Ok(scale * (24.0 / pi4).powf(0.125))
}

/// Monte-Carlo estimate of `P(X ∈ region)` for `X ~ N(0, I₈)`.
/// Returns the estimate and its Monte-Carlo standard error.
pub fn gaussian_measure_region(
    region: ShapingRegion,
    scale: f64,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if scale < 0.0 || !scale.is_finite() {
        return Err(Error::invalid("scale must be nonnegative and finite"));
    }
    if samples < 10_000 {
        return Err(Error::invalid(
            "need at least 10⁴ samples for a meaningful measure estimate",
        ));
    }
    if scale == 0.0 {
        return Ok((0.0, 0.0));
    }
    let hits = sampling::map_reduce_chunks(
        seed,
        samples,
        |rng, len| {
            let mut count = 0u64;
            for _ in 0..len {
                let x = sampling::gaussian_block(rng);
                let inside = match region {
                    ShapingRegion::Cube => {
                        x.iter().all(|v| v.abs() <= scale / 2.0)
                    }
                    ShapingRegion::E8Voronoi => {
                        let mut y = [0.0f64; 8];
                        for i in 0..8 {
                            y[i] = x[i] / scale;
                        }
                        lattice::e8_nearest(&y) == [0.0; 8]
                    }
                };
                if inside {
                    count += 1;
                }
            }
            count
        },
        |a, b| a + b,
        0u64,
    );
    let p = hits as f64 / samples as f64;
    let stderr = (p * (1.0 - p) / samples as f64).sqrt();
    Ok((p, stderr))
}

/// Lattices with a Monte-Carlo NSM estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NsmLattice {
    E8,
    Z,
}

impl NsmLattice {
    /// Parse the CLI spelling.
    pub fn parse(name: &str) -> Result<NsmLattice> {
        match name {
            "e8" => Ok(NsmLattice::E8),
            "z" => Ok(NsmLattice::Z),
            other => Err(Error::invalid(format!(
                "unknown lattice '{other}' (expected e8 or z)"
            ))),
        }
    }
}

/// Monte-Carlo normalized second moment. Samples are drawn uniformly from
/// `[0, 64)ⁿ`, an exact fundamental domain of the sublattice `64Zⁿ` of both
/// lattices, so the quantization error is exactly uniform over the Voronoi
/// region and the estimator is unbiased. Returns (estimate, standard error).
///
/// Reference values: `G(Z) = 1/12 ≈ 0.08333`, `G(E8) ≈ 0.0716821`.
pub fn nsm_estimate(lattice: NsmLattice, samples: usize, seed: u64) -> Result<(f64, f64)> {
    if samples < 10_000 {
        return Err(Error::invalid(
            "need at least 10⁴ samples for a meaningful NSM estimate",
        ));
    }
    // accumulate Σv and Σv² of the per-sample normalized error ‖u‖²/n
    let (s1, s2) = sampling::map_reduce_chunks(
        seed,
        samples,
        |rng, len| {
            let mut acc = (0.0f64, 0.0f64);
            for _ in 0..len {
                let v = match lattice {
                    NsmLattice::E8 => {
                        let mut x = [0.0f64; 8];
                        for t in x.iter_mut() {
                            *t = rng.gen_range(0.0..64.0);
                        }
                        let q = crate::lattice::e8_nearest(&x);
                        let mut e = 0.0;
                        for i in 0..8 {
                            let d = x[i] - q[i];
                            e += d * d;
                        }
                        e / 8.0
                    }
                    NsmLattice::Z => {
                        let x: f64 = rng.gen_range(0.0..64.0);
                        let d = x - crate::lattice::round_half_up(x);
                        d * d
                    }
                };
                acc.0 += v;
                acc.1 += v * v;
            }
            acc
        },
        |a, b| (a.0 + b.0, a.1 + b.1),
        (0.0, 0.0),
    );
    let n = samples as f64;
    let mean = s1 / n;
    let var = (s2 / n - mean * mean).max(0.0);
    Ok((mean, (var / n).sqrt()))
}
