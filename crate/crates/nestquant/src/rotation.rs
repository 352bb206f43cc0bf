//! Deterministic orthogonal preprocessing with Hadamard matrices.
//!
//! Dimensions are factored as `n = m·2^p` with a stored base matrix `H₁` of
//! order `m ∈ {1, 2, 4, 12, 20}` and a Sylvester factor `H₂` of order `2^p`;
//! the rotation is `(H₁ ⊗ H₂)/√n`. The fast transform applies the Sylvester
//! factor in `O(n log(n/m))` butterfly operations and the base matrix as a
//! dense mix, for at most `2n(log₂(n/m) + m)` additions/subtractions total.

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Orders with a stored base Hadamard matrix.
pub const BASE_ORDERS: [usize; 5] = [1, 2, 4, 12, 20];

/// Counts butterfly additions/subtractions performed by the fast transform.
/// The default unit implementation compiles to nothing.
pub trait OpCounter {
    fn add_ops(&mut self, _ops: u64) {}
}

/// No-op counter for production use.
impl OpCounter for () {}

/// Simple accumulating counter for instrumentation and tests.
#[derive(Debug, Default, Clone)]
pub struct CountingOps(pub u64);

impl OpCounter for CountingOps {
    fn add_ops(&mut self, ops: u64) {
        self.0 += ops;
    }
}

/// A factored Hadamard rotation of order `n = m · 2^log2_n2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HadamardSpec {
    n: usize,
    m: usize,
    log2_n2: u32,
}

/// Dense ±1 Hadamard matrix of a supported base order, built by the
/// Paley-I construction for m ∈ {12, 20} (from the quadratic characters of
/// GF(11) and GF(19)) and the Sylvester recursion for m ∈ {1, 2, 4}.
fn base_matrix(m: usize) -> Result<Vec<Vec<f64>>> {
    match m {
        1 => Ok(vec![vec![1.0]]),
        2 => Ok(vec![vec![1.0, 1.0], vec![1.0, -1.0]]),
        4 => {
            let h2 = base_matrix(2)?;
            let mut h = vec![vec![0.0; 4]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    h[i][j] = h2[i / 2][j / 2] * h2[i % 2][j % 2];
                }
            }
            Ok(h)
        }
        12 | 20 => Ok(paley_type_one(m - 1)),
        _ => Err(Error::invalid(format!(
            "no stored Hadamard base of order {m} (supported: {BASE_ORDERS:?})"
        ))),
    }
}

/// Paley construction I: for prime q ≡ 3 (mod 4) build the order q+1
/// Hadamard matrix from the Jacobsthal matrix of quadratic residues.
fn paley_type_one(q: usize) -> Vec<Vec<f64>> {
    let chi = |a: usize| -> f64 {
        let a = a % q;
        if a == 0 {
            return 0.0;
        }
        // quadratic character: 1 iff a is a nonzero square mod q
        let mut is_square = false;
        for t in 1..q {
            if (t * t) % q == a {
                is_square = true;
                break;
            }
        }
        if is_square {
            1.0
        } else {
            -1.0
        }
    };
    let n = q + 1;
    let mut h = vec![vec![1.0; n]; n];
    for i in 1..n {
        h[i][0] = -1.0;
        for j in 1..n {
            // Jacobsthal entry χ((i−1) − (j−1)) plus the identity on the
            // diagonal (χ(0) = 0 there)
            h[i][j] = if i == j { 1.0 } else { chi((i + q - j) % q) };
        }
    }
    h
}

impl HadamardSpec {
    /// Factor `n` as `m·2^p` with a supported base order `m`.
    pub fn for_dimension(n: usize) -> Result<HadamardSpec> {
        if n == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        let mut m = n;
        let mut p = 0u32;
        while m.is_multiple_of(2) {
            m /= 2;
            p += 1;
        }
        // pull factors of 2 back into m when the odd part needs them
        // (12 = 3·4, 20 = 5·4: the odd parts 3 and 5 carry two factors of 2)
        let (m, p) = match m {
            1 => (1, p),
            3 if p >= 2 => (12, p - 2),
            5 if p >= 2 => (20, p - 2),
            _ => {
                return Err(Error::invalid(format!(
                    "dimension {n} does not factor as m·2^p with m in {BASE_ORDERS:?}"
                )))
            }
        };
        Ok(HadamardSpec { n, m, log2_n2: p })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Base matrix order.
    pub fn m(&self) -> usize {
        self.m
    }

    /// log₂ of the Sylvester factor's order.
    pub fn log2_n2(&self) -> u32 {
        self.log2_n2
    }

    /// Dense `n×n` rotation matrix `(H₁ ⊗ H₂)/√n` (for tests and small n).
    pub fn dense(&self) -> Result<Mat> {
        let h1 = base_matrix(self.m)?;
        let n2 = 1usize << self.log2_n2;
        let norm = 1.0 / (self.n as f64).sqrt();
        let mut out = Mat::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                let (bi, bj) = (i / n2, j / n2);
                let (si, sj) = (i % n2, j % n2);
                // Sylvester entry = (−1)^{popcount(si & sj)}
                let syl = if (si & sj).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                out[(i, j)] = h1[bi][bj] * syl * norm;
            }
        }
        Ok(out)
    }
}

/// In-place fast transform `x ← (H₁ ⊗ H₂)x/√n`.
///
/// Layout: viewing `x` as an `m × 2^p` row-major array, `H₂` acts on each
/// row by the standard in-place butterfly and `H₁` mixes the `m` rows
/// column by column. Butterfly and dense-mix additions are reported to the
/// counter.
pub fn fast_hadamard_transform<C: OpCounter>(
    spec: &HadamardSpec,
    x: &mut [f64],
    counter: &mut C,
) -> Result<()> {
    if x.len() != spec.n {
        return Err(Error::shape(format!(
            "vector length {} does not match spec order {}",
            x.len(),
            spec.n
        )));
    }
    let n2 = 1usize << spec.log2_n2;
    // Sylvester butterflies: p stages of n/2 add-sub pairs per row
    for row in x.chunks_exact_mut(n2) {
        let mut half = 1usize;
        while half < n2 {
            let mut start = 0;
            while start < n2 {
                for i in start..start + half {
                    let (a, b) = (row[i], row[i + half]);
                    row[i] = a + b;
                    row[i + half] = a - b;
                }
                start += 2 * half;
            }
            half *= 2;
        }
    }
    // (n/2 pairs × 2 ops) per stage × p stages = n·p ops
    counter.add_ops(spec.n as u64 * spec.log2_n2 as u64);

    // dense base mix across the m rows, one column at a time
    if spec.m > 1 {
        let h1 = base_matrix(spec.m)?;
        let mut col = vec![0.0f64; spec.m];
        for j in 0..n2 {
            for r in 0..spec.m {
                col[r] = x[r * n2 + j];
            }
            for r in 0..spec.m {
                let mut acc = 0.0;
                for (c, &v) in col.iter().enumerate() {
                    acc += h1[r][c] * v;
                }
                x[r * n2 + j] = acc;
            }
        }
        counter.add_ops((spec.m as u64) * (spec.m as u64) * n2 as u64);
    }

    let norm = 1.0 / (spec.n as f64).sqrt();
    for v in x.iter_mut() {
        *v *= norm;
    }
    Ok(())
}

/// Rotate every row of a matrix in place with the same spec.
pub fn rotate_matrix_rows(spec: &HadamardSpec, mat: &mut Mat) -> Result<()> {
    if mat.cols() != spec.n() {
        return Err(Error::shape(format!(
            "matrix has {} columns, spec order is {}",
            mat.cols(),
            spec.n()
        )));
    }
    for i in 0..mat.rows() {
        fast_hadamard_transform(spec, mat.row_mut(i), &mut ())?;
    }
    Ok(())
}
