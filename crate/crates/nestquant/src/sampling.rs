//! Deterministic seeded sampling helpers.
//!
//! Monte-Carlo estimates in this crate must be byte-reproducible across runs
//! *and* across thread counts. Work is therefore split into fixed-size
//! chunks, each chunk draws from its own counter-derived ChaCha stream, and
//! partial results are reduced in chunk order regardless of which worker
//! finished first.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Number of samples handled by one worker chunk.
pub const CHUNK: usize = 1 << 14;

/// RNG for chunk `index` of the stream identified by `seed`.
///
/// Streams with different `(seed, index)` pairs are independent ChaCha
/// streams, so chunked evaluation is order- and scheduling-independent.
pub fn chunk_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

/// Split `samples` into [`CHUNK`]-sized pieces, map each with its own seeded
/// RNG in parallel, and fold the per-chunk outputs **in chunk order**.
pub fn map_reduce_chunks<T, M, F>(seed: u64, samples: usize, map: M, mut fold: F, init: T) -> T
where
    T: Send,
    M: Fn(&mut ChaCha8Rng, usize) -> T + Sync,
    F: FnMut(T, T) -> T,
{
    let chunks: Vec<(u64, usize)> = (0..samples.div_ceil(CHUNK))
        .map(|i| (i as u64, CHUNK.min(samples - i * CHUNK)))
        .collect();
    let parts: Vec<T> = chunks
        .into_par_iter()
        .map(|(i, len)| {
            let mut rng = chunk_rng(seed, i);
            map(&mut rng, len)
        })
        .collect();
    let mut acc = init;
    for p in parts {
        acc = fold(acc, p);
    }
    acc
}

/// One standard-normal draw per slot.
pub fn fill_gaussian(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

/// A standard-Gaussian 8-block.
pub fn gaussian_block(rng: &mut ChaCha8Rng) -> [f64; 8] {
    let mut v = [0.0f64; 8];
    fill_gaussian(rng, &mut v);
    v
}

/// Deterministic batch of standard-Gaussian 8-blocks (chunked streams, so
/// the result is identical for any worker-thread count).
pub fn gaussian_blocks(seed: u64, count: usize) -> Vec<[f64; 8]> {
    map_reduce_chunks(
        seed,
        count,
        |rng, len| (0..len).map(|_| gaussian_block(rng)).collect::<Vec<_>>(),
        |mut acc, chunk| {
            acc.extend(chunk);
            acc
        },
        Vec::with_capacity(count),
    )
}

/// Deterministic Gaussian matrix (row-major fill from a single stream).
pub fn gaussian_mat(seed: u64, rows: usize, cols: usize) -> crate::Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = crate::Mat::zeros(rows, cols);
    fill_gaussian(&mut rng, m.as_mut_slice());
    m
}

/// Random symmetric positive-definite matrix `QΛQᵀ` with condition number
/// `cond`: Q from a Gram–Schmidt QR of a Gaussian matrix, eigenvalues
/// log-spaced and geometrically centered on 1 (from `1/√cond` to `√cond`).
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, cond: f64) -> crate::Mat {
    assert!(n >= 1 && cond >= 1.0 && cond.is_finite());
    // orthonormalize a Gaussian matrix column by column (modified
    // Gram–Schmidt; a fresh draw replaces any numerically degenerate column)
    let mut q = vec![vec![0.0f64; n]; n];
    for j in 0..n {
        loop {
            for v in q[j].iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            for i in 0..j {
                let dot: f64 = (0..n).map(|t| q[j][t] * q[i][t]).sum();
                for t in 0..n {
                    q[j][t] -= dot * q[i][t];
                }
            }
            let norm = q[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for v in q[j].iter_mut() {
                    *v /= norm;
                }
                break;
            }
        }
    }
    let lam: Vec<f64> = (0..n)
        .map(|i| {
            let t = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
            cond.powf(t - 0.5)
        })
        .collect();
    let mut h = crate::Mat::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            let mut acc = 0.0;
            for (k, l) in lam.iter().enumerate() {
                acc += q[k][a] * l * q[k][b];
            }
            h[(a, b)] = acc;
        }
    }
    // enforce exact symmetry against accumulation-order asymmetry
    for a in 0..n {
        for b in 0..a {
            let s = 0.5 * (h[(a, b)] + h[(b, a)]);
            h[(a, b)] = s;
            h[(b, a)] = s;
        }
    }
    h
}
