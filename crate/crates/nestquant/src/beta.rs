//! Choosing the β ladder: error profiling over a candidate universe,
//! exact dynamic-programming subset selection, a brute-force verifier, and
//! the preset candidate grids.
//!
//! The working unit throughout is the *absolute* coefficient β (the codec's
//! scale). Grids are specified in normalized units β̂ = β·q so that one grid
//! serves every nesting ratio; [`preset_universe`] returns β̂ and
//! [`absolute_universe`] divides by q.

use crate::error::{Error, Result};
use crate::voronoi;
use rayon::prelude::*;

/// Per-sample, per-candidate quantization outcome on raw 8-blocks.
///
/// `mse[s][t]` is the squared reconstruction error of sample `s` at
/// candidate `betas[t]` (against the decoded codebook point, i.e. what the
/// codec would actually reconstruct); `overload[s][t]` flags a wrap-around.
#[derive(Debug, Clone)]
pub struct ErrorProfile {
    pub betas: Vec<f64>,
    pub mse: Vec<Vec<f64>>,
    pub overload: Vec<Vec<bool>>,
}

impl ErrorProfile {
    pub fn n_samples(&self) -> usize {
        self.mse.len()
    }

    pub fn n_candidates(&self) -> usize {
        self.betas.len()
    }
}

fn check_universe(betas: &[f64]) -> Result<()> {
    if betas.is_empty() {
        return Err(Error::invalid("empty β universe"));
    }
    if betas.iter().any(|b| !b.is_finite() || *b <= 0.0) {
        return Err(Error::invalid("β candidates must be positive and finite"));
    }
    if betas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("β universe must be strictly increasing"));
    }
    Ok(())
}

/// Quantize every sample block at every candidate β and record raw squared
/// errors and overload flags.
pub fn profile_errors(samples: &[[f64; 8]], betas: &[f64], q: u16) -> Result<ErrorProfile> {
    check_universe(betas)?;
    if samples.is_empty() {
        return Err(Error::invalid("no sample blocks to profile"));
    }
    if !(2..=256).contains(&q) {
        return Err(Error::invalid(format!("q={q} outside [2, 256]")));
    }
    let rows: Vec<(Vec<f64>, Vec<bool>)> = samples
        .par_iter()
        .map(|x| {
            let mut mse = Vec::with_capacity(betas.len());
            let mut ov = Vec::with_capacity(betas.len());
            for &beta in betas {
                let mut scaled = [0.0f64; 8];
                for i in 0..8 {
                    scaled[i] = x[i] / beta;
                }
                let (rep, _, overload) = voronoi::quantize_block(&scaled, q);
                let mut err = 0.0;
                for i in 0..8 {
                    let d = x[i] - beta * rep.0[i];
                    err += d * d;
                }
                mse.push(err);
                ov.push(overload);
            }
            (mse, ov)
        })
        .collect();
    let (mse, overload) = rows.into_iter().unzip();
    Ok(ErrorProfile { betas: betas.to_vec(), mse, overload })
}

/// Overload flags monotonized along the β axis: overload probability falls
/// as β grows, so a sample that overloads at β_t is treated as overloading
/// at every smaller candidate too (suffix-OR propagated downward). This
/// makes "safe for sample s" an upward-closed set of candidates, which the
/// first-fit cost model and the DP transition both rely on. Raw flags
/// violate monotonicity only on rare boundary cases.
fn monotonized_overload(profile: &ErrorProfile) -> Vec<Vec<bool>> {
    profile
        .overload
        .iter()
        .map(|row| {
            let mut m = row.clone();
            for t in (0..m.len().saturating_sub(1)).rev() {
                m[t] |= m[t + 1];
            }
            m
        })
        .collect()
}

/// Cost model shared by the DP and the brute-force verifier.
///
/// For an increasing candidate subset, a sample is charged the MSE of the
/// smallest selected β at which it does not overload (with flags
/// monotonized, "does not overload" is an upward-closed set). Subsets that
/// leave any sample overloading even at their largest β are infeasible.
fn subset_cost(mono: &[Vec<bool>], profile: &ErrorProfile, subset: &[usize]) -> Option<f64> {
    let mut total = 0.0;
    for (s, row) in mono.iter().enumerate() {
        let mut charged = None;
        for &t in subset {
            if !row[t] {
                charged = Some(profile.mse[s][t]);
                break;
            }
        }
        total += charged?;
    }
    Some(total)
}

/// Exact optimal size-≤k subset of the candidate universe minimizing the
/// total first-fit MSE, via dynamic programming over (candidate, slots).
///
/// Returns the selected candidate indices (increasing) and the total cost.
/// Errors when no candidate in the universe covers every sample — extend the
/// universe upward in that case.
pub fn dp_optimal_betas(profile: &ErrorProfile, k: usize) -> Result<(Vec<usize>, f64)> {
    let m = profile.n_candidates();
    let n = profile.n_samples();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if n == 0 {
        return Err(Error::invalid("profile has no samples"));
    }
    let mono = monotonized_overload(profile);

    // safe[t] = no sample overloads at candidate t (monotonized ⇒ safe is a
    // suffix of the candidate axis)
    let safe: Vec<bool> = (0..m).map(|t| mono.iter().all(|row| !row[t])).collect();
    if !safe.iter().any(|&s| s) {
        return Err(Error::invalid(
            "every candidate β overloads some sample; extend the universe upward",
        ));
    }

    // trans[s][i] = added cost when candidate i directly follows candidate s
    // in the selected ladder: samples that overload at s (first-fit skips
    // them there) but not at i are charged mse[·][i]. s = m means "no
    // smaller candidate selected".
    // dp[j][i] = min cost of a ladder of j candidates ending at i, counting
    // only samples covered by some selected candidate ≤ i.
    let trans = |s: usize, i: usize| -> f64 {
        let mut c = 0.0;
        for (p, row) in mono.iter().enumerate() {
            let skipped = s == m || row[s];
            if skipped && !row[i] {
                c += profile.mse[p][i];
            }
        }
        c
    };

    let kk = k.min(m);
    let mut dp = vec![vec![f64::INFINITY; m]; kk + 1];
    let mut parent = vec![vec![usize::MAX; m]; kk + 1];
    for i in 0..m {
        dp[1][i] = trans(m, i);
    }
    for j in 2..=kk {
        for i in 0..m {
            for s in 0..i {
                if dp[j - 1][s].is_finite() {
                    let c = dp[j - 1][s] + trans(s, i);
                    if c < dp[j][i] {
                        dp[j][i] = c;
                        parent[j][i] = s;
                    }
                }
            }
        }
    }

    // answer: best dp[j][i] over j ≤ k and fully-safe final candidate i
    let mut best: Option<(f64, usize, usize)> = None;
    for j in 1..=kk {
        for i in 0..m {
            if safe[i] && dp[j][i].is_finite() {
                // strict < prefers fewer candidates and smaller final β on ties
                if best.is_none_or(|b| dp[j][i] < b.0) {
                    best = Some((dp[j][i], j, i));
                }
            }
        }
    }
    let (cost, mut j, mut i) =
        best.ok_or_else(|| Error::invalid("no feasible ladder found"))?;
    let mut subset = vec![i];
    while j > 1 {
        i = parent[j][i];
        j -= 1;
        subset.push(i);
    }
    subset.reverse();
    Ok((subset, cost))
}

/// Brute-force verifier: enumerate every subset of size ≤ k and take the
/// cheapest feasible one under the same cost model as [`dp_optimal_betas`].
/// Rejected when the enumeration would exceed ~10⁶ subsets.
pub fn brute_force_betas(profile: &ErrorProfile, k: usize) -> Result<(Vec<usize>, f64)> {
    let m = profile.n_candidates();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if profile.n_samples() == 0 {
        return Err(Error::invalid("profile has no samples"));
    }
    let kk = k.min(m);
    let mut total_subsets = 0u64;
    let mut binom = 1u64;
    for j in 1..=kk as u64 {
        binom = binom * (m as u64 - j + 1) / j;
        total_subsets += binom;
        if total_subsets > 1_000_000 {
            return Err(Error::invalid(format!(
                "brute force over {m} candidates choose ≤{kk} exceeds the 10⁶ budget"
            )));
        }
    }
    let mono = monotonized_overload(profile);

    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut subset = Vec::with_capacity(kk);
    fn rec(
        start: usize,
        m: usize,
        left: usize,
        subset: &mut Vec<usize>,
        mono: &[Vec<bool>],
        profile: &ErrorProfile,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if !subset.is_empty() {
            if let Some(c) = subset_cost(mono, profile, subset) {
                if best.as_ref().is_none_or(|b| c < b.0) {
                    *best = Some((c, subset.clone()));
                }
            }
        }
        if left == 0 {
            return;
        }
        for i in start..m {
            subset.push(i);
            rec(i + 1, m, left - 1, subset, mono, profile, best);
            subset.pop();
        }
    }
    rec(0, m, kk, &mut subset, &mono, profile, &mut best);
    let (cost, subset) = best.ok_or_else(|| {
        Error::invalid("every candidate β overloads some sample; extend the universe upward")
    })?;
    Ok((subset, cost))
}

/// What the ladder will quantize, for margin purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginKind {
    /// Weight matrices: headroom +3 in β̂ units.
    Weights,
    /// Activation/input matrices: headroom +4 in β̂ units.
    Activations,
}

/// Add the overload-safety margin to the largest coefficient of a ladder:
/// β_k ← β_k + m/q with m = 3 (weights) or 4 (activations).
pub fn apply_margin(betas: &mut [f64], kind: MarginKind, q: u16) -> Result<()> {
    if betas.is_empty() {
        return Err(Error::invalid("empty ladder"));
    }
    if q < 2 {
        return Err(Error::invalid("q must be at least 2"));
    }
    let m = match kind {
        MarginKind::Weights => 3.0,
        MarginKind::Activations => 4.0,
    };
    let last = betas.len() - 1;
    betas[last] += m / q as f64;
    Ok(())
}

/// Named candidate grids, in normalized β̂ = β·q units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// The 4-point uniform grid on (0, 10]: β̂ ∈ {2.5, 5, 7.5, 10}.
    FourPoint,
    /// Half-integer grid β̂ ∈ {0.5, 1.0, …, 25.0}.
    HalfInteger,
    /// Dense low end, sparse tail: 1.0(0.25)10.0 ∪ 11(1)20 ∪ 22(2)40.
    Wide,
}

impl Preset {
    /// Parse the CLI spelling.
    pub fn parse(name: &str) -> Result<Preset> {
        match name {
            "four-point" => Ok(Preset::FourPoint),
            "half-integer" => Ok(Preset::HalfInteger),
            "wide" => Ok(Preset::Wide),
            other => Err(Error::invalid(format!(
                "unknown preset '{other}' (expected four-point, half-integer, or wide)"
            ))),
        }
    }
}

/// The preset grid in β̂ units.
pub fn preset_universe(preset: Preset) -> Vec<f64> {
    match preset {
        Preset::FourPoint => vec![2.5, 5.0, 7.5, 10.0],
        Preset::HalfInteger => (1..=50).map(|i| i as f64 * 0.5).collect(),
        Preset::Wide => {
            let mut v: Vec<f64> = (0..=36).map(|i| 1.0 + 0.25 * i as f64).collect();
            v.extend((11..=20).map(|i| i as f64));
            v.extend((11..=20).map(|i| 2.0 * i as f64));
            v
        }
    }
}

/// Convert a β̂ grid to absolute β for a given nesting ratio.
pub fn absolute_universe(normalized: &[f64], q: u16) -> Result<Vec<f64>> {
    if q < 2 {
        return Err(Error::invalid("q must be at least 2"));
    }
    let v: Vec<f64> = normalized.iter().map(|b| b / q as f64).collect();
    check_universe(&v)?;
    Ok(v)
}

/// Serialize a profile as CSV: `sample_id,beta,mse,overload`.
pub fn write_profile_csv<W: std::io::Write>(profile: &ErrorProfile, mut w: W) -> Result<()> {
    writeln!(w, "sample_id,beta,mse,overload")?;
    for (s, (mses, ovs)) in profile.mse.iter().zip(&profile.overload).enumerate() {
        for (t, (&mse, &ov)) in mses.iter().zip(ovs).enumerate() {
            writeln!(w, "{s},{},{mse},{}", profile.betas[t], u8::from(ov))?;
        }
    }
    Ok(())
}
