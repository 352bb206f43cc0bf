//! Voronoi codes over E8: encode/decode between 8-vectors and coset
//! residues of Λ/qΛ, plus overload detection.
//!
//! The codebook is Λ ∩ q·V_Λ — the minimum-energy representative of each of
//! the q⁸ cosets. `decode(encode(x))` equals the nearest lattice point
//! Q_Λ(x) exactly whenever that point lies inside the shaping region q·V_Λ;
//! otherwise the quantizer is *overloaded* and the decoder returns the
//! coset's canonical representative instead.

use crate::error::{Error, Result};
use crate::lattice::{self, LatticePoint8};

/// Residues of one 8-block in `[0, q)⁸`, identifying a coset of Λ/qΛ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoronoiCode {
    pub residues: [u16; 8],
    pub q: u16,
}

fn check_q(q: u16) -> Result<()> {
    if q < 2 {
        return Err(Error::invalid(format!("nesting ratio q={q} must be ≥ 2")));
    }
    Ok(())
}

/// Encode: residues `(G⁻¹·Q_Λ(x)) mod q`.
pub fn encode(x: &[f64; 8], q: u16) -> Result<VoronoiCode> {
    check_q(q)?;
    let nearest = lattice::closest_point_e8(x)?;
    let c = lattice::coords(&nearest)
        .expect("closest_point_e8 returned a non-lattice point");
    let mut residues = [0u16; 8];
    for i in 0..8 {
        residues[i] = c[i].rem_euclid(q as i64) as u16;
    }
    Ok(VoronoiCode { residues, q })
}

/// Decode: the minimum-energy representative `p − q·Q_Λ(p/q)` of the coset
/// `p + qΛ`, where `p = G·residues`. The output always lies in the closed
/// shaping region q·V̄_Λ.
pub fn decode(code: &VoronoiCode) -> LatticePoint8 {
    let q = code.q as f64;
    let mut ci = [0i64; 8];
    for i in 0..8 {
        ci[i] = code.residues[i] as i64;
    }
    let p = lattice::point_from_coords(&ci);
    let mut scaled = [0.0f64; 8];
    for i in 0..8 {
        scaled[i] = p.0[i] / q;
    }
    let shift = lattice::e8_nearest(&scaled);
    let mut out = [0.0f64; 8];
    for i in 0..8 {
        out[i] = p.0[i] - q * shift[i];
    }
    LatticePoint8(out)
}

/// True iff quantizing `x` loses the nearest lattice point, i.e.
/// `decode(encode(x)) ≠ Q_Λ(x)` (equivalently `Q_Λ(x) ∉ q·V_Λ`).
pub fn is_overload(x: &[f64; 8], q: u16) -> Result<bool> {
    check_q(q)?;
    let nearest = lattice::closest_point_e8(x)?;
    let round_trip = decode(&encode(x, q)?);
    Ok(round_trip.0 != nearest.0)
}

/// Quantize one block: the dequantized-value / code / overload triple that
/// the multi-β codec consumes.
pub(crate) fn quantize_block(x: &[f64; 8], q: u16) -> (LatticePoint8, VoronoiCode, bool) {
    let nearest = LatticePoint8(lattice::e8_nearest(x));
    let c = lattice::coords(&nearest).expect("oracle output must be a lattice point");
    let mut residues = [0u16; 8];
    for i in 0..8 {
        residues[i] = c[i].rem_euclid(q as i64) as u16;
    }
    let code = VoronoiCode { residues, q };
    let rep = decode(&code);
    let overload = rep.0 != nearest.0;
    (rep, code, overload)
}
