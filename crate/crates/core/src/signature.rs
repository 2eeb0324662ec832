//! Truncated signatures of piecewise-linear paths.
//!
//! Coefficients are stored level by level (level 0 first) and, within a level,
//! in lexicographic order of the multi-index `(i_1, ..., i_k)`.

use crate::error::{Error, Result};
use crate::paths::{interpolate_forward_fill, PathSample};

/// Number of coefficients of a signature of a `d`-dimensional path truncated
/// at level `m` (levels `0..=m`).
pub fn sig_dim(d: usize, m: usize) -> Result<usize> {
    if d == 0 {
        return Err(Error::invalid("signature dimension must be positive"));
    }
    let mut total: usize = 0;
    let mut block: usize = 1;
    for k in 0..=m {
        total = total
            .checked_add(block)
            .ok_or_else(|| Error::invalid(format!("signature size overflows for d={d}, m={m}")))?;
        if k < m {
            block = block.checked_mul(d).ok_or_else(|| {
                Error::invalid(format!("signature size overflows for d={d}, m={m}"))
            })?;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSignature {
    dim: usize,
    level: usize,
    coeffs: Vec<f64>,
}

impl TruncatedSignature {
    /// Signature of a constant path: `(1, 0, ..., 0)`.
    pub fn trivial(dim: usize, level: usize) -> Result<Self> {
        let mut coeffs = vec![0.0; sig_dim(dim, level)?];
        coeffs[0] = 1.0;
        Ok(Self { dim, level, coeffs })
    }

    pub fn from_coeffs(dim: usize, level: usize, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != sig_dim(dim, level)? {
            return Err(Error::invalid(
                "coefficient count does not match (dim, level)",
            ));
        }
        Ok(Self { dim, level, coeffs })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    fn offset(&self, k: usize) -> usize {
        if self.dim == 1 {
            k
        } else {
            (self.dim.pow(k as u32) - 1) / (self.dim - 1)
        }
    }

    /// Coefficients of level `k` (`dim^k` entries).
    pub fn level_block(&self, k: usize) -> &[f64] {
        let start = self.offset(k);
        &self.coeffs[start..start + self.dim.pow(k as u32)]
    }

    /// Appends a linear segment with the given increment (Chen's identity with
    /// the segment's closed-form signature).
    pub fn extend_with_segment(&mut self, increment: &[f64]) -> Result<()> {
        let seg = signature_of_segment(increment, self.level)?;
        *self = chen_concat(self, &seg)?;
        Ok(())
    }
}

/// Closed-form signature of a straight segment: level `k` is `Δ^{⊗k} / k!`.
pub fn signature_of_segment(increment: &[f64], level: usize) -> Result<TruncatedSignature> {
    let d = increment.len();
    if increment.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("segment increment is not finite"));
    }
    let mut coeffs = Vec::with_capacity(sig_dim(d, level)?);
    coeffs.push(1.0);
    let mut prev = vec![1.0];
    for k in 1..=level {
        let mut cur = Vec::with_capacity(prev.len() * d);
        for &p in &prev {
            for &x in increment {
                cur.push(p * x / k as f64);
            }
        }
        coeffs.extend_from_slice(&cur);
        prev = cur;
    }
    Ok(TruncatedSignature {
        dim: d,
        level,
        coeffs,
    })
}

/// Signature of the concatenation of two paths: level `k` of the result is
/// `Σ_{i+j=k} a_i ⊗ b_j`.
pub fn chen_concat(a: &TruncatedSignature, b: &TruncatedSignature) -> Result<TruncatedSignature> {
    if a.dim != b.dim || a.level != b.level {
        return Err(Error::invalid(format!(
            "cannot concatenate signatures of shape ({}, {}) and ({}, {})",
            a.dim, a.level, b.dim, b.level
        )));
    }
    let mut coeffs = Vec::with_capacity(a.coeffs.len());
    for k in 0..=a.level {
        let width = a.dim.pow(k as u32);
        let mut block = vec![0.0; width];
        for i in 0..=k {
            let left = a.level_block(i);
            let right = b.level_block(k - i);
            let rw = right.len();
            for (li, &l) in left.iter().enumerate() {
                if l == 0.0 {
                    continue;
                }
                let out = &mut block[li * rw..(li + 1) * rw];
                for (o, &r) in out.iter_mut().zip(right) {
                    *o += l * r;
                }
            }
        }
        coeffs.extend_from_slice(&block);
    }
    Ok(TruncatedSignature {
        dim: a.dim,
        level: a.level,
        coeffs,
    })
}

/// Signature of `s ↦ Ũ^{≤cutoff}_s - base_shift` on `[0, cutoff]`.
///
/// The interpolated path is linear between consecutive observation times, so
/// the signature is the Chen product of the segments between them.
pub fn signature_of_interpolated_path(
    sample: &PathSample,
    cutoff: f64,
    level: usize,
    base_shift: &[f64],
) -> Result<TruncatedSignature> {
    let d = sample.dims().d_u;
    // signatures only see increments, so the shift is validated but has no
    // further effect
    if base_shift.len() != d {
        return Err(Error::invalid("base shift has the wrong dimension"));
    }
    let mut sig = TruncatedSignature::trivial(d, level)?;
    let tol = crate::paths::TIME_TOL * sample.grid().horizon();
    let mut breakpoints: Vec<f64> = sample
        .obs_times()
        .into_iter()
        .take_while(|&t| t <= cutoff + tol)
        .collect();
    if breakpoints.is_empty() {
        breakpoints.push(0.0);
    }
    let mut prev: Vec<f64> = interpolate_forward_fill(sample, cutoff, 0.0);
    for &t in &breakpoints[1..] {
        let cur = interpolate_forward_fill(sample, cutoff, t);
        let inc: Vec<f64> = cur.iter().zip(&prev).map(|(c, p)| c - p).collect();
        sig.extend_with_segment(&inc)?;
        prev = cur;
    }
    Ok(sig)
}
