//! Flat parameter vectors and the binary-mask algebra used to split a model
//! into personalized and global parts.
//!
//! A mask bit of 1 marks a personalized parameter (kept on the client), a bit
//! of 0 marks a global parameter (sent for aggregation).

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// A named, contiguous slice of a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat `f64` parameters plus a segment map naming the sub-tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamVector {
    /// Builds a vector whose segments must tile `[0, values.len())` in order.
    pub fn new(values: Vec<f64>, segments: Vec<Segment>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("parameter vector must be non-empty"));
        }
        let mut cursor = 0;
        for seg in &segments {
            if seg.offset != cursor || seg.len == 0 {
                return Err(Error::contract(format!(
                    "segment `{}` at offset {} (len {}) does not tile from {cursor}",
                    seg.name, seg.offset, seg.len
                )));
            }
            cursor += seg.len;
        }
        if cursor != values.len() {
            return Err(Error::contract(format!(
                "segments cover {cursor} of {} values",
                values.len()
            )));
        }
        Ok(Self { values, segments })
    }

    /// A vector with a single segment named `flat`.
    pub fn flat(values: Vec<f64>) -> Result<Self> {
        let len = values.len();
        Self::new(
            values,
            vec![Segment {
                name: "flat".into(),
                offset: 0,
                len,
            }],
        )
    }

    pub fn zeros_like(other: &ParamVector) -> Self {
        Self {
            values: vec![0.0; other.len()],
            segments: other.segments.clone(),
        }
    }

    /// Same segment layout as `self`, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        check_len("with_values", self.len(), values.len())?;
        Ok(Self {
            values,
            segments: self.segments.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let seg = self.segments.iter().find(|s| s.name == name)?;
        Some(&mut self.values[seg.offset..seg.offset + seg.len])
    }

    /// Name of the segment containing flat index `index`.
    pub fn segment_of(&self, index: usize) -> Option<&str> {
        self.segments
            .iter()
            .find(|s| index >= s.offset && index < s.offset + s.len)
            .map(|s| s.name.as_str())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Canonical little-endian byte encoding of the values.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Per-parameter 0/1 indicator aligned with a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![false; len] }
    }

    pub fn ones(len: usize) -> Self {
        Self { bits: vec![true; len] }
    }

    pub fn from_bools(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// Rejects anything other than 0 or 1.
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        bits.iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::contract(format!("mask bit {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(|bits| Self { bits })
    }

    pub fn to_bits(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| u8::from(b)).collect()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, index: usize) -> bool {
        self.bits[index]
    }

    pub fn set(&mut self, index: usize, value: bool) {
        self.bits[index] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// True when every set bit of `other` is also set in `self`.
    pub fn contains(&self, other: &BinaryMask) -> bool {
        self.len() == other.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a || !b)
    }

    pub fn intersects(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(&a, &b)| a && b)
    }
}

/// `theta ⊙ eta`: keeps entries where the mask is 1 and zeroes the rest.
pub fn mask_apply(theta: &ParamVector, eta: &BinaryMask) -> Result<ParamVector> {
    check_len("mask_apply", theta.len(), eta.len())?;
    let values = theta
        .values
        .iter()
        .zip(&eta.bits)
        .map(|(&v, &keep)| if keep { v } else { 0.0 })
        .collect();
    Ok(ParamVector {
        values,
        segments: theta.segments.clone(),
    })
}

pub fn mask_not(eta: &BinaryMask) -> BinaryMask {
    BinaryMask {
        bits: eta.bits.iter().map(|&b| !b).collect(),
    }
}

pub fn mask_union(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask> {
    check_len("mask_union", a.len(), b.len())?;
    Ok(BinaryMask {
        bits: a.bits.iter().zip(&b.bits).map(|(&x, &y)| x || y).collect(),
    })
}

/// Fraction of parameters marked personalized.
pub fn personalization_fraction(eta: &BinaryMask) -> Result<f64> {
    if eta.is_empty() {
        return Err(Error::contract("personalization_fraction of an empty mask"));
    }
    Ok(eta.count_ones() as f64 / eta.len() as f64)
}

/// Number of indices a fraction `p` of `eligible` selects.
///
/// Rounds down; the small epsilon absorbs products such as `0.29 * 100`
/// landing just below an integer.
pub fn fraction_budget(p: f64, eligible: usize) -> usize {
    let raw = (p * eligible as f64 + 1e-9).floor();
    (raw.max(0.0) as usize).min(eligible)
}

/// Selects the `floor(p * eligible)` largest values among indices not set in
/// `excluded`. Ties go to the lower index.
pub fn top_fraction_indices(values: &ParamVector, p: f64, excluded: &BinaryMask) -> Result<BinaryMask> {
    top_fraction_of_slice(values.values(), p, excluded)
}

pub(crate) fn top_fraction_of_slice(values: &[f64], p: f64, excluded: &BinaryMask) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::contract(format!("fraction p = {p} outside [0, 1]")));
    }
    check_len("top_fraction_indices", values.len(), excluded.len())?;
    let mut eligible: Vec<usize> = (0..values.len()).filter(|&i| !excluded.bits[i]).collect();
    let budget = fraction_budget(p, eligible.len());
    let mut out = BinaryMask::zeros(values.len());
    if budget == 0 {
        return Ok(out);
    }
    eligible.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    for &i in &eligible[..budget] {
        out.bits[i] = true;
    }
    Ok(out)
}
