//! Multi-bin microwave drive and its slowly varying Rabi envelope.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One frequency bin of the microwave drive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    /// Angular offset from the carrier, rad/s.
    pub offset: f64,
    /// Rabi amplitude, rad/s.
    pub amplitude: f64,
    /// Phase, radians.
    pub phase: f64,
}

/// A validated multi-bin microwave field.
///
/// Construction rejects degenerate inputs (fewer than two bins, duplicate
/// offsets, non-positive amplitudes, a reference bin with nonzero phase), so
/// every downstream consumer can assume a well-formed drive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MwField {
    bins: Vec<Bin>,
    reference_index: usize,
    carrier_hz: f64,
}

impl MwField {
    pub fn new(bins: Vec<Bin>, reference_index: usize, carrier_hz: f64) -> Result<Self> {
        if bins.len() < 2 {
            return Err(Error::InvalidField(format!(
                "need at least 2 bins, got {}",
                bins.len()
            )));
        }
        if reference_index >= bins.len() {
            return Err(Error::InvalidField(format!(
                "reference index {reference_index} out of range for {} bins",
                bins.len()
            )));
        }
        for (i, b) in bins.iter().enumerate() {
            if !(b.offset.is_finite() && b.phase.is_finite()) {
                return Err(Error::InvalidField(format!("bin {i} is not finite")));
            }
            if !(b.amplitude > 0.0 && b.amplitude.is_finite()) {
                return Err(Error::InvalidField(format!(
                    "bin {i} amplitude must be positive, got {}",
                    b.amplitude
                )));
            }
            for (j, other) in bins.iter().enumerate().skip(i + 1) {
                if b.offset == other.offset {
                    return Err(Error::InvalidField(format!(
                        "bins {i} and {j} share offset {}",
                        b.offset
                    )));
                }
            }
        }
        if bins[reference_index].phase != 0.0 {
            return Err(Error::InvalidField(format!(
                "reference bin phase must be 0, got {}",
                bins[reference_index].phase
            )));
        }
        Ok(Self {
            bins,
            reference_index,
            carrier_hz,
        })
    }

    pub fn bins(&self) -> &[Bin] {
        &self.bins
    }

    pub fn reference_index(&self) -> usize {
        self.reference_index
    }

    pub fn reference(&self) -> &Bin {
        &self.bins[self.reference_index]
    }

    pub fn carrier_hz(&self) -> f64 {
        self.carrier_hz
    }
}

/// `sqrt(E1^2 + E2^2)` for an arbitrary bin list, with
/// `E1 = sum A sin(w t + phi)` and `E2 = sum A cos(w t + phi)`.
pub fn envelope_of(bins: &[Bin], t: f64) -> f64 {
    let (mut e1, mut e2) = (0.0, 0.0);
    for b in bins {
        let (s, c) = (b.offset * t + b.phase).sin_cos();
        e1 += b.amplitude * s;
        e2 += b.amplitude * c;
    }
    e1.hypot(e2)
}

/// Exact Rabi envelope of the multi-bin drive at time `t`.
pub fn rabi_envelope(field: &MwField, t: f64) -> f64 {
    envelope_of(field.bins(), t)
}

/// First-order expansion of the envelope around the dominant reference bin.
///
/// Only meaningful when the reference amplitude exceeds every other amplitude;
/// otherwise the expansion premise fails and an error is returned.
pub fn envelope_approx(field: &MwField, t: f64) -> Result<f64> {
    let reference = *field.reference();
    let max_other = field
        .bins()
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != field.reference_index())
        .map(|(_, b)| b.amplitude)
        .fold(f64::NEG_INFINITY, f64::max);
    if reference.amplitude <= max_other {
        return Err(Error::ApproximationPremise {
            reference: reference.amplitude,
            max_other,
        });
    }
    let beat: f64 = field
        .bins()
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != field.reference_index())
        .map(|(_, b)| {
            b.amplitude * ((reference.offset - b.offset) * t + (reference.phase - b.phase)).cos()
        })
        .sum();
    Ok(reference.amplitude + beat)
}
