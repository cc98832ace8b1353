//! FDM-2PSK: message bits <-> per-bin phases, bin layout, rate, and payload
//! framing.
//!
//! Layout: bins sit on a symmetric grid spaced by `delta_f` around the carrier
//! (four bins at 2 kHz give offsets -3, -1, +1, +3 kHz). The highest-frequency
//! bin is the reference: it carries phase 0 and the large amplitude. Message
//! bit `k` drives bin `k`, with bit 0 as phase 0 and bit 1 as phase pi.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::{Bin, MwField};

/// Bits used by the payload length header.
pub const HEADER_BITS: usize = 16;

/// Default decision threshold on sigmoid outputs.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub n_bins: usize,
    /// Spacing between adjacent bins, Hz.
    pub delta_f: f64,
    /// Nominal carrier (metadata only), Hz.
    pub center_hz: f64,
    /// Reference amplitude divided by message-bin amplitude.
    pub amplitude_ratio: f64,
    /// Reference-bin Rabi amplitude, rad/s.
    pub reference_amplitude: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            n_bins: 4,
            delta_f: 2e3,
            center_hz: 17.62e9,
            amplitude_ratio: 10.0,
            reference_amplitude: TAU * 2e6,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_bins < 2 {
            return Err(Error::Config(format!(
                "n_bins must be >= 2, got {}",
                self.n_bins
            )));
        }
        if !(self.delta_f > 0.0 && self.delta_f.is_finite()) {
            return Err(Error::Config(format!(
                "delta_f must be positive, got {}",
                self.delta_f
            )));
        }
        if !(self.amplitude_ratio > 1.0 && self.amplitude_ratio.is_finite()) {
            return Err(Error::Config(format!(
                "amplitude_ratio must exceed 1, got {}",
                self.amplitude_ratio
            )));
        }
        if !(self.reference_amplitude > 0.0 && self.reference_amplitude.is_finite()) {
            return Err(Error::Config("reference_amplitude must be positive".into()));
        }
        Ok(())
    }

    pub fn bits_per_frame(&self) -> usize {
        self.n_bins - 1
    }

    pub fn reference_index(&self) -> usize {
        self.n_bins - 1
    }

    /// Bin offsets from the carrier in Hz, ascending.
    pub fn offsets_hz(&self) -> Vec<f64> {
        let n = self.n_bins as f64;
        (0..self.n_bins)
            .map(|k| (2.0 * k as f64 - (n - 1.0)) * self.delta_f / 2.0)
            .collect()
    }

    pub fn message_amplitude(&self) -> f64 {
        self.reference_amplitude / self.amplitude_ratio
    }
}

/// Message bits for one symbol interval.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Frame {
    pub bits: Vec<bool>,
}

impl Frame {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            bits: vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Frame whose first `active` bits spell `class` MSB-first, rest zero.
    pub fn from_class(class: usize, active: usize, len: usize) -> Self {
        let mut bits = vec![false; len];
        for (j, bit) in bits.iter_mut().take(active).enumerate() {
            *bit = (class >> (active - 1 - j)) & 1 == 1;
        }
        Self { bits }
    }

    /// Inverse of [`Frame::from_class`]. Fails if any bit beyond `active` is set.
    pub fn class(&self, active: usize) -> Result<usize> {
        if self.bits.iter().skip(active).any(|b| *b) {
            return Err(Error::ClassOutOfRange {
                class: usize::MAX,
                classes: 1 << active,
            });
        }
        Ok(self
            .bits
            .iter()
            .take(active)
            .fold(0usize, |acc, b| (acc << 1) | usize::from(*b)))
    }
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            f.write_str(if *b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for Frame {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::MalformedHeader(format!(
                    "invalid bit character {other:?}"
                ))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Frame::new)
    }
}

/// One entry per bin, reference (last) entry always 0.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhaseLabel {
    bits: Vec<bool>,
}

impl PhaseLabel {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.len() < 2 {
            return Err(Error::LengthMismatch {
                expected: 2,
                got: bits.len(),
            });
        }
        if bits[bits.len() - 1] {
            return Err(Error::InvalidField(
                "reference label entry must be 0".into(),
            ));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn reference_index(&self) -> usize {
        self.bits.len() - 1
    }

    /// Per-bin phases in radians.
    pub fn phases(&self) -> Vec<f64> {
        self.bits
            .iter()
            .map(|b| if *b { PI } else { 0.0 })
            .collect()
    }

    /// Dense 0/1 target vector.
    pub fn as_targets(&self) -> Vec<f64> {
        self.bits.iter().map(|b| f64::from(u8::from(*b))).collect()
    }

    pub fn frame(&self) -> Frame {
        Frame::new(self.bits[..self.bits.len() - 1].to_vec())
    }
}

/// Maps message bits to phases and appends the reference bin.
pub fn encode_bits(frame: &Frame, cfg: &CodecConfig) -> Result<PhaseLabel> {
    if frame.len() != cfg.bits_per_frame() {
        return Err(Error::LengthMismatch {
            expected: cfg.bits_per_frame(),
            got: frame.len(),
        });
    }
    let mut bits = frame.bits.clone();
    bits.push(false);
    PhaseLabel::new(bits)
}

/// Builds the microwave drive that carries `label`.
pub fn field_from_label(label: &PhaseLabel, cfg: &CodecConfig) -> Result<MwField> {
    if label.len() != cfg.n_bins {
        return Err(Error::LengthMismatch {
            expected: cfg.n_bins,
            got: label.len(),
        });
    }
    let reference = cfg.reference_index();
    let bins = cfg
        .offsets_hz()
        .into_iter()
        .zip(label.phases())
        .enumerate()
        .map(|(k, (offset_hz, phase))| Bin {
            offset: TAU * offset_hz,
            amplitude: if k == reference {
                cfg.reference_amplitude
            } else {
                cfg.message_amplitude()
            },
            phase,
        })
        .collect();
    MwField::new(bins, reference, cfg.center_hz)
}

/// Thresholds raw per-bin scores (`> threshold` is 1) and drops the
/// reference entry, which is the last one.
pub fn decode_label(raw: &[f64], threshold: f64) -> Frame {
    let n = raw.len().saturating_sub(1);
    Frame::new(raw[..n].iter().map(|v| *v > threshold).collect())
}

/// Information rate in bits/s: one bit per message bin per symbol.
pub fn transmission_rate(n_bins: usize, delta_f: f64) -> f64 {
    n_bins.saturating_sub(1) as f64 * delta_f
}

/// Nearest of {0, pi} modulo 2 pi: bit 1 iff the wrapped phase lies in
/// `[pi/2, 3pi/2)`.
pub fn quantize_phase(phase: f64) -> bool {
    let p = wrap_phase(phase);
    (FRAC_PI_2..3.0 * FRAC_PI_2).contains(&p)
}

/// Wraps into `[0, 2 pi)`.
pub fn wrap_phase(phase: f64) -> f64 {
    let p = phase.rem_euclid(TAU);
    if p >= TAU {
        0.0
    } else {
        p
    }
}

fn chunk_bits(bits: &[bool], width: usize) -> Vec<Frame> {
    bits.chunks(width)
        .map(|c| {
            let mut v = c.to_vec();
            v.resize(width, false);
            Frame::new(v)
        })
        .collect()
}

/// Frames an arbitrary bit string: a 16-bit big-endian bit count spread over
/// `ceil(16 / width)` header frames, then the payload zero-padded to whole
/// frames.
pub fn bits_to_frames(bits: &[bool], bits_per_frame: usize) -> Result<Vec<Frame>> {
    let max = (1usize << HEADER_BITS) - 1;
    if bits.len() > max {
        return Err(Error::PayloadTooLarge {
            bits: bits.len(),
            max,
        });
    }
    if bits_per_frame == 0 {
        return Err(Error::LengthMismatch {
            expected: 1,
            got: 0,
        });
    }
    let header: Vec<bool> = (0..HEADER_BITS)
        .rev()
        .map(|k| (bits.len() >> k) & 1 == 1)
        .collect();
    let mut frames = chunk_bits(&header, bits_per_frame);
    frames.extend(chunk_bits(bits, bits_per_frame));
    Ok(frames)
}

pub fn header_frames(bits_per_frame: usize) -> usize {
    HEADER_BITS.div_ceil(bits_per_frame)
}

/// Inverse of [`bits_to_frames`].
pub fn frames_to_bits(frames: &[Frame]) -> Result<Vec<bool>> {
    let width = match frames.first() {
        Some(f) if !f.is_empty() => f.len(),
        Some(_) => return Err(Error::MalformedHeader("zero-width frame".into())),
        None => return Err(Error::MalformedHeader("no frames".into())),
    };
    if let Some(bad) = frames.iter().position(|f| f.len() != width) {
        return Err(Error::MalformedHeader(format!(
            "frame {bad} has width {} instead of {width}",
            frames[bad].len()
        )));
    }
    let h = header_frames(width);
    if frames.len() < h {
        return Err(Error::MalformedHeader(format!(
            "need {h} header frames, got {}",
            frames.len()
        )));
    }
    let header: Vec<bool> = frames[..h]
        .iter()
        .flat_map(|f| f.bits.iter().copied())
        .collect();
    if header[HEADER_BITS..].iter().any(|b| *b) {
        return Err(Error::MalformedHeader("nonzero header padding".into()));
    }
    let count = header[..HEADER_BITS]
        .iter()
        .fold(0usize, |acc, b| (acc << 1) | usize::from(*b));
    let data = &frames[h..];
    let expected = count.div_ceil(width);
    if data.len() != expected {
        return Err(Error::MalformedHeader(format!(
            "header announces {count} bits ({expected} frames), got {} frames",
            data.len()
        )));
    }
    let mut bits: Vec<bool> = data.iter().flat_map(|f| f.bits.iter().copied()).collect();
    bits.truncate(count);
    Ok(bits)
}

/// Bytes to frames, MSB-first within each byte.
pub fn payload_to_frames(payload: &[u8], cfg: &CodecConfig) -> Result<Vec<Frame>> {
    let bits: Vec<bool> = payload
        .iter()
        .flat_map(|byte| (0..8).rev().map(move |k| (byte >> k) & 1 == 1))
        .collect();
    bits_to_frames(&bits, cfg.bits_per_frame())
}

pub fn frames_to_payload(frames: &[Frame]) -> Result<Vec<u8>> {
    let bits = frames_to_bits(frames)?;
    if bits.len() % 8 != 0 {
        return Err(Error::MalformedHeader(format!(
            "{} bits is not a whole number of bytes",
            bits.len()
        )));
    }
    Ok(bits
        .chunks(8)
        .map(|c| c.iter().fold(0u8, |acc, b| (acc << 1) | u8::from(*b)))
        .collect())
}

/// One frame per line as ASCII `0`/`1`.
pub fn frames_to_ascii(frames: &[Frame]) -> String {
    let mut out = String::with_capacity(frames.len() * (frames.first().map_or(0, Frame::len) + 1));
    for f in frames {
        out.push_str(&f.to_string());
        out.push('\n');
    }
    out
}

pub fn frames_from_ascii(text: &str) -> Result<Vec<Frame>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::parse)
        .collect()
}
