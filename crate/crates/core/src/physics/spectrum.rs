//! Probe transmission time series under the quasi-static approximation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::field::{envelope_of, Bin, MwField};
use super::lindblad::{AtomParams, DensityMatrix, SteadyStateSolver};
use crate::codec::PhaseLabel;
use crate::error::{Error, Result};

/// Maps the probe coherence to transmission. `contrast` lumps the dipole
/// moment, permittivity, optical depth and hbar into one coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransmissionModel {
    pub contrast: f64,
}

impl Default for TransmissionModel {
    fn default() -> Self {
        Self { contrast: 1.0 }
    }
}

impl TransmissionModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.contrast > 0.0 && self.contrast.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "contrast must be positive, got {}",
                self.contrast
            )));
        }
        Ok(())
    }
}

/// A sampled probe-transmission series.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub samples: Vec<f64>,
    /// Sample period, seconds.
    pub dt: f64,
    pub label: Option<PhaseLabel>,
}

impl Spectrum {
    pub fn new(samples: Vec<f64>, dt: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::LengthMismatch {
                expected: 1,
                got: 0,
            });
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidParams(format!(
                "dt must be positive, got {dt}"
            )));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidParams(
                "spectrum contains non-finite samples".into(),
            ));
        }
        Ok(Self {
            samples,
            dt,
            label: None,
        })
    }

    pub fn with_label(mut self, label: PhaseLabel) -> Self {
        self.label = Some(label);
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `exp(-contrast * Im[rho_eg])`.
pub fn transmission_point(rho: &DensityMatrix, model: &TransmissionModel) -> f64 {
    (-model.contrast * rho.rho_eg().im).exp()
}

/// Transmission at every sample time `i * dt` for an arbitrary bin list.
///
/// Bins are not validated here; [`simulate_spectrum`] is the checked entry point.
pub fn spectrum_from_bins(
    bins: &[Bin],
    solver: &SteadyStateSolver,
    model: &TransmissionModel,
    n: usize,
    dt: f64,
) -> Result<Vec<f64>> {
    (0..n)
        .map(|i| {
            let omega_s = envelope_of(bins, i as f64 * dt);
            solver
                .solve(omega_s)
                .map(|rho| transmission_point(&rho, model))
        })
        .collect()
}

/// Same as [`spectrum_from_bins`] with the samples computed in parallel.
pub fn spectrum_from_bins_par(
    bins: &[Bin],
    solver: &SteadyStateSolver,
    model: &TransmissionModel,
    n: usize,
    dt: f64,
) -> Result<Vec<f64>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let omega_s = envelope_of(bins, i as f64 * dt);
            solver
                .solve(omega_s)
                .map(|rho| transmission_point(&rho, model))
        })
        .collect()
}

/// Simulates `n` samples of probe transmission spaced by `dt`, solving the
/// steady state pointwise with the envelope frozen at each sample time.
///
/// Physically meaningful only while every beat frequency is well below the
/// smallest decay rate.
pub fn simulate_spectrum(
    field: &MwField,
    params: &AtomParams,
    model: &TransmissionModel,
    n: usize,
    dt: f64,
) -> Result<Spectrum> {
    if n == 0 {
        return Err(Error::LengthMismatch {
            expected: 1,
            got: 0,
        });
    }
    model.validate()?;
    let solver = SteadyStateSolver::new(params)?;
    let samples = spectrum_from_bins(field.bins(), &solver, model, n, dt)?;
    Spectrum::new(samples, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::lindblad::steady_state;
    use num_complex::Complex64 as C64;
    use std::f64::consts::{PI, TAU};

    fn field(amps: [f64; 4], phases: [f64; 4]) -> MwField {
        let offsets = [-3.0, -1.0, 1.0, 3.0];
        MwField::new(
            (0..4)
                .map(|i| Bin {
                    offset: offsets[i] * TAU * 1e3,
                    amplitude: amps[i],
                    phase: phases[i],
                })
                .collect(),
            3,
            17.62e9,
        )
        .unwrap()
    }

    #[test]
    fn zero_coherence_is_full_transmission() {
        let mut m = [[C64::new(0.0, 0.0); 4]; 4];
        m[0][0] = C64::new(1.0, 0.0);
        let t = transmission_point(&DensityMatrix(m), &TransmissionModel::default());
        assert_eq!(t, 1.0);
    }

    #[test]
    fn contrast_scales_exponent() {
        let p = AtomParams::default();
        let rho = steady_state(&p, 1e7).unwrap();
        let t1 = transmission_point(&rho, &TransmissionModel { contrast: 1.0 });
        let t2 = transmission_point(&rho, &TransmissionModel { contrast: 2.0 });
        assert!((t2 - t1 * t1).abs() < 1e-14);
        assert!(t1 > 0.0 && t1 < 1.0);
    }

    #[test]
    fn coupling_opens_transparency_window() {
        let weak_probe = AtomParams {
            omega_p: TAU * 0.1e6,
            ..AtomParams::default()
        };
        let off = AtomParams {
            omega_c: 0.0,
            ..weak_probe
        };
        let model = TransmissionModel::default();
        let t_on = transmission_point(&steady_state(&weak_probe, 0.0).unwrap(), &model);
        let t_off = transmission_point(&steady_state(&off, 0.0).unwrap(), &model);
        assert!(t_on > t_off, "EIT {t_on} vs two-level {t_off}");
    }

    #[test]
    fn beat_period_repeats() {
        let a = TAU * 0.2e6;
        let f = field([a, a, a, 10.0 * a], [PI, 0.0, PI, 0.0]);
        let s =
            simulate_spectrum(&f, &AtomParams::default(), &Default::default(), 1000, 1e-6).unwrap();
        for i in 0..500 {
            assert!((s.samples[i] - s.samples[i + 500]).abs() < 1e-9);
        }
    }

    #[test]
    fn phase_flip_changes_series_with_strong_reference() {
        let a = TAU * 0.2e6;
        let p = AtomParams::default();
        let m = TransmissionModel::default();
        let s0 =
            simulate_spectrum(&field([a, a, a, 10.0 * a], [0.0; 4]), &p, &m, 500, 1e-6).unwrap();
        let s1 = simulate_spectrum(
            &field([a, a, a, 10.0 * a], [PI, 0.0, 0.0, 0.0]),
            &p,
            &m,
            500,
            1e-6,
        )
        .unwrap();
        let diff = s0
            .samples
            .iter()
            .zip(&s1.samples)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn parallel_matches_serial() {
        let a = TAU * 0.2e6;
        let f = field([a, a, a, 10.0 * a], [PI, PI, 0.0, 0.0]);
        let solver = SteadyStateSolver::new(&AtomParams::default()).unwrap();
        let m = TransmissionModel::default();
        let s = spectrum_from_bins(f.bins(), &solver, &m, 200, 1e-6).unwrap();
        let p = spectrum_from_bins_par(f.bins(), &solver, &m, 200, 1e-6).unwrap();
        assert_eq!(s, p);
    }

    #[test]
    fn rejects_empty_request() {
        let a = TAU * 0.2e6;
        let f = field([a, a, a, 10.0 * a], [0.0; 4]);
        assert!(
            simulate_spectrum(&f, &AtomParams::default(), &Default::default(), 0, 1e-6).is_err()
        );
    }
}
