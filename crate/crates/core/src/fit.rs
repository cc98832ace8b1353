//! Baseline decoder: least-squares fit of the steady-state forward model to a
//! scaled spectrum, over the message-bin phases plus an affine scale and
//! offset.
//!
//! By default the simplex moves phases, scale and offset together. With
//! [`AffineMode::Projected`] the affine terms are instead solved in closed
//! form inside the objective, which leaves a much easier phase-only search.

use std::f64::consts::TAU;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use argmin::core::observers::{Observe, ObserverMode};
use argmin::core::{CostFunction, Executor, State, TerminationReason, TerminationStatus, KV};
use argmin::solver::neldermead::NelderMead;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{quantize_phase, wrap_phase, CodecConfig, Frame};
use crate::error::{Error, Result};
use crate::physics::{
    spectrum_from_bins, AtomParams, Bin, Spectrum, SteadyStateSolver, TransmissionModel,
};

/// How the affine nuisance terms are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffineMode {
    /// Scale and offset are simplex coordinates like the phases.
    #[default]
    Joint,
    /// Scale and offset are eliminated by linear least squares.
    Projected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub affine: AffineMode,
    pub max_iters: u64,
    /// Stop when the standard deviation of the simplex objective values
    /// drops below this.
    pub tolerance: f64,
    /// Initial simplex edge along each phase, radians.
    pub initial_step: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            affine: AffineMode::Joint,
            max_iters: 2000,
            tolerance: 1e-8,
            initial_step: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Fitted message-bin phases in [0, 2pi).
    pub phases: Vec<f64>,
    pub scale: f64,
    pub offset: f64,
    /// Final sum of squared residuals.
    pub residual: f64,
    pub iterations: u64,
    pub evaluations: u64,
    /// False when the iteration cap was hit first; the result is then the
    /// best point seen.
    pub converged: bool,
    pub bits: Frame,
    /// Best objective value after each simplex iteration.
    pub history: Vec<f64>,
}

/// Forward model evaluated for arbitrary message phases.
pub struct FitModel<'a> {
    cfg: &'a CodecConfig,
    solver: SteadyStateSolver,
    model: TransmissionModel,
    template: Vec<Bin>,
    n: usize,
    dt: f64,
}

impl<'a> FitModel<'a> {
    pub fn new(
        cfg: &'a CodecConfig,
        atom: &AtomParams,
        model: &TransmissionModel,
        n: usize,
        dt: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        let reference = cfg.reference_index();
        let template = cfg
            .offsets_hz()
            .into_iter()
            .enumerate()
            .map(|(k, f)| Bin {
                offset: TAU * f,
                amplitude: if k == reference {
                    cfg.reference_amplitude
                } else {
                    cfg.message_amplitude()
                },
                phase: 0.0,
            })
            .collect();
        Ok(Self {
            cfg,
            solver: SteadyStateSolver::new(atom)?,
            model: *model,
            template,
            n,
            dt,
        })
    }

    /// Unscaled transmission for the given message phases.
    pub fn transmission(&self, phases: &[f64]) -> Result<Vec<f64>> {
        if phases.len() != self.cfg.bits_per_frame() {
            return Err(Error::LengthMismatch {
                expected: self.cfg.bits_per_frame(),
                got: phases.len(),
            });
        }
        let mut bins = self.template.clone();
        for (b, p) in bins.iter_mut().zip(phases) {
            b.phase = *p;
        }
        spectrum_from_bins(&bins, &self.solver, &self.model, self.n, self.dt)
    }
}

/// Least-squares `offset + scale * model` against `data`; returns
/// `(scale, offset, sum of squares)`.
pub fn affine_fit(model: &[f64], data: &[f64]) -> (f64, f64, f64) {
    let n = model.len() as f64;
    let mm = model.iter().sum::<f64>() / n;
    let md = data.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in model.iter().zip(data) {
        sxy += (x - mm) * (y - md);
        sxx += (x - mm) * (x - mm);
    }
    let scale = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let offset = md - scale * mm;
    (scale, offset, sum_sq(model, data, scale, offset))
}

fn sum_sq(model: &[f64], data: &[f64], scale: f64, offset: f64) -> f64 {
    model
        .iter()
        .zip(data)
        .map(|(x, y)| {
            let r = y - offset - scale * x;
            r * r
        })
        .sum()
}

struct Objective<'m, 'a> {
    model: &'m FitModel<'a>,
    data: &'m [f64],
    mode: AffineMode,
}

impl CostFunction for Objective<'_, '_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        Ok(match self.mode {
            AffineMode::Projected => affine_fit(&self.model.transmission(p)?, self.data).2,
            AffineMode::Joint => {
                let d = p.len() - 2;
                let t = self.model.transmission(&p[..d])?;
                sum_sq(&t, self.data, p[d], p[d + 1])
            }
        })
    }
}

#[derive(Clone, Default)]
struct BestCostLog(Arc<Mutex<Vec<f64>>>);

impl<I: State<Float = f64>> Observe<I> for BestCostLog {
    fn observe_iter(
        &mut self,
        state: &I,
        _kv: &KV,
    ) -> std::result::Result<(), argmin::core::Error> {
        self.0
            .lock()
            .expect("history lock")
            .push(state.get_best_cost());
        Ok(())
    }
}

fn argmin_err(e: argmin::core::Error) -> Error {
    match e.downcast::<Error>() {
        Ok(inner) => inner,
        Err(other) => Error::InvalidParams(format!("optimizer failed: {other}")),
    }
}

/// Fits message phases to a min-max scaled spectrum, starting from `init`.
pub fn fit_phases(
    spectrum: &Spectrum,
    cfg: &CodecConfig,
    atom: &AtomParams,
    model: &TransmissionModel,
    init: &[f64],
    fit_cfg: &FitConfig,
) -> Result<FitResult> {
    let fm = FitModel::new(cfg, atom, model, spectrum.len(), spectrum.dt)?;
    fit_with_model(&fm, &spectrum.samples, init, fit_cfg)
}

pub fn fit_with_model(
    fm: &FitModel<'_>,
    data: &[f64],
    init: &[f64],
    fit_cfg: &FitConfig,
) -> Result<FitResult> {
    let dim = fm.cfg.bits_per_frame();
    if init.len() != dim {
        return Err(Error::LengthMismatch {
            expected: dim,
            got: init.len(),
        });
    }
    if data.len() != fm.n {
        return Err(Error::LengthMismatch {
            expected: fm.n,
            got: data.len(),
        });
    }
    // Joint mode starts scale and offset at their least-squares values for
    // the initial phases and steps them by a tenth of the data range.
    let mut start = init.to_vec();
    let mut steps = vec![fit_cfg.initial_step; dim];
    if fit_cfg.affine == AffineMode::Joint {
        let (scale, offset, _) = affine_fit(&fm.transmission(init)?, data);
        let range = data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - data.iter().copied().fold(f64::INFINITY, f64::min);
        let step = if range > 0.0 { 0.1 * range } else { 0.1 };
        start.extend([scale, offset]);
        steps.extend([
            if scale != 0.0 {
                0.1 * scale.abs()
            } else {
                step
            },
            step,
        ]);
    }
    let mut simplex = vec![start.clone()];
    for (j, h) in steps.iter().enumerate() {
        let mut v = start.clone();
        v[j] += h;
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(fit_cfg.tolerance)
        .map_err(argmin_err)?;
    let log = BestCostLog::default();
    let objective = Objective {
        model: fm,
        data,
        mode: fit_cfg.affine,
    };
    let res = Executor::new(objective, solver)
        .configure(|s| s.max_iters(fit_cfg.max_iters).counting(true))
        .add_observer(log.clone(), ObserverMode::Always)
        .run()
        .map_err(argmin_err)?;
    let state = res.state();
    let best = state
        .get_best_param()
        .cloned()
        .ok_or_else(|| Error::InvalidParams("optimizer returned no parameters".into()))?;
    let converged = matches!(
        state.get_termination_status(),
        TerminationStatus::Terminated(TerminationReason::SolverConverged)
    );
    let t = fm.transmission(&best[..dim])?;
    let (scale, offset, residual) = match fit_cfg.affine {
        AffineMode::Projected => affine_fit(&t, data),
        AffineMode::Joint => (
            best[dim],
            best[dim + 1],
            sum_sq(&t, data, best[dim], best[dim + 1]),
        ),
    };
    let phases: Vec<f64> = best[..dim].iter().map(|p| wrap_phase(*p)).collect();
    let bits = Frame::new(phases.iter().map(|p| quantize_phase(*p)).collect());
    let history = log.0.lock().expect("history lock").clone();
    Ok(FitResult {
        phases,
        scale,
        offset,
        residual,
        iterations: state.get_iter(),
        evaluations: state
            .get_func_counts()
            .get("cost_count")
            .copied()
            .unwrap_or(0),
        converged,
        bits,
        history,
    })
}

/// Fit from all-zero phases and quantize each phase to the nearer of 0, pi.
pub fn classify_by_fit(
    spectrum: &Spectrum,
    cfg: &CodecConfig,
    atom: &AtomParams,
    model: &TransmissionModel,
    fit_cfg: &FitConfig,
) -> Result<Frame> {
    let init = vec![0.0; cfg.bits_per_frame()];
    Ok(fit_phases(spectrum, cfg, atom, model, &init, fit_cfg)?.bits)
}

/// One fitted spectrum with its wall time.
#[derive(Debug, Clone)]
pub struct FitRow {
    pub truth: Option<Frame>,
    pub result: FitResult,
    pub millis: f64,
}

/// Zero-init fits of many spectra sharing one configuration, in parallel.
pub fn classify_many(
    data: &[Vec<f64>],
    dt: f64,
    cfg: &CodecConfig,
    atom: &AtomParams,
    model: &TransmissionModel,
    fit_cfg: &FitConfig,
) -> Result<Vec<FitRow>> {
    let n = data.first().map_or(0, Vec::len);
    let fm = FitModel::new(cfg, atom, model, n, dt)?;
    let init = vec![0.0; cfg.bits_per_frame()];
    data.par_iter()
        .map(|x| {
            let started = Instant::now();
            let result = fit_with_model(&fm, x, &init, fit_cfg)?;
            Ok(FitRow {
                truth: None,
                result,
                millis: started.elapsed().as_secs_f64() * 1e3,
            })
        })
        .collect()
}

/// CSV with true bits, fitted phases, quantized bits, residual and wall time.
pub fn fit_csv(rows: &[FitRow]) -> String {
    let mut s = String::from("true_bits,phases,fit_bits,residual,iterations,converged,millis\n");
    for r in rows {
        let phases: Vec<String> = r.result.phases.iter().map(|p| format!("{p:.6}")).collect();
        s.push_str(&format!(
            "{},{},{},{:.6e},{},{},{:.3}\n",
            r.truth.as_ref().map(|f| f.to_string()).unwrap_or_default(),
            phases.join(";"),
            r.result.bits,
            r.result.residual,
            r.result.iterations,
            r.result.converged,
            r.millis
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_fit_recovers_line() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.5 + 2.0 * v).collect();
        let (a, b, ss) = affine_fit(&x, &y);
        assert!((a - 2.0).abs() < 1e-12 && (b - 0.5).abs() < 1e-12 && ss < 1e-20);
    }

    #[test]
    fn constant_model_falls_back_to_mean() {
        let (scale, offset, ss) = affine_fit(&[1.0; 4], &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(scale, 0.0);
        assert_eq!(offset, 0.5);
        assert_eq!(ss, 1.0);
    }
}
