//! Accuracy metrics, noise sweeps, timing benchmarks and the payload
//! round-trip pipeline.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{
    bits_to_frames, decode_label, encode_bits, frames_to_bits, CodecConfig, Frame,
    DEFAULT_THRESHOLD,
};
use crate::dataset::{noisy_scaled, DatasetSpec};
use crate::error::{Error, Result};
use crate::fit::{fit_with_model, FitConfig, FitModel};
use crate::nn::Network;
use crate::rng::{stream, Purpose};

pub fn exact_match_accuracy(preds: &[Frame], truths: &[Frame]) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::LengthMismatch {
            expected: truths.len(),
            got: preds.len(),
        });
    }
    if truths.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truths.len() as f64)
}

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn accuracy(&self) -> f64 {
        let diag: u64 = (0..self.classes).map(|k| self.counts[k][k]).sum();
        diag as f64 / self.total().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("truth");
        for c in 0..self.classes {
            s.push_str(&format!(",pred{c}"));
        }
        s.push('\n');
        for (k, row) in self.counts.iter().enumerate() {
            s.push_str(&k.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Confusion over the `2^active` classes spelled by the leading bits. A
/// prediction with any bit set beyond `active` is out of range.
pub fn confusion(preds: &[Frame], truths: &[Frame], active: usize) -> Result<ConfusionMatrix> {
    if preds.len() != truths.len() {
        return Err(Error::LengthMismatch {
            expected: truths.len(),
            got: preds.len(),
        });
    }
    let classes = 1usize << active;
    let mut counts = vec![vec![0u64; classes]; classes];
    for (p, t) in preds.iter().zip(truths) {
        let (pc, tc) = (p.class(active)?, t.class(active)?);
        counts[tc][pc] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

/// Mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Thresholded network predictions for scaled inputs.
pub fn predict_frames(net: &Network, inputs: &[Vec<f64>]) -> Result<Vec<Frame>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(64) {
        let views: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
        for raw in net.predict_batch(&views)? {
            out.push(decode_label(&raw, DEFAULT_THRESHOLD));
        }
    }
    Ok(out)
}

/// Noiseless spectra for every class of a dataset spec, indexed by class.
pub fn clean_class_spectra(spec: &DatasetSpec) -> Result<Vec<Vec<f64>>> {
    (0..spec.n_classes())
        .into_par_iter()
        .map(|c| {
            let label = spec.label_of(c)?;
            Ok(spec.clean_spectrum(&label)?.samples)
        })
        .collect()
}

/// A fresh noisy, scaled test set drawn from clean class spectra. `key`
/// selects an independent noise stream.
pub fn noisy_test_set(
    clean: &[Vec<f64>],
    classes: &[usize],
    sigma: f64,
    seed: u64,
    key: u64,
) -> Result<Vec<Vec<f64>>> {
    classes
        .par_iter()
        .enumerate()
        .map(|(i, &c)| {
            let mut rng = stream(seed, Purpose::EvalNoise, (key << 24) ^ i as u64);
            noisy_scaled(&clean[c], sigma, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseGrid {
    pub train_sigmas: Vec<f64>,
    pub test_sigmas: Vec<f64>,
    /// `accuracy[i][j]`: model trained at `train_sigmas[i]`, tested at
    /// `test_sigmas[j]`, mean over repeats.
    pub accuracy: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
}

impl NoiseGrid {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("train_sigma,test_sigma,accuracy,stderr\n");
        for (i, ts) in self.train_sigmas.iter().enumerate() {
            for (j, es) in self.test_sigmas.iter().enumerate() {
                s.push_str(&format!(
                    "{ts},{es},{:.6},{:.6}\n",
                    self.accuracy[i][j], self.stderr[i][j]
                ));
            }
        }
        s
    }
}

/// Evaluates one trained model per training sigma on fresh test sets at
/// every test sigma. `models[i]` must have been trained at `train_sigmas[i]`.
pub fn noise_grid(
    models: &[Network],
    train_sigmas: &[f64],
    test_sigmas: &[f64],
    spec: &DatasetSpec,
    test_classes: &[usize],
    repeats: usize,
) -> Result<NoiseGrid> {
    if train_sigmas.is_empty() || test_sigmas.is_empty() || repeats == 0 {
        return Err(Error::Config(
            "noise grid axes and repeats must be non-empty".into(),
        ));
    }
    if models.len() != train_sigmas.len() {
        return Err(Error::LengthMismatch {
            expected: train_sigmas.len(),
            got: models.len(),
        });
    }
    let clean = clean_class_spectra(spec)?;
    let truths = class_frames(spec, test_classes);
    let mut accuracy = vec![vec![0.0; test_sigmas.len()]; train_sigmas.len()];
    let mut stderr = accuracy.clone();
    for (j, &sigma) in test_sigmas.iter().enumerate() {
        let sets: Vec<Vec<Vec<f64>>> = (0..repeats)
            .map(|r| {
                noisy_test_set(
                    &clean,
                    test_classes,
                    sigma,
                    spec.seed,
                    (j * repeats + r) as u64,
                )
            })
            .collect::<Result<_>>()?;
        for (i, net) in models.iter().enumerate() {
            let accs: Vec<f64> = sets
                .iter()
                .map(|x| exact_match_accuracy(&predict_frames(net, x)?, &truths))
                .collect::<Result<_>>()?;
            (accuracy[i][j], stderr[i][j]) = mean_stderr(&accs);
        }
    }
    Ok(NoiseGrid {
        train_sigmas: train_sigmas.to_vec(),
        test_sigmas: test_sigmas.to_vec(),
        accuracy,
        stderr,
    })
}

fn class_frames(spec: &DatasetSpec, classes: &[usize]) -> Vec<Frame> {
    classes
        .iter()
        .map(|&c| Frame::from_class(c, spec.active_bits(), spec.codec.bits_per_frame()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub sigma: f64,
    pub acc_dl: f64,
    pub acc_fit: f64,
    pub stderr_dl: f64,
    pub stderr_fit: f64,
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("sigma,acc_dl,acc_fit,stderr_dl,stderr_fit\n");
    for p in points {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            p.sigma, p.acc_dl, p.acc_fit, p.stderr_dl, p.stderr_fit
        ));
    }
    s
}

/// Network vs. zero-init fit on identical noisy test sets at each sigma.
pub fn dl_vs_fit_curve(
    net: &Network,
    sigmas: &[f64],
    spec: &DatasetSpec,
    test_classes: &[usize],
    repeats: usize,
    fit_cfg: &FitConfig,
) -> Result<Vec<CurvePoint>> {
    if repeats == 0 || test_classes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let clean = clean_class_spectra(spec)?;
    let truths = class_frames(spec, test_classes);
    let fm = FitModel::new(&spec.codec, &spec.atom, &spec.model, spec.n, spec.dt)?;
    let init = vec![0.0; spec.codec.bits_per_frame()];
    let mut points = Vec::with_capacity(sigmas.len());
    for (j, &sigma) in sigmas.iter().enumerate() {
        let mut acc_dl = Vec::with_capacity(repeats);
        let mut acc_fit = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let x = noisy_test_set(
                &clean,
                test_classes,
                sigma,
                spec.seed,
                (j * repeats + r) as u64,
            )?;
            acc_dl.push(exact_match_accuracy(&predict_frames(net, &x)?, &truths)?);
            let fitted: Vec<Frame> = x
                .par_iter()
                .map(|xi| fit_with_model(&fm, xi, &init, fit_cfg).map(|f| f.bits))
                .collect::<Result<_>>()?;
            acc_fit.push(exact_match_accuracy(&fitted, &truths)?);
        }
        let (a_dl, s_dl) = mean_stderr(&acc_dl);
        let (a_fit, s_fit) = mean_stderr(&acc_fit);
        points.push(CurvePoint {
            sigma,
            acc_dl: a_dl,
            acc_fit: a_fit,
            stderr_dl: s_dl,
            stderr_fit: s_fit,
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub machine: String,
    pub n_dl: usize,
    pub n_fit: usize,
    pub dl_median_ms: f64,
    pub fit_median_ms: f64,
    pub ratio: f64,
    /// `(batches of 16 spectra, seconds)` for the batch-scaling check.
    pub batch_scaling: Vec<(usize, f64)>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        format!(
            "machine,n_dl,n_fit,dl_median_ms,fit_median_ms,ratio\n\"{}\",{},{},{:.4},{:.4},{:.2}\n",
            self.machine, self.n_dl, self.n_fit, self.dl_median_ms, self.fit_median_ms, self.ratio
        )
    }
}

pub fn machine_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{} {} / {cpu} / {threads} threads / rayon {}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        rayon::current_num_threads()
    )
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median per-spectrum wall time of network decoding and of zero-init fits,
/// one spectrum at a time, after one untimed warm-up call each.
pub fn bench_inference(
    net: &Network,
    spec: &DatasetSpec,
    inputs: &[Vec<f64>],
    n_fit: usize,
    fit_cfg: &FitConfig,
) -> Result<BenchReport> {
    if inputs.len() < 20 {
        return Err(Error::TooFewRecords {
            need: 20,
            got: inputs.len(),
        });
    }
    let n_fit = n_fit.clamp(1, inputs.len());
    net.predict(&inputs[0])?;
    let dl: Vec<f64> = inputs
        .iter()
        .map(|x| {
            let t = Instant::now();
            let raw = net.predict(x)?;
            std::hint::black_box(decode_label(&raw, DEFAULT_THRESHOLD));
            Ok(t.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<Result<_>>()?;

    let fm = FitModel::new(&spec.codec, &spec.atom, &spec.model, spec.n, spec.dt)?;
    let init = vec![0.0; spec.codec.bits_per_frame()];
    fm.transmission(&init)?;
    let fit: Vec<f64> = inputs[..n_fit]
        .iter()
        .map(|x| {
            let t = Instant::now();
            std::hint::black_box(fit_with_model(&fm, x, &init, fit_cfg)?);
            Ok(t.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<Result<_>>()?;

    let mut batch_scaling = Vec::new();
    let batch: Vec<&[f64]> = inputs.iter().cycle().take(16).map(Vec::as_slice).collect();
    for batches in [1usize, 2, 4] {
        let t = Instant::now();
        for _ in 0..batches {
            std::hint::black_box(net.predict_batch(&batch)?);
        }
        batch_scaling.push((batches, t.elapsed().as_secs_f64()));
    }

    let dl_median_ms = median(dl);
    let fit_median_ms = median(fit);
    Ok(BenchReport {
        machine: machine_descriptor(),
        n_dl: inputs.len(),
        n_fit,
        dl_median_ms,
        fit_median_ms,
        ratio: fit_median_ms / dl_median_ms,
        batch_scaling,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTripReport {
    pub payload_bits: usize,
    pub data_frames: usize,
    pub total_frames: usize,
    pub frame_errors: usize,
    pub bit_errors: usize,
    pub recovered: bool,
    pub sent: String,
    pub received: String,
}

/// Encodes `bits` into frames, simulates one noisy spectrum per frame,
/// decodes them with the network and reassembles the payload.
pub fn payload_round_trip(
    net: &Network,
    spec: &DatasetSpec,
    bits: &[bool],
    sigma: f64,
    seed: u64,
) -> Result<RoundTripReport> {
    let k = spec.codec.bits_per_frame();
    let frames = bits_to_frames(bits, k)?;
    let clean = clean_class_spectra(&DatasetSpec {
        active_bits: Some(k),
        ..spec.clone()
    })?;
    let classes: Vec<usize> = frames.iter().map(|f| f.class(k)).collect::<Result<_>>()?;
    for f in &frames {
        encode_bits(f, &spec.codec)?;
    }
    let x = noisy_test_set(&clean, &classes, sigma, seed, 0)?;
    let decoded = predict_frames(net, &x)?;
    let frame_errors = decoded.iter().zip(&frames).filter(|(a, b)| a != b).count();
    let received = frames_to_bits(&decoded).unwrap_or_default();
    let bit_errors = if received.len() == bits.len() {
        received.iter().zip(bits).filter(|(a, b)| a != b).count()
    } else {
        bits.len()
    };
    let show = |b: &[bool]| {
        b.iter()
            .map(|&v| if v { '1' } else { '0' })
            .collect::<String>()
    };
    Ok(RoundTripReport {
        payload_bits: bits.len(),
        data_frames: bits.len().div_ceil(k),
        total_frames: frames.len(),
        frame_errors,
        bit_errors,
        recovered: received == bits,
        sent: show(bits),
        received: show(&received),
    })
}

/// A 21x21 QR-style bit matrix (row-major): the three finder patterns plus
/// seeded random modules.
pub fn qr_like_payload(seed: u64) -> Vec<bool> {
    const N: usize = 21;
    let mut rng = stream(seed, Purpose::Payload, 0);
    let finder = |r: usize, c: usize| -> Option<bool> {
        for (r0, c0) in [(0, 0), (0, N - 7), (N - 7, 0)] {
            if (r0..r0 + 7).contains(&r) && (c0..c0 + 7).contains(&c) {
                let (dr, dc) = (r - r0, c - c0);
                let ring = dr.min(dc).min(6 - dr).min(6 - dc);
                return Some(ring != 1);
            }
        }
        None
    };
    (0..N * N)
        .map(|i| finder(i / N, i % N).unwrap_or_else(|| rng.random::<bool>()))
        .collect()
}

/// Renders a square bit matrix with `#` for set modules.
pub fn render_matrix(bits: &[bool]) -> String {
    let n = (bits.len() as f64).sqrt().round() as usize;
    bits.chunks(n.max(1))
        .map(|row| {
            row.iter()
                .map(|&b| if b { '#' } else { '.' })
                .collect::<String>()
                + "\n"
        })
        .collect()
}

/// Bits per second carried by a codec configuration.
pub fn codec_rate(cfg: &CodecConfig) -> f64 {
    crate::codec::transmission_rate(cfg.n_bins, cfg.delta_f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(s: &str) -> Frame {
        s.parse().unwrap()
    }

    #[test]
    fn accuracy_examples() {
        let t = vec![f("000"), f("001"), f("010"), f("011")];
        assert_eq!(exact_match_accuracy(&t, &t).unwrap(), 1.0);
        let mut p = t.clone();
        p[2] = f("110");
        assert_eq!(exact_match_accuracy(&p, &t).unwrap(), 0.75);
        assert!(exact_match_accuracy(&p[..3], &t).is_err());
    }

    #[test]
    fn confusion_examples() {
        let t = vec![f("000"), f("001"), f("111"), f("111")];
        let m = confusion(&t, &t, 3).unwrap();
        for (r, row) in m.counts.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!(r == c || *v == 0);
            }
        }
        let one = confusion(&[f("100")], &[f("001")], 3).unwrap();
        assert_eq!(one.counts[1][4], 1);
        assert_eq!(one.total(), 1);
        assert_eq!(one.accuracy(), 0.0);
        let p = vec![f("000"), f("011"), f("111"), f("110")];
        let m = confusion(&p, &t, 3).unwrap();
        assert_eq!(m.accuracy(), exact_match_accuracy(&p, &t).unwrap());
        assert_eq!(m.row_sums(), vec![1, 1, 0, 0, 0, 0, 0, 2]);
        let wide = Frame::from_class(0, 3, 5);
        let mut bad = wide.clone();
        bad.bits[4] = true;
        assert!(matches!(
            confusion(&[bad], &[wide], 3),
            Err(Error::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn mean_stderr_values() {
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn qr_payload_shape() {
        let bits = qr_like_payload(1);
        assert_eq!(bits.len(), 441);
        assert!(bits[0] && !bits[22] && bits[2 * 21 + 2]);
        assert_eq!(bits, qr_like_payload(1));
        assert_eq!(render_matrix(&bits).lines().count(), 21);
    }
}
