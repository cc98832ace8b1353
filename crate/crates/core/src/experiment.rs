//! End-to-end experiment runner: generate, split, cross-validate, test and
//! report, driven by one serializable configuration.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::codec::{decode_label, Frame, DEFAULT_THRESHOLD};
use crate::dataset::{
    generate_dataset, split, write_dataset, Dataset, DatasetSpec, Split, SplitPlan,
};
use crate::error::{read_file, write_file, Error, Result};
use crate::eval::{
    confusion, curve_csv, dl_vs_fit_curve, exact_match_accuracy, payload_round_trip,
    predict_frames, qr_like_payload, ConfusionMatrix, CurvePoint, RoundTripReport,
};
use crate::fit::{classify_many, fit_csv, FitConfig, FitRow};
use crate::nn::checkpoint::hex_digest;
use crate::nn::{fit_model, Architecture, Checkpoint, Network, Samples, TrainConfig};
use crate::rng::{stream, Purpose};

pub const PROFILES: [&str; 5] = ["fig2", "fig3-qr", "fig4-noise", "fig5-20bin", "fig5-200khz"];

/// Optional evaluation stages run after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalPlan {
    /// Send a 21x21 bit payload through the trained model.
    pub qr_payload: bool,
    pub qr_sigma: f64,
    /// Test-noise levels for the network-vs-fit comparison; empty skips it.
    pub curve_sigmas: Vec<f64>,
    pub repeats: usize,
    /// Class-balanced test spectra per repeat in the comparison.
    pub curve_spectra: usize,
    /// Zero-init baseline fits on class-balanced test spectra; 0 skips.
    pub baseline_fits: usize,
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self {
            qr_payload: false,
            qr_sigma: 0.05,
            curve_sigmas: Vec::new(),
            repeats: 5,
            curve_spectra: 24,
            baseline_fits: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub profile: String,
    /// Root seed; copied into the dataset and training configs.
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub split: SplitPlan,
    pub arch: Architecture,
    pub train: TrainConfig,
    /// How many of the folds get a model (at most `split.fold_count`).
    pub folds_trained: usize,
    pub fit: FitConfig,
    pub eval: EvalPlan,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            profile: "fig2".into(),
            seed: 0,
            dataset: DatasetSpec::default(),
            split: SplitPlan::default(),
            arch: Architecture {
                filters: 16,
                kernel_len: 16,
                pool: 8,
                hidden: 16,
                ..Architecture::default()
            },
            train: TrainConfig {
                epochs: 40,
                ..TrainConfig::default()
            },
            folds_trained: 4,
            fit: FitConfig::default(),
            eval: EvalPlan::default(),
        }
    }
}

impl ExperimentConfig {
    /// Named preset. All presets share the reduced architecture.
    pub fn profile(name: &str) -> Result<Self> {
        let mut cfg = Self {
            profile: name.to_string(),
            ..Self::default()
        };
        match name {
            "fig2" => {}
            "fig3-qr" => cfg.eval.qr_payload = true,
            "fig4-noise" => {
                cfg.dataset.noise_sigma = 0.0;
                cfg.eval.curve_sigmas = vec![0.0, 0.05, 0.1, 0.2, 0.3, 0.5];
            }
            "fig5-20bin" => {
                cfg.dataset.codec.n_bins = 20;
                cfg.dataset.active_bits = Some(3);
                cfg.eval.baseline_fits = 40;
                // Nineteen message bins share the envelope, so each carries a
                // small fraction of it; heavy augmentation buries that.
                cfg.train.augment_sigma = 0.05;
                cfg.train.lr = 3e-3;
                cfg.train.epochs = 60;
            }
            "fig5-200khz" => {
                cfg.dataset.codec.delta_f = 200e3;
                cfg.dataset.dt = 10e-9;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown profile `{other}` (expected one of {PROFILES:?})"
                )))
            }
        }
        Ok(cfg.resolved())
    }

    /// Propagates the root seed and ties the network shape to the dataset.
    pub fn resolved(mut self) -> Self {
        self.dataset.seed = self.seed;
        self.train.seed = self.seed;
        self.arch.input_len = self.dataset.n;
        self.arch.outputs = self.dataset.codec.n_bins;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        if self.folds_trained == 0 || self.folds_trained > self.split.fold_count {
            return Err(Error::Config(format!(
                "folds_trained must be in 1..={}",
                self.split.fold_count
            )));
        }
        if self.arch.input_len != self.dataset.n || self.arch.outputs != self.dataset.codec.n_bins {
            return Err(Error::Config(
                "architecture input/output sizes must match the dataset".into(),
            ));
        }
        Ok(())
    }

    /// Content hash of the configuration; identical configs share an id.
    pub fn run_id(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex_digest(&json)[..16].to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub seed: u64,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub config: ExperimentConfig,
    /// Output files, relative to the manifest's directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_slice(&read_file(path)?)
            .map_err(|e| Error::Config(format!("{}: not a run manifest: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub epochs_run: usize,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub spectra: usize,
    pub accuracy: f64,
    pub converged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub run_id: String,
    pub profile: String,
    pub records: usize,
    pub test_size: usize,
    pub folds: Vec<FoldResult>,
    pub best_fold: usize,
    pub test_accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub roundtrip: Option<RoundTripReport>,
    pub curve: Vec<CurvePoint>,
    pub baseline: Option<BaselineSummary>,
}

/// Everything a run produced, for callers that want to keep going in memory.
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub manifest: RunManifest,
    pub network: Network,
    pub dataset: Dataset,
    pub split: Split,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Up to `n` test indices, taken round-robin across classes.
pub fn balanced_subset(ds: &Dataset, idx: &[usize], n: usize) -> Result<Vec<usize>> {
    let classes = ds.spec.n_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for &i in idx {
        by_class[ds.class_of(i)?].push(i);
    }
    let mut out = Vec::with_capacity(n);
    let mut round = 0;
    while out.len() < n.min(idx.len()) {
        for members in &by_class {
            if let Some(&i) = members.get(round) {
                if out.len() < n {
                    out.push(i);
                }
            }
        }
        round += 1;
    }
    Ok(out)
}

fn truth_frames(ds: &Dataset, idx: &[usize]) -> Vec<Frame> {
    idx.iter().map(|&i| ds.records[i].label.frame()).collect()
}

fn tagged_csv(run_id: &str, body: &str) -> String {
    format!("# run_id: {run_id}\n{body}")
}

/// Runs the whole pipeline and writes its artifacts into `out_dir`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    command: &str,
    progress: &mut dyn FnMut(&str),
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let started = unix_now();
    std::fs::create_dir_all(out_dir).map_err(|source| Error::File {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let run_id = cfg.run_id()?;
    let mut outputs: Vec<String> = Vec::new();
    let emit = |name: &str, bytes: &[u8], outputs: &mut Vec<String>| -> Result<PathBuf> {
        let p = out_dir.join(name);
        write_file(&p, bytes)?;
        outputs.push(name.to_string());
        Ok(p)
    };

    progress(&format!("[{run_id}] generating dataset"));
    let mut ds = generate_dataset(&cfg.dataset)?;
    ds.tag = run_id.clone();
    write_dataset(&ds, &out_dir.join("dataset.ryds"))?;
    outputs.push("dataset.ryds".into());

    let sp = split(ds.len(), &cfg.split, cfg.seed)?;
    let split_json = serde_json::json!({ "run_id": run_id, "split": sp });
    emit(
        "split.json",
        serde_json::to_string_pretty(&split_json)?.as_bytes(),
        &mut outputs,
    )?;

    let (test_x, _) = ds.arrays(&sp.test);
    let test_truth = truth_frames(&ds, &sp.test);
    let mut folds = Vec::new();
    let mut best: Option<(f64, usize, Network, crate::nn::RmsProp)> = None;
    for k in 0..cfg.folds_trained {
        let (tx, ty) = ds.arrays(&sp.train_for(k));
        let (vx, vy) = ds.arrays(&sp.folds[k]);
        let mut net = Network::init(
            cfg.arch.clone(),
            &mut stream(cfg.seed, Purpose::Init, k as u64),
        )?;
        let mut log = |r: &crate::nn::EpochRecord| {
            progress(&format!(
                "fold {k} epoch {:>3} train {:.5} val {:.5} lr {:.0e}",
                r.epoch, r.train_mse, r.val_mse, r.lr
            ));
        };
        let rep = fit_model(
            &mut net,
            Samples::new(&tx, &ty)?,
            Samples::new(&vx, &vy)?,
            &cfg.train,
            Some(&mut log),
        )?;
        emit(
            &format!("curves_fold{k}.csv"),
            tagged_csv(&run_id, &rep.curve_csv()).as_bytes(),
            &mut outputs,
        )?;
        let acc = exact_match_accuracy(&predict_frames(&net, &test_x)?, &test_truth)?;
        progress(&format!(
            "fold {k}: best epoch {} val {:.5}, test accuracy {:.4}",
            rep.best_epoch, rep.best_val_mse, acc
        ));
        folds.push(FoldResult {
            fold: k,
            best_epoch: rep.best_epoch,
            best_val_mse: rep.best_val_mse,
            epochs_run: rep.curve.len(),
            test_accuracy: acc,
        });
        if best.as_ref().is_none_or(|b| rep.best_val_mse < b.0) {
            best = Some((rep.best_val_mse, k, net, rep.optimizer));
        }
    }
    let (_, best_fold, network, optimizer) = best.expect("at least one fold trained");

    Checkpoint {
        network: network.clone(),
        optimizer: Some(optimizer),
        train: Some(cfg.train.clone()),
        seed: cfg.seed,
        tag: run_id.clone(),
    }
    .save(&out_dir.join("model.json"))?;
    outputs.push("model.json".into());
    outputs.push("model.bin".into());

    let preds = predict_frames(&network, &test_x)?;
    let test_accuracy = exact_match_accuracy(&preds, &test_truth)?;
    let conf = confusion(&preds, &test_truth, cfg.dataset.active_bits())?;
    emit(
        "confusion.csv",
        tagged_csv(&run_id, &conf.to_csv()).as_bytes(),
        &mut outputs,
    )?;
    progress(&format!(
        "best fold {best_fold}: test accuracy {test_accuracy:.4}"
    ));

    let roundtrip = if cfg.eval.qr_payload {
        let bits = qr_like_payload(cfg.seed);
        let r = payload_round_trip(&network, &cfg.dataset, &bits, cfg.eval.qr_sigma, cfg.seed)?;
        progress(&format!(
            "payload round trip: {} frames, {} frame errors, recovered {}",
            r.total_frames, r.frame_errors, r.recovered
        ));
        Some(r)
    } else {
        None
    };

    let curve = if cfg.eval.curve_sigmas.is_empty() {
        Vec::new()
    } else {
        let subset = balanced_subset(&ds, &sp.test, cfg.eval.curve_spectra)?;
        let classes: Vec<usize> = subset
            .iter()
            .map(|&i| ds.class_of(i))
            .collect::<Result<_>>()?;
        progress(&format!(
            "network vs fit over {} sigmas, {} repeats of {} spectra",
            cfg.eval.curve_sigmas.len(),
            cfg.eval.repeats,
            classes.len()
        ));
        let pts = dl_vs_fit_curve(
            &network,
            &cfg.eval.curve_sigmas,
            &cfg.dataset,
            &classes,
            cfg.eval.repeats,
            &cfg.fit,
        )?;
        emit(
            "dl_vs_fit.csv",
            tagged_csv(&run_id, &curve_csv(&pts)).as_bytes(),
            &mut outputs,
        )?;
        pts
    };

    let baseline = if cfg.eval.baseline_fits > 0 {
        let subset = balanced_subset(&ds, &sp.test, cfg.eval.baseline_fits)?;
        let (xs, _) = ds.arrays(&subset);
        progress(&format!("baseline fits on {} test spectra", xs.len()));
        let mut rows: Vec<FitRow> = classify_many(
            &xs,
            cfg.dataset.dt,
            &cfg.dataset.codec,
            &cfg.dataset.atom,
            &cfg.dataset.model,
            &cfg.fit,
        )?;
        let truths = truth_frames(&ds, &subset);
        for (r, t) in rows.iter_mut().zip(&truths) {
            r.truth = Some(t.clone());
            // Wall time is not reproducible; keep it out of the report file.
            r.millis = 0.0;
        }
        let fitted: Vec<Frame> = rows.iter().map(|r| r.result.bits.clone()).collect();
        let summary = BaselineSummary {
            spectra: rows.len(),
            accuracy: exact_match_accuracy(&fitted, &truths)?,
            converged: rows.iter().filter(|r| r.result.converged).count(),
        };
        emit(
            "baseline.csv",
            tagged_csv(&run_id, &fit_csv(&rows)).as_bytes(),
            &mut outputs,
        )?;
        progress(&format!("baseline accuracy {:.4}", summary.accuracy));
        Some(summary)
    } else {
        None
    };

    let report = ExperimentReport {
        run_id: run_id.clone(),
        profile: cfg.profile.clone(),
        records: ds.len(),
        test_size: sp.test.len(),
        folds,
        best_fold,
        test_accuracy,
        confusion: conf,
        roundtrip,
        curve,
        baseline,
    };
    emit(
        "report.json",
        (serde_json::to_string_pretty(&report)? + "\n").as_bytes(),
        &mut outputs,
    )?;

    let manifest = RunManifest {
        run_id,
        command: command.to_string(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: started,
        finished_unix: unix_now(),
        config: cfg.clone(),
        outputs,
    };
    write_file(
        &out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(ExperimentOutcome {
        report,
        manifest,
        network,
        dataset: ds,
        split: sp,
    })
}

/// Thresholded scores for one scaled input.
pub fn decode_scaled(net: &Network, x: &[f64]) -> Result<Frame> {
    Ok(decode_label(&net.predict(x)?, DEFAULT_THRESHOLD))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_resolve() {
        for p in PROFILES {
            let cfg = ExperimentConfig::profile(p).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.arch.outputs, cfg.dataset.codec.n_bins);
        }
        let c20 = ExperimentConfig::profile("fig5-20bin").unwrap();
        assert_eq!(c20.dataset.n_classes(), 8);
        assert_eq!(
            ExperimentConfig::profile("fig5-200khz").unwrap().dataset.dt,
            1e-8
        );
        assert!(ExperimentConfig::profile("fig9").is_err());
    }

    #[test]
    fn run_id_tracks_config() {
        let a = ExperimentConfig::profile("fig2").unwrap();
        let mut b = a.clone();
        assert_eq!(a.run_id().unwrap(), b.run_id().unwrap());
        b.seed = 1;
        assert_ne!(a.run_id().unwrap(), b.resolved().run_id().unwrap());
    }
}
