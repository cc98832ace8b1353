use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use rydberg_fdm::codec::{encode_bits, frames_from_ascii, frames_to_ascii, Frame};
use rydberg_fdm::config::{apply, parse_override, read_settings, to_settings_text};
use rydberg_fdm::dataset::{
    add_white_noise, generate_dataset, read_dataset, split, write_csv, write_dataset, Dataset,
};
use rydberg_fdm::error::{read_file, write_file};
use rydberg_fdm::eval::{
    bench_inference, confusion, curve_csv, dl_vs_fit_curve, exact_match_accuracy, noise_grid,
    predict_frames,
};
use rydberg_fdm::experiment::{balanced_subset, run_experiment, ExperimentConfig, RunManifest};
use rydberg_fdm::fit::{classify_many, fit_csv};
use rydberg_fdm::nn::{fit_model, Checkpoint, Network, Samples};
use rydberg_fdm::rng::{stream, Purpose};
use rydberg_fdm::{Error, Result};

/// Directory searched for relative `--config` paths not found in the
/// working directory.
pub const CONFIG_DIR_ENV: &str = "RYDBERG_FDM_CONFIG_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "rydberg-fdm",
    version,
    about = "Rydberg-atom FDM receiver experiments"
)]
pub struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` configuration file layered over the profile defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Base profile for the configuration.
    #[arg(long, global = true, default_value = "fig2")]
    profile: String,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate probe transmission for one or more frames.
    Sim {
        /// Message bits, e.g. `101`.
        #[arg(long, conflicts_with = "frames")]
        bits: Option<String>,
        /// File of ASCII frames, one per line.
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Min-max scale each spectrum (after noise, if any).
        #[arg(long)]
        scaled: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a labelled dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Also write the records as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train one cross-validation fold.
    Train {
        /// Dataset file; generated from the configuration when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Checkpoint manifest path; the blob and loss curve go next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluate only the held-out test split instead of every record.
        #[arg(long)]
        test_only: bool,
        /// Confusion matrix CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Decoded frames, one per line.
        #[arg(long)]
        frames_out: Option<PathBuf>,
    },
    /// Decode a dataset by fitting the forward model from all-zero phases.
    FitBaseline {
        #[arg(long)]
        data: PathBuf,
        /// Fit at most this many records, class-balanced.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy against test-noise level.
    SweepNoise {
        /// Checkpoint; repeat to build a train-sigma by test-sigma grid.
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        /// Training noise level of each model, in order (grid mode).
        #[arg(long)]
        train_sigma: Vec<f64>,
        /// Also run the fitting baseline on the same test sets (one model).
        #[arg(long)]
        fit: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-spectrum network inference time against the fitting baseline.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 64)]
        spectra: usize,
        #[arg(long, default_value_t = 5)]
        fits: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a full generate, split, train, test and report pipeline.
    Experiment {
        /// Re-run the configuration recorded in a run manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        dry_run: bool,
    },
}

fn resolve_config_path(p: &Path) -> PathBuf {
    if p.is_relative() && !p.exists() {
        if let Some(dir) = std::env::var_os(CONFIG_DIR_ENV) {
            let candidate = Path::new(&dir).join(p);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    p.to_path_buf()
}

impl Common {
    /// Profile defaults, then the config file, then `--set` and `--seed`.
    fn config(&self) -> Result<ExperimentConfig> {
        let base = ExperimentConfig::profile(&self.profile)?;
        let mut settings = match &self.config {
            Some(p) => read_settings(&resolve_config_path(p))?,
            None => Vec::new(),
        };
        for s in &self.set {
            settings.push(parse_override(s)?);
        }
        let mut cfg = apply(&base, &settings)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size thread pool: {e}")))?;
    }
    let common = &cli.common;
    match &cli.command {
        Command::Sim {
            bits,
            frames,
            scaled,
            out,
        } => sim(common, bits.as_deref(), frames.as_deref(), *scaled, out),
        Command::GenData { out, csv } => {
            let cfg = common.config()?;
            let mut ds = generate_dataset(&cfg.dataset)?;
            ds.tag = cfg.run_id()?;
            write_dataset(&ds, out)?;
            if let Some(p) = csv {
                let mut buf = Vec::new();
                write_csv(&ds, &mut buf)?;
                write_file(p, buf)?;
            }
            progress(&format!("{} records -> {}", ds.len(), out.display()));
            Ok(())
        }
        Command::Train { data, fold, out } => train(common, data.as_deref(), *fold, out),
        Command::Eval {
            model,
            data,
            test_only,
            out,
            frames_out,
        } => eval(
            common,
            model,
            data,
            *test_only,
            out.as_deref(),
            frames_out.as_deref(),
        ),
        Command::FitBaseline { data, limit, out } => {
            let cfg = common.config()?;
            let ds = read_dataset(data)?;
            let all: Vec<usize> = (0..ds.len()).collect();
            let idx = match limit {
                Some(n) => balanced_subset(&ds, &all, *n)?,
                None => all,
            };
            let (xs, _) = ds.arrays(&idx);
            progress(&format!("fitting {} spectra", xs.len()));
            let spec = &ds.spec;
            let mut rows =
                classify_many(&xs, spec.dt, &spec.codec, &spec.atom, &spec.model, &cfg.fit)?;
            for (r, &i) in rows.iter_mut().zip(&idx) {
                r.truth = Some(ds.records[i].label.frame());
            }
            let fitted: Vec<Frame> = rows.iter().map(|r| r.result.bits.clone()).collect();
            let truths: Vec<Frame> = idx.iter().map(|&i| ds.records[i].label.frame()).collect();
            println!(
                "fit accuracy {:.4}",
                exact_match_accuracy(&fitted, &truths)?
            );
            write_file(out, fit_csv(&rows))
        }
        Command::SweepNoise {
            model,
            train_sigma,
            fit,
            out,
        } => sweep(common, model, train_sigma, *fit, out),
        Command::Bench {
            model,
            spectra,
            fits,
            out,
        } => {
            let cfg = common.config()?;
            let net = Checkpoint::load(model)?.network;
            let spec = &cfg.dataset;
            let classes: Vec<usize> = (0..*spectra).map(|i| i % spec.n_classes()).collect();
            let clean = rydberg_fdm::eval::clean_class_spectra(spec)?;
            let x =
                rydberg_fdm::eval::noisy_test_set(&clean, &classes, spec.noise_sigma, cfg.seed, 0)?;
            let rep = bench_inference(&net, spec, &x, *fits, &cfg.fit)?;
            println!(
                "network {:.3} ms, fit {:.1} ms, ratio {:.0}x ({})",
                rep.dl_median_ms, rep.fit_median_ms, rep.ratio, rep.machine
            );
            if let Some(p) = out {
                write_file(p, rep.to_csv())?;
            }
            Ok(())
        }
        Command::Experiment {
            manifest,
            out,
            dry_run,
        } => {
            let cfg = match manifest {
                Some(p) => RunManifest::load(p)?.config,
                None => common.config()?,
            };
            if *dry_run {
                print!("{}", to_settings_text(&cfg)?);
                return Ok(());
            }
            let command: Vec<String> = std::env::args().collect();
            let outcome = run_experiment(&cfg, out, &command.join(" "), &mut |m| progress(m))?;
            let r = &outcome.report;
            println!(
                "run {}: best fold {}, test accuracy {:.4} on {} spectra",
                r.run_id, r.best_fold, r.test_accuracy, r.test_size
            );
            Ok(())
        }
    }
}

fn sim(
    common: &Common,
    bits: Option<&str>,
    frames: Option<&Path>,
    scaled: bool,
    out: &Path,
) -> Result<()> {
    let cfg = common.config()?;
    let spec = &cfg.dataset;
    let frames = match (bits, frames) {
        (Some(b), _) => vec![b.trim().parse::<Frame>()?],
        (None, Some(p)) => {
            let text = String::from_utf8(read_file(p)?)
                .map_err(|_| Error::Config(format!("{}: not UTF-8 text", p.display())))?;
            frames_from_ascii(&text)?
        }
        (None, None) => return Err(Error::Config("sim needs --bits or --frames".into())),
    };
    let mut columns = Vec::with_capacity(frames.len());
    for (k, f) in frames.iter().enumerate() {
        let label = encode_bits(f, &spec.codec)?;
        let mut s = spec.clean_spectrum(&label)?;
        if spec.noise_sigma > 0.0 {
            s = add_white_noise(
                &s,
                spec.noise_sigma,
                &mut stream(cfg.seed, Purpose::Noise, k as u64),
            )?;
        }
        columns.push(if scaled {
            rydberg_fdm::nn::minmax_scale(&s.samples)
        } else {
            s.samples
        });
    }
    let mut csv = String::from("t");
    for f in &frames {
        let _ = write!(csv, ",T_{f}");
    }
    csv.push('\n');
    for i in 0..spec.n {
        let _ = write!(csv, "{:.9e}", i as f64 * spec.dt);
        for c in &columns {
            let _ = write!(csv, ",{:.12e}", c[i]);
        }
        csv.push('\n');
    }
    write_file(out, csv)?;
    progress(&format!(
        "{} spectra of {} samples -> {}",
        frames.len(),
        spec.n,
        out.display()
    ));
    Ok(())
}

fn load_data(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(p) => read_dataset(p),
        None => generate_dataset(&cfg.dataset),
    }
}

fn train(common: &Common, data: Option<&Path>, fold: usize, out: &Path) -> Result<()> {
    let mut cfg = common.config()?;
    let ds = load_data(&cfg, data)?;
    // A dataset file fixes the input length and label width.
    cfg.dataset = ds.spec.clone();
    cfg.dataset.seed = cfg.seed;
    let cfg = cfg.resolved();
    cfg.validate()?;
    if fold >= cfg.split.fold_count {
        return Err(Error::Config(format!(
            "fold {fold} out of range (fold_count = {})",
            cfg.split.fold_count
        )));
    }
    let sp = split(ds.len(), &cfg.split, cfg.seed)?;
    let (tx, ty) = ds.arrays(&sp.train_for(fold));
    let (vx, vy) = ds.arrays(&sp.folds[fold]);
    let mut net = Network::init(
        cfg.arch.clone(),
        &mut stream(cfg.seed, Purpose::Init, fold as u64),
    )?;
    let mut log = |r: &rydberg_fdm::nn::EpochRecord| {
        progress(&format!(
            "epoch {:>3} train {:.5} val {:.5} lr {:.0e}",
            r.epoch, r.train_mse, r.val_mse, r.lr
        ))
    };
    let rep = fit_model(
        &mut net,
        Samples::new(&tx, &ty)?,
        Samples::new(&vx, &vy)?,
        &cfg.train,
        Some(&mut log),
    )?;
    let (test_x, _) = ds.arrays(&sp.test);
    let truths: Vec<Frame> = sp
        .test
        .iter()
        .map(|&i| ds.records[i].label.frame())
        .collect();
    let acc = exact_match_accuracy(&predict_frames(&net, &test_x)?, &truths)?;
    Checkpoint {
        network: net,
        optimizer: Some(rep.optimizer.clone()),
        train: Some(cfg.train.clone()),
        seed: cfg.seed,
        tag: cfg.run_id()?,
    }
    .save(out)?;
    write_file(&out.with_extension("curve.csv"), rep.curve_csv())?;
    println!(
        "best epoch {} val mse {:.5}, test accuracy {:.4}",
        rep.best_epoch, rep.best_val_mse, acc
    );
    Ok(())
}

fn eval(
    common: &Common,
    model: &Path,
    data: &Path,
    test_only: bool,
    out: Option<&Path>,
    frames_out: Option<&Path>,
) -> Result<()> {
    let cfg = common.config()?;
    let net = Checkpoint::load(model)?.network;
    let ds = read_dataset(data)?;
    let idx: Vec<usize> = if test_only {
        split(ds.len(), &cfg.split, cfg.seed)?.test
    } else {
        (0..ds.len()).collect()
    };
    let (xs, _) = ds.arrays(&idx);
    let preds = predict_frames(&net, &xs)?;
    let truths: Vec<Frame> = idx.iter().map(|&i| ds.records[i].label.frame()).collect();
    let conf = confusion(&preds, &truths, ds.spec.active_bits())?;
    println!(
        "accuracy {:.4} on {} spectra",
        conf.accuracy(),
        conf.total()
    );
    if let Some(p) = out {
        write_file(p, conf.to_csv())?;
    }
    if let Some(p) = frames_out {
        write_file(p, frames_to_ascii(&preds))?;
    }
    Ok(())
}

fn sweep(
    common: &Common,
    models: &[PathBuf],
    train_sigmas: &[f64],
    fit: bool,
    out: &Path,
) -> Result<()> {
    let cfg = common.config()?;
    let mut sigmas = cfg.eval.curve_sigmas.clone();
    if sigmas.is_empty() {
        sigmas = vec![0.0, 0.05, 0.1, 0.2, 0.3, 0.5];
    }
    let spec = &cfg.dataset;
    let classes: Vec<usize> = (0..cfg.eval.curve_spectra)
        .map(|i| i % spec.n_classes())
        .collect();
    let nets: Vec<Network> = models
        .iter()
        .map(|p| Checkpoint::load(p).map(|c| c.network))
        .collect::<Result<_>>()?;
    if fit {
        if nets.len() != 1 {
            return Err(Error::Config("--fit compares exactly one model".into()));
        }
        let pts = dl_vs_fit_curve(
            &nets[0],
            &sigmas,
            spec,
            &classes,
            cfg.eval.repeats,
            &cfg.fit,
        )?;
        for p in &pts {
            println!(
                "sigma {:<5} network {:.3} fit {:.3}",
                p.sigma, p.acc_dl, p.acc_fit
            );
        }
        return write_file(out, curve_csv(&pts));
    }
    let train_sigmas = if train_sigmas.is_empty() {
        vec![0.0; nets.len()]
    } else {
        train_sigmas.to_vec()
    };
    let grid = noise_grid(
        &nets,
        &train_sigmas,
        &sigmas,
        spec,
        &classes,
        cfg.eval.repeats,
    )?;
    write_file(out, grid.to_csv())
}
