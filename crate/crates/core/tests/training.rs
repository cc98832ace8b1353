mod common;

use common::seeded;
use rydberg_fdm::dataset::{generate_dataset, split, DatasetSpec, SplitPlan};
use rydberg_fdm::nn::{fit_model, Architecture, BnStats, Network, Samples, TrainConfig};

fn setup() -> (
    Vec<Vec<f64>>,
    Vec<Vec<f64>>,
    Vec<Vec<f64>>,
    Vec<Vec<f64>>,
    Architecture,
) {
    let spec = DatasetSpec {
        n: 160,
        n_samples_per_class: 12,
        ..DatasetSpec::default()
    };
    let ds = generate_dataset(&spec).unwrap();
    let sp = split(ds.len(), &SplitPlan::default(), 0).unwrap();
    let (tx, ty) = ds.arrays(&sp.train_for(0));
    let (vx, vy) = ds.arrays(&sp.folds[0]);
    let arch = Architecture {
        input_len: spec.n,
        filters: 4,
        kernel_len: 8,
        pool: 4,
        hidden: 6,
        outputs: 4,
        ..Architecture::default()
    };
    (tx, ty, vx, vy, arch)
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        lr: 3e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let (tx, ty, vx, vy, arch) = setup();
    let run = || {
        let mut net = Network::init(arch.clone(), &mut seeded(4)).unwrap();
        let rep = fit_model(
            &mut net,
            Samples::new(&tx, &ty).unwrap(),
            Samples::new(&vx, &vy).unwrap(),
            &cfg(3),
            None,
        )
        .unwrap();
        (net, rep.curve)
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
}

#[test]
fn loss_falls_and_best_epoch_is_restored() {
    let (tx, ty, vx, vy, arch) = setup();
    for bn_stats in [BnStats::Running, BnStats::Mixed] {
        let mut net = Network::init(arch.clone(), &mut seeded(5)).unwrap();
        let c = TrainConfig { bn_stats, ..cfg(8) };
        let mut seen = 0;
        let mut count = |_: &rydberg_fdm::nn::EpochRecord| seen += 1;
        let rep = fit_model(
            &mut net,
            Samples::new(&tx, &ty).unwrap(),
            Samples::new(&vx, &vy).unwrap(),
            &c,
            Some(&mut count),
        )
        .unwrap();
        assert_eq!(seen, 8);
        let first = rep.curve[0].train_mse;
        let last = rep.curve.last().unwrap().train_mse;
        assert!(last < first, "{bn_stats:?}: train mse {first} -> {last}");
        let best = rep
            .curve
            .iter()
            .map(|r| r.val_mse)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(rep.best_val_mse, best);
        let val = rydberg_fdm::nn::evaluate_mse(&net, Samples::new(&vx, &vy).unwrap(), 16).unwrap();
        assert!(
            (val - best).abs() < 1e-12,
            "restored params give {val}, best {best}"
        );
    }
}

#[test]
fn early_stopping_cuts_the_run_short() {
    let (tx, ty, vx, vy, arch) = setup();
    let mut net = Network::init(arch, &mut seeded(6)).unwrap();
    let c = TrainConfig {
        lr: 1e-9,
        early_stop_patience: Some(2),
        ..cfg(30)
    };
    let rep = fit_model(
        &mut net,
        Samples::new(&tx, &ty).unwrap(),
        Samples::new(&vx, &vy).unwrap(),
        &c,
        None,
    )
    .unwrap();
    assert!(rep.curve.len() < 30);
}
