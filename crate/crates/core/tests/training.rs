use bcnn::detector::InferenceMode;
use bcnn::eval::Verdict;
use bcnn::model::Architecture;
use bcnn::preprocess::{make_split, DatasetSplit, ImageRecord};
use bcnn::toy::{self, ToyConfig};
use bcnn::train::{train, StopReason, TrainConfig, TrainReport};
use bcnn::Detector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arch() -> Architecture {
    Architecture { hidden: 16, ..Architecture::reduced() }
}

fn pool(n_real: usize, seed: u64) -> Vec<ImageRecord> {
    toy::generate(&ToyConfig { n_real, n_anomalous: n_real / 2, seed, ..ToyConfig::default() }).unwrap()
}

fn config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { epochs, seed, batch_size: 16, lr0: 1e-2, ..TrainConfig::default() }
}

fn run(pool: &[ImageRecord], cfg: &TrainConfig) -> (Detector, TrainReport, DatasetSplit) {
    let split = make_split(pool, 0.6, cfg.seed).unwrap();
    let init = Detector::new(arch(), cfg.alpha, cfg.beta, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    let (det, report) = train(init, pool, &split, cfg).unwrap();
    (det, report, split)
}

#[test]
fn loss_falls_over_ten_epochs() {
    let data = pool(60, 1);
    for seed in 0..5 {
        let cfg = TrainConfig { early_stop_gap: f64::INFINITY, ..config(11, seed) };
        let (_, report, _) = run(&data, &cfg);
        let first = report.epochs[0].train_loss;
        let tenth = report.epochs[10].train_loss;
        assert!(tenth < first, "seed {seed}: {first} -> {tenth}");
    }
}

#[test]
fn zero_epochs_returns_input() {
    let data = pool(20, 2);
    let split = make_split(&data, 0.6, 0).unwrap();
    let init = Detector::new(arch(), 0.01, 100.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let (det, report) = train(init.clone(), &data, &split, &config(0, 0)).unwrap();
    assert_eq!(det, init);
    assert!(report.epochs.is_empty());
    assert!(!det.trained);
}

#[test]
fn same_seed_same_detector() {
    let data = pool(30, 3);
    let cfg = config(3, 9);
    let (a, ra, _) = run(&data, &cfg);
    let (b, rb, _) = run(&data, &cfg);
    assert_eq!(a, b);
    assert_eq!(ra.to_csv(), rb.to_csv());
}

#[test]
fn snapshots_only_on_improvement_and_stop_is_sound() {
    let data = pool(60, 4);
    for seed in 0..3 {
        let cfg = config(8, seed);
        let (_, report, _) = run(&data, &cfg);
        let mut best = f64::NEG_INFINITY;
        let mut last_snapshot = None;
        for r in &report.epochs {
            if r.snapshot {
                assert!(r.epoch == 0 || r.val_metric >= best + cfg.improvement_threshold);
                best = r.val_metric;
                last_snapshot = Some(r.epoch);
            } else {
                assert!(r.val_metric < best + cfg.improvement_threshold);
            }
        }
        assert_eq!(report.best_epoch, last_snapshot);
        let gaps: Vec<bool> =
            report.epochs.iter().map(|r| (r.proxy_metric - r.val_metric).abs() > cfg.early_stop_gap).collect();
        match report.stop_reason {
            StopReason::EarlyStop => {
                assert!(*gaps.last().unwrap());
                assert!(!gaps[..gaps.len() - 1].iter().any(|&g| g));
            }
            StopReason::Completed => {
                assert_eq!(report.epochs.len(), cfg.epochs);
                assert!(!gaps.iter().any(|&g| g));
            }
        }
    }
}

#[test]
fn held_out_reals_are_mostly_real() {
    let data = pool(80, 5);
    let (det, _, split) = run(&data, &config(4, 5));
    assert!(det.trained);
    let reals: Vec<_> = DatasetSplit::reals(&data, &split.test).map(|i| data[i].pixels().unwrap()).collect();
    let scores = det.score_images(&reals).unwrap();
    let kept = scores.iter().filter(|&&s| det.verdict(s).unwrap() == Verdict::Real).count();
    assert!(kept as f64 >= 0.8 * reals.len() as f64, "{kept} of {}", reals.len());
}

#[test]
fn variational_mode_trains() {
    let data = pool(30, 6);
    let cfg = TrainConfig { inference_mode: InferenceMode::Variational, n_mc: 2, ..config(3, 6) };
    let (det, report, _) = run(&data, &cfg);
    assert!(det.posterior.is_some());
    assert!(det.gamma.unwrap().is_finite());
    assert!(report.epochs.iter().all(|r| r.train_loss.is_finite()));
}
