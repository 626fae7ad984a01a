//! Trains on the procedural toy pool at several split fractions and prints mAP.

use std::time::Instant;

use bcnn::eval::evaluate;
use bcnn::model::Architecture;
use bcnn::preprocess::make_split;
use bcnn::toy::{generate, ToyConfig};
use bcnn::train::{train, TrainConfig};
use bcnn::Detector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bcnn::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let pool = generate(&ToyConfig { n_real: n, n_anomalous: n, ..Default::default() })?;
    let lr0: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let cfg = TrainConfig { epochs, batch_size: 32, lr0, ..Default::default() };
    for fraction in [0.2, 0.4, 0.6, 0.8] {
        let t = Instant::now();
        let split = make_split(&pool, fraction, 11)?;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let init = Detector::new(Architecture::reduced(), cfg.alpha, cfg.beta, &mut rng)?;
        let (det, report) = train(init, &pool, &split, &cfg)?;
        let ev = evaluate(&det, &pool, &split)?;
        let first = report.epochs.first().map(|r| r.train_loss).unwrap_or(f64::NAN);
        let last = report.epochs.last().map(|r| r.train_loss).unwrap_or(f64::NAN);
        println!(
            "split {fraction}: mAP {:.4} auc {:.4} gamma {:.4} epochs {} best {:?} loss {first:.4}->{last:.4} {:?} [{:.1}s]",
            ev.map,
            ev.histogram.auc(),
            ev.gamma,
            report.epochs.len(),
            report.best_epoch,
            report.stop_reason,
            t.elapsed().as_secs_f64()
        );
        for s in &ev.sources {
            println!("  {} ap {:.4}", s.source, s.ap);
        }
        let med = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        println!("  median real {:.4}", med(&ev.real_scores));
        let dev = |v: &[f64]| v.iter().map(|s| -(s - 1.0).abs()).collect::<Vec<_>>();
        let all: Vec<f64> = ev.anomalous_scores.values().flatten().copied().collect();
        let h = bcnn::eval::Histogram::build(&dev(&ev.real_scores), &dev(&all), 50)?;
        println!("  auc of -|f-1| {:.4}", h.auc());
        for (k, v) in &ev.anomalous_scores {
            println!("  median {k} {:.4}", med(v));
        }
    }
    Ok(())
}
