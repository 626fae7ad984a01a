use std::collections::BTreeMap;

use bcnn::bayes::{self, HeadLayout, LatentBatch, LaplaceApprox, VariationalPosterior};
use bcnn::eval::{average_precision, classify, select_threshold, EvalReport, Verdict};
use bcnn::kernels::Window;
use bcnn::model::{Architecture, FineToCoarseCnn};
use bcnn::ops;
use bcnn::perturb::{gaussian_blur, jpeg_quality, resize_bilinear, TransformKind};
use bcnn::preprocess::{center_crop, make_split, rgb_denormalize, rgb_normalize, ImageRecord, Label, NormStats};
use bcnn::toy;
use bcnn::{GradTape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn image(h: usize, w: usize, seed: u64) -> Tensor {
    tensor(&[3, h, w], seed, 0.0, 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backward_is_linear(a in -3.0..3.0f64, b in -3.0..3.0f64, seed in 0u64..1000) {
        let x = tensor(&[2, 3], seed, -1.0, 1.0);
        let grads = |ca: f64, cb: f64| {
            let mut t = GradTape::new();
            let v = t.param(x.clone());
            let s = t.sigmoid(v).unwrap();
            let l1 = t.sum(s).unwrap();
            let q = t.square(v).unwrap();
            let l2 = t.sum(q).unwrap();
            let l1 = t.scale(l1, ca).unwrap();
            let l2 = t.scale(l2, cb).unwrap();
            let l = t.add(l1, l2).unwrap();
            t.backward(l).unwrap().wrt(v).clone()
        };
        let combined = grads(a, b);
        let g1 = grads(1.0, 0.0);
        let g2 = grads(0.0, 1.0);
        for i in 0..x.len() {
            let expect = a * g1.data()[i] + b * g2.data()[i];
            prop_assert!((combined.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_and_pool_shapes_follow_floor_formula(
        h in 1usize..20, w in 1usize..20, kh in 1usize..6, kw in 1usize..6,
        sh in 1usize..4, sw in 1usize..4, cin in 1usize..3, cout in 1usize..3,
    ) {
        let x = tensor(&[cin, h, w], 1, -1.0, 1.0);
        let k = tensor(&[cout, cin, kh, kw], 2, -1.0, 1.0);
        let b = Tensor::zeros(&[cout]);
        let conv = ops::conv2d_valid(&x, &k, &b, (sh, sw));
        let pool = ops::mean_pool(&x, (kh, kw), (sh, sw));
        if kh <= h && kw <= w {
            let (oh, ow) = ((h - kh) / sh + 1, (w - kw) / sw + 1);
            let c = conv.unwrap();
            prop_assert_eq!(c.shape(), &[cout, oh, ow]);
            let p = pool.unwrap();
            prop_assert_eq!(p.shape(), &[cin, oh, ow]);
            prop_assert_eq!(Window { kh, kw, sh, sw }.out_dims(h, w).unwrap(), (oh, ow));
        } else {
            prop_assert!(conv.is_err());
            prop_assert!(pool.is_err());
        }
    }

    #[test]
    fn crop_is_idempotent(h in 1usize..40, w in 1usize..40, size in 1usize..40, seed in 0u64..100) {
        let img = image(h, w, seed);
        match center_crop(&img, size) {
            Ok(c) => {
                prop_assert_eq!(c.shape(), &[3, size, size]);
                prop_assert_eq!(center_crop(&c, size).unwrap(), c);
            }
            Err(_) => prop_assert!(size > h || size > w),
        }
    }

    #[test]
    fn normalize_round_trips(seed in 0u64..1000, m in prop::array::uniform3(-1.0..1.0f64), s in prop::array::uniform3(0.05..3.0f64)) {
        let img = image(5, 4, seed);
        let stats = NormStats { mean: m, std: s };
        let back = rgb_denormalize(&rgb_normalize(&img, &stats).unwrap(), &stats).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn splits_are_one_class(n_real in 1usize..40, n_a in 0usize..30, n_b in 0usize..30, f in 0.05..0.95f64, seed in 0u64..1000) {
        let mut pool = Vec::new();
        let px = Tensor::zeros(&[3, 2, 2]);
        for i in 0..n_real { pool.push(ImageRecord::in_memory(format!("r{i}"), Label::Real, px.clone())); }
        for i in 0..n_a { pool.push(ImageRecord::in_memory(format!("a{i}"), Label::Anomalous("a".into()), px.clone())); }
        for i in 0..n_b { pool.push(ImageRecord::in_memory(format!("b{i}"), Label::Anomalous("b".into()), px.clone())); }
        let split = make_split(&pool, f, seed).unwrap();
        prop_assert!(split.train.iter().all(|&i| pool[i].label.is_real()));
        prop_assert!(split.check_one_class(&pool).is_ok());
        let mut all: Vec<usize> = split.train.iter().chain(&split.validation).chain(&split.test).copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), n, "parts overlap");
        prop_assert_eq!(split.train.len() + split.validation.iter().chain(&split.test).filter(|&&i| pool[i].label.is_real()).count(), n_real);
    }

    #[test]
    fn kl_is_non_negative(means in prop::collection::vec(-5.0..5.0f64, 1..12), seed in 0u64..1000, alpha in 1e-3..1e3f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ls = means.iter().map(|_| rng.random_range(-6.0..3.0)).collect();
        let q = VariationalPosterior::new(means, ls).unwrap();
        prop_assert!(q.kl_to_prior(alpha).unwrap() >= 0.0);
    }

    #[test]
    fn predictive_variance_bounded_below(seed in 0u64..1000, alpha in 1e-3..10.0f64, beta in 0.1..200.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = HeadLayout::two_layer(4, 3);
        let w = layout.init(&mut rng);
        let z: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let batch = LatentBatch::new(z, 4, vec![1.0; 5]).unwrap();
        let lap = LaplaceApprox::new(layout, w, alpha, beta, batch, 4096).unwrap();
        let q: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        prop_assert!(lap.predictive(&q).unwrap().sigma2 >= 1.0 / beta);
    }

    #[test]
    fn transforms_stay_in_unit_range(seed in 0u64..1000, sigma in 0.0..5.0f64, q in 1u8..=100, f in 0.3..1.0f64) {
        let img = image(17, 13, seed);
        let in_range = |t: &Tensor| t.data().iter().all(|v| (0.0..=1.0).contains(v));
        prop_assert!(in_range(&gaussian_blur(&img, sigma).unwrap()));
        prop_assert!(in_range(&jpeg_quality(&img, q).unwrap()));
        if let Ok(r) = resize_bilinear(&img, f, true) {
            prop_assert!(in_range(&r));
        }
    }

    #[test]
    fn ap_invariant_under_increasing_maps(
        raw in prop::collection::vec((-10i32..10, any::<bool>()), 2..30),
        scale in 0.1..10.0f64, shift in -5.0..5.0f64,
    ) {
        prop_assume!(raw.iter().any(|r| r.1) && raw.iter().any(|r| !r.1));
        let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
        let labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
        let base = average_precision(&scores, &labels).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| scale * s + shift).collect();
        let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
        let expd: Vec<f64> = scores.iter().map(|s| (0.3 * s).exp()).collect();
        prop_assert_eq!(average_precision(&affine, &labels).unwrap(), base);
        prop_assert_eq!(average_precision(&cubed, &labels).unwrap(), base);
        prop_assert_eq!(average_precision(&expd, &labels).unwrap(), base);
    }

    #[test]
    fn map_of_identical_sources_equals_single_ap(
        real in prop::collection::vec(-5.0..5.0f64, 1..20),
        anom in prop::collection::vec(-5.0..5.0f64, 1..20),
        k in 1usize..5,
    ) {
        let one = EvalReport::from_scores(0.8, 0.0, real.clone(), BTreeMap::from([("s".to_string(), anom.clone())])).unwrap();
        let many: BTreeMap<String, Vec<f64>> = (0..k).map(|i| (format!("s{i}"), anom.clone())).collect();
        let rep = EvalReport::from_scores(0.8, 0.0, real, many).unwrap();
        prop_assert!((rep.map - one.sources[0].ap).abs() < 1e-12);
        prop_assert!(rep.sources.iter().all(|s| s.ap == one.sources[0].ap));
    }

    #[test]
    fn threshold_is_permutation_invariant(mut scores in prop::collection::vec(-100.0..100.0f64, 1..50), p in 0.5..50.0f64, seed in 0u64..1000) {
        let g = select_threshold(&scores, p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(scores.as_mut_slice(), &mut rng);
        prop_assert_eq!(select_threshold(&scores, p).unwrap(), g);
    }

    #[test]
    fn separable_scores_admit_a_perfect_threshold(
        real in prop::collection::vec(1.0..2.0f64, 2..40),
        synth in prop::collection::vec(-1.0..0.99f64, 1..40),
    ) {
        let top_synth = synth.iter().copied().fold(f64::MIN, f64::max);
        let perfect = |g: f64| real.iter().all(|&s| classify(s, g) == Verdict::Real)
            && synth.iter().all(|&s| classify(s, g) == Verdict::Synthetic);
        prop_assert!(perfect(top_synth));
        // a low percentile keeps every synthetic below gamma and costs at most the lowest real
        let p = 50.0 / real.len() as f64;
        let g = select_threshold(&real, p).unwrap();
        prop_assert!(synth.iter().all(|&s| classify(s, g) == Verdict::Synthetic));
        prop_assert!(real.iter().filter(|&&s| classify(s, g) == Verdict::Synthetic).count() <= 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn pre_norm_features_lie_in_unit_interval(seed in 0u64..1000, spread in 0.1..50.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cnn = FineToCoarseCnn::xavier_init(Architecture::reduced(), &mut rng).unwrap();
        let x = tensor(&[2, 3, 32, 32], seed, -spread, spread);
        let h = cnn.forward_stages(&x).unwrap();
        prop_assert!(h.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn identical_seeds_give_identical_outputs_and_gradients() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cnn = FineToCoarseCnn::xavier_init(Architecture { hidden: 4, ..Architecture::reduced() }, &mut rng).unwrap();
        let x = tensor(&[2, 3, 32, 32], 9, -1.0, 1.0);
        let mut t = GradTape::new();
        let vars = cnn.register(&mut t);
        let xv = t.constant(x);
        let f = cnn.forward_taped(&mut t, &vars, xv, ops::Mode::Train).unwrap();
        let l = t.sum(f.z).unwrap();
        let sq = t.square(l).unwrap();
        let g = t.backward(sq).unwrap();
        (t.value(f.z).clone(), g.wrt(vars.kernels[0]).clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn elbo_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layout = HeadLayout::two_layer(3, 2);
    let dim = layout.param_count();
    let z: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let batch = LatentBatch::new(z, 3, vec![1.0, 0.5, 1.2, 0.8]).unwrap();
    let means: Vec<f64> = layout.init(&mut rng);
    let ls: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..-0.5)).collect();
    let noise = bayes::standard_noise(3, dim, &mut rng);
    let (alpha, beta) = (0.7, 3.0);
    let neg_elbo = |m: &[f64], s: &[f64]| {
        let q = VariationalPosterior::new(m.to_vec(), s.to_vec()).unwrap();
        -bayes::elbo_with_noise(&batch, &layout, &q, alpha, beta, &noise).unwrap()
    };
    let mut t = GradTape::new();
    let mv = t.param(Tensor::from_vec(means.clone()));
    let sv = t.param(Tensor::from_vec(ls.clone()));
    let zv = t.constant(batch.as_tensor().unwrap());
    let l = bayes::neg_elbo_taped(&mut t, &layout, mv, sv, zv, &batch.targets, &noise, alpha, beta, 1.0, None).unwrap();
    assert!((t.value(l).item() - neg_elbo(&means, &ls)).abs() < 1e-9);
    let g = t.backward(l).unwrap();
    let h = 1e-5;
    for j in 0..dim {
        for (which, base) in [(0, &means), (1, &ls)] {
            let mut p = base.clone();
            p[j] += h;
            let mut m = base.clone();
            m[j] -= h;
            let fd = if which == 0 {
                (neg_elbo(&p, &ls) - neg_elbo(&m, &ls)) / (2.0 * h)
            } else {
                (neg_elbo(&means, &p) - neg_elbo(&means, &m)) / (2.0 * h)
            };
            let an = if which == 0 { g.wrt(mv).data()[j] } else { g.wrt(sv).data()[j] };
            assert!((fd - an).abs() / an.abs().max(fd.abs()).max(1e-3) < 1e-4, "coord {j}: {an} vs {fd}");
        }
    }
}

#[test]
fn map_objective_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layout = HeadLayout::two_layer(4, 3);
    let z: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let batch = LatentBatch::new(z, 4, vec![1.0; 5]).unwrap();
    let w = layout.init(&mut rng);
    let mut t = GradTape::new();
    let wv = t.param(Tensor::from_vec(w.clone()));
    let zv = t.constant(batch.as_tensor().unwrap());
    let f = layout.forward_taped(&mut t, wv, zv, None).unwrap();
    let l = bayes::map_objective_taped(&mut t, f, &batch.targets, wv, 0.2, 5.0, 1.0).unwrap();
    let direct = bayes::map_objective(&batch, &layout, &w, 0.2, 5.0).unwrap();
    assert!((t.value(l).item() - direct).abs() < 1e-10);
    let g = t.backward(l).unwrap();
    for j in 0..w.len() {
        let (mut p, mut m) = (w.clone(), w.clone());
        p[j] += 1e-5;
        m[j] -= 1e-5;
        let fd = (bayes::map_objective(&batch, &layout, &p, 0.2, 5.0).unwrap()
            - bayes::map_objective(&batch, &layout, &m, 0.2, 5.0).unwrap())
            / 2e-5;
        let an = g.wrt(wv).data()[j];
        assert!((fd - an).abs() / an.abs().max(fd.abs()).max(1e-3) < 1e-4, "coord {j}: {an} vs {fd}");
    }
}

#[test]
fn elbo_rises_over_two_hundred_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let layout = HeadLayout::linear(1);
    let z: Vec<f64> = (0..30).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y: Vec<f64> = z.iter().map(|x| 0.8 * x - 0.3 + 0.2 * rng.random_range(-1.0..1.0)).collect();
    let batch = LatentBatch::new(z, 1, y).unwrap();
    let mut q = VariationalPosterior::from_prior(2, 1.0);
    let trace = bayes::fit_variational(&batch, &layout, &mut q, 1.0, 25.0, 200, 2e-3, 8, &mut rng).unwrap();
    let smooth: Vec<f64> = trace.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for (i, pair) in smooth.windows(2).enumerate() {
        assert!(pair[1] >= pair[0] - 1e-9, "smoothed ELBO fell at step {i}: {} -> {}", pair[0], pair[1]);
    }
    assert!(trace[199] > trace[0]);
}

#[test]
fn distortion_grows_with_transform_strength() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let corpus: Vec<Tensor> = (0..6)
        .map(|i| if i % 2 == 0 { toy::smooth_texture(32, &mut rng) } else { toy::mosaic(32, &mut rng) })
        .collect();
    let mae = |kind: TransformKind, p: f64| {
        corpus
            .iter()
            .map(|img| {
                let out = kind.apply(img, p).unwrap();
                img.data().iter().zip(out.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / img.len() as f64
            })
            .sum::<f64>()
    };
    let series = |kind, grid: &[f64]| grid.iter().map(|&p| mae(kind, p)).collect::<Vec<_>>();
    let blur = series(TransformKind::Blur, &[0.0, 0.5, 1.0, 2.0, 4.0]);
    let jpeg = series(TransformKind::Jpeg, &[100.0, 75.0, 50.0, 25.0, 10.0, 1.0]);
    let resize = series(TransformKind::Resize, &[1.0, 0.75, 0.5, 0.25]);
    for s in [&blur, &jpeg, &resize] {
        assert!(s.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{s:?}");
    }
    assert_eq!(blur[0], 0.0);
    assert!(jpeg[0] / (corpus.len() as f64) < 2.0 / 255.0);
}
