use featdyn_core::data::{generate_dataset, SyntheticConfig};
use featdyn_core::mnist::{parse_idx, serialize_idx, IdxTensor};
use featdyn_core::models::{class_score, classifier_forward, denoiser_forward, init_classifier, init_denoiser};
use featdyn_core::objectives::gradcheck::{finite_diff_grad4, max_rel_err, FdStep};
use featdyn_core::objectives::{
    classification_loss, classification_loss_grad, ddpm_expected_loss, ddpm_expected_loss_grad, make_schedule,
};
use featdyn_core::{DenoiserParams, InitConfig};
use ndarray::Array2;
use proptest::prelude::*;

fn small_config() -> impl Strategy<Value = SyntheticConfig> {
    (3usize..=30, 1usize..=8, 0.1f64..4.0, 0.2f64..2.0, any::<u64>())
        .prop_map(|(d, n, mu, sigma, seed)| SyntheticConfig::new(d, n, mu, sigma, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn noise_patch_orthogonal_to_signals(cfg in small_config()) {
        let ds = generate_dataset(&cfg).unwrap();
        let sig = ds.signals().unwrap();
        for s in ds.samples() {
            let scale = s.x2.dot(&s.x2).sqrt() * cfg.mu_norm;
            prop_assert!(s.x2.dot(&sig.mu_pos).abs() <= 1e-10 * scale.max(1.0));
            prop_assert!(s.x2.dot(&sig.mu_neg).abs() <= 1e-10 * scale.max(1.0));
            prop_assert_eq!(s.x1, sig.for_label(s.label).view());
            prop_assert!(s.label == 1.0 || s.label == -1.0);
        }
    }

    #[test]
    fn generation_is_deterministic(cfg in small_config()) {
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        prop_assert_eq!(a.patches(), b.patches());
        prop_assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn classifier_output_is_nonnegative_and_even_per_neuron(
        cfg in small_config(), m in 1usize..5, r in 0usize..5, seed in any::<u64>()
    ) {
        let ds = generate_dataset(&cfg).unwrap();
        let p = init_classifier(m, cfg.d, &InitConfig { sigma0: 0.7, seed }).unwrap();
        let mut flipped = p.clone();
        let r = r % m;
        flipped.w_pos.row_mut(r).mapv_inplace(|v| -v);
        flipped.w_neg.row_mut(r).mapv_inplace(|v| -v);
        for s in ds.samples() {
            let (fp, fnn, f) = classifier_forward(&p, &s).unwrap();
            prop_assert!(fp >= 0.0 && fnn >= 0.0);
            prop_assert!((f - (fp - fnn)).abs() <= 1e-12 * (fp + fnn).max(1.0));
            let (gp, gn, _) = classifier_forward(&flipped, &s).unwrap();
            prop_assert!((fp - gp).abs() <= 1e-12 * fp.max(1.0));
            prop_assert!((fnn - gn).abs() <= 1e-12 * fnn.max(1.0));
            prop_assert!(class_score(&p.w_pos, s.x1, s.x2) >= 0.0);
        }
    }

    #[test]
    fn denoiser_is_cubic_homogeneous(
        cfg in small_config(), m in 1usize..5, c in -3.0f64..3.0, seed in any::<u64>()
    ) {
        let ds = generate_dataset(&cfg).unwrap();
        let p = init_denoiser(m, cfg.d, &InitConfig { sigma0: 0.5, seed }).unwrap();
        let scaled = DenoiserParams::new(&p.w * c);
        let neg = DenoiserParams::new(-&p.w);
        for s in ds.samples() {
            let (a1, a2) = denoiser_forward(&p, s.x1, s.x2).unwrap();
            let (b1, b2) = denoiser_forward(&scaled, s.x1, s.x2).unwrap();
            let (n1, _) = denoiser_forward(&neg, s.x1, s.x2).unwrap();
            let c3 = c * c * c;
            for (a, b) in a1.iter().chain(a2.iter()).zip(b1.iter().chain(b2.iter())) {
                prop_assert!((b - c3 * a).abs() <= 1e-10 * (1.0 + (c3 * a).abs()));
            }
            for (a, n) in a1.iter().zip(n1.iter()) {
                prop_assert_eq!(*n, -*a);
            }
        }
    }

    #[test]
    fn expected_loss_at_zero_is_d(cfg in small_config(), t in 0.01f64..5.0, m in 1usize..6) {
        let ds = generate_dataset(&cfg).unwrap();
        let s = make_schedule(t).unwrap();
        let loss = ddpm_expected_loss(&DenoiserParams::zeros(m, cfg.d), &ds, &s).unwrap();
        prop_assert_eq!(loss, cfg.d as f64);
    }

    #[test]
    fn schedule_identity(t in 1e-6f64..=10.0) {
        let s = make_schedule(t).unwrap();
        prop_assert!((s.alpha * s.alpha + s.beta * s.beta - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn idx_round_trip(rows in 1usize..6, cols in 1usize..6, count in 1usize..5, fill in any::<u64>()) {
        let len = rows * cols * count;
        let data: Vec<u8> = (0..len).map(|i| (fill.rotate_left(i as u32 % 64) as u8) ^ i as u8).collect();
        let t = IdxTensor::new(vec![count, rows, cols], data).unwrap();
        prop_assert_eq!(parse_idx(&serialize_idx(&t)).unwrap(), t.clone());
        let labels = IdxTensor::new(vec![len], t.data.clone()).unwrap();
        prop_assert_eq!(parse_idx(&serialize_idx(&labels)).unwrap(), labels);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradients_match_finite_differences(
        d in 3usize..=12, n in 1usize..=5, m in 1usize..=3,
        mu in 0.5f64..3.0, t in 0.05f64..2.0, seed in any::<u64>()
    ) {
        let ds = generate_dataset(&SyntheticConfig::new(d, n, mu, 1.0, seed)).unwrap();
        let init = InitConfig { sigma0: 0.5 / (d as f64).sqrt(), seed };
        let step = FdStep::Scaled(1e-3);

        let cp = init_classifier(m, d, &init).unwrap();
        let (_, g) = classification_loss_grad(&cp, &ds).unwrap();
        let fd = finite_diff_grad4(|p| classification_loss(p, &ds).unwrap(), &cp, step);
        prop_assert!(max_rel_err(&g, &fd) <= 1e-6);

        let s = make_schedule(t).unwrap();
        let dp = init_denoiser(m, d, &init).unwrap();
        let (_, g) = ddpm_expected_loss_grad(&dp, &ds, &s).unwrap();
        let fd = finite_diff_grad4(|p| ddpm_expected_loss(p, &ds, &s).unwrap(), &dp, step);
        prop_assert!(max_rel_err(&g, &fd) <= 1e-6);
    }
}

#[test]
fn label_counts_concentrate() {
    let n = 30usize;
    let band = 3.0 * (n as f64).sqrt();
    for seed in 0..200 {
        let ds = generate_dataset(&SyntheticConfig::new(20, n, 1.0, 1.0, seed)).unwrap();
        let pos = ds.labels().iter().filter(|&&y| y > 0.0).count() as f64;
        assert!((pos - n as f64 / 2.0).abs() <= band, "seed {seed}: {pos}");
    }
}

#[test]
fn noise_patches_nearly_orthogonal() {
    let (d, n) = (1000usize, 30usize);
    let ds = generate_dataset(&SyntheticConfig::new(d, n, 5.0, 1.0, 3)).unwrap();
    let x2 = ds.x2();
    let gram: Array2<f64> = x2.dot(&x2.t());
    let bound = 5.0 * 2.0 * (d as f64 * (4.0 * (n * n) as f64 / 0.01).ln()).sqrt();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                assert!(gram[[i, j]].abs() <= bound);
                assert!(gram[[i, j]].abs() / gram[[i, i]] < 0.25);
            }
        }
    }
}

#[test]
fn classifier_gradient_vanishes_at_small_loss() {
    let ds = generate_dataset(&SyntheticConfig::new(50, 6, 4.0, 1.0, 2)).unwrap();
    let p0 = init_classifier(4, 50, &InitConfig { sigma0: 0.05, seed: 2 }).unwrap();
    let (_, g0) = classification_loss_grad(&p0, &ds).unwrap();
    let g0 = featdyn_core::ParamSet::frobenius_norm(&g0);
    let mut p = p0.clone();
    let sig = ds.signals().unwrap();
    for r in 0..4 {
        p.w_pos.row_mut(r).scaled_add(5.0 / 16.0, &sig.mu_pos);
        p.w_neg.row_mut(r).scaled_add(5.0 / 16.0, &sig.mu_neg);
    }
    let (loss, g) = classification_loss_grad(&p, &ds).unwrap();
    assert!(loss < 1e-6, "loss {loss}");
    assert!(featdyn_core::ParamSet::frobenius_norm(&g) < 1e-4 * g0);
}
