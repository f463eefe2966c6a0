use super::*;
use crate::numeric::softmax;
use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn z(v: &[f64]) -> LogitVector<f64> {
    LogitVector::from_slice(v).unwrap()
}

fn t(v: f64) -> Temperature<f64> {
    Temperature::new(v).unwrap()
}

fn random_logits(rng: &mut ChaCha8Rng, c: usize, scale: f64) -> LogitVector<f64> {
    LogitVector::new((0..c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Straight-line probability-space evaluation of the weighted decoupled loss
/// over a two-group partition. Shares nothing with the log-domain path.
fn oracle_two_group(zt: &[f64], zs: &[f64], g0: &[usize], g1: &[usize], w: [f64; 3], temp: f64) -> f64 {
    let soft = |z: &[f64], idx: &[usize]| -> Vec<f64> {
        let e: Vec<f64> = idx.iter().map(|&i| (z[i] / temp).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    };
    let kl = |p: &[f64], q: &[f64]| -> f64 { p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum() };
    let all: Vec<usize> = (0..zt.len()).collect();
    let (pt, ps) = (soft(zt, &all), soft(zs, &all));
    let mass = |p: &[f64], g: &[usize]| g.iter().map(|&i| p[i]).sum::<f64>();
    let bt = [mass(&pt, g0), mass(&pt, g1)];
    let bs = [mass(&ps, g0), mass(&ps, g1)];
    w[0] * kl(&bt, &bs) + w[1] * kl(&soft(zt, g0), &soft(zs, g0)) + w[2] * kl(&soft(zt, g1), &soft(zs, g1))
}

#[test]
fn kd_examples() {
    let a = z(&[0.3, -2.0, 1.7]);
    assert_eq!(kd_loss(&a, &a, t(4.0)).unwrap(), 0.0);
    // mpmath, 40 digits
    assert_abs_diff_eq!(
        kd_loss(&z(&[1.0, 2.0, 3.0]), &z(&[3.0, 2.0, 1.0]), t(1.0)).unwrap(),
        1.150_420_765_208_882_9,
        epsilon = 1e-14
    );
    assert_abs_diff_eq!(
        kd_loss(&z(&[0.0, 0.0]), &z(&[0.0, 10.0]), t(1.0)).unwrap(),
        4.306_898_218_339_271_6,
        epsilon = 1e-13
    );
    assert!(matches!(
        kd_loss(&z(&[0.0, 1.0]), &z(&[0.0, 1.0, 2.0]), t(1.0)),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn decomposed_kd_examples() {
    let a = z(&[1.0, 0.2, -0.4, 2.0]);
    let part = partition_topk(&a, 2).unwrap();
    let d = kd_loss_decomposed(&a, &a, &part, t(1.0)).unwrap();
    assert_eq!(d.total, 0.0);
    assert!(d.low_terms.iter().all(|&v| v == 0.0));

    let (zt, zs) = (z(&[4.0, 3.0, 2.0, 1.0]), z(&[1.0, 2.0, 3.0, 4.0]));
    let part = Partition::explicit(vec![vec![0], vec![1, 2, 3]], 4).unwrap();
    let d = kd_loss_decomposed(&zt, &zs, &part, t(1.0)).unwrap();
    assert_eq!(d.low_terms[0], 0.0);
    let kd = kd_loss(&zt, &zs, t(1.0)).unwrap();
    assert!((d.total - kd).abs() < 1e-10);
    assert_abs_diff_eq!(kd, 1.985_305_469_171_539_5, epsilon = 1e-13);
    assert!((d.weighted_sum() - d.total).abs() < 1e-15);
}

#[test]
fn decomposition_identity_random() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..500 {
        let zt = random_logits(&mut rng, 10, 6.0);
        let zs = random_logits(&mut rng, 10, 6.0);
        let part = partition_topk(&zt, 3).unwrap();
        let temp = t([1.0, 2.0, 4.0][rng.random_range(0..3)]);
        let d = kd_loss_decomposed(&zt, &zs, &part, temp).unwrap();
        assert!((d.total - kd_loss(&zt, &zs, temp).unwrap()).abs() < 1e-10);
    }
}

#[test]
fn dkd_coupled_weight_recovers_kd() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let c = rng.random_range(2..40);
        let zt = random_logits(&mut rng, c, 5.0);
        let zs = random_logits(&mut rng, c, 5.0);
        let target = rng.random_range(0..c);
        let temp = t(rng.random_range(0.5..5.0));
        let p_t = softmax(&zt, temp).as_slice()[target];
        let d = dkd_loss(&zt, &zs, target, 1.0, 1.0 - p_t, temp).unwrap();
        assert!((d.total - kd_loss(&zt, &zs, temp).unwrap()).abs() < 1e-10);
    }
}

#[test]
fn dkd_with_table_weight() {
    let (zt, zs) = (z(&[2.0, 0.5, -1.0, 0.3]), z(&[0.1, 0.2, 0.3, 0.4]));
    let d = dkd_loss(&zt, &zs, 0, 1.0, 8.0, t(4.0)).unwrap();
    let oracle = oracle_two_group(zt.as_slice(), zs.as_slice(), &[0], &[1, 2, 3], [1.0, 0.0, 8.0], 4.0);
    assert!((d.total - oracle).abs() < 1e-12);
    assert_eq!(dkd_loss(&zt, &zt, 2, 1.0, 8.0, t(4.0)).unwrap().total, 0.0);
    assert!(dkd_loss(&zt, &zs, 4, 1.0, 8.0, t(4.0)).is_err());
}

#[test]
fn gdkd_straight_line_example() {
    let zt = z(&[5.0, 4.0, 3.0, 2.0, 1.0, 0.0]);
    let zs = z(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    let cfg = LossConfig::gdkd(2, 1.0, 2.0, 8.0, 4.0);
    let d = gdkd_loss(&zt, &zs, &cfg).unwrap();
    let oracle = oracle_two_group(zt.as_slice(), zs.as_slice(), &[0, 1], &[2, 3, 4, 5], [1.0, 2.0, 8.0], 4.0);
    assert!((d.total - oracle).abs() < 1e-12);
    // mpmath, 40 digits
    assert_abs_diff_eq!(d.total, 1.550_277_740_627_308_1, epsilon = 1e-13);
    assert_abs_diff_eq!(d.high_kd, 0.259_720_586_583_481_04, epsilon = 1e-14);
    assert_abs_diff_eq!(d.low_terms[0], 0.031_088_250_442_899_052, epsilon = 1e-14);
    assert_abs_diff_eq!(d.low_terms[1], 0.153_547_581_644_753_62, epsilon = 1e-14);
    assert_eq!(gdkd_loss(&zt, &zt, &cfg).unwrap().total, 0.0);
}

#[test]
fn gdkd_rejects_wrong_variant_and_k() {
    let a = z(&[1.0, 2.0, 3.0]);
    assert!(gdkd_loss(&a, &a, &LossConfig::kd(4.0)).is_err());
    assert!(gdkd_loss(&a, &a, &LossConfig::gdkd(3, 1.0, 1.0, 1.0, 1.0)).is_err());
}

#[test]
fn gdkd_top1_reduces_to_gdkd2() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..300 {
        let c = rng.random_range(3..30);
        let zt = random_logits(&mut rng, c, 5.0);
        let zs = random_logits(&mut rng, c, 5.0);
        let w1 = rng.random_range(0.0..10.0);
        let w2 = rng.random_range(0.0..10.0);
        let g = gdkd_loss(&zt, &zs, &LossConfig::gdkd(1, 1.0, w1, w2, 4.0)).unwrap();
        assert_eq!(g.low_terms[0], 0.0);
        let g2 = gdkd2_loss(&zt, &zs, zt.argmax(), w2, t(4.0)).unwrap();
        assert!((g.total - g2.total).abs() < 1e-12);
    }
}

#[test]
fn gdkd2_coupled_weight_matches_decomposed_kd() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..300 {
        let c = rng.random_range(2..30);
        let zt = random_logits(&mut rng, c, 5.0);
        let zs = random_logits(&mut rng, c, 5.0);
        let cls = rng.random_range(0..c);
        let p_c = softmax(&zt, t(2.0)).as_slice()[cls];
        let g2 = gdkd2_loss(&zt, &zs, cls, 1.0 - p_c, t(2.0)).unwrap();
        let part = partition_target(cls, c).unwrap();
        let d = kd_loss_decomposed(&zt, &zs, &part, t(2.0)).unwrap();
        assert!((g2.total - d.total).abs() < 1e-12);
    }
}

#[test]
fn gdkd2_on_target_is_dkd() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let c = rng.random_range(2..30);
        let zt = random_logits(&mut rng, c, 5.0);
        let zs = random_logits(&mut rng, c, 5.0);
        let target = rng.random_range(0..c);
        let beta = rng.random_range(0.0..10.0);
        let a = gdkd2_loss(&zt, &zs, target, beta, t(4.0)).unwrap();
        let b = dkd_loss(&zt, &zs, target, 1.0, beta, t(4.0)).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
    }
}

#[test]
fn n_group_with_two_groups_equals_gdkd() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..300 {
        let c = rng.random_range(3..50);
        let k = rng.random_range(1..c);
        let zt = random_logits(&mut rng, c, 5.0);
        let zs = random_logits(&mut rng, c, 5.0);
        let w = [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), rng.random_range(0.0..10.0)];
        let g = gdkd_loss(&zt, &zs, &LossConfig::gdkd(k, w[0], w[1], w[2], 4.0)).unwrap();
        let part = partition_topk(&zt, k).unwrap();
        let n = gdkd_n_loss(&zt, &zs, &part, &w, t(4.0)).unwrap();
        assert!((g.total - n.total).abs() < 1e-12);
    }
}

#[test]
fn n_group_weight_count_and_gdkd3_preset() {
    let zt = z(&[3.0, 2.5, 2.0, 1.0, 0.0, -1.0, -2.0, 0.5]);
    let zs = z(&[0.0, 0.2, 0.1, 0.3, 0.0, -0.1, 0.4, 0.5]);
    let part = partition_gdkd3(&zt, 5).unwrap();
    assert!(matches!(
        gdkd_n_loss(&zt, &zs, &part, &[1.0, 1.0, 1.0], t(1.0)),
        Err(Error::Config(_))
    ));
    let d = gdkd_n_loss(&zt, &zs, &part, &[1.0; 4], t(1.0)).unwrap();
    assert_eq!(d.low_terms.len(), 3);
    assert_eq!(d.low_terms[0], 0.0);
    assert!(d.total > 0.0);
    assert_eq!(gdkd_n_loss(&zt, &zt, &part, &[1.0; 4], t(1.0)).unwrap().total, 0.0);

    let pair = presets::pair_weights("ResNet32x4", "ResNet8x4").unwrap();
    let cfg = presets::preset("gdkd3", &pair).unwrap();
    let via_cfg = distillation_term(&zt, &zs, 0, &cfg).unwrap();
    assert!((via_cfg.total - d.total).abs() < 1e-15);
}

#[test]
fn dynamic_variant_matches_gdkd_when_weights_agree() {
    let zt = z(&[2.0, 1.5, 0.3, -0.2, -1.0, 0.0]);
    let zs = z(&[0.5, 0.1, 0.9, -0.3, 0.2, 0.0]);
    let (w1, w2, temp) = (2.0, 8.0, 4.0);
    let part = partition_topk(&zt, 2).unwrap();
    let mass = crate::partition::decompose(&softmax(&zt, t(temp)), &part).unwrap().top_level;
    let cfg = LossConfig {
        variant: Variant::GdkdV1,
        k: 2,
        temperature: temp,
        m1: Some(w1 / mass[0]),
        m2: Some(w2 / mass[1]),
        ..LossConfig::default()
    };
    let v1 = gdkd_dynamic_loss(&zt, &zs, &cfg).unwrap();
    let g = gdkd_loss(&zt, &zs, &LossConfig::gdkd(2, 1.0, w1, w2, temp)).unwrap();
    assert!((v1.total - g.total).abs() < 1e-12);
    assert!((v1.weights_applied[0] - w1).abs() < 1e-12);

    let v2 = gdkd_dynamic_loss(&zt, &zs, &LossConfig { variant: Variant::GdkdV2, w1, ..cfg.clone() }).unwrap();
    assert_eq!(v2.weights_applied[0], w1);
    let v3 = gdkd_dynamic_loss(&zt, &zs, &LossConfig { variant: Variant::GdkdV3, w2, ..cfg.clone() }).unwrap();
    assert_eq!(v3.weights_applied[1], w2);

    for variant in [Variant::GdkdV1, Variant::GdkdV2, Variant::GdkdV3] {
        let c = LossConfig { variant, ..cfg.clone() };
        assert_eq!(gdkd_dynamic_loss(&zt, &zt, &c).unwrap().total, 0.0);
    }
    let missing = LossConfig { m2: None, ..cfg };
    assert!(matches!(gdkd_dynamic_loss(&zt, &zs, &missing), Err(Error::Config(_))));
}

#[test]
fn dynamic_preset_resnet32x4() {
    let pair = presets::pair_weights("ResNet32x4", "ResNet8x4").unwrap();
    let cfg = presets::preset("gdkd-v1", &pair).unwrap();
    assert_eq!((cfg.m1, cfg.m2), (Some(6.0), Some(14.0)));
    let zt = z(&[3.0, 2.0, 1.0, 0.0, -1.0, -2.0, 0.5]);
    let zs = z(&[0.0; 7]);
    let d = gdkd_dynamic_loss(&zt, &zs, &cfg).unwrap();
    assert!((d.weights_applied[0] - 6.0 * d.teacher_mass[0]).abs() < 1e-15);
    assert!((d.weights_applied[1] - 14.0 * d.teacher_mass[1]).abs() < 1e-15);
}

#[test]
fn standardize_examples() {
    let s = logit_standardize(&z(&[1.0, -1.0])).unwrap();
    assert_eq!(s.as_slice(), &[1.0, -1.0]);
    let s = logit_standardize(&z(&[2.0, 4.0, 6.0])).unwrap();
    let r = 1.5_f64.sqrt();
    assert_abs_diff_eq!(s.as_slice()[0], -r, epsilon = 1e-15);
    assert_abs_diff_eq!(s.as_slice()[1], 0.0, epsilon = 1e-15);
    assert_abs_diff_eq!(s.as_slice()[2], r, epsilon = 1e-15);
    assert!(matches!(logit_standardize(&z(&[5.0, 5.0, 5.0])), Err(Error::Degenerate(_))));
}

#[test]
fn objective_warmup_and_ce() {
    let zt = z(&[2.0, 0.0, -1.0, 0.5]);
    let zs = z(&[0.0, 1.0, 0.0, 0.2]);
    let cfg = LossConfig { warmup_epochs: 20, ..LossConfig::gdkd(2, 1.0, 2.0, 8.0, 4.0) };
    let ce = cross_entropy(&zs, 0).unwrap();
    let o0 = total_objective(&zt, &zs, 0, &cfg, 0).unwrap();
    assert_eq!(o0.total, ce);
    let o10 = total_objective(&zt, &zs, 0, &cfg, 10).unwrap();
    assert_eq!(o10.warmup, 0.5);
    assert!((o10.total - (ce + 0.5 * 16.0 * o10.distill)).abs() < 1e-12);
    let o30 = total_objective(&zt, &zs, 0, &cfg, 30).unwrap();
    assert_eq!(o30.warmup, 1.0);
    assert!((o30.total - (ce + 16.0 * o30.distill)).abs() < 1e-12);
}

#[test]
fn objective_with_logit_standardization() {
    let zt = z(&[2.0, 0.0, -1.0, 0.5, 3.0]);
    let zs = z(&[0.0, 1.0, 0.0, 0.2, -0.4]);
    let cfg = LossConfig { use_ls: true, warmup_epochs: 0, ..LossConfig::gdkd(2, 1.0, 2.0, 8.0, 4.0) };
    let o = total_objective(&zt, &zs, 1, &cfg, 0).unwrap();
    let direct = gdkd_loss(
        &logit_standardize(&zt).unwrap(),
        &logit_standardize(&zs).unwrap(),
        &LossConfig::gdkd(2, 1.0, 2.0, 8.0, 4.0),
    )
    .unwrap();
    assert_eq!(o.distill, direct.total);
    assert_eq!(o.distill_scale, 16.0 * 9.0);
    // standardization makes the term invariant to positive rescaling of either side
    let scaled = LogitVector::new(zs.as_slice().iter().map(|v| 3.0 * v).collect()).unwrap();
    let o2 = total_objective(&zt, &scaled, 1, &cfg, 0).unwrap();
    assert!((o2.distill - o.distill).abs() < 1e-12);
}

#[test]
fn batch_objective_is_thread_count_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let batch: Vec<DistillSample<f64>> = (0..257)
        .map(|_| DistillSample {
            teacher: random_logits(&mut rng, 12, 4.0),
            student: random_logits(&mut rng, 12, 4.0),
            target: rng.random_range(0..12),
        })
        .collect();
    let cfg = LossConfig::gdkd(3, 1.0, 2.0, 8.0, 4.0);
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = single.install(|| batch_objective(&batch, &cfg, 25).unwrap());
    let b = many.install(|| batch_objective(&batch, &cfg, 25).unwrap());
    assert_eq!(a.to_bits(), b.to_bits());
    assert!(batch_objective::<f64>(&[], &cfg, 0).is_err());
}

#[test]
fn saturation_guard_caps_terms() {
    let mut sat = false;
    assert_eq!(guard(f64::INFINITY, &mut sat), KL_CAP);
    assert!(sat);
    let mut sat = false;
    assert_eq!(guard(3.0, &mut sat), 3.0);
    assert!(!sat);
}

#[test]
fn f32_losses_track_f64() {
    let a32 = LogitVector::new(vec![5.0_f32, 4.0, 3.0, 2.0, 1.0, 0.0]).unwrap();
    let b32 = LogitVector::new(vec![0.0_f32, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    let d = gdkd_loss(&a32, &b32, &LossConfig::gdkd(2, 1.0, 2.0, 8.0, 4.0)).unwrap();
    assert!((d.total as f64 - 1.550_277_740_627_308).abs() < 1e-5);
}

fn pair_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..40).prop_flat_map(|c| {
        (
            prop::collection::vec(-8.0..8.0_f64, c),
            prop::collection::vec(-8.0..8.0_f64, c),
        )
    })
}

fn all_variant_configs(c: usize) -> Vec<LossConfig> {
    let k = 1 + c / 3;
    let base = LossConfig { k, m1: Some(6.0), m2: Some(14.0), ..LossConfig::default() };
    vec![
        LossConfig::kd(4.0),
        LossConfig::dkd(1.0, 8.0, 4.0),
        LossConfig::gdkd(k, 1.0, 2.0, 8.0, 4.0),
        LossConfig { variant: Variant::GdkdN, weights: vec![1.0, 2.0, 8.0], ..base.clone() },
        LossConfig { variant: Variant::GdkdN, weights: vec![1.0; 4], k: k.max(2), ..base.clone() },
        LossConfig { variant: Variant::Gdkd2, ..base.clone() },
        LossConfig { variant: Variant::Gdkd2, anchor: Anchor::Target, ..base.clone() },
        LossConfig { variant: Variant::GdkdV1, ..base.clone() },
        LossConfig { variant: Variant::GdkdV2, ..base.clone() },
        LossConfig { variant: Variant::GdkdV3, ..base.clone() },
        LossConfig { use_ls: true, ..LossConfig::gdkd(k, 1.0, 2.0, 8.0, 4.0) },
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn every_loss_nonnegative_and_shift_invariant(
        (zt, zs) in pair_strategy(),
        shift in -100.0..100.0_f64,
        target_seed in 0usize..1000,
    ) {
        let c = zt.len();
        let target = target_seed % c;
        let (a, b) = (z(&zt), z(&zs));
        let (a2, b2) = (a.shifted(shift).unwrap(), b.shifted(shift).unwrap());
        for cfg in all_variant_configs(c) {
            let d = distillation_term(&a, &b, target, &cfg).unwrap();
            prop_assert!(d.total >= 0.0, "{:?} gave {}", cfg.variant, d.total);
            prop_assert!((d.total - d.weighted_sum()).abs() <= 1e-10);
            let d2 = distillation_term(&a2, &b2, target, &cfg).unwrap();
            prop_assert!((d.total - d2.total).abs() < 1e-9, "{:?}: {} vs {}", cfg.variant, d.total, d2.total);
            let same = distillation_term(&a, &a, target, &cfg).unwrap();
            prop_assert_eq!(same.total, 0.0);
        }
    }
}
