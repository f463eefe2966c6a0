//! Randomized property suites behind `gdkd verify`.

use clap::ValueEnum;
use gdkd::gradients::{
    finite_diff, grad_kd, grad_loss, grad_otherkd, grad_topkd, GradVector,
};
use gdkd::losses::{
    distillation_term, dkd_loss, gdkd2_loss, gdkd_n_loss, kd_loss, kd_loss_decomposed, LossConfig,
    Variant,
};
use gdkd::analysis::enhancement_check;
use gdkd::numeric::{softmax, LogitVector, Temperature};
use gdkd::partition::{partition_target, Partition};
use gdkd::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Identity,
    Gradients,
    Enhancement,
    All,
}

const FD_STEP: f64 = 1e-5;
const FD_RTOL: f64 = 1e-6;
const FD_ATOL: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub trials: usize,
    pub failures: usize,
    pub max_error: f64,
    pub tolerance: String,
    pub first_counterexample: Option<Value>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckReport>,
}

/// Outcome of one trial: error measure and, on failure, the inputs.
struct Trial {
    error: f64,
    failed: Option<Value>,
}

fn trial_rng(seed: u64, check: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((check << 32) | trial as u64);
    rng
}

fn run_check(
    name: &str,
    check_id: u64,
    seed: u64,
    trials: usize,
    tolerance: &str,
    f: impl Fn(&mut ChaCha8Rng) -> Result<Trial> + Sync,
) -> CheckReport {
    let results: Vec<Trial> = (0..trials)
        .into_par_iter()
        .map(|i| {
            f(&mut trial_rng(seed, check_id, i)).unwrap_or_else(|e| Trial {
                error: f64::INFINITY,
                failed: Some(json!({ "trial": i, "error": e.to_string() })),
            })
        })
        .collect();
    let failures = results.iter().filter(|t| t.failed.is_some()).count();
    let max_error = results.iter().map(|t| t.error).fold(0.0, f64::max);
    let first_counterexample = results.iter().position(|t| t.failed.is_some()).map(|i| {
        let mut v = results[i].failed.clone().unwrap();
        v["trial"] = json!(i);
        v
    });
    if failures > 0 {
        log::error!("{name}: {failures}/{trials} failures");
    }
    CheckReport {
        name: name.into(),
        trials,
        failures,
        max_error,
        tolerance: tolerance.into(),
        first_counterexample,
    }
}

fn logits(rng: &mut ChaCha8Rng, c: usize, scale: f64) -> LogitVector<f64> {
    LogitVector::new((0..c).map(|_| rng.random_range(-scale..scale)).collect()).expect("finite")
}

fn temperature(rng: &mut ChaCha8Rng) -> f64 {
    [1.0, 2.0, 4.0][rng.random_range(0..3)]
}

/// A random split of `0..c` into two non-empty groups.
fn two_groups(rng: &mut ChaCha8Rng, c: usize) -> Partition {
    let mut idx: Vec<usize> = (0..c).collect();
    idx.shuffle(rng);
    let cut = rng.random_range(1..c);
    let (a, b) = idx.split_at(cut);
    Partition::explicit(vec![a.to_vec(), b.to_vec()], c).expect("valid split")
}

fn pair_json(zt: &LogitVector<f64>, zs: &LogitVector<f64>, t: f64) -> Value {
    json!({ "z_t": zt.as_slice(), "z_s": zs.as_slice(), "T": t })
}

fn scalar_trial(got: f64, expected: f64, tol: f64, inputs: impl FnOnce() -> Value) -> Trial {
    let error = (got - expected).abs();
    let failed = (!(error < tol)).then(|| {
        let mut v = inputs();
        v["got"] = json!(got);
        v["expected"] = json!(expected);
        v
    });
    Trial { error, failed }
}

fn grad_trial(analytic: &GradVector<f64>, fd: &GradVector<f64>, inputs: impl FnOnce() -> Value) -> Trial {
    let error = analytic.max_abs_diff(fd);
    let failed = (!analytic.allclose(fd, FD_RTOL, FD_ATOL)).then(|| {
        let mut v = inputs();
        v["analytic"] = json!(analytic.as_slice());
        v["finite_difference"] = json!(fd.as_slice());
        v
    });
    Trial { error, failed }
}

fn identity_checks(seed: u64, trials: usize) -> Vec<CheckReport> {
    vec![
        run_check("kd_decomposition", 1, seed, trials, "abs < 1e-10", |rng| {
            let c = rng.random_range(3..=200);
            let (zt, zs) = (logits(rng, c, 10.0), logits(rng, c, 10.0));
            let t = temperature(rng);
            let p = two_groups(rng, c);
            let kd = kd_loss(&zt, &zs, Temperature::new(t)?)?;
            let dec = kd_loss_decomposed(&zt, &zs, &p, Temperature::new(t)?)?.total;
            Ok(scalar_trial(dec, kd, 1e-10, || {
                let mut v = pair_json(&zt, &zs, t);
                v["partition"] = json!(p.groups());
                v
            }))
        }),
        run_check("dkd_special_case", 2, seed, trials, "abs < 1e-12", |rng| {
            let c = rng.random_range(3..=200);
            let (zt, zs) = (logits(rng, c, 10.0), logits(rng, c, 10.0));
            let t = temperature(rng);
            let target = rng.random_range(0..c);
            let beta = rng.random_range(0.0..10.0);
            let tt = Temperature::new(t)?;
            let g = gdkd2_loss(&zt, &zs, target, beta, tt)?.total;
            let d = dkd_loss(&zt, &zs, target, 1.0, beta, tt)?.total;
            Ok(scalar_trial(g, d, 1e-12, || {
                let mut v = pair_json(&zt, &zs, t);
                v["target"] = json!(target);
                v["beta"] = json!(beta);
                v
            }))
        }),
        run_check("coupled_weight_recovery", 3, seed, trials, "abs < 1e-10", |rng| {
            let c = rng.random_range(3..=200);
            let (zt, zs) = (logits(rng, c, 10.0), logits(rng, c, 10.0));
            let t = temperature(rng);
            let target = rng.random_range(0..c);
            let tt = Temperature::new(t)?;
            let beta = 1.0 - softmax(&zt, tt).as_slice()[target];
            let d = dkd_loss(&zt, &zs, target, 1.0, beta, tt)?.total;
            let kd = kd_loss(&zt, &zs, tt)?;
            Ok(scalar_trial(d, kd, 1e-10, || {
                let mut v = pair_json(&zt, &zs, t);
                v["target"] = json!(target);
                v
            }))
        }),
    ]
}

/// Configurations whose raw loss gradients are checked.
fn gradient_configs(rng: &mut ChaCha8Rng, c: usize) -> Vec<(String, LossConfig)> {
    let t = temperature(rng);
    let mut w = || rng.random_range(0.0..8.0);
    let (w0, w1, w2, m1, m2) = (w(), w(), w(), w(), w());
    let mut out = Vec::new();
    for k in 2..=5 {
        out.push((format!("gdkd_k{k}"), LossConfig::gdkd(k, w0, w1, w2, t).raw()));
    }
    let base = LossConfig { temperature: t, k: 5, w0, w1, w2, m1: Some(m1), m2: Some(m2), ..LossConfig::default() }.raw();
    out.push((
        "gdkd3".into(),
        LossConfig { variant: Variant::GdkdN, weights: vec![w0, w1, w2, m1], ..base.clone() },
    ));
    for (name, v) in [("gdkd_v1", Variant::GdkdV1), ("gdkd_v2", Variant::GdkdV2), ("gdkd_v3", Variant::GdkdV3)] {
        out.push((name.into(), LossConfig { variant: v, ..base.clone() }));
    }
    debug_assert!(c >= 6);
    out
}

const GRADIENT_CHECKS: [&str; 11] = [
    "topkd", "otherkd", "kd", "gdkd_k2", "gdkd_k3", "gdkd_k4", "gdkd_k5", "gdkd3", "gdkd_v1", "gdkd_v2", "gdkd_v3",
];

fn gradient_checks(seed: u64, trials: usize) -> Vec<CheckReport> {
    let mut out = Vec::new();
    for (id, &name) in GRADIENT_CHECKS.iter().enumerate() {
        out.push(run_check(&format!("grad_{name}"), 100 + id as u64, seed, trials, "|a-fd| <= 1e-8 + 1e-6|fd|", |rng| {
            let c = rng.random_range(6..=50);
            let (zt, zs) = (logits(rng, c, 6.0), logits(rng, c, 6.0));
            let anchor = rng.random_range(0..c);
            let target = rng.random_range(0..c);
            let configs = gradient_configs(rng, c);
            let t = configs[0].1.temperature;
            let tt = Temperature::new(t)?;
            let (analytic, fd) = match name {
                "topkd" => (
                    grad_topkd(&zt, &zs, anchor, tt)?,
                    finite_diff(|s| Ok(gdkd2_loss(&zt, s, anchor, 0.0, tt)?.total), &zs, FD_STEP)?,
                ),
                "otherkd" => {
                    let p = partition_target(anchor, c)?;
                    (
                        grad_otherkd(&zt, &zs, anchor, tt)?,
                        finite_diff(|s| Ok(gdkd_n_loss(&zt, s, &p, &[0.0, 0.0, 1.0], tt)?.total), &zs, FD_STEP)?,
                    )
                }
                "kd" => (grad_kd(&zt, &zs, tt)?, finite_diff(|s| kd_loss(&zt, s, tt), &zs, FD_STEP)?),
                _ => {
                    let cfg = &configs.iter().find(|(n, _)| n == name).expect("known config").1;
                    (
                        grad_loss(&zt, &zs, target, cfg)?,
                        finite_diff(|s| Ok(distillation_term(&zt, s, target, cfg)?.total), &zs, FD_STEP)?,
                    )
                }
            };
            Ok(grad_trial(&analytic, &fd, || {
                let mut v = pair_json(&zt, &zs, t);
                v["anchor"] = json!(anchor);
                v["target"] = json!(target);
                v
            }))
        }));
    }
    out.push(run_check("grad_reconstruction", 200, seed, trials, "max abs < 1e-8", |rng| {
        let c = rng.random_range(3..=100);
        let (zt, zs) = (logits(rng, c, 6.0), logits(rng, c, 6.0));
        let t = temperature(rng);
        let tt = Temperature::new(t)?;
        let top = zt.argmax();
        let eta = 1.0 - softmax(&zt, tt).as_slice()[top];
        let rebuilt = grad_topkd(&zt, &zs, top, tt)?.axpy(eta, &grad_otherkd(&zt, &zs, top, tt)?);
        let kd = grad_kd(&zt, &zs, tt)?;
        let error = rebuilt.max_abs_diff(&kd);
        Ok(Trial { error, failed: (!(error < 1e-8)).then(|| pair_json(&zt, &zs, t)) })
    }));
    out
}

fn enhancement_checks(seed: u64, trials: usize) -> Vec<CheckReport> {
    vec![run_check("enhancement_strict", 300, seed, trials, "p_renorm > p for every non-top class", |rng| {
        let c = rng.random_range(2..=200);
        let zt = logits(rng, c, 20.0);
        let t = temperature(rng);
        let r = enhancement_check(&zt, Temperature::new(t)?);
        let violations = r.entries.iter().filter(|&&(_, p, q)| !(q > p)).count();
        let fail = !r.holds || violations > 0;
        Ok(Trial {
            error: violations as f64,
            failed: fail.then(|| json!({ "z_t": zt.as_slice(), "T": t })),
        })
    })]
}

/// Default trial counts: 10000 for identity and enhancement, 1000 for
/// gradients.
pub fn run(suite: Suite, trials: Option<usize>, seed: u64) -> SuiteReport {
    let n = |default| trials.unwrap_or(default);
    let mut checks = Vec::new();
    if matches!(suite, Suite::Identity | Suite::All) {
        checks.extend(identity_checks(seed, n(10_000)));
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        checks.extend(gradient_checks(seed, n(1_000)));
    }
    if matches!(suite, Suite::Enhancement | Suite::All) {
        checks.extend(enhancement_checks(seed, n(10_000)));
    }
    let passed = checks.iter().all(|c| c.failures == 0);
    SuiteReport { suite, seed, passed, checks }
}
