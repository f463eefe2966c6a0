//! Published CIFAR-100 loss weights and named configurations.

use super::config::{Anchor, LossConfig, Variant};
use crate::error::{Error, Result};

/// One teacher/student row of the CIFAR-100 weight table.
///
/// `w0` is 1 for every row. `m1`/`m2` are absent for pairs where the
/// dynamic-weight variants were not run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairWeights {
    pub teacher: &'static str,
    pub student: &'static str,
    pub w1: f64,
    pub w2: f64,
    pub m1: Option<f64>,
    pub m2: Option<f64>,
}

const fn row(
    teacher: &'static str,
    student: &'static str,
    w1: f64,
    w2: f64,
    m: Option<(f64, f64)>,
) -> PairWeights {
    let (m1, m2) = match m {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };
    PairWeights {
        teacher,
        student,
        w1,
        w2,
        m1,
        m2,
    }
}

pub const CIFAR100_WEIGHTS: [PairWeights; 11] = [
    row("ResNet56", "ResNet20", 1.0, 1.0, Some((3.0, 2.0))),
    row("ResNet110", "ResNet32", 1.0, 1.0, None),
    row("WRN-40-2", "ShuffleNet-V1", 2.0, 6.0, Some((6.0, 10.0))),
    row("WRN-40-2", "WRN-16-2", 2.0, 6.0, Some((6.0, 10.0))),
    row("WRN-40-2", "WRN-40-1", 2.0, 6.0, None),
    row("VGG13", "VGG8", 1.0, 6.0, Some((3.0, 10.0))),
    row("VGG13", "MobileNet-V2", 1.0, 6.0, Some((3.0, 10.0))),
    row("ResNet50", "MobileNet-V2", 1.0, 8.0, Some((2.0, 16.0))),
    row("ResNet32x4", "ResNet8x4", 2.0, 8.0, Some((6.0, 14.0))),
    row("ResNet32x4", "ShuffleNet-V1", 1.0, 8.0, None),
    row("ResNet32x4", "ShuffleNet-V2", 1.0, 8.0, Some((3.0, 14.0))),
];

pub const DEFAULT_PAIR: (&str, &str) = ("ResNet32x4", "ResNet8x4");

/// Preset names accepted by [`preset`].
pub const PRESET_NAMES: [&str; 9] = [
    "kd",
    "dkd",
    "gdkd-default",
    "gdkd-top1",
    "gdkd3",
    "gdkd-v1",
    "gdkd-v2",
    "gdkd-v3",
    "gdkd-ls",
];

fn normalize(name: &str) -> String {
    name.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// Looks up a teacher/student pair; names match ignoring case and punctuation.
pub fn pair_weights(teacher: &str, student: &str) -> Result<PairWeights> {
    let (t, s) = (normalize(teacher), normalize(student));
    CIFAR100_WEIGHTS
        .iter()
        .find(|r| normalize(r.teacher) == t && normalize(r.student) == s)
        .copied()
        .ok_or_else(|| Error::Config(format!("no preset weights for {teacher} -> {student}")))
}

/// Parses `"Teacher/Student"`.
pub fn parse_pair(pair: &str) -> Result<PairWeights> {
    let (t, s) = pair
        .split_once('/')
        .ok_or_else(|| Error::Config(format!("pair must look like Teacher/Student, got {pair:?}")))?;
    pair_weights(t.trim(), s.trim())
}

/// Named configuration with weights taken from `pair`.
///
/// CIFAR-100 recipe: `T = 4`, 20-epoch warmup for the decoupled losses, `k = 5`.
/// `gdkd3` follows the ImageNet three-group recipe instead: all weights 1,
/// `T = 1`, distillation off for the first epoch.
pub fn preset(name: &str, pair: &PairWeights) -> Result<LossConfig> {
    let base = LossConfig {
        temperature: 4.0,
        k: 5,
        w0: 1.0,
        w1: pair.w1,
        w2: pair.w2,
        alpha: 1.0,
        beta: pair.w2,
        beta2: pair.w2,
        m1: pair.m1,
        m2: pair.m2,
        warmup_epochs: 20,
        ..LossConfig::default()
    };
    let missing_m = || {
        Error::Config(format!(
            "{} -> {} has no m1/m2 weights",
            pair.teacher, pair.student
        ))
    };
    let cfg = match name {
        "kd" => LossConfig {
            variant: Variant::Kd,
            warmup_epochs: 0,
            ..base
        },
        "dkd" => LossConfig {
            variant: Variant::Dkd,
            ..base
        },
        "gdkd-default" | "gdkd" => LossConfig {
            variant: Variant::Gdkd,
            ..base
        },
        "gdkd-top1" => LossConfig {
            variant: Variant::Gdkd2,
            anchor: Anchor::TeacherTop,
            ..base
        },
        "gdkd3" => LossConfig {
            variant: Variant::GdkdN,
            weights: vec![1.0, 1.0, 1.0, 1.0],
            temperature: 1.0,
            warmup_epochs: 1,
            ..base
        },
        "gdkd-v1" | "gdkd-v2" | "gdkd-v3" => {
            let variant = match name {
                "gdkd-v1" => Variant::GdkdV1,
                "gdkd-v2" => Variant::GdkdV2,
                _ => Variant::GdkdV3,
            };
            if pair.m1.is_none() {
                return Err(missing_m());
            }
            LossConfig { variant, ..base }
        }
        "gdkd-ls" => LossConfig {
            variant: Variant::Gdkd,
            use_ls: true,
            ls_scale: 9.0,
            ..base
        },
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {PRESET_NAMES:?}"
            )))
        }
    };
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet32x4_row() {
        let r = pair_weights("resnet32x4", "ResNet8x4").unwrap();
        assert_eq!((r.w1, r.w2, r.m1, r.m2), (2.0, 8.0, Some(6.0), Some(14.0)));
        assert_eq!(parse_pair("WRN-40-2/wrn_16_2").unwrap().w2, 6.0);
        assert!(parse_pair("ResNet110/ResNet32").unwrap().m1.is_none());
        assert!(parse_pair("nope").is_err());
        assert!(pair_weights("ResNet32x4", "VGG8").is_err());
    }

    #[test]
    fn presets_validate() {
        let pair = pair_weights(DEFAULT_PAIR.0, DEFAULT_PAIR.1).unwrap();
        for name in PRESET_NAMES {
            let cfg = preset(name, &pair).unwrap();
            cfg.validate(Some(100)).unwrap();
        }
        let dkd = preset("dkd", &pair).unwrap();
        assert_eq!((dkd.alpha, dkd.beta), (1.0, 8.0));
        let g = preset("gdkd-default", &pair).unwrap();
        assert_eq!((g.k, g.w0, g.w1, g.w2), (5, 1.0, 2.0, 8.0));
        let v1 = preset("gdkd-v1", &pair).unwrap();
        assert_eq!((v1.m1, v1.m2), (Some(6.0), Some(14.0)));
        let g3 = preset("gdkd3", &pair).unwrap();
        assert_eq!(g3.weights, vec![1.0; 4]);
        assert_eq!(g3.k, 5);
    }

    #[test]
    fn dynamic_preset_needs_m() {
        let pair = parse_pair("ResNet110/ResNet32").unwrap();
        assert!(preset("gdkd-v1", &pair).is_err());
        assert!(preset("nonsense", &pair).is_err());
    }
}
