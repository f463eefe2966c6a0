//! `gdkd distill`: config resolution and the training run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use gdkd::analysis::{class_profiles, discrepancy_matrix, knee_point_k};
use gdkd::io::{discrepancy_rows, profile_rows, write_csv, write_json, write_labels, write_logit_dump, LogitDump};
use gdkd::losses::presets::{parse_pair, preset, DEFAULT_PAIR};
use gdkd::losses::LossConfig;
use gdkd::numeric::Temperature;
use gdkd::trainer::{accuracy, dataset_logits, distill, ExperimentSpec, Mlp, SeedSetup, TrainRecordRow};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::UsageError;

/// On-disk distillation config. `loss` keys override the preset.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfigFile {
    pub preset: Option<String>,
    /// `"Teacher/Student"` row of the weight table.
    pub pair: Option<String>,
    pub seed: Option<u64>,
    /// Pick `k` with the knee rule on the teacher's training profiles.
    #[serde(default)]
    pub knee_k: bool,
    #[serde(default)]
    pub loss: serde_json::Map<String, Value>,
    #[serde(default)]
    pub experiment: Option<ExperimentSpec>,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub temperature: Option<f64>,
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    pub preset: Option<String>,
    pub pair: String,
    pub seed: u64,
    pub knee_k: bool,
    pub loss: LossConfig,
    pub experiment: ExperimentSpec,
}

pub fn load_config(path: &Path) -> anyhow::Result<DistillConfigFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
}

pub fn resolve(file: DistillConfigFile, ov: &Overrides) -> anyhow::Result<ResolvedConfig> {
    let pair_name = file.pair.unwrap_or_else(|| format!("{}/{}", DEFAULT_PAIR.0, DEFAULT_PAIR.1));
    let pair = parse_pair(&pair_name).map_err(|e| UsageError(e.to_string()))?;
    let preset_name = ov.preset.clone().or(file.preset);
    let base = match &preset_name {
        Some(name) => preset(name, &pair).map_err(|e| UsageError(e.to_string()))?,
        None => LossConfig::default(),
    };
    let mut merged = serde_json::to_value(&base)?;
    for (k, v) in file.loss {
        merged[k] = v;
    }
    if let Some(t) = ov.temperature {
        merged["temperature"] = t.into();
    }
    if let Some(k) = ov.k {
        merged["k"] = k.into();
    }
    let loss: LossConfig =
        serde_json::from_value(merged).map_err(|e| UsageError(format!("config field `loss`: {e}")))?;
    let experiment = file.experiment.unwrap_or_default();
    loss.validate(Some(experiment.task.num_classes))
        .map_err(|e| UsageError(format!("config field `loss`: {e}")))?;
    Ok(ResolvedConfig {
        preset: preset_name,
        pair: pair_name,
        seed: ov.seed.or(file.seed).unwrap_or(0),
        knee_k: file.knee_k,
        loss,
        experiment,
    })
}

pub struct TeacherSource {
    pub train: bool,
    pub path: Option<PathBuf>,
}

/// Builds the task and teacher; returns the setup and whether the teacher
/// was trained here.
pub fn prepare(cfg: &ResolvedConfig, teacher: &TeacherSource) -> anyhow::Result<(SeedSetup, bool)> {
    match (&teacher.path, teacher.train) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| UsageError(format!("cannot read teacher {}: {e}", path.display())))?;
            let model: Mlp = serde_json::from_str(&text)
                .map_err(|e| UsageError(format!("teacher {}: {e}", path.display())))?;
            let setup = cfg
                .experiment
                .setup_with_teacher(cfg.seed, model)
                .map_err(|e| UsageError(format!("teacher {}: {e}", path.display())))?;
            Ok((setup, false))
        }
        (None, true) => Ok((cfg.experiment.setup(cfg.seed)?, true)),
        (None, false) => bail!(UsageError("no teacher: pass --teacher FILE or --train-teacher".into())),
    }
}

pub fn run(out: &Path, cfg: &ResolvedConfig, setup: SeedSetup, trained_teacher: bool) -> anyhow::Result<Value> {
    let mut loss = cfg.loss.clone();
    if cfg.knee_k {
        let knee = setup.knee(loss.temperature)?;
        log::info!("knee rule picked k = {} (degenerate: {})", knee.k, knee.degenerate);
        loss.k = knee.k;
        write_json(&out.join("knee.json"), &knee)?;
    }
    write_json(&out.join("config.resolved.json"), &ResolvedConfig { loss: loss.clone(), ..cfg.clone() })?;
    if trained_teacher {
        write_json(&out.join("teacher.json"), &setup.teacher)?;
    }
    let run = distill(&setup.teacher, &setup.student, &setup.task, &loss, &setup.opts)
        .context("distillation failed")?;
    let rows: Vec<TrainRecordRow> = run.records.iter().map(|r| r.to_row()).collect();
    write_csv(&out.join("records.csv"), &rows)?;
    write_json(&out.join("student.json"), &run.model)?;

    let test = &setup.task.test;
    let t = Temperature::new(loss.temperature)?;
    let zt = dataset_logits(&setup.teacher, test)?;
    let zs = dataset_logits(&run.model, test)?;
    write_logit_dump(&out.join("teacher_logits.bin"), &LogitDump::from_rows(&zt)?)?;
    write_logit_dump(&out.join("student_logits.bin"), &LogitDump::from_rows(&zs)?)?;
    write_labels(&out.join("labels.bin"), &test.y)?;
    let profiles = class_profiles(&zt, &test.y, t)?;
    write_csv(&out.join("teacher_profiles.csv"), &profile_rows(&profiles))?;
    let m = discrepancy_matrix(&zt, &zs, &test.y, t, true)?;
    write_csv(&out.join("discrepancy.csv"), &discrepancy_rows(&m))?;
    let last = run.records.last().expect("at least one epoch");
    let summary = serde_json::json!({
        "epochs": run.records.len(),
        "final_train_loss": last.train_loss,
        "final_test_accuracy": last.test_accuracy,
        "teacher_test_accuracy": accuracy(&setup.teacher, test),
        "final_nontop_prob_discrepancy": last.nontop_prob_discrepancy,
        "discrepancy": m.summary(),
        "teacher_knee": knee_point_k(&profiles)?,
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}
