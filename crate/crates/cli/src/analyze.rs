//! `gdkd analyze`: reports over dumped logits.

use std::path::Path;

use gdkd::analysis::{class_profiles, discrepancy_matrix, enhancement_check, knee_point_k};
use gdkd::io::{discrepancy_rows, profile_rows, read_labels, read_logit_dump, write_csv, write_json};
use gdkd::numeric::{LogitVector, Temperature};
use gdkd::scalar::pairwise_mean;
use serde::Serialize;
use serde_json::{json, Value};

use crate::UsageError;

pub struct AnalyzeArgs<'a> {
    pub logits: &'a Path,
    pub labels: &'a Path,
    pub student_logits: Option<&'a Path>,
    pub temperature: f64,
    pub k: usize,
}

#[derive(Serialize)]
struct EnhancementRow {
    sample: usize,
    class: usize,
    p: f64,
    p_renorm: f64,
}

#[derive(Serialize)]
struct MultimodalityRow {
    class_id: usize,
    top1_over_top2_to_k: f64,
    classes_above_0_1: usize,
}

fn load(path: &Path) -> anyhow::Result<Vec<LogitVector<f64>>> {
    let dump = read_logit_dump(path).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
    Ok(dump.to_logits().map_err(|e| UsageError(format!("{}: {e}", path.display())))?)
}

pub fn run(out: &Path, a: &AnalyzeArgs<'_>) -> anyhow::Result<Value> {
    let zt = load(a.logits)?;
    let labels = read_labels(a.labels).map_err(|e| UsageError(format!("{}: {e}", a.labels.display())))?;
    if labels.len() != zt.len() {
        anyhow::bail!(UsageError(format!(
            "{} has {} samples but {} has {} labels",
            a.logits.display(),
            zt.len(),
            a.labels.display(),
            labels.len()
        )));
    }
    let zs = a.student_logits.map(load).transpose()?;
    if let Some(zs) = &zs {
        if zs.len() != zt.len() || zs.first().map(LogitVector::len) != zt.first().map(LogitVector::len) {
            anyhow::bail!(UsageError("student logits do not align with teacher logits".into()));
        }
    }
    let t = Temperature::new(a.temperature).map_err(|e| UsageError(e.to_string()))?;
    let c = zt.first().map_or(0, LogitVector::len);
    if a.k < 2 || a.k > c {
        anyhow::bail!(UsageError(format!("--k must lie in 2..={c}, got {}", a.k)));
    }

    let profiles = class_profiles(&zt, &labels, t).map_err(|e| UsageError(e.to_string()))?;
    write_csv(&out.join("profiles.csv"), &profile_rows(&profiles))?;
    let multimodality: Vec<MultimodalityRow> = profiles
        .iter()
        .map(|p| {
            Ok(MultimodalityRow {
                class_id: p.class_id,
                top1_over_top2_to_k: p.multimodality_ratio(a.k)?,
                classes_above_0_1: p.classes_above(0.1),
            })
        })
        .collect::<gdkd::Result<_>>()?;
    write_csv(&out.join("multimodality.csv"), &multimodality)?;

    let mut rows = Vec::new();
    let mut violations = 0usize;
    let mut ratios = Vec::new();
    for (i, z) in zt.iter().enumerate() {
        let r = enhancement_check(z, t);
        violations += usize::from(!r.holds);
        for &(class, p, p_renorm) in &r.entries {
            ratios.push(p_renorm / p);
            rows.push(EnhancementRow { sample: i, class, p, p_renorm });
        }
    }
    write_csv(&out.join("enhancement.csv"), &rows)?;
    let knee = knee_point_k(&profiles)?;
    write_json(&out.join("knee.json"), &knee)?;

    let mut summary = json!({
        "samples": zt.len(),
        "classes": c,
        "temperature": a.temperature,
        "profiled_classes": profiles.len(),
        "recommended_k": knee.k,
        "knee_degenerate": knee.degenerate,
        "enhancement_violations": violations,
        "mean_enhancement_ratio": pairwise_mean(&ratios),
    });
    if let Some(zs) = &zs {
        let m = discrepancy_matrix(&zt, zs, &labels, t, true)?;
        write_csv(&out.join("discrepancy.csv"), &discrepancy_rows(&m))?;
        summary["discrepancy"] = serde_json::to_value(m.summary())?;
    }
    write_json(&out.join("analysis.json"), &summary)?;
    Ok(summary)
}
