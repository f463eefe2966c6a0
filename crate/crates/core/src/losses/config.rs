use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which distillation loss to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "kd", alias = "KD")]
    Kd,
    #[serde(rename = "dkd", alias = "DKD")]
    Dkd,
    #[serde(rename = "gdkd", alias = "GDKD")]
    Gdkd,
    /// Flat n-group loss; `weights` holds `w0` followed by one weight per group.
    #[serde(rename = "gdkd_n", alias = "GDKDN")]
    GdkdN,
    #[serde(rename = "gdkd2", alias = "GDKD2")]
    Gdkd2,
    #[serde(rename = "gdkd_v1", alias = "GDKD_V1")]
    GdkdV1,
    #[serde(rename = "gdkd_v2", alias = "GDKD_V2")]
    GdkdV2,
    #[serde(rename = "gdkd_v3", alias = "GDKD_V3")]
    GdkdV3,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Kd => "kd",
            Variant::Dkd => "dkd",
            Variant::Gdkd => "gdkd",
            Variant::GdkdN => "gdkd_n",
            Variant::Gdkd2 => "gdkd2",
            Variant::GdkdV1 => "gdkd_v1",
            Variant::GdkdV2 => "gdkd_v2",
            Variant::GdkdV3 => "gdkd_v3",
        }
    }

    /// Variants whose partition is the teacher top-k split.
    pub fn uses_topk(self) -> bool {
        matches!(
            self,
            Variant::Gdkd | Variant::GdkdV1 | Variant::GdkdV2 | Variant::GdkdV3
        )
    }
}

/// Class isolated by the two-group `gdkd2` loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// Teacher argmax: the GDKD-top1 loss.
    TeacherTop,
    /// Ground-truth label: DKD with `alpha = 1`.
    Target,
}

/// Distillation loss selection and hyperparameters.
///
/// Deserializes from JSON with every field optional; omitted fields take the
/// defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub variant: Variant,
    pub temperature: f64,
    /// Size of the teacher top-k group.
    pub k: usize,
    pub w0: f64,
    pub w1: f64,
    pub w2: f64,
    /// `[w0, w1, .., wn]` for [`Variant::GdkdN`].
    pub weights: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub m1: Option<f64>,
    pub m2: Option<f64>,
    pub beta2: f64,
    pub anchor: Anchor,
    /// Z-score both logit vectors before the distillation term.
    pub use_ls: bool,
    pub ls_scale: f64,
    pub ce_weight: f64,
    pub warmup_epochs: usize,
    /// Multiply the distillation term by `T^2`.
    pub scale_t_squared: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Gdkd,
            temperature: 4.0,
            k: 5,
            w0: 1.0,
            w1: 2.0,
            w2: 8.0,
            weights: Vec::new(),
            alpha: 1.0,
            beta: 8.0,
            m1: None,
            m2: None,
            beta2: 8.0,
            anchor: Anchor::TeacherTop,
            use_ls: false,
            ls_scale: 9.0,
            ce_weight: 1.0,
            warmup_epochs: 20,
            scale_t_squared: true,
        }
    }
}

impl LossConfig {
    pub fn kd(temperature: f64) -> Self {
        Self {
            variant: Variant::Kd,
            temperature,
            ..Self::default()
        }
    }

    pub fn gdkd(k: usize, w0: f64, w1: f64, w2: f64, temperature: f64) -> Self {
        Self {
            variant: Variant::Gdkd,
            k,
            w0,
            w1,
            w2,
            temperature,
            ..Self::default()
        }
    }

    pub fn dkd(alpha: f64, beta: f64, temperature: f64) -> Self {
        Self {
            variant: Variant::Dkd,
            alpha,
            beta,
            temperature,
            ..Self::default()
        }
    }

    /// Drops `T^2` scaling, LS and warmup so the loss is the bare equation.
    pub fn raw(mut self) -> Self {
        self.scale_t_squared = false;
        self.use_ls = false;
        self.warmup_epochs = 0;
        self
    }

    /// Multiplier applied to the distillation term on top of warmup.
    pub fn distill_scale(&self) -> f64 {
        let mut s = 1.0;
        if self.scale_t_squared {
            s *= self.temperature * self.temperature;
        }
        if self.use_ls {
            s *= self.ls_scale;
        }
        s
    }

    /// Linear distillation warmup over 0-indexed epochs.
    pub fn warmup_factor(&self, epoch: usize) -> f64 {
        if self.warmup_epochs == 0 {
            1.0
        } else {
            (epoch as f64 / self.warmup_epochs as f64).min(1.0)
        }
    }

    /// Checks hyperparameters; with `num_classes` also checks `k`.
    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        let named = [
            ("w0", self.w0),
            ("w1", self.w1),
            ("w2", self.w2),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("beta2", self.beta2),
            ("ls_scale", self.ls_scale),
            ("m1", self.m1.unwrap_or(0.0)),
            ("m2", self.m2.unwrap_or(0.0)),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if let Some(w) = self.weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::Config(format!("weights must be >= 0, got {w}")));
        }
        if !self.ce_weight.is_finite() {
            return Err(Error::Config("ce_weight must be finite".into()));
        }
        match self.variant {
            Variant::GdkdV1 if self.m1.is_none() || self.m2.is_none() => {
                return Err(Error::Config("gdkd_v1 needs both m1 and m2".into()))
            }
            Variant::GdkdV2 if self.m2.is_none() => {
                return Err(Error::Config("gdkd_v2 needs m2".into()))
            }
            Variant::GdkdV3 if self.m1.is_none() => {
                return Err(Error::Config("gdkd_v3 needs m1".into()))
            }
            Variant::GdkdN if !(self.weights.len() == 3 || self.weights.len() == 4) => {
                return Err(Error::Config(format!(
                    "gdkd_n needs 3 weights (top-k split) or 4 (three-way split), got {}",
                    self.weights.len()
                )))
            }
            _ => {}
        }
        if let Some(c) = num_classes {
            let needs_k = self.variant.uses_topk() || self.variant == Variant::GdkdN;
            let min_k = if self.variant == Variant::GdkdN && self.weights.len() == 4 {
                2
            } else {
                1
            };
            if needs_k && (self.k < min_k || self.k >= c) {
                return Err(Error::Config(format!(
                    "k must be in [{min_k}, {}] for {c} classes, got {}",
                    c - 1,
                    self.k
                )));
            }
        }
        Ok(())
    }
}
