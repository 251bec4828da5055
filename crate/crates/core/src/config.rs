//! Run configuration: TOML sections with dotted `key=value` overrides.
//!
//! Every key is optional; unknown keys are rejected with their dotted path.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{DgmError, Result};
use crate::masks::{MaskVariant, EMBEDDING_GRAD_CLAMP};
use crate::memory::{GanConfig, GpPoint, OutputActivation};
use crate::tensor::OptimizerKind;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub masks: MasksConfig,
    pub losses: LossesConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub replay: ReplayConfig,
    pub expansion: ExpansionConfig,
    pub optim: OptimConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: MaskVariant,
    pub latent_dim: usize,
    pub g_hidden: Vec<usize>,
    pub d_hidden: Vec<usize>,
    /// `tanh`, `linear`, or `auto` (tanh for images, linear otherwise).
    pub output_activation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MasksConfig {
    pub s_max: f64,
    pub gate_current: bool,
    /// Entrywise bound on embedding gradients; 0 disables clamping.
    pub embed_grad_clamp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossesConfig {
    pub lambda_ru: f64,
    pub lambda_gp: f64,
    pub n_critic: usize,
    pub gp_point: GpPoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Gaussian,
    Mnist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    /// Gaussian stream: samples per class before the train/test split.
    pub samples_per_class: usize,
    /// IDX directory; empty means `$DGM_DATA_DIR` or `data/mnist`.
    pub path: String,
    pub downsample: bool,
    /// Source labels in learning order; empty means `0..K`.
    pub order: Vec<usize>,
    /// Training samples kept per class; 0 keeps all.
    pub per_class_cap: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    /// Multiplier applied to the epoch count of each following task.
    pub epochs_growth: f64,
    /// Epochs of the joint-training baseline; 0 matches the total
    /// incremental budget.
    pub joint_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    pub enabled: bool,
    pub min_per_task: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionConfig {
    pub enabled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// `adam` or `sgd`.
    pub kind: String,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_embed: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: MaskVariant::Dgmw,
            latent_dim: 8,
            g_hidden: vec![32, 32],
            d_hidden: vec![64, 64],
            output_activation: "auto".into(),
        }
    }
}

impl Default for MasksConfig {
    fn default() -> Self {
        MasksConfig {
            s_max: 400.0,
            gate_current: true,
            embed_grad_clamp: EMBEDDING_GRAD_CLAMP,
        }
    }
}

impl Default for LossesConfig {
    fn default() -> Self {
        LossesConfig {
            lambda_ru: 2.0,
            lambda_gp: 10.0,
            n_critic: 5,
            gp_point: GpPoint::Interpolate,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Gaussian,
            num_tasks: 5,
            classes_per_task: 2,
            samples_per_class: 200,
            path: String::new(),
            downsample: true,
            order: Vec::new(),
            per_class_cap: 0,
        }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            epochs: 10,
            batches_per_epoch: 20,
            batch_size: 64,
            epochs_growth: 1.0,
            joint_epochs: 0,
        }
    }
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            enabled: true,
            min_per_task: 8,
        }
    }
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig { enabled: true }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: "adam".into(),
            lr_g: 1e-3,
            lr_d: 1e-3,
            lr_embed: 1e-2,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn config_err(key: impl Into<String>, reason: impl Into<String>) -> DgmError {
    DgmError::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

fn schema() -> Table {
    Table::try_from(RunConfig::default()).expect("default config serializes")
}

/// Rejects keys absent from the schema, naming the first one found.
fn check_keys(user: &Table, schema: &Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (schema.get(k), v) {
            (None, _) => return Err(config_err(path, "unknown key")),
            (Some(Value::Table(s)), Value::Table(u)) => check_keys(u, s, &path)?,
            (Some(Value::Table(_)), _) => return Err(config_err(path, "expected a section")),
            _ => {}
        }
    }
    Ok(())
}

fn leaves(t: &Table, prefix: &str, out: &mut Vec<(String, Value)>) {
    for (k, v) in t {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(inner) => leaves(inner, &path, out),
            other => out.push((path, other.clone())),
        }
    }
}

fn set_path(t: &mut Table, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = t;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(inner) => inner,
            _ => return Err(config_err(path, "not a section")),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_override_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or(Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

impl RunConfig {
    /// Parses TOML text and applies `key=value` overrides in order.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_err("<file>", e.message().to_string()))?;
        for ov in overrides {
            let (k, v) = ov
                .split_once('=')
                .ok_or_else(|| config_err(ov.as_str(), "override must look like key=value"))?;
            let k = k.trim();
            if k.is_empty() || k.split('.').any(str::is_empty) {
                return Err(config_err(k, "malformed key"));
            }
            set_path(&mut user, k, parse_override_value(v.trim()))?;
        }
        let schema = schema();
        check_keys(&user, &schema, "")?;
        let cfg = match RunConfig::deserialize(user.clone()) {
            Ok(c) => c,
            Err(e) => return Err(Self::locate_type_error(&user, &schema, e)),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn locate_type_error(user: &Table, schema: &Table, err: toml::de::Error) -> DgmError {
        let mut all = Vec::new();
        leaves(user, "", &mut all);
        for (path, value) in all {
            let mut probe = schema.clone();
            if set_path(&mut probe, &path, value).is_ok() && RunConfig::deserialize(probe).is_err()
            {
                return config_err(path, err.message().to_string());
            }
        }
        config_err("<file>", err.message().to_string())
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err("<file>", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.latent_dim == 0 {
            return Err(config_err("model.latent_dim", "must be positive"));
        }
        if m.g_hidden.is_empty() || m.g_hidden.contains(&0) {
            return Err(config_err(
                "model.g_hidden",
                "needs at least one positive width",
            ));
        }
        if m.d_hidden.contains(&0) {
            return Err(config_err("model.d_hidden", "widths must be positive"));
        }
        self.output_activation()?;
        if !(self.masks.s_max.is_finite() && self.masks.s_max > 1.0) {
            return Err(config_err("masks.s_max", "must exceed 1"));
        }
        for (key, v) in [
            ("masks.embed_grad_clamp", self.masks.embed_grad_clamp),
            ("losses.lambda_ru", self.losses.lambda_ru),
            ("losses.lambda_gp", self.losses.lambda_gp),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(config_err(key, "must be finite and non-negative"));
            }
        }
        if self.losses.n_critic == 0 {
            return Err(config_err("losses.n_critic", "must be positive"));
        }
        let d = &self.data;
        if d.num_tasks == 0 {
            return Err(config_err("data.num_tasks", "must be positive"));
        }
        if d.classes_per_task == 0 {
            return Err(config_err("data.classes_per_task", "must be positive"));
        }
        if d.kind == DataKind::Gaussian && d.samples_per_class < 2 {
            return Err(config_err("data.samples_per_class", "needs at least 2"));
        }
        let s = &self.schedule;
        if s.epochs == 0 {
            return Err(config_err("schedule.epochs", "must be positive"));
        }
        if s.batch_size == 0 {
            return Err(config_err("schedule.batch_size", "must be positive"));
        }
        let min_batches = if m.variant == MaskVariant::Dgmw { 2 } else { 1 };
        if s.batches_per_epoch < min_batches {
            return Err(config_err(
                "schedule.batches_per_epoch",
                format!("must be at least {min_batches}"),
            ));
        }
        if !(s.epochs_growth.is_finite() && s.epochs_growth >= 1.0) {
            return Err(config_err("schedule.epochs_growth", "must be at least 1"));
        }
        self.optimizer_kind()?;
        for (key, v) in [
            ("optim.lr_g", self.optim.lr_g),
            ("optim.lr_d", self.optim.lr_d),
            ("optim.lr_embed", self.optim.lr_embed),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(config_err(key, "must be positive"));
            }
        }
        Ok(())
    }

    pub fn output_activation(&self) -> Result<OutputActivation> {
        match self.model.output_activation.as_str() {
            "tanh" => Ok(OutputActivation::Tanh),
            "linear" => Ok(OutputActivation::Linear),
            "auto" => Ok(match self.data.kind {
                DataKind::Mnist => OutputActivation::Tanh,
                DataKind::Gaussian => OutputActivation::Linear,
            }),
            other => Err(config_err(
                "model.output_activation",
                format!("expected tanh, linear or auto, got {other}"),
            )),
        }
    }

    pub fn optimizer_kind(&self) -> Result<OptimizerKind> {
        match self.optim.kind.as_str() {
            "adam" => Ok(OptimizerKind::Adam {
                beta1: self.optim.beta1,
                beta2: self.optim.beta2,
                eps: self.optim.eps,
            }),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(config_err(
                "optim.kind",
                format!("expected adam or sgd, got {other}"),
            )),
        }
    }

    /// Epoch count of task `t` (1-based) under the growth multiplier.
    pub fn epochs_for_task(&self, t: usize) -> usize {
        let e = self.schedule.epochs as f64 * self.schedule.epochs_growth.powi(t as i32 - 1);
        (e.round() as usize).max(1)
    }

    pub fn gan_config(&self) -> Result<GanConfig> {
        Ok(GanConfig {
            n_critic: self.losses.n_critic,
            lambda_gp: self.losses.lambda_gp,
            lambda_ru: self.losses.lambda_ru,
            gp_point: self.losses.gp_point,
            gate_current: self.masks.gate_current,
            embed_grad_clamp: self.masks.embed_grad_clamp,
            batch_size: self.schedule.batch_size,
            replay_min_per_task: self.replay.min_per_task,
            lr_g: self.optim.lr_g,
            lr_d: self.optim.lr_d,
            lr_embed: self.optim.lr_embed,
            optimizer: self.optimizer_kind()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(r: Result<RunConfig>) -> String {
        match r {
            Err(DgmError::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(
            RunConfig::from_toml_str("", &[]).unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn sections_and_overrides() {
        let text = "seed = 3\n[model]\nvariant = \"dgma\"\n[replay]\nenabled = true\n";
        let cfg = RunConfig::from_toml_str(
            text,
            &[
                "replay.enabled=false".into(),
                "model.g_hidden=[16,8]".into(),
                "seed=11".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.model.variant, MaskVariant::Dgma);
        assert!(!cfg.replay.enabled);
        assert_eq!(cfg.model.g_hidden, vec![16, 8]);
        assert_eq!(cfg.seed, 11);
        let cfg = RunConfig::from_toml_str("", &["losses.gp_point=fake".into()]).unwrap();
        assert_eq!(cfg.losses.gp_point, GpPoint::Fake);
    }

    #[test]
    fn offending_keys_are_named() {
        assert_eq!(
            key_of(RunConfig::from_toml_str("[model]\nwidth = 3\n", &[])),
            "model.width"
        );
        assert_eq!(
            key_of(RunConfig::from_toml_str(
                "",
                &["replay.enbled=false".into()]
            )),
            "replay.enbled"
        );
        assert_eq!(key_of(RunConfig::from_toml_str("[bogus]\n", &[])), "bogus");
        assert_eq!(
            key_of(RunConfig::from_toml_str(
                "[schedule]\nepochs = \"many\"\n",
                &[]
            )),
            "schedule.epochs"
        );
        assert_eq!(
            key_of(RunConfig::from_toml_str("[masks]\ns_max = 0.5\n", &[])),
            "masks.s_max"
        );
        assert_eq!(
            key_of(RunConfig::from_toml_str("", &["noequals".into()])),
            "noequals"
        );
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.data.order = vec![3, 1];
        let back = RunConfig::from_toml_str(&cfg.to_toml_string(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn epoch_growth() {
        let cfg = RunConfig::from_toml_str("[schedule]\nepochs = 10\nepochs_growth = 1.2\n", &[])
            .unwrap();
        assert_eq!(cfg.epochs_for_task(1), 10);
        assert_eq!(cfg.epochs_for_task(2), 12);
        assert_eq!(cfg.epochs_for_task(3), 14);
    }
}
