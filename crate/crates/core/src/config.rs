//! Run configuration: documented defaults, JSON config files, and dotted-key
//! overrides with precedence defaults < file < overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::iicm::SteinConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config is not valid JSON: {0}")]
    Json(String),
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {details}")]
    TypeError { key: String, details: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stein: SteinConfig,
    /// Directory holding interactions.tsv, text.frf, image.frf.
    pub data: Option<String>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        if m.heads == 0 || m.d_hidden % m.heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "heads ({}) must divide d_hidden ({})",
                m.heads, m.d_hidden
            )));
        }
        if m.d_id == 0 || m.d_hidden == 0 || m.d_align == 0 || m.max_len == 0 {
            return Err(ConfigError::Invalid("model dimensions must be positive".into()));
        }
        if m.n_experts == 0 || m.n_layers == 0 || m.d_state == 0 || m.expand == 0 || m.conv_kernel == 0 {
            return Err(ConfigError::Invalid("model component counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(ConfigError::Invalid(format!("dropout {} outside [0, 1)", m.dropout)));
        }
        let t = &self.train;
        if t.lr_peak <= 0.0 || t.clip_norm <= 0.0 || t.batch_size == 0 || t.epochs == 0 {
            return Err(ConfigError::Invalid("training scalars must be positive".into()));
        }
        if t.n_neg == 0 {
            return Err(ConfigError::Invalid("n_neg must be at least 1".into()));
        }
        let s = &self.stein;
        if s.eta <= 0.0 || s.gamma < 0.0 || s.lambda < 0.0 {
            return Err(ConfigError::Invalid("stein parameters out of range".into()));
        }
        Ok(())
    }
}

/// Resolve a config: documented defaults, then the file, then `key=value`
/// overrides with dotted keys (e.g. `train.lr_peak=0.002`).
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut value = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)?;
        let file: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| ConfigError::Json(e.to_string()))?;
        merge(&mut value, &file);
    }
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| ConfigError::TypeError { key: ov.clone(), details: "expected key=value".into() })?;
        apply_override(&mut value, key, raw)?;
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(classify)?;
    cfg.validate()?;
    Ok(cfg)
}

fn classify(e: serde_json::Error) -> ConfigError {
    let msg = e.to_string();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        if let Some(field) = rest.split('`').next() {
            return ConfigError::UnknownKey(field.to_string());
        }
    }
    ConfigError::TypeError { key: "<config>".into(), details: msg }
}

/// Deep-merge `src` into `dst`; objects merge per key, everything else
/// replaces. Unknown keys survive the merge and are rejected at decode time.
fn merge(dst: &mut serde_json::Value, src: &serde_json::Value) {
    match (dst, src) {
        (serde_json::Value::Object(d), serde_json::Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (dst, src) => *dst = src.clone(),
    }
}

fn apply_override(value: &mut serde_json::Value, key: &str, raw: &str) -> Result<(), ConfigError> {
    let mut slot = value;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
    }
    // numbers/booleans parse as JSON; anything else is a string literal
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    *slot = parsed;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn empty_file_yields_documented_defaults() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{{}}").unwrap();
        let cfg = parse_config(Some(f.path()), &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        // the values pinned by the build contract
        assert_eq!(cfg.model.d_id, 128);
        assert_eq!(cfg.model.d_hidden, 256);
        assert_eq!(cfg.model.d_align, 512);
        assert_eq!(cfg.model.heads, 8);
        assert_eq!(cfg.model.n_experts, 4);
        assert_eq!(cfg.model.n_layers, 2);
        assert_eq!(cfg.model.d_state, 16);
        assert_eq!(cfg.model.expand, 2);
        assert_eq!(cfg.model.conv_kernel, 4);
        assert_eq!(cfg.model.max_len, 50);
        assert_eq!(cfg.model.dropout, 0.2);
        assert_eq!(cfg.train.lr_peak, 1e-3);
        assert_eq!(cfg.train.weight_decay, 0.01);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.train.epochs, 100);
        assert_eq!(cfg.train.warmup_steps, 2000);
        assert_eq!(cfg.train.clip_norm, 1.0);
        assert_eq!(cfg.stein.lambda, 1e-3);
        assert_eq!(cfg.stein.gamma, 0.1);
        assert_eq!(cfg.stein.eta, 0.01);
    }

    #[test]
    fn override_beats_file() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"train": {{"lr_peak": 0.01}}}}"#).unwrap();
        let cfg = parse_config(Some(f.path()), &["train.lr_peak=0.002".into()]).unwrap();
        assert_eq!(cfg.train.lr_peak, 0.002);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"foo": 1}}"#).unwrap();
        match parse_config(Some(f.path()), &[]) {
            Err(ConfigError::UnknownKey(k)) => assert_eq!(k, "foo"),
            other => panic!("expected UnknownKey, got {other:?}"),
        }
        match parse_config(None, &["model.bogus=1".into()]) {
            Err(ConfigError::UnknownKey(k)) => assert_eq!(k, "model.bogus"),
            other => panic!("expected UnknownKey, got {other:?}"),
        }
    }

    #[test]
    fn type_errors_name_the_problem() {
        assert!(matches!(
            parse_config(None, &["train.epochs=banana".into()]),
            Err(ConfigError::TypeError { .. })
        ));
    }

    #[test]
    fn enum_and_string_overrides() {
        let cfg = parse_config(None, &["train.loss=bpr".into(), "train.variant=no_moe".into()]).unwrap();
        assert_eq!(cfg.train.loss, crate::fusion::LossKind::Bpr);
        assert_eq!(cfg.train.variant, crate::crossmodal::Variant::NoMoe);
    }

    #[test]
    fn semantic_validation() {
        assert!(matches!(
            parse_config(None, &["model.heads=7".into()]),
            Err(ConfigError::Invalid(_))
        ));
    }
}
