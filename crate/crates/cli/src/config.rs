//! Run configuration: a JSON document naming the layers to process and the
//! calibration settings. Paths inside it are relative to the file itself.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fgmp::assignment::{Domain, Scope, Threshold};
use fgmp::clipping::ClipMode;
use fgmp::costmodel::EnergyCoefficients;
use fgmp::sensitivity::Policy;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, WithPath};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_policy")]
    pub policy: Policy,
    /// Target fraction of blocks kept in NVFP4.
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default = "default_scope")]
    pub scope: Scope,
    #[serde(default)]
    pub clip: ClipMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<ThresholdSet>,
    /// FP8 per-tensor scales for each layer's input activations, as decimal
    /// strings.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub activation_fp8_scales: BTreeMap<String, String>,
    #[serde(default)]
    pub energy: EnergyCoefficients,
    pub layers: Vec<LayerEntry>,
}

fn default_policy() -> Policy {
    Policy::Fisher
}

fn default_ratio() -> f64 {
    0.9
}

fn default_scope() -> Scope {
    Scope::Global
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    /// `.fgt` weight tensor, output channels by input channels.
    pub weight: PathBuf,
    /// Per-element fisher for the weight.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_fisher: Option<PathBuf>,
    /// Calibration activations, tokens by input channels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<PathBuf>,
    /// Per-channel fisher for the activations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_fisher: Option<PathBuf>,
    /// Per-channel mean squared activation, used to score weights under `oe`.
    /// Computed from `activation` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_magnitudes: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSet {
    pub weights: ThresholdValue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activations: Option<ThresholdValue>,
}

/// One decimal string for a global threshold, or one per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThresholdValue {
    Global(String),
    Local(BTreeMap<String, String>),
}

/// Shortest decimal that parses back to the same `f64`.
pub fn decimal(v: f64) -> String {
    format!("{v:?}")
}

pub fn parse_decimal(s: &str, what: &str) -> CliResult<f64> {
    match s.trim().parse::<f64>() {
        Ok(v) if !v.is_nan() => Ok(v),
        _ => Err(CliError::data(format!(
            "{what}: {s:?} is not a decimal number"
        ))),
    }
}

impl ThresholdValue {
    pub fn resolve(
        &self,
        layer: &str,
        domain: Domain,
        scope: Scope,
        ratio: f64,
    ) -> CliResult<Threshold> {
        let text = match self {
            ThresholdValue::Global(s) => s,
            ThresholdValue::Local(m) => m.get(layer).ok_or_else(|| {
                CliError::data(format!(
                    "no {} threshold for layer {layer:?}",
                    domain_name(domain)
                ))
            })?,
        };
        Ok(Threshold {
            value: parse_decimal(text, &format!("{} threshold", domain_name(domain)))?,
            scope,
            domain,
            ratio,
        })
    }
}

pub fn domain_name(d: Domain) -> &'static str {
    match d {
        Domain::Weights => "weight",
        Domain::Activations => "activation",
    }
}

/// A parsed config plus the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base: PathBuf,
    pub path: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let config: RunConfig = serde_json::from_str(&text).at(path)?;
        config.validate().at(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(LoadedConfig {
            config,
            base,
            path: path.to_path_buf(),
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    pub fn layer(&self, name: &str) -> CliResult<&LayerEntry> {
        self.config
            .layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| {
                CliError::data(format!("{}: no layer named {name:?}", self.path.display()))
            })
    }

    pub fn threshold(&self, layer: &str, domain: Domain) -> CliResult<Threshold> {
        let c = &self.config;
        let missing = || {
            CliError::data(format!(
                "{}: no {} thresholds; run `fgmp calibrate` first",
                self.path.display(),
                domain_name(domain)
            ))
        };
        let set = c.thresholds.as_ref().ok_or_else(missing)?;
        let value = match domain {
            Domain::Weights => &set.weights,
            Domain::Activations => set.activations.as_ref().ok_or_else(missing)?,
        };
        value.resolve(layer, domain, c.scope, c.ratio)
    }

    pub fn activation_scale(&self, layer: &str) -> CliResult<Option<f32>> {
        self.config
            .activation_fp8_scales
            .get(layer)
            .map(|s| parse_decimal(s, "activation fp8 scale").map(|v| v as f32))
            .transpose()
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(format!("ratio {} is outside [0, 1]", self.ratio));
        }
        self.energy.validate().map_err(|e| e.to_string())?;
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.layers {
            let ok = !l.name.is_empty()
                && l.name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
                && !l.name.starts_with('.');
            if !ok {
                return Err(format!(
                    "layer name {:?} must be non-empty and use [A-Za-z0-9_.-]",
                    l.name
                ));
            }
            if !seen.insert(l.name.as_str()) {
                return Err(format!("duplicate layer name {:?}", l.name));
            }
        }
        for (layer, s) in &self.activation_fp8_scales {
            match s.trim().parse::<f64>() {
                Ok(v) if v > 0.0 && v.is_finite() => {}
                _ => {
                    return Err(format!(
                        "activation fp8 scale for {layer:?} must be a positive decimal, got {s:?}"
                    ))
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"layers": [{"name": "fc1", "weight": "fc1.fgt"}]}"#;

    #[test]
    fn defaults_fill_in() {
        let c: RunConfig = serde_json::from_str(MINIMAL).unwrap();
        assert_eq!(c.policy, Policy::Fisher);
        assert_eq!(c.ratio, 0.9);
        assert_eq!(c.scope, Scope::Global);
        assert_eq!(c.clip, ClipMode::Dynmax);
        assert_eq!(c.energy, EnergyCoefficients::default());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = r#"{"layers": [], "ratios": 0.5}"#;
        assert!(serde_json::from_str::<RunConfig>(bad).is_err());
        let bad_layer = r#"{"layers": [{"name": "a", "weight": "w", "bias": "b"}]}"#;
        assert!(serde_json::from_str::<RunConfig>(bad_layer).is_err());
        let bad_energy = r#"{"layers": [], "energy": {"e99": 1.0}}"#;
        assert!(serde_json::from_str::<RunConfig>(bad_energy).is_err());
    }

    #[test]
    fn validation() {
        let mut c: RunConfig = serde_json::from_str(MINIMAL).unwrap();
        c.ratio = 1.5;
        assert!(c.validate().is_err());
        c.ratio = 0.5;
        c.layers.push(c.layers[0].clone());
        assert!(c.validate().is_err());
        c.layers.pop();
        c.layers[0].name = "../x".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn thresholds_round_trip_exactly() {
        for v in [0.1f64, 1.0 / 3.0, 1e-300, 6.02e23, 0.0, f64::INFINITY] {
            assert_eq!(
                parse_decimal(&decimal(v), "t").unwrap().to_bits(),
                v.to_bits()
            );
        }
        assert!(parse_decimal("NaN", "t").is_err());
        assert!(parse_decimal("abc", "t").is_err());
    }

    #[test]
    fn threshold_shapes() {
        let global: ThresholdValue = serde_json::from_str(r#""0.25""#).unwrap();
        let t = global
            .resolve("any", Domain::Weights, Scope::Global, 0.9)
            .unwrap();
        assert_eq!(t.value, 0.25);
        let local: ThresholdValue = serde_json::from_str(r#"{"a": "1.5"}"#).unwrap();
        assert_eq!(
            local
                .resolve("a", Domain::Activations, Scope::Local, 0.9)
                .unwrap()
                .value,
            1.5
        );
        assert!(local
            .resolve("b", Domain::Activations, Scope::Local, 0.9)
            .is_err());
    }

    #[test]
    fn serialization_round_trips() {
        let mut c: RunConfig = serde_json::from_str(MINIMAL).unwrap();
        c.thresholds = Some(ThresholdSet {
            weights: ThresholdValue::Global(decimal(0.125)),
            activations: Some(ThresholdValue::Local(BTreeMap::from([(
                "fc1".into(),
                decimal(2.0),
            )]))),
        });
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
