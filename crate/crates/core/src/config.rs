//! TOML configuration files (backend bindings, role prompts, rubric
//! texts) and config fingerprinting.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendBinding, BackendKind, DecodingSettings};
use crate::judge::{Rubric, RubricKind};
use crate::protocol::RolePromptSet;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// On-disk configuration. Every section is optional; missing role
/// bindings fall back to `[defender]`, and missing prompt or rubric texts
/// fall back to the embedded defaults.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct ConfigFile {
    pub defender: Option<BindingSection>,
    pub debater: Option<BindingSection>,
    pub host: Option<BindingSection>,
    /// Solver override for the chain-of-thought baseline, for setups
    /// where that method runs on a different backend.
    pub cot: Option<BindingSection>,
    pub judge: Option<BindingSection>,
    pub prompts: Option<PromptsSection>,
    pub rubrics: Option<RubricsSection>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct BindingSection {
    pub kind: Option<BackendKind>,
    pub endpoint: Option<String>,
    pub model_id: Option<String>,
    pub auth_env: Option<String>,
    pub temperature: Option<f64>,
    pub max_output_tokens: Option<u32>,
    pub timeout_secs: Option<u64>,
    pub max_attempts: Option<u32>,
    pub base_backoff_ms: Option<u64>,
    pub script_path: Option<String>,
}

impl BindingSection {
    pub fn resolve(&self) -> BackendBinding {
        BackendBinding {
            kind: self.kind.unwrap_or(BackendKind::OpenAiCompatible),
            endpoint: self.endpoint.clone().unwrap_or_default(),
            model_id: self.model_id.clone().unwrap_or_default(),
            auth_env: self.auth_env.clone(),
            decoding: DecodingSettings {
                temperature: self.temperature.unwrap_or(0.0),
                max_output_tokens: self.max_output_tokens,
            },
            timeout_secs: self.timeout_secs.unwrap_or(120),
            max_attempts: self.max_attempts.unwrap_or(3),
            base_backoff_ms: self.base_backoff_ms.unwrap_or(250),
            script_path: self.script_path.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct PromptsSection {
    pub defender: Option<String>,
    pub debater: Option<String>,
    pub host: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct RubricsSection {
    pub reasoning: Option<String>,
    pub coherence: Option<String>,
    pub holistic: Option<String>,
}

impl ConfigFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }

    /// Role prompts with config overrides applied over the defaults.
    pub fn role_prompts(&self) -> Result<RolePromptSet, ConfigError> {
        let mut prompts = RolePromptSet::default();
        if let Some(section) = &self.prompts {
            if let Some(t) = &section.defender {
                prompts.defender_system = t.clone();
            }
            if let Some(t) = &section.debater {
                prompts.debater_system = t.clone();
            }
            if let Some(t) = &section.host {
                prompts.host_system = t.clone();
            }
        }
        prompts.validate().map_err(ConfigError::Invalid)?;
        Ok(prompts)
    }

    /// Rubric set with config overrides applied over the defaults.
    pub fn rubric_set(&self) -> Vec<Rubric> {
        let mut rubrics = Rubric::default_set();
        if let Some(section) = &self.rubrics {
            for rubric in &mut rubrics {
                let text = match rubric.kind {
                    RubricKind::Reasoning => &section.reasoning,
                    RubricKind::Coherence => &section.coherence,
                    RubricKind::Holistic => &section.holistic,
                };
                if let Some(t) = text {
                    rubric.instruction_text = t.clone();
                }
            }
        }
        rubrics
    }

    pub fn binding_for_role(&self, role: &str) -> Option<&BindingSection> {
        let section = match role {
            "defender" => self.defender.as_ref(),
            "debater" => self.debater.as_ref(),
            "host" => self.host.as_ref(),
            "cot" => self.cot.as_ref(),
            "judge" => self.judge.as_ref(),
            _ => None,
        };
        section.or(self.defender.as_ref())
    }
}

/// SHA-256 over the canonical JSON form of `value`. Objects serialize
/// with sorted keys, so the digest is stable under field reordering.
pub fn fingerprint_value<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_value(value).expect("fingerprint value serializes");
    let text = serde_json::to_string(&canonical).expect("canonical json serializes");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_stable_under_field_reordering() {
        let a: serde_json::Value =
            serde_json::from_str(r#"{"method":"for","rounds":3,"seed":17}"#).unwrap();
        let b: serde_json::Value =
            serde_json::from_str(r#"{"seed":17,"method":"for","rounds":3}"#).unwrap();
        assert_eq!(fingerprint_value(&a), fingerprint_value(&b));

        let c: serde_json::Value =
            serde_json::from_str(r#"{"seed":18,"method":"for","rounds":3}"#).unwrap();
        assert_ne!(fingerprint_value(&a), fingerprint_value(&c));
    }

    #[test]
    fn config_parses_and_defaults() {
        let text = r#"
            [defender]
            kind = "openai_compatible"
            endpoint = "http://localhost:8000/v1/chat/completions"
            model_id = "llama-3.2-1b"
            auth_env = "FORP_API_KEY"
            temperature = 0.0

            [prompts]
            debater = "Ask only short questions. Output must be questions only."
        "#;
        let config: ConfigFile = toml::from_str(text).unwrap();
        let defender = config.binding_for_role("defender").unwrap().resolve();
        assert_eq!(defender.model_id, "llama-3.2-1b");
        assert_eq!(defender.timeout_secs, 120);
        assert_eq!(defender.max_attempts, 3);
        // Debater falls back to the defender binding.
        let debater = config.binding_for_role("debater").unwrap().resolve();
        assert_eq!(debater.endpoint, defender.endpoint);

        let prompts = config.role_prompts().unwrap();
        assert!(prompts.debater_system.contains("questions only"));
        assert!(prompts.defender_system.contains("Defender"));
    }

    #[test]
    fn rubric_overrides_apply() {
        let text = r#"
            [rubrics]
            reasoning = "Custom reasoning rubric."
        "#;
        let config: ConfigFile = toml::from_str(text).unwrap();
        let rubrics = config.rubric_set();
        assert_eq!(rubrics[0].instruction_text, "Custom reasoning rubric.");
        assert!(rubrics[1].instruction_text.contains("coherent"));
    }

    #[test]
    fn invalid_prompts_rejected() {
        let text = r#"
            [prompts]
            debater = ""
        "#;
        let config: ConfigFile = toml::from_str(text).unwrap();
        assert!(config.role_prompts().is_err());
    }
}
