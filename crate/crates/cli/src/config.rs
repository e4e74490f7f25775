//! TOML config files. Keys override the built-in generator defaults; any
//! table may be partial. The string `"off"` disables an optional stage.
//!
//! ```toml
//! lambda = 1.0
//!
//! [contrast]
//! m_mu = 0.5
//!
//! [severe.noise]
//! sigma_255 = { min = 5.0, max = 15.0 }
//!
//! [mild]
//! bias = "off"
//! ```

use std::path::Path;

use anatsynth::generator::GeneratorConfig;
use serde_json::Value;

use crate::error::{CliError, CliResult};

/// Tables whose keys are data rather than field names.
const OPEN_TABLES: &[&str] = &["contrast.label_shift"];

fn merge(base: &mut Value, overlay: Value, path: &str) -> CliResult<()> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None if OPEN_TABLES.contains(&path) => {
                        b.insert(k, v);
                    }
                    None => return Err(CliError::usage(format!("unknown config key `{key}`"))),
                }
            }
        }
        (slot, Value::String(s)) if s == "off" => *slot = Value::Null,
        (slot, v) => *slot = v,
    }
    Ok(())
}

pub fn parse_generator_config(text: &str) -> CliResult<GeneratorConfig> {
    let overlay: toml::Value = toml::from_str(text).map_err(|e| CliError::usage(e.to_string()))?;
    let overlay = serde_json::to_value(overlay).map_err(|e| CliError::usage(e.to_string()))?;
    let mut base = serde_json::to_value(GeneratorConfig::default()).expect("defaults serialise");
    merge(&mut base, overlay, "")?;
    let cfg: GeneratorConfig = serde_json::from_value(base).map_err(|e| CliError::usage(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_generator_config(path: Option<&Path>) -> CliResult<GeneratorConfig> {
    match path {
        None => Ok(GeneratorConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            parse_generator_config(&text).map_err(|e| e.context(p.display()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anatsynth::corruption::Range;

    #[test]
    fn unknown_keys_are_rejected() {
        let e = parse_generator_config("[severe.noise]\nsigma = 3.0\n").unwrap_err();
        assert_eq!(e.code, crate::error::EXIT_USAGE);
        assert!(e.message.contains("severe.noise.sigma"), "{}", e.message);
        assert!(parse_generator_config("lamda = 1.0\n").is_err());
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse_generator_config("").unwrap(), GeneratorConfig::default());
    }

    #[test]
    fn partial_overrides_and_off() {
        let cfg = parse_generator_config(
            "lambda = 2.0\n[severe.noise]\nsigma_255 = { min = 1.0, max = 2.0 }\n[mild]\nbias = \"off\"\n[contrast.label_shift]\n3 = 0.1\n",
        )
        .unwrap();
        assert_eq!(cfg.lambda, 2.0);
        assert_eq!(cfg.severe.noise.unwrap().sigma_255, Range::new(1.0, 2.0));
        assert!(cfg.mild.bias.is_none());
        assert!(cfg.medium.bias.is_some());
        assert_eq!(cfg.contrast.label_shift[&3], 0.1);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        assert_eq!(parse_generator_config("lambda = -1.0").unwrap_err().code, crate::error::EXIT_USAGE);
        assert_eq!(parse_generator_config("lambda = ").unwrap_err().code, crate::error::EXIT_USAGE);
    }
}
