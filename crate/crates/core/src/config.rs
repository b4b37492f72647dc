//! Experiment configuration files.
//!
//! A config is a TOML document whose top-level keys and `[section]` tables
//! mirror [`PipelineConfig`]; anything left out keeps its built-in default.
//!
//! ```toml
//! seed = 3
//! gamma_sweep = [1.0, 10.0, 100.0]
//!
//! [data]
//! train = 6000
//! supervision_fraction = 0.1
//!
//! [hyperparams]
//! beta = 0.1
//!
//! [question_coding]
//! epochs = 12
//! patience = 3
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;

/// Parses a config document. The data seed follows the run seed unless the
/// `[data]` table sets it.
pub fn parse_config(text: &str) -> std::result::Result<PipelineConfig, String> {
    let value: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
    let data_seed_set = value
        .get("data")
        .and_then(|d| d.as_table())
        .is_some_and(|d| d.contains_key("seed"));
    let mut config: PipelineConfig = value.try_into().map_err(|e: toml::de::Error| e.to_string())?;
    if !data_seed_set {
        config.data.seed = config.seed;
    }
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|d| Error::format(path, d))
}

pub fn render_config(config: &PipelineConfig) -> String {
    toml::to_string(config).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_document_keeps_defaults() {
        let c = parse_config("seed = 4\n[hyperparams]\nbeta = 0.0\n[module_training]\nepochs = 2\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.data.seed, 4);
        assert_eq!(c.hyperparams.beta, 0.0);
        assert_eq!(c.hyperparams.alpha, 100.0);
        assert_eq!(c.module_training.epochs, 2);
        assert_eq!(c.module_training.patience, 3);
    }

    #[test]
    fn explicit_data_seed_wins() {
        let c = parse_config("seed = 4\n[data]\nseed = 9\n").unwrap();
        assert_eq!(c.data.seed, 9);
    }

    #[test]
    fn rendered_config_parses_back() {
        let mut c = PipelineConfig::default();
        c.gamma_sweep = vec![1.0, 10.0];
        c.question_coding.lr = Some(5e-4);
        assert_eq!(parse_config(&render_config(&c)).unwrap(), c);
    }

    #[test]
    fn unknown_shapes_are_errors() {
        assert!(parse_config("seed = \"x\"").is_err());
        assert!(parse_config("[hyperparams\n").is_err());
        assert!(parse_config("[hyperparams]\nbetta = 0.1\n").is_err());
    }
}
