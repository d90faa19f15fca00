//! Command-line driver: experiment configuration, runs, comparisons and
//! synthetic data dumps.

pub mod commands;
pub mod config;
pub mod validate;

use config::{parse_with_overrides, ExperimentConfig, ParseError, OUTPUT_DIR_ENV};

/// Parses `text` with the output directory from the environment layered on
/// top, then the command-line overrides on top of that.
pub fn load_config(
    text: &str,
    env_output: Option<String>,
    flags: &[(String, String)],
) -> Result<ExperimentConfig, ParseError> {
    let mut overrides: Vec<(String, String)> = env_output.map(|d| ("output.dir".to_string(), d)).into_iter().collect();
    overrides.extend(flags.iter().cloned());
    parse_with_overrides(text, &overrides)
}

pub fn env_output_dir() -> Option<String> {
    std::env::var(OUTPUT_DIR_ENV).ok().filter(|s| !s.is_empty())
}
