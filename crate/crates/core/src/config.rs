//! Flat `key = value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique.

use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config line {line}: {detail}")]
    Syntax { line: usize, detail: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Splits config text into `(line, key, value)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax { line: i + 1, detail: format!("expected key = value, got `{line}`") });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, detail: "empty key".into() });
        }
        if out.iter().any(|(_, key, _)| key == k) {
            return Err(ConfigError::Syntax { line: i + 1, detail: format!("duplicate key `{k}`") });
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue { key: key.into(), value: value.into() })
}

pub fn render(entries: &[(&str, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn entry(key: &'static str, value: impl Display) -> (&'static str, String) {
    (key, value.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_garbage() {
        let p = parse_pairs("# c\n\na = 1\n b=two \n").unwrap();
        assert_eq!(p, vec![(3, "a".into(), "1".into()), (4, "b".into(), "two".into())]);
        assert!(matches!(parse_pairs("a = 1\nnope"), Err(ConfigError::Syntax { line: 2, .. })));
        assert!(matches!(parse_pairs("a=1\na=2"), Err(ConfigError::Syntax { line: 2, .. })));
        assert!(parse_value::<usize>("a", "x").is_err());
    }
}
