//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Keys may appear once. Lists are
//! comma separated (`channels = 32,64`).

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered key/value pairs parsed from text.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn render_pairs(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Parses one scalar value, naming the key on failure.
pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(|s| parse_value(key, s.trim()))
        .collect()
}

pub fn render_list<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// A configuration section that can be read from and written to pairs.
pub trait KeyValues {
    /// Applies one pair; `Ok(false)` when the key belongs to another section.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;

    fn pairs(&self) -> Vec<(String, String)>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_duplicates() {
        let pairs = parse_pairs("# header\na = 1\n\nb= x,y # trailing\n").unwrap();
        assert_eq!(
            pairs,
            vec![("a".into(), "1".into()), ("b".into(), "x,y".into())]
        );
        assert!(parse_pairs("a = 1\na = 2\n").is_err());
        assert!(parse_pairs("novalue\n").is_err());
        assert!(parse_pairs(" = 3\n").is_err());
    }

    #[test]
    fn lists() {
        assert_eq!(parse_list::<usize>("c", "32, 64").unwrap(), vec![32, 64]);
        assert!(parse_list::<usize>("c", "32,x").is_err());
        assert_eq!(render_list(&[1, 2]), "1,2");
    }
}
