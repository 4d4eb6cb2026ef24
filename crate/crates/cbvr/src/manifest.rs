//! Flat `key = value` configuration files and run manifests. A manifest
//! records everything needed to reproduce a run byte-for-byte: the
//! command, master seed, resolved configuration, and input paths — but
//! never output locations or worker counts, which must not affect results.

use crate::model::write_atomic;
use crate::{content_hash, Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

/// Parses flat `key = value` text: one pair per line, `#` comments and
/// blank lines ignored, duplicate keys rejected.
pub fn parse_kv_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))
        })?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
        }
    }
    Ok(map)
}

/// Renders pairs as sorted `key = value` lines.
pub fn format_kv(map: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

pub fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv_text(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_kv_file(path: &Path, map: &BTreeMap<String, String>) -> Result<()> {
    write_atomic(path, format_kv(map).as_bytes())
}

/// Errors (config, exit code 2) when `map` holds keys outside `allowed`,
/// naming every offender.
pub fn reject_unknown_keys(map: &BTreeMap<String, String>, allowed: &[&str]) -> Result<()> {
    let unknown: Vec<&str> = map
        .keys()
        .map(String::as_str)
        .filter(|k| !allowed.contains(k))
        .collect();
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))))
    }
}

/// Parses `map[key]` into `T`, or returns `default` when absent.
pub fn get_parsed<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T> {
    match map.get(key) {
        None => Ok(default),
        Some(raw) => raw
            .parse()
            .map_err(|_| Error::Config(format!("config key '{key}': cannot parse '{raw}'"))),
    }
}

/// Everything needed to replay a run. Output directory and thread count
/// are deliberately absent: results must not depend on either.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub scenario: Option<String>,
    /// Crate version that produced the run.
    pub version: String,
    /// Resolved effective configuration.
    pub config: BTreeMap<String, String>,
    /// Logical input name → path as given on the command line.
    pub inputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            seed,
            scenario: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
        }
    }

    /// Canonical flat text form; [`RunManifest::hash`] covers exactly this.
    pub fn to_text(&self) -> String {
        let mut map = BTreeMap::new();
        map.insert("command".to_string(), self.command.clone());
        map.insert("seed".to_string(), self.seed.to_string());
        if let Some(s) = &self.scenario {
            map.insert("scenario".to_string(), s.clone());
        }
        map.insert("version".to_string(), self.version.clone());
        for (k, v) in &self.config {
            map.insert(format!("config.{k}"), v.clone());
        }
        for (k, v) in &self.inputs {
            map.insert(format!("input.{k}"), v.clone());
        }
        format_kv(&map)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let map = parse_kv_text(text)?;
        let mut manifest = RunManifest {
            command: String::new(),
            seed: 0,
            scenario: None,
            version: String::new(),
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
        };
        for (k, v) in map {
            if let Some(rest) = k.strip_prefix("config.") {
                manifest.config.insert(rest.to_string(), v);
            } else if let Some(rest) = k.strip_prefix("input.") {
                manifest.inputs.insert(rest.to_string(), v);
            } else {
                match k.as_str() {
                    "command" => manifest.command = v,
                    "seed" => {
                        manifest.seed = v.parse().map_err(|_| {
                            Error::Config(format!("manifest seed '{v}' is not an integer"))
                        })?
                    }
                    "scenario" => manifest.scenario = Some(v),
                    "version" => manifest.version = v,
                    other => {
                        return Err(Error::Config(format!("unknown manifest key '{other}'")))
                    }
                }
            }
        }
        if manifest.command.is_empty() {
            return Err(Error::Config("manifest missing 'command'".into()));
        }
        Ok(manifest)
    }

    /// Hex digest of the canonical text.
    pub fn hash(&self) -> String {
        format!("{:016x}", content_hash(self.to_text().as_bytes()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_spacing() {
        let map = parse_kv_text("# header\n\n a = 1 \nb=two words\n").unwrap();
        assert_eq!(map.len(), 2);
        assert_eq!(map["a"], "1");
        assert_eq!(map["b"], "two words");
    }

    #[test]
    fn rejects_duplicates_and_malformed_lines() {
        assert!(parse_kv_text("a = 1\na = 2\n").is_err());
        assert!(parse_kv_text("just a line\n").is_err());
        assert!(parse_kv_text("= orphan value\n").is_err());
    }

    #[test]
    fn kv_round_trips_through_text() {
        let mut map = BTreeMap::new();
        map.insert("zeta".to_string(), "0.5".to_string());
        map.insert("alpha".to_string(), "x y".to_string());
        assert_eq!(parse_kv_text(&format_kv(&map)).unwrap(), map);
    }

    #[test]
    fn unknown_keys_are_named_in_the_error() {
        let map = parse_kv_text("n_events = 3\ntypo_key = 9\n").unwrap();
        let err = reject_unknown_keys(&map, &["n_events"]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("typo_key"));
        assert!(reject_unknown_keys(&map, &["n_events", "typo_key"]).is_ok());
    }

    #[test]
    fn get_parsed_applies_defaults_and_validates() {
        let map = parse_kv_text("k = 7\nbad = x\n").unwrap();
        assert_eq!(get_parsed(&map, "k", 0usize).unwrap(), 7);
        assert_eq!(get_parsed(&map, "missing", 42usize).unwrap(), 42);
        assert!(get_parsed(&map, "bad", 0usize).is_err());
    }

    #[test]
    fn manifest_round_trips_and_hash_tracks_content() {
        let mut m = RunManifest::new("gen", 42);
        m.scenario = Some("100Ex".into());
        m.config.insert("n_events".into(), "20".into());
        m.inputs.insert("data".into(), "out/data".into());
        let back = RunManifest::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        let h1 = m.hash();
        let mut m2 = m.clone();
        m2.config.insert("n_events".into(), "21".into());
        assert_ne!(h1, m2.hash());
        assert_eq!(h1, back.hash());
    }

    #[test]
    fn manifest_rejects_unknown_fields() {
        assert!(RunManifest::from_text("command = gen\nwat = 1\n").is_err());
        assert!(RunManifest::from_text("seed = 1\n").is_err());
    }
}
