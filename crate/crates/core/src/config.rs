//! `key = value` configuration files.
//!
//! Keys are dotted paths into a serde-serializable config
//! (`dataset.codec.n_bins = 20`). Values may be numbers, `true`/`false`,
//! `none`, bracketed number lists (`[0, 0.05, 0.1]`), bare strings, or a
//! product with 2pi written as `2pi*X` (angular frequencies from Hz).
//! Blank lines and `#` comments are ignored.

use std::f64::consts::TAU;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Number, Value};

use crate::error::{read_file, Error, Result};

/// One parsed `key = value` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Setting {
    pub key: String,
    pub value: Value,
    /// 1-based line number, 0 for settings from the command line.
    pub line: usize,
}

fn parse_number(s: &str) -> Option<f64> {
    let t = s.trim();
    let lower = t.to_ascii_lowercase();
    for prefix in ["2pi*", "2*pi*", "tau*"] {
        if let Some(rest) = lower.strip_prefix(prefix) {
            return rest.trim().parse::<f64>().ok().map(|v| TAU * v);
        }
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn number_value(v: f64) -> Value {
    if v.fract() == 0.0 && v.abs() < 9.0e15 {
        if v >= 0.0 {
            return Value::Number(Number::from(v as u64));
        }
        return Value::Number(Number::from(v as i64));
    }
    Number::from_f64(v).map_or(Value::Null, Value::Number)
}

/// Parses a value literal.
pub fn parse_value(raw: &str) -> Value {
    let s = raw.trim();
    match s.to_ascii_lowercase().as_str() {
        "true" => return Value::Bool(true),
        "false" => return Value::Bool(false),
        "none" | "null" => return Value::Null,
        _ => {}
    }
    if let Some(inner) = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
        let items: Vec<Value> = inner
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(parse_value)
            .collect();
        return Value::Array(items);
    }
    if let Some(v) = parse_number(s) {
        return number_value(v);
    }
    let unquoted = s
        .strip_prefix('"')
        .and_then(|r| r.strip_suffix('"'))
        .unwrap_or(s);
    Value::String(unquoted.to_string())
}

/// Parses `key = value` text.
pub fn parse_settings(text: &str) -> Result<Vec<Setting>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got `{content}`",
                i + 1
            ))
        })?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(Error::Config(format!("line {}: bad key `{key}`", i + 1)));
        }
        out.push(Setting {
            key: key.to_string(),
            value: parse_value(value),
            line: i + 1,
        });
    }
    Ok(out)
}

pub fn read_settings(path: &Path) -> Result<Vec<Setting>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Config(format!("{}: not UTF-8 text", path.display())))?;
    parse_settings(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Parses a command-line `key=value` override.
pub fn parse_override(arg: &str) -> Result<Setting> {
    let (key, value) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{arg}` is not key=value")))?;
    Ok(Setting {
        key: key.trim().to_string(),
        value: parse_value(value),
        line: 0,
    })
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for (depth, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "`{key}`: `{}` is not a section",
                parts[..depth].join(".")
            ))
        })?;
        if !obj.contains_key(*part) {
            let known: Vec<&String> = obj.keys().collect();
            return Err(Error::Config(format!(
                "unknown key `{key}` (expected one of {known:?})"
            )));
        }
        if depth + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked above");
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
    }
    Ok(())
}

/// Applies settings in order on top of `base` and returns the result.
pub fn apply<T: Serialize + DeserializeOwned>(base: &T, settings: &[Setting]) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    for s in settings {
        set_path(&mut v, &s.key, s.value.clone()).map_err(|e| match s.line {
            0 => e,
            n => Error::Config(format!("line {n}: {e}")),
        })?;
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("invalid configuration: {e}")))
}

/// Flattens a config into sorted `key = value` lines.
pub fn to_settings_text<T: Serialize>(cfg: &T) -> Result<String> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, child, out);
                }
            }
            Value::Null => out.push(format!("{prefix} = none")),
            Value::String(s) => out.push(format!("{prefix} = {s}")),
            other => out.push(format!("{prefix} = {other}")),
        }
    }
    let mut lines = Vec::new();
    walk("", &serde_json::to_value(cfg)?, &mut lines);
    lines.sort();
    Ok(lines.join("\n") + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetSpec;

    #[test]
    fn values() {
        assert_eq!(parse_value("4"), Value::from(4u64));
        assert_eq!(parse_value("-3"), Value::from(-3i64));
        assert_eq!(parse_value("0.05"), Value::from(0.05));
        assert_eq!(parse_value("2pi*1"), Value::from(TAU));
        assert_eq!(parse_value("none"), Value::Null);
        assert_eq!(
            parse_value("[0, 0.5]"),
            Value::from(vec![0u64.into(), Value::from(0.5)])
        );
        assert_eq!(parse_value("fig2"), Value::from("fig2"));
    }

    #[test]
    fn file_overrides_and_errors() {
        let text = "# atoms\ncodec.n_bins = 20\natom.omega_p = 2pi*3e6  # probe\nactive_bits = 3\n";
        let spec = apply(&DatasetSpec::default(), &parse_settings(text).unwrap()).unwrap();
        assert_eq!(spec.codec.n_bins, 20);
        assert_eq!(spec.active_bits, Some(3));
        assert!((spec.atom.omega_p - TAU * 3e6).abs() < 1e-6);
        assert!(apply(&spec, &[parse_override("codec.bogus=1").unwrap()]).is_err());
        assert!(apply(&spec, &[parse_override("codec.n_bins=-1").unwrap()]).is_err());
        assert!(parse_settings("just words").is_err());
    }

    #[test]
    fn settings_text_round_trips() {
        let spec = DatasetSpec {
            active_bits: Some(2),
            ..DatasetSpec::default()
        };
        let text = to_settings_text(&spec).unwrap();
        let back = apply(&DatasetSpec::default(), &parse_settings(&text).unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
