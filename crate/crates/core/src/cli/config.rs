//! Flat `key = value` run configuration.
//!
//! Keys are dotted paths into [`RunConfig`], e.g. `train.lr.positions` or
//! `refine.sds.scales.image`. Lists are comma separated, strings may be
//! quoted, and `#` starts a comment. Unknown keys are rejected.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::editor::FitConfig;
use crate::scene_io::SynthSpec;
use crate::sds::RefineConfig;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub edit: FitConfig,
    pub refine: RefineConfig,
    /// Per-request timeout for bridge calls.
    pub bridge_timeout_secs: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            train: TrainConfig::default(),
            edit: FitConfig::default(),
            refine: RefineConfig::default(),
            bridge_timeout_secs: 120,
        }
    }
}

/// A `key = value` pair and the line it came from (0 for command-line
/// overrides).
#[derive(Clone, Debug, PartialEq)]
pub struct Setting {
    pub key: String,
    pub value: String,
    pub line: usize,
}

fn strip_comment(s: &str) -> &str {
    if s.trim_start().starts_with('"') {
        // The closing quote ends the value; a comment may follow it.
        let start = s.find('"').expect("checked above");
        let mut escaped = false;
        for (i, ch) in s[start + 1..].char_indices() {
            match ch {
                '\\' if !escaped => escaped = true,
                '"' if !escaped => {
                    let end = start + 1 + i + 1;
                    return &s[..end];
                }
                _ => escaped = false,
            }
        }
        return s;
    }
    s.split_once('#').map_or(s, |(v, _)| v)
}

pub fn parse_settings(text: &str) -> Result<Vec<Setting>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("config line {}", i + 1), "expected `key = value`"))?;
        out.push(Setting {
            key: key.trim().to_string(),
            value: strip_comment(value).trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

/// Parses a command-line `KEY=VALUE` override.
pub fn parse_override(arg: &str) -> Result<Setting> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| Error::invalid("--set", format!("expected KEY=VALUE, got {arg:?}")))?;
    Ok(Setting {
        key: k.trim().to_string(),
        value: v.trim().to_string(),
        line: 0,
    })
}

fn parse_leaf(key: &str, current: &Value, raw: &str) -> Result<Value> {
    let bad = |why: String| Error::invalid(key, why);
    let number = |s: &str, whole: bool| -> Result<Value> {
        let s = s.trim();
        if whole {
            return s
                .parse::<u64>()
                .map(|u| Value::Number(u.into()))
                .map_err(|_| bad(format!("expected a whole number, got {s:?}")));
        }
        let f: f64 = s.parse().map_err(|_| bad(format!("expected a number, got {s:?}")))?;
        Number::from_f64(f)
            .map(Value::Number)
            .ok_or_else(|| bad(format!("{s} is not finite")))
    };
    match current {
        Value::Bool(_) => match raw {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            _ => Err(bad(format!("expected true or false, got {raw:?}"))),
        },
        Value::Number(n) => number(raw, n.is_u64()),
        Value::String(_) => {
            if raw.starts_with('"') {
                serde_json::from_str::<String>(raw)
                    .map(Value::String)
                    .map_err(|e| bad(format!("bad quoted string: {e}")))
            } else {
                Ok(Value::String(raw.to_string()))
            }
        }
        Value::Array(items) if items.iter().all(Value::is_number) => {
            let inner = raw.trim().trim_start_matches('[').trim_end_matches(']');
            if inner.trim().is_empty() {
                return Ok(Value::Array(Vec::new()));
            }
            inner
                .split(',')
                .map(|p| number(p, false))
                .collect::<Result<Vec<_>>>()
                .map(Value::Array)
        }
        _ => Err(bad("this setting is structured; set it through a JSON spec file".into())),
    }
}

fn apply_one(root: &mut Value, s: &Setting) -> Result<()> {
    let unknown = || {
        let field = if s.line > 0 {
            format!("config line {}", s.line)
        } else {
            "--set".to_string()
        };
        Error::invalid(field, format!("unknown configuration key {:?}", s.key))
    };
    let mut node = root;
    for part in s.key.split('.') {
        node = node.as_object_mut().and_then(|m| m.get_mut(part)).ok_or_else(unknown)?;
    }
    if node.is_object() {
        return Err(unknown());
    }
    *node = parse_leaf(&s.key, node, &s.value)?;
    Ok(())
}

/// Applies `settings` in order on top of `base`.
pub fn resolve(base: &RunConfig, settings: &[Setting]) -> Result<RunConfig> {
    let mut v = serde_json::to_value(base).expect("serializable");
    for s in settings {
        apply_one(&mut v, s)?;
    }
    serde_json::from_value(v).map_err(|e| Error::invalid("config", e.to_string()))
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        Value::Array(items) if items.iter().all(Value::is_number) => {
            let parts: Vec<String> = items.iter().map(Value::to_string).collect();
            out.push((prefix.to_string(), parts.join(", ")));
        }
        Value::Array(_) => {}
        Value::String(s) => out.push((prefix.to_string(), Value::String(s.clone()).to_string())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Every settable key with its value, in the file format.
pub fn to_text(config: &RunConfig) -> String {
    let mut pairs = Vec::new();
    flatten("", &serde_json::to_value(config).expect("serializable"), &mut pairs);
    let mut text = String::new();
    for (k, v) in pairs {
        text.push_str(&format!("{k} = {v}\n"));
    }
    text
}

/// Reads a config: either the flat format or a `run.json` record, whose
/// resolved `config` is reused verbatim.
pub fn load(path: &std::path::Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim_start().starts_with('{') {
        let v: Map<String, Value> = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let cfg = v
            .get("config")
            .cloned()
            .ok_or_else(|| Error::format(path, "JSON config needs a \"config\" object"))?;
        return serde_json::from_value(cfg).map_err(|e| Error::format(path, e.to_string()));
    }
    resolve(&RunConfig::default(), &parse_settings(&text)?)
}
