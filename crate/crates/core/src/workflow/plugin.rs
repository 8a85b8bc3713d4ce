use std::collections::{BTreeMap, BTreeSet};

use serde_json::Value;

use super::model::{ParamSpec, ParamType, PluginDescriptor};
use super::CoreError;

const RESERVED: [&str; 2] = ["input", "output"];

fn ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn schema(msg: String) -> CoreError {
    CoreError::SchemaInvalid(msg)
}

/// Checks a descriptor before registration.
pub fn validate_descriptor(d: &PluginDescriptor) -> Result<(), CoreError> {
    let name_ok = !d.name.is_empty()
        && d.name.len() <= 64
        && d.name.chars().all(|c| c.is_ascii_alphanumeric() || "_.-".contains(c));
    if !name_ok {
        return Err(schema(format!("bad plugin name `{}`", d.name)));
    }
    if d.version.trim().is_empty() || d.version.contains(char::is_whitespace) {
        return Err(schema(format!("bad version `{}`", d.version)));
    }
    if d.template.command.is_empty() || d.template.command[0].is_empty() {
        return Err(schema("empty command".into()));
    }
    if d.template.timeout_secs == 0 {
        return Err(schema("timeout must be positive".into()));
    }
    let mut seen = BTreeSet::new();
    for p in &d.params {
        if !ident(&p.name) || RESERVED.contains(&p.name.as_str()) {
            return Err(schema(format!("bad parameter name `{}`", p.name)));
        }
        if !seen.insert(p.name.as_str()) {
            return Err(schema(format!("parameter `{}` declared twice", p.name)));
        }
        let kind = ParamType::parse(&p.kind)
            .ok_or_else(|| schema(format!("parameter `{}` has unknown type `{}`", p.name, p.kind)))?;
        if kind == ParamType::Choice {
            if p.choices.is_empty() {
                return Err(schema(format!("choice parameter `{}` has no choices", p.name)));
            }
        } else if !p.choices.is_empty() {
            return Err(schema(format!("choices given for non-choice parameter `{}`", p.name)));
        }
        if let Some(default) = &p.default {
            coerce(p, kind, default).map_err(|why| schema(format!("default for `{}`: {why}", p.name)))?;
        }
    }
    for key in d.template.arg_map.keys() {
        if !seen.contains(key.as_str()) {
            return Err(schema(format!("arg_map names undeclared parameter `{key}`")));
        }
    }
    Ok(())
}

fn coerce(p: &ParamSpec, kind: ParamType, v: &Value) -> Result<Value, String> {
    match kind {
        ParamType::Text => v
            .as_str()
            .map(|s| Value::String(s.into()))
            .ok_or("expected text".into()),
        ParamType::Int => match v {
            Value::Number(n) if n.is_i64() => Ok(v.clone()),
            Value::String(s) => s
                .trim()
                .parse::<i64>()
                .map(Value::from)
                .map_err(|_| "expected an integer".into()),
            _ => Err("expected an integer".into()),
        },
        ParamType::Real => {
            let x = match v {
                Value::Number(n) => n.as_f64(),
                Value::String(s) => crate::index::parse_number(s),
                _ => None,
            };
            x.filter(|x| x.is_finite())
                .map(Value::from)
                .ok_or("expected a number".into())
        }
        ParamType::Flag => match v {
            Value::Bool(_) => Ok(v.clone()),
            Value::String(s) if s == "true" || s == "false" => Ok(Value::Bool(s == "true")),
            _ => Err("expected true or false".into()),
        },
        ParamType::Choice => match v.as_str() {
            Some(s) if p.choices.iter().any(|c| c == s) => Ok(Value::String(s.into())),
            _ => Err(format!("expected one of {}", p.choices.join(", "))),
        },
    }
}

/// Type-checks supplied values and fills in defaults.
pub fn resolve_params(
    d: &PluginDescriptor,
    given: &BTreeMap<String, Value>,
) -> Result<BTreeMap<String, Value>, CoreError> {
    for name in given.keys() {
        if !d.params.iter().any(|p| &p.name == name) {
            return Err(CoreError::ParamValidation {
                field: name.clone(),
                reason: "unknown parameter".into(),
            });
        }
    }
    let mut out = BTreeMap::new();
    for p in &d.params {
        let kind = ParamType::parse(&p.kind).ok_or_else(|| schema(p.kind.clone()))?;
        let supplied = given.get(&p.name).filter(|v| !v.is_null());
        let value = match (supplied, &p.default) {
            (Some(v), _) => Some(v),
            (None, Some(d)) => Some(d),
            (None, None) if p.required => {
                return Err(CoreError::ParamValidation {
                    field: p.name.clone(),
                    reason: "required".into(),
                })
            }
            (None, None) => None,
        };
        if let Some(v) = value {
            let v = coerce(p, kind, v).map_err(|reason| CoreError::ParamValidation {
                field: p.name.clone(),
                reason,
            })?;
            out.insert(p.name.clone(), v);
        }
    }
    Ok(out)
}

fn render_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Expands the execution template into a job command line.
pub fn render_command(d: &PluginDescriptor, params: &BTreeMap<String, Value>) -> Vec<String> {
    let mut out = Vec::new();
    for token in &d.template.command {
        let whole = token
            .strip_prefix('{')
            .and_then(|t| t.strip_suffix('}'))
            .filter(|n| d.params.iter().any(|p| p.name == *n));
        if let Some(name) = whole {
            if let Some(v) = params.get(name) {
                out.push(render_value(v));
            }
            continue;
        }
        let mut t = token.clone();
        for p in &d.params {
            let ph = format!("{{{}}}", p.name);
            if t.contains(&ph) {
                let v = params.get(&p.name).map(render_value).unwrap_or_default();
                t = t.replace(&ph, &v);
            }
        }
        out.push(t);
    }
    for p in &d.params {
        let (Some(flag), Some(v)) = (d.template.arg_map.get(&p.name), params.get(&p.name)) else {
            continue;
        };
        match v {
            Value::Bool(true) => out.push(flag.clone()),
            Value::Bool(false) => {}
            v => {
                out.push(flag.clone());
                out.push(render_value(v));
            }
        }
    }
    out
}
