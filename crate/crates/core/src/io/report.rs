//! Deterministic JSON reports: sorted keys, floats at 9 significant digits.

use std::path::Path;

use serde_json::{Map, Value};

use super::checkpoint::write_atomic;
use super::config::config_echo;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub const SIGNIFICANT_DIGITS: usize = 9;

/// Rounds to 9 significant decimal digits.
pub fn round_sig(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, v)
        .parse()
        .expect("formatted float parses")
}

/// Applies [`round_sig`] to every non-integer number in `v`.
pub fn round_floats(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = round_sig(n.as_f64().expect("f64 number"));
            serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(round_floats).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_floats(v))).collect()),
        other => other,
    }
}

/// Wraps `metrics` with the tool version, the command, the seed and the
/// effective configuration.
pub fn build_report(command: &str, cfg: &TrainConfig, metrics: Value) -> Value {
    let mut config = Map::new();
    for (k, v) in config_echo(cfg) {
        config.insert(k.to_string(), Value::String(v));
    }
    let mut top = Map::new();
    top.insert("tool".into(), Value::String("star".into()));
    top.insert("version".into(), Value::String(env!("CARGO_PKG_VERSION").into()));
    top.insert("command".into(), Value::String(command.into()));
    top.insert("seed".into(), Value::from(cfg.seed));
    top.insert("config".into(), Value::Object(config));
    top.insert("metrics".into(), metrics);
    round_floats(Value::Object(top))
}

pub fn report_string(report: &Value) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_report(path: &Path, report: &Value) -> Result<()> {
    write_atomic(path, report_string(report)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn rounding_keeps_nine_digits() {
        assert_eq!(round_sig(0.123456789123), 0.123456789);
        assert_eq!(round_sig(-98765.43210987), -98765.4321);
        assert_eq!(round_sig(1e-300 * 1.23456789876543), 1.2345679e-300);
        assert_eq!(round_sig(round_sig(2.0 / 3.0)), round_sig(2.0 / 3.0));
    }

    #[test]
    fn keys_are_sorted_and_values_survive_a_round_trip() {
        let r = build_report(
            "x",
            &TrainConfig::default(),
            json!({"zeta": 1.0 / 3.0, "alpha": [0.1, 2.5e-7], "n": 3}),
        );
        let text = report_string(&r).unwrap();
        assert!(text.find("\"alpha\"").unwrap() < text.find("\"zeta\"").unwrap());
        let back: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back["metrics"]["zeta"].as_f64().unwrap(), 0.333333333);
        assert_eq!(back["metrics"]["n"], 3);
    }
}
