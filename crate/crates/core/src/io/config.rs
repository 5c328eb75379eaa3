//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::objectives::EqDenominator;
use crate::trainer::TrainConfig;

/// Every accepted key, in echo order.
pub const CONFIG_KEYS: &[&str] = &[
    "variant",
    "n_experts",
    "epochs",
    "batch_size",
    "lr0",
    "weight_decay",
    "momentum",
    "tau",
    "lambda",
    "eq_denominator",
    "seed",
    "dataset.n_images",
    "dataset.n_classes",
    "dataset.image_size",
    "checkpoint_every",
    "out_dir",
];

fn parse_value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("{key}: cannot parse {raw:?} as {}", std::any::type_name::<T>()),
    })
}

fn set_key(cfg: &mut TrainConfig, line: usize, key: &str, raw: &str) -> Result<()> {
    match key {
        "variant" => {
            cfg.model.variant = raw.parse().map_err(|e: Error| Error::Parse {
                line,
                msg: format!("{key}: {e}"),
            })?
        }
        "n_experts" => cfg.model.n_experts = parse_value(line, key, raw)?,
        "epochs" => cfg.epochs = parse_value(line, key, raw)?,
        "batch_size" => cfg.batch_size = parse_value(line, key, raw)?,
        "lr0" => cfg.lr0 = parse_value(line, key, raw)?,
        "weight_decay" => cfg.weight_decay = parse_value(line, key, raw)?,
        "momentum" => cfg.momentum = parse_value(line, key, raw)?,
        "tau" => cfg.loss.tau = parse_value(line, key, raw)?,
        "lambda" => cfg.loss.lambda = parse_value(line, key, raw)?,
        "eq_denominator" => {
            cfg.loss.eq_denominator = match raw {
                "targets" => EqDenominator::Targets,
                "predictions" => EqDenominator::Predictions,
                _ => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("{key}: expected targets or predictions, got {raw:?}"),
                    })
                }
            }
        }
        "seed" => cfg.seed = parse_value(line, key, raw)?,
        "dataset.n_images" => cfg.dataset.n_images = parse_value(line, key, raw)?,
        "dataset.n_classes" => cfg.dataset.n_classes = parse_value(line, key, raw)?,
        "dataset.image_size" => cfg.dataset.image_size = parse_value(line, key, raw)?,
        "checkpoint_every" => cfg.checkpoint_every = parse_value(line, key, raw)?,
        "out_dir" => cfg.out_dir = PathBuf::from(raw),
        _ => {
            return Err(Error::Parse {
                line,
                msg: format!("unknown key {key:?}"),
            })
        }
    }
    Ok(())
}

/// Which key a validation failure refers to, for line attribution.
fn check_constraints(cfg: &TrainConfig) -> std::result::Result<(), (&'static str, String)> {
    let fail = |key: &'static str, msg: String| Err((key, msg));
    if !(cfg.loss.tau > 0.0 && cfg.loss.tau.is_finite()) {
        return fail("tau", format!("tau must be > 0, got {}", cfg.loss.tau));
    }
    if !(cfg.loss.lambda >= 0.0 && cfg.loss.lambda.is_finite()) {
        return fail("lambda", format!("lambda must be >= 0, got {}", cfg.loss.lambda));
    }
    if !(cfg.lr0 > 0.0 && cfg.lr0.is_finite()) {
        return fail("lr0", format!("lr0 must be > 0, got {}", cfg.lr0));
    }
    if !(0.0..1.0).contains(&cfg.momentum) {
        return fail("momentum", format!("momentum must lie in [0, 1), got {}", cfg.momentum));
    }
    if !(cfg.weight_decay >= 0.0 && cfg.weight_decay.is_finite()) {
        return fail(
            "weight_decay",
            format!("weight_decay must be >= 0, got {}", cfg.weight_decay),
        );
    }
    if cfg.epochs == 0 {
        return fail("epochs", "epochs must be >= 1".into());
    }
    if cfg.batch_size < 2 {
        return fail("batch_size", format!("batch_size must be >= 2, got {}", cfg.batch_size));
    }
    if cfg.model.n_experts == 0 {
        return fail("n_experts", "n_experts must be >= 1".into());
    }
    if let Err(e) = cfg.dataset_spec().validate() {
        let key = if cfg.dataset.image_size < 8 {
            "dataset.image_size"
        } else if cfg.dataset.n_classes == 0 || cfg.dataset.n_classes > 6 {
            "dataset.n_classes"
        } else {
            "dataset.n_images"
        };
        return fail(key, e.to_string());
    }
    if cfg.dataset.n_images < cfg.batch_size {
        return fail(
            "dataset.n_images",
            format!(
                "{} images cannot fill a batch of {}",
                cfg.dataset.n_images, cfg.batch_size
            ),
        );
    }
    Ok(())
}

/// Parses config text. Blank lines and `#` comments are ignored; repeated
/// keys are an error.
pub fn parse_config_str(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen: Vec<(&str, usize)> = Vec::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected key = value, got {content:?}"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if let Some((_, first)) = seen.iter().find(|(k, _)| *k == key) {
            return Err(Error::Parse {
                line,
                msg: format!("{key} already set on line {first}"),
            });
        }
        set_key(&mut cfg, line, key, value)?;
        seen.push((key, line));
    }
    check_constraints(&cfg).map_err(|(key, msg)| Error::Parse {
        line: seen.iter().find(|(k, _)| *k == key).map_or(0, |(_, l)| *l),
        msg: format!("{key}: {msg}"),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<TrainConfig> {
    parse_config_str(&std::fs::read_to_string(path)?)
}

/// Effective value of every key, in [`CONFIG_KEYS`] order.
pub fn config_echo(cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    let eq = match cfg.loss.eq_denominator {
        EqDenominator::Targets => "targets",
        EqDenominator::Predictions => "predictions",
    };
    vec![
        ("variant", cfg.model.variant.to_string()),
        ("n_experts", cfg.model.n_experts.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("lr0", cfg.lr0.to_string()),
        ("weight_decay", cfg.weight_decay.to_string()),
        ("momentum", cfg.momentum.to_string()),
        ("tau", cfg.loss.tau.to_string()),
        ("lambda", cfg.loss.lambda.to_string()),
        ("eq_denominator", eq.to_string()),
        ("seed", cfg.seed.to_string()),
        ("dataset.n_images", cfg.dataset.n_images.to_string()),
        ("dataset.n_classes", cfg.dataset.n_classes.to_string()),
        ("dataset.image_size", cfg.dataset.image_size.to_string()),
        ("checkpoint_every", cfg.checkpoint_every.to_string()),
        ("out_dir", cfg.out_dir.display().to_string()),
    ]
}

/// Renders the config back into parseable text.
pub fn config_text(cfg: &TrainConfig) -> String {
    config_echo(cfg)
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Variant;

    #[test]
    fn empty_is_defaults() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.model.variant, Variant::Mmoe);
        assert_eq!(cfg.model.n_experts, 4);
        assert_eq!(cfg.loss.tau, 0.2);
        assert_eq!(cfg.loss.lambda, 1.0);
    }

    #[test]
    fn negative_tau_names_the_key() {
        let err = parse_config_str("seed = 3\ntau = -1\n").unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("tau"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let err = parse_config_str("lambada = 1").unwrap_err();
        assert!(
            matches!(err, Error::Parse { line: 1, ref msg } if msg.contains("lambada")),
            "{err:?}"
        );
    }

    #[test]
    fn type_errors_and_duplicates() {
        assert!(matches!(
            parse_config_str("epochs = ten"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_config_str("seed=1\nseed=2"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_config_str("just words"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn echo_round_trips() {
        let text = "variant = separate\nepochs = 3 # short\nlambda=0.5\ndataset.n_images = 120\nout_dir = /tmp/x\n";
        let cfg = parse_config_str(text).unwrap();
        assert_eq!(parse_config_str(&config_text(&cfg)).unwrap(), cfg);
        let keys: Vec<&str> = config_echo(&cfg).iter().map(|(k, _)| *k).collect();
        assert_eq!(keys, CONFIG_KEYS);
    }
}
