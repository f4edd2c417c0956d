//! Layered key/value settings: defaults < config file < `ALA_*` environment <
//! command-line flags.
//!
//! A `variant` key expands into the four switch keys at its own layer, so a
//! higher layer can still flip a single switch, and an explicit switch in the
//! same layer beats the variant.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use ala_core::attack::{AttackConfig, Variant};
use ala_core::dataset::CorpusSpec;
use ala_core::model::TrainConfig;

use crate::CliError;

pub const ATTACK_KEYS: &[&str] = &[
    "variant", "segments", "iters", "alpha", "beta", "kappa", "init_lo", "init_hi", "range", "dist", "non_mono",
    "rand", "seed", "workers",
];
pub const TRAIN_KEYS: &[&str] = &["arch", "classes", "epochs", "lr", "batch_size", "momentum", "lr_decay", "seed"];
pub const CORPUS_KEYS: &[&str] = &["classes", "per_class", "size", "seed"];
pub const CORRUPT_KEYS: &[&str] = &["levels"];

const SWITCH_KEYS: [&str; 4] = ["range", "dist", "non_mono", "rand"];

pub type Layer = BTreeMap<String, String>;

fn known(key: &str) -> bool {
    [ATTACK_KEYS, TRAIN_KEYS, CORPUS_KEYS, CORRUPT_KEYS].iter().any(|ks| ks.contains(&key))
}

fn normalize(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str, origin: &str) -> Result<Layer, CliError> {
    let mut layer = Layer::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("{origin}:{}: expected key = value", n + 1)))?;
        let key = normalize(k);
        if !known(&key) {
            return Err(CliError::usage(format!("{origin}:{}: unknown key {key:?}", n + 1)));
        }
        layer.insert(key, v.trim().to_string());
    }
    Ok(layer)
}

pub fn read_config(path: &Path) -> Result<Layer, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text, &path.display().to_string())
}

/// `ALA_<KEY>` variables for the given keys.
pub fn env_layer(keys: &[&str]) -> Layer {
    keys.iter()
        .filter_map(|k| {
            std::env::var(format!("ALA_{}", k.to_ascii_uppercase()))
                .ok()
                .map(|v| (k.to_string(), v))
        })
        .collect()
}

fn expand_variant(layer: &Layer) -> Result<Layer, CliError> {
    let mut out = layer.clone();
    if let Some(v) = layer.get("variant") {
        let variant: Variant = v.parse().map_err(|e: ala_core::Error| CliError::usage(e.to_string()))?;
        let s = variant.switches();
        for (key, on) in SWITCH_KEYS.iter().zip([s.range, s.dist, s.non_monotonic, s.random_init]) {
            out.entry(key.to_string()).or_insert_with(|| on.to_string());
        }
    }
    Ok(out)
}

/// Merge layers from lowest to highest precedence, keeping only `keys`.
pub fn resolve(keys: &[&str], layers: &[&Layer]) -> Result<Layer, CliError> {
    let mut merged = Layer::new();
    for layer in layers {
        for (k, v) in expand_variant(layer)? {
            if keys.contains(&k.as_str()) {
                merged.insert(k, v);
            }
        }
    }
    Ok(merged)
}

pub fn parse_value<T: FromStr>(layer: &Layer, key: &str) -> Result<Option<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    layer
        .get(key)
        .map(|v| {
            v.parse::<T>()
                .map_err(|e| CliError::usage(format!("invalid value {v:?} for {key}: {e}")))
        })
        .transpose()
}

pub fn parse_bool(layer: &Layer, key: &str) -> Result<Option<bool>, CliError> {
    layer
        .get(key)
        .map(|v| match v.to_ascii_lowercase().as_str() {
            "1" | "true" | "yes" | "on" => Ok(true),
            "0" | "false" | "no" | "off" => Ok(false),
            _ => Err(CliError::usage(format!("invalid boolean {v:?} for {key}"))),
        })
        .transpose()
}

pub fn parse_levels(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| CliError::usage(format!("invalid level {s:?}: {e}")))
        })
        .collect()
}

macro_rules! apply {
    ($layer:expr, $target:expr, $($key:literal => $field:ident),* $(,)?) => {
        $(if let Some(v) = parse_value($layer, $key)? { $target.$field = v; })*
    };
}

pub fn attack_config(layer: &Layer) -> Result<(AttackConfig, usize), CliError> {
    let mut c = AttackConfig::default();
    apply!(layer, c,
        "segments" => segments, "iters" => iterations, "alpha" => alpha, "beta" => beta,
        "kappa" => kappa, "init_lo" => init_lo, "init_hi" => init_hi, "seed" => seed);
    if let Some(v) = parse_bool(layer, "range")? {
        c.use_range_constraint = v;
    }
    if let Some(v) = parse_bool(layer, "dist")? {
        c.use_dist_constraint = v;
    }
    if let Some(v) = parse_bool(layer, "non_mono")? {
        c.non_monotonic = v;
    }
    if let Some(v) = parse_bool(layer, "rand")? {
        c.random_init = v;
    }
    c.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let workers = parse_value(layer, "workers")?.unwrap_or(0);
    Ok((c, workers))
}

pub fn train_config(layer: &Layer, base: TrainConfig) -> Result<TrainConfig, CliError> {
    let mut c = base;
    apply!(layer, c,
        "classes" => classes, "epochs" => epochs, "lr" => lr, "batch_size" => batch_size,
        "momentum" => momentum, "lr_decay" => lr_decay, "seed" => seed);
    Ok(c)
}

pub fn corpus_spec(layer: &Layer) -> Result<CorpusSpec, CliError> {
    let d = CorpusSpec::default();
    let classes = parse_value(layer, "classes")?.unwrap_or(d.classes);
    let per_class = parse_value(layer, "per_class")?.unwrap_or(d.per_class);
    let size = parse_value(layer, "size")?.unwrap_or(d.size);
    let seed = parse_value(layer, "seed")?.unwrap_or(d.seed);
    CorpusSpec::new(classes, per_class, size, seed).map_err(|e| CliError::usage(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(pairs: &[(&str, &str)]) -> Layer {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn config_file_syntax() {
        let l = parse_config("# comment\nsegments = 32\ninit-lo=-0.1 # trailing\n\n", "f").unwrap();
        assert_eq!(l, layer(&[("segments", "32"), ("init_lo", "-0.1")]));
        assert!(parse_config("bogus = 1", "f").is_err());
        assert!(parse_config("segments 32", "f").is_err());
    }

    #[test]
    fn later_layers_win() {
        let file = layer(&[("alpha", "0.1"), ("iters", "5")]);
        let flags = layer(&[("alpha", "0.9")]);
        let r = resolve(ATTACK_KEYS, &[&file, &flags]).unwrap();
        let (c, _) = attack_config(&r).unwrap();
        assert_eq!((c.alpha, c.iterations), (0.9, 5));
    }

    #[test]
    fn variant_expands_and_yields_to_explicit_switches() {
        let r = resolve(ATTACK_KEYS, &[&layer(&[("variant", "ala0")])]).unwrap();
        let (c, _) = attack_config(&r).unwrap();
        assert!(!c.use_range_constraint && !c.use_dist_constraint && !c.non_monotonic && !c.random_init);

        let same_layer = layer(&[("variant", "ala7"), ("rand", "false")]);
        let (c, _) = attack_config(&resolve(ATTACK_KEYS, &[&same_layer]).unwrap()).unwrap();
        assert!(c.use_range_constraint && !c.random_init);

        // a variant on a higher layer overrides switches from a lower one
        let low = layer(&[("range", "false")]);
        let high = layer(&[("variant", "ala1")]);
        let (c, _) = attack_config(&resolve(ATTACK_KEYS, &[&low, &high]).unwrap()).unwrap();
        assert!(c.use_range_constraint);
    }

    #[test]
    fn defaults_are_published_values() {
        let (c, workers) = attack_config(&Layer::new()).unwrap();
        assert_eq!(c, AttackConfig::default());
        assert_eq!(workers, 0);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let r = layer(&[("alpha", "fast")]);
        assert!(matches!(attack_config(&r), Err(CliError::Usage(_))));
        let r = layer(&[("alpha", "-1")]);
        assert!(matches!(attack_config(&r), Err(CliError::Usage(_))));
        assert!(resolve(ATTACK_KEYS, &[&layer(&[("variant", "ala9")])]).is_err());
        assert!(parse_levels("0.1,x").is_err());
        assert_eq!(parse_levels("-0.1, 0.2").unwrap(), vec![-0.1, 0.2]);
    }
}
