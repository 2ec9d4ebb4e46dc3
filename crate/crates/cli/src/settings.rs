//! Resolution of model and training settings: built-in defaults, then a
//! `key=value` file, then flags. `MRE_SEED` only fills in a seed that neither
//! the file nor the flags give.

use std::path::Path;

use anyhow::Context;
use mre_core::checkpoint::config_hash;
use mre_core::config::parse_key_values;
use mre_core::train::TrainSpec;
use mre_core::{Model, ModelConfig, PassMode, Variant};

use crate::manifest::meta_value;
use crate::{env_seed, require_file, usage, CliResult, ModelArgs};

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainSpec,
}

fn read_settings_file(path: &Path) -> CliResult<String> {
    require_file(path, "config file")?;
    Ok(std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
}

impl Settings {
    pub fn resolve(args: &ModelArgs) -> CliResult<Settings> {
        let mut model = ModelConfig::default();
        let mut train = TrainSpec::default();
        let mut mode_given = args.mode.is_some();
        let (mut seed_given, mut train_seed_given) = (false, false);
        if let Some(path) = &args.config {
            let text = read_settings_file(path)?;
            let kv = parse_key_values(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            for (k, v) in &kv {
                let known = model.apply(k, v).map_err(|e| usage(e.to_string()))?
                    || train.apply(k, v).map_err(|e| usage(e.to_string()))?;
                if !known {
                    return Err(usage(format!("{}: unknown key `{k}`", path.display())));
                }
            }
            mode_given |= kv.contains_key("mode");
            seed_given = kv.contains_key("seed");
            train_seed_given = kv.contains_key("train_seed");
        }
        if let Some(seed) = args.seed.or(env_seed()?) {
            if args.seed.is_some() || !seed_given {
                model.seed = seed;
            }
            if args.seed.is_some() || !train_seed_given {
                train.seed = seed;
            }
        }
        if let Some(v) = args.variant {
            model.variant = v;
        }
        if let Some(m) = args.mode {
            model.mode = m;
        }
        if let Some(h) = args.head {
            model.head = h;
        }
        if model.variant == Variant::PosembFinal && !mode_given {
            model.mode = PassMode::PerPair;
        }
        if let Some(e) = args.epochs {
            train.epochs = e;
        }
        if let Some(lr) = args.lr {
            train.lr = lr;
        }
        if let Some(b) = args.batch {
            train.batch = b;
        }
        if let Some(t) = args.threads {
            train.threads = t;
        }
        model.validate().map_err(|e| usage(e.to_string()))?;
        train.validate().map_err(|e| usage(e.to_string()))?;
        Ok(Settings { model, train })
    }
}

/// Refuses when the settings in `path` disagree with the checkpoint, either
/// through a model key or a recorded `config_sha256`.
pub fn check_against(model: &Model, path: &Path) -> CliResult<()> {
    let text = read_settings_file(path)?;
    let kv = parse_key_values(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut expected = model.config.clone();
    let mut ignored = TrainSpec::default();
    for (k, v) in &kv {
        let known = expected.apply(k, v).map_err(|e| usage(e.to_string()))?
            || ignored.apply(k, v).map_err(|e| usage(e.to_string()))?;
        if !known {
            return Err(usage(format!("{}: unknown key `{k}`", path.display())));
        }
    }
    let differing: Vec<String> = expected
        .render()
        .lines()
        .zip(model.config.render().lines())
        .filter(|(a, b)| a != b)
        .map(|(a, b)| format!("{a} (checkpoint: {b})"))
        .collect();
    if !differing.is_empty() {
        return Err(usage(format!(
            "config does not match checkpoint, refusing to run: {}",
            differing.join(", ")
        )));
    }
    if let Some(want) = meta_value(&text, "config_sha256") {
        let got = config_hash(model);
        if want != got {
            return Err(usage(format!(
                "config hash mismatch, refusing to run: expected {want}, checkpoint has {got}"
            )));
        }
    }
    Ok(())
}
