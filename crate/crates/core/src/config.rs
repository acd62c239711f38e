//! Fit configuration: one flat key=value text format shared by the CLI
//! config file and the model header.
//!
//! Keys mirror the config structure with dotted paths (`graph.k`,
//! `diffusion.t`, ...). Unknown keys are errors so typos cannot silently
//! fall back to defaults.

use crate::error::{Error, Result};
use crate::graph::GraphConfig;
use crate::landmarks::{LandmarkConfig, Pool, Selection};
use crate::nystrom::ExtensionMode;
use crate::spectral::{DiffusionConfig, Normalization};

#[derive(Debug, Clone, PartialEq)]
pub struct ProtoConfig {
    /// Prototypes per class.
    pub m: usize,
    /// Epsilon of the similarity transform log((d^2 + 1)/(d^2 + eps)).
    pub epsilon_sim: f64,
    /// Train the nonnegative head weights (otherwise fixed at 1).
    pub head_trainable: bool,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        Self {
            m: 10,
            epsilon_sim: 1e-4,
            head_trainable: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub graph: GraphConfig,
    pub diffusion: DiffusionConfig,
    pub landmarks: LandmarkConfig,
    pub nystrom_mode: ExtensionMode,
    pub prototypes: ProtoConfig,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            graph: GraphConfig::default(),
            diffusion: DiffusionConfig::default(),
            landmarks: LandmarkConfig::default(),
            nystrom_mode: ExtensionMode::Row,
            prototypes: ProtoConfig::default(),
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.graph.k < 1 {
            return fail("graph.k must be at least 1");
        }
        if self.graph.epsilon_sigma <= 0.0 {
            return fail("graph.epsilon_sigma must be positive");
        }
        if self.diffusion.t < 1 {
            return fail("t must be a positive integer");
        }
        if self.diffusion.l < 1 {
            return fail("diffusion.l must be at least 1");
        }
        if self.diffusion.zca_epsilon <= 0.0 {
            return fail("diffusion.zca_epsilon must be positive");
        }
        if self.landmarks.count < self.graph.k + 1 {
            return fail("landmarks.count must be at least graph.k + 1");
        }
        if self.landmarks.kmeans_max_iters < 1 {
            return fail("landmarks.kmeans_max_iters must be at least 1");
        }
        if self.prototypes.m < 1 {
            return fail("prototypes.m must be at least 1");
        }
        if self.prototypes.epsilon_sim <= 0.0 || self.prototypes.epsilon_sim >= 1.0 {
            return fail("prototypes.epsilon_sim must lie in (0, 1)");
        }
        Ok(())
    }

    /// Canonical text form; stable key order, round-trips through
    /// [`parse_config`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("graph.k", self.graph.k.to_string());
        kv("graph.local_scaling", self.graph.local_scaling.to_string());
        kv("graph.epsilon_sigma", self.graph.epsilon_sigma.to_string());
        kv(
            "graph.connect_components",
            self.graph.connect_components.to_string(),
        );
        kv("diffusion.t", self.diffusion.t.to_string());
        kv("diffusion.l", self.diffusion.l.to_string());
        kv(
            "diffusion.normalization",
            self.diffusion.normalization.as_str().to_string(),
        );
        kv(
            "diffusion.zca_epsilon",
            self.diffusion.zca_epsilon.to_string(),
        );
        kv(
            "landmarks.selection",
            self.landmarks.selection.as_str().to_string(),
        );
        kv("landmarks.pool", self.landmarks.pool.as_str().to_string());
        kv("landmarks.count", self.landmarks.count.to_string());
        kv(
            "landmarks.update_every",
            self.landmarks.update_every.to_string(),
        );
        kv("landmarks.seed", self.landmarks.seed.to_string());
        kv(
            "landmarks.kmeans_max_iters",
            self.landmarks.kmeans_max_iters.to_string(),
        );
        kv("nystrom_mode", self.nystrom_mode.as_str().to_string());
        kv("prototypes.m", self.prototypes.m.to_string());
        kv(
            "prototypes.epsilon_sim",
            self.prototypes.epsilon_sim.to_string(),
        );
        kv(
            "prototypes.head_trainable",
            self.prototypes.head_trainable.to_string(),
        );
        kv("seed", self.seed.to_string());
        out
    }
}

/// Parse the key=value config text over the defaults. Unknown keys and
/// malformed values are errors.
pub fn parse_config(text: &str) -> Result<FitConfig> {
    let mut cfg = FitConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1))
        })?;
        apply_key(&mut cfg, key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_key(cfg: &mut FitConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "graph.k" => cfg.graph.k = parse_count(key, value)?,
        "graph.local_scaling" => cfg.graph.local_scaling = parse_bool(key, value)?,
        "graph.epsilon_sigma" => cfg.graph.epsilon_sigma = parse_real(key, value)?,
        "graph.connect_components" => cfg.graph.connect_components = parse_bool(key, value)?,
        "diffusion.t" => {
            cfg.diffusion.t = value
                .parse::<u32>()
                .ok()
                .filter(|&t| t >= 1)
                .ok_or_else(|| Error::InvalidConfig("t must be a positive integer".into()))?;
        }
        "diffusion.l" => cfg.diffusion.l = parse_count(key, value)?,
        "diffusion.normalization" => {
            cfg.diffusion.normalization = match value {
                "none" => Normalization::None,
                "energy" => Normalization::Energy,
                "zca" => Normalization::Zca,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "{key}: unknown normalization '{other}' (none|energy|zca)"
                    )))
                }
            }
        }
        "diffusion.zca_epsilon" => cfg.diffusion.zca_epsilon = parse_real(key, value)?,
        "landmarks.selection" => {
            cfg.landmarks.selection = match value {
                "random" => Selection::Random,
                "kmeans" => Selection::Kmeans,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "{key}: unknown selection '{other}' (random|kmeans)"
                    )))
                }
            }
        }
        "landmarks.pool" => {
            cfg.landmarks.pool = match value {
                "per_class" => Pool::PerClass,
                "global" => Pool::Global,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "{key}: unknown pool '{other}' (per_class|global)"
                    )))
                }
            }
        }
        "landmarks.count" => cfg.landmarks.count = parse_count(key, value)?,
        "landmarks.update_every" => {
            cfg.landmarks.update_every = value.parse::<usize>().map_err(|_| {
                Error::InvalidConfig(format!("{key}: expected a nonnegative integer"))
            })?
        }
        "landmarks.seed" => cfg.landmarks.seed = parse_seed(key, value)?,
        "landmarks.kmeans_max_iters" => cfg.landmarks.kmeans_max_iters = parse_count(key, value)?,
        "nystrom_mode" => {
            cfg.nystrom_mode = match value {
                "row" => ExtensionMode::Row,
                "paper" => ExtensionMode::Paper,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "{key}: unknown mode '{other}' (row|paper)"
                    )))
                }
            }
        }
        "prototypes.m" => cfg.prototypes.m = parse_count(key, value)?,
        "prototypes.epsilon_sim" => cfg.prototypes.epsilon_sim = parse_real(key, value)?,
        "prototypes.head_trainable" => cfg.prototypes.head_trainable = parse_bool(key, value)?,
        "seed" => cfg.seed = parse_seed(key, value)?,
        other => {
            return Err(Error::InvalidConfig(format!("unknown key '{other}'")));
        }
    }
    Ok(())
}

fn parse_count(key: &str, value: &str) -> Result<usize> {
    value
        .parse::<usize>()
        .ok()
        .filter(|&v| v >= 1)
        .ok_or_else(|| Error::InvalidConfig(format!("{key}: expected a positive integer")))
}

fn parse_seed(key: &str, value: &str) -> Result<u64> {
    value
        .parse::<u64>()
        .map_err(|_| Error::InvalidConfig(format!("{key}: expected a nonnegative integer")))
}

fn parse_real(key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::InvalidConfig(format!("{key}: expected a real number")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        other => Err(Error::InvalidConfig(format!(
            "{key}: expected a boolean, got '{other}'"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let cfg = FitConfig::default();
        assert_eq!(cfg.graph.k, 20);
        assert!(cfg.graph.local_scaling);
        assert_eq!(cfg.diffusion.t, 4);
        assert_eq!(cfg.diffusion.l, 32);
        assert_eq!(cfg.diffusion.normalization, Normalization::Zca);
        assert_eq!(cfg.landmarks.selection, Selection::Kmeans);
        assert_eq!(cfg.landmarks.pool, Pool::PerClass);
        assert_eq!(cfg.landmarks.count, 768);
        assert_eq!(cfg.landmarks.update_every, 20);
        assert_eq!(cfg.prototypes.m, 10);
        assert_eq!(cfg.nystrom_mode, ExtensionMode::Row);
        cfg.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = FitConfig::default();
        cfg.graph.k = 7;
        cfg.diffusion.t = 2;
        cfg.diffusion.normalization = Normalization::Energy;
        cfg.landmarks.count = 64;
        cfg.landmarks.selection = Selection::Random;
        cfg.nystrom_mode = ExtensionMode::Paper;
        cfg.seed = 1234;
        let parsed = parse_config(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn fractional_time_is_rejected_with_the_documented_message() {
        let err = parse_config("diffusion.t = 2.5").unwrap_err();
        assert!(err.to_string().contains("t must be a positive integer"));
        let err = parse_config("diffusion.t = 0").unwrap_err();
        assert!(err.to_string().contains("t must be a positive integer"));
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = parse_config("graph.kk = 3").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = parse_config("# comment\n\n  graph.k = 5\nlandmarks.count = 9\n").unwrap();
        assert_eq!(cfg.graph.k, 5);
        assert_eq!(cfg.landmarks.count, 9);
    }

    #[test]
    fn count_below_k_plus_one_is_rejected() {
        let err = parse_config("graph.k = 20\nlandmarks.count = 20").unwrap_err();
        assert!(err.to_string().contains("landmarks.count"));
    }
}
