//! Run configuration: built-in defaults, then a key=value file, then flags.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tspkit::kge::KgeKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Hake,
    Pairre,
}

impl From<Model> for KgeKind {
    fn from(m: Model) -> Self {
        match m {
            Model::Hake => KgeKind::Hake,
            Model::Pairre => KgeKind::PairRe,
        }
    }
}

/// Every knob a run can turn. `dim` and `lr` apply to whichever model the
/// command trains; unset means that model's own default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: Model,
    pub dim: Option<usize>,
    pub lr: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub negatives: usize,
    pub passes: usize,
    pub query_fraction: f64,
    pub theta_ht: f64,
    pub theta_hrt: f64,
    pub theta_kge: f64,
    pub theta_conf: f64,
    pub theta_hc: f64,
    pub theta_sim: f64,
    pub hops: usize,
    pub nmin: usize,
    pub nmax: usize,
    pub max_iter: usize,
    pub stop_ratio: f64,
    pub walks: usize,
    pub rule_len: usize,
    pub entity_attn: bool,
    pub relation_attn: bool,
    pub people: usize,
    pub families: usize,
    /// Let the baselines learn from valid triples too.
    pub train_with_valid: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: Model::Hake,
            dim: None,
            lr: None,
            epochs: 100,
            batch_size: 512,
            negatives: 16,
            passes: 100,
            query_fraction: 0.2,
            theta_ht: 0.3,
            theta_hrt: 1.0,
            theta_kge: 100.0,
            theta_conf: 0.85,
            theta_hc: 0.05,
            theta_sim: 0.8,
            hops: 2,
            nmin: 30,
            nmax: 150,
            max_iter: 40,
            stop_ratio: 0.2,
            walks: 200_000,
            rule_len: 3,
            entity_attn: true,
            relation_attn: true,
            people: 2378,
            families: 20,
            train_with_valid: false,
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment. Keys may use dashes or
/// underscores. Values are read as JSON scalars when they parse, else as
/// strings.
pub fn parse_kv(text: &str) -> Result<Map<String, Value>> {
    let mut out = Map::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key=value, got {raw:?}", i + 1);
        };
        let v = v.trim();
        let value = serde_json::from_str::<Value>(v).unwrap_or_else(|_| Value::String(v.to_string()));
        out.insert(k.trim().replace('-', "_"), value);
    }
    Ok(out)
}

impl RunConfig {
    /// Defaults overlaid with `file` (if any) and then with `flags`.
    pub fn layered(file: Option<&Path>, flags: Map<String, Value>) -> Result<Self> {
        let Value::Object(mut merged) = serde_json::to_value(Self::default())? else { unreachable!() };
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading config file {}", path.display()))?;
            let kv = parse_kv(&text).with_context(|| format!("in {}", path.display()))?;
            for (k, v) in kv {
                if !merged.contains_key(&k) {
                    bail!("{}: unknown key {k:?}", path.display());
                }
                merged.insert(k, v);
            }
        }
        merged.extend(flags);
        let cfg: Self = serde_json::from_value(Value::Object(merged)).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, x: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&x) {
                bail!("{name} must lie in [0, 1], got {x}");
            }
            Ok(())
        };
        unit("theta-ht", self.theta_ht)?;
        unit("theta-sim", self.theta_sim)?;
        unit("theta-conf", self.theta_conf)?;
        unit("theta-hc", self.theta_hc)?;
        unit("query-fraction", self.query_fraction)?;
        if self.theta_hrt <= 0.0 || self.theta_kge <= 0.0 {
            bail!("theta-hrt and theta-kge must be positive");
        }
        if self.nmin == 0 || self.nmin >= self.nmax {
            bail!("need 0 < nmin < nmax, got nmin={} nmax={}", self.nmin, self.nmax);
        }
        if self.hops == 0 {
            bail!("hops must be at least 1");
        }
        if self.dim == Some(0) {
            bail!("dim must be positive");
        }
        if self.lr.is_some_and(|lr| lr <= 0.0 || !lr.is_finite()) {
            bail!("lr must be positive");
        }
        if self.epochs == 0 || self.passes == 0 || self.batch_size == 0 {
            bail!("epochs, passes and batch-size must be positive");
        }
        Ok(())
    }

    /// The same settings as key=value lines, readable by `--config`.
    pub fn to_kv(&self) -> String {
        let Ok(Value::Object(m)) = serde_json::to_value(self) else { unreachable!() };
        m.iter()
            .filter(|(_, v)| !v.is_null())
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k} = {s}\n"),
                v => format!("{k} = {v}\n"),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layering_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "# comment\ntheta-ht = 0.4\nmodel = pairre\nseed=9\n").unwrap();
        let mut flags = Map::new();
        flags.insert("seed".into(), Value::from(3));
        let cfg = RunConfig::layered(Some(&path), flags).unwrap();
        assert_eq!((cfg.theta_ht, cfg.model, cfg.seed), (0.4, Model::Pairre, 3));
        assert_eq!(cfg.theta_hrt, RunConfig::default().theta_hrt);
    }

    #[test]
    fn round_trips_through_kv() {
        let cfg = RunConfig { dim: Some(12), theta_kge: 2.5, model: Model::Pairre, ..RunConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        fs::write(&path, cfg.to_kv()).unwrap();
        assert_eq!(RunConfig::layered(Some(&path), Map::new()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        fs::write(&path, "thetaht = 0.4\n").unwrap();
        assert!(RunConfig::layered(Some(&path), Map::new()).is_err());
        fs::write(&path, "theta_ht\n").unwrap();
        assert!(RunConfig::layered(Some(&path), Map::new()).is_err());
        let mut flags = Map::new();
        flags.insert("theta_ht".into(), Value::from(1.5));
        assert!(RunConfig::layered(None, flags).is_err());
        let mut flags = Map::new();
        flags.insert("nmin".into(), Value::from(200));
        assert!(RunConfig::layered(None, flags).is_err());
    }
}
