//! Experiment configuration: TOML files with `include` and `--set` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::fluid::{ArchConfig, TrainConfig};
use crate::pf::{PfTrainConfig, Resampler};
use crate::ssm::ModelSpec;

/// Presets compiled into the binary, addressed as `preset:<name>`.
pub const PRESETS: &[(&str, &str)] = &[
    ("desk-base", include_str!("../../presets/desk-base.toml")),
    ("paper-base", include_str!("../../presets/paper-base.toml")),
    ("case1-desk", include_str!("../../presets/case1-desk.toml")),
    ("case1-paper", include_str!("../../presets/case1-paper.toml")),
    ("case2-desk", include_str!("../../presets/case2-desk.toml")),
    ("case2-paper", include_str!("../../presets/case2-paper.toml")),
    ("sv-desk", include_str!("../../presets/sv-desk.toml")),
    ("sv-paper", include_str!("../../presets/sv-paper.toml")),
    ("burgers-desk", include_str!("../../presets/burgers-desk.toml")),
    ("burgers-paper", include_str!("../../presets/burgers-paper.toml")),
    ("lorenz-desk", include_str!("../../presets/lorenz-desk.toml")),
    ("lorenz-paper", include_str!("../../presets/lorenz-paper.toml")),
    ("lorenz-pf-desk", include_str!("../../presets/lorenz-pf-desk.toml")),
    ("lorenz2-desk", include_str!("../../presets/lorenz2-desk.toml")),
    ("lorenz2-paper", include_str!("../../presets/lorenz2-paper.toml")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub t_train: usize,
    /// Test path length; longer than `t_train` to evaluate extrapolation.
    pub t_eval: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 500,
            n_test: 20,
            t_train: 100,
            t_eval: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub n_sample: usize,
    /// Number of test trajectories to evaluate (all when absent).
    pub trajectories: Option<usize>,
    pub mmd_sigma: f64,
    /// Monte Carlo draws per step for the KL estimate.
    pub kl_samples: usize,
    pub save_samples: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            n_sample: 500,
            trajectories: None,
            mmd_sigma: crate::metrics::DEFAULT_MMD_BANDWIDTH,
            kl_samples: 1000,
            save_samples: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactorSource {
    #[default]
    Learned,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfConfig {
    pub particles: usize,
    pub resampler: Resampler,
    pub factors: FactorSource,
    /// Run the bootstrap filter instead of the fully adapted one.
    pub bootstrap: bool,
    pub train: PfTrainConfig,
    pub ess_samples: usize,
    pub ess_steps: usize,
    pub trajectories: Option<usize>,
}

impl Default for PfConfig {
    fn default() -> Self {
        PfConfig {
            particles: 1000,
            resampler: Resampler::default(),
            factors: FactorSource::default(),
            bootstrap: false,
            train: PfTrainConfig::default(),
            ess_samples: 100_000,
            ess_steps: 20,
            trajectories: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// Omit wall-clock timings so repeated runs give identical files.
    pub deterministic: bool,
    pub system: Option<ModelSpec>,
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub pf: PfConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "run".into(),
            seed: 0,
            deterministic: true,
            system: None,
            data: DataConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            pf: PfConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn system(&self) -> Result<&ModelSpec> {
        self.system
            .as_ref()
            .ok_or_else(|| Error::Config("no [system] section in the configuration".into()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// sha256 of the effective configuration.
    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Where a configuration fragment comes from.
#[derive(Debug, Clone)]
pub enum Source {
    File(PathBuf),
    Preset(String),
    Text(String),
}

fn parse_table(text: &str, origin: &str) -> Result<Table> {
    text.parse::<Table>()
        .map_err(|e| Error::Config(format!("{origin}: {e}")))
}

/// Recursively overlays `over` onto `base`; tables merge, everything else
/// replaces.
pub fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn resolve(src: &Source, depth: usize) -> Result<Table> {
    if depth > 16 {
        return Err(Error::Config("include chain too deep (cycle?)".into()));
    }
    let (text, origin, dir) = match src {
        Source::File(p) => (
            std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            p.display().to_string(),
            p.parent().map(Path::to_path_buf),
        ),
        Source::Preset(name) => (
            preset(name)
                .ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?
                .to_string(),
            format!("preset:{name}"),
            None,
        ),
        Source::Text(t) => (t.clone(), "inline config".into(), None),
    };
    let mut table = parse_table(&text, &origin)?;
    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(Value::Array(a)) => a,
        Some(v @ Value::String(_)) => vec![v],
        Some(_) => return Err(Error::Config(format!("{origin}: include must be a string or array"))),
    };
    let mut out = Table::new();
    for inc in includes {
        let Value::String(s) = inc else {
            return Err(Error::Config(format!("{origin}: include entries must be strings")));
        };
        let child = match s.strip_prefix("preset:") {
            Some(name) => Source::Preset(name.to_string()),
            None => {
                let p = PathBuf::from(&s);
                Source::File(match (&dir, p.is_relative()) {
                    (Some(d), true) => d.join(p),
                    _ => p,
                })
            }
        };
        merge(&mut out, resolve(&child, depth + 1)?);
    }
    merge(&mut out, table);
    Ok(out)
}

/// Applies one `a.b.c=value` override. The value is parsed as a TOML value
/// and taken as a bare string when that fails.
pub fn apply_set(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let mut cur = table;
    for p in &path[..path.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `{key}`: `{p}` is not a table"))),
        };
    }
    cur.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

/// Builds the effective configuration from sources applied in order, then
/// the overrides. Training seeds left unset follow the top-level seed.
pub fn load_config(sources: &[Source], sets: &[String]) -> Result<ExperimentConfig> {
    let mut table = Table::new();
    for s in sources {
        merge(&mut table, resolve(s, 0)?);
    }
    for s in sets {
        apply_set(&mut table, s)?;
    }
    let seed = table.get("seed").cloned();
    if let Some(seed) = seed {
        for path in [&["train"][..], &["pf", "train"][..]] {
            let mut cur = &mut table;
            for p in path {
                cur = match cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new())) {
                    Value::Table(t) => t,
                    _ => return Err(Error::Config(format!("`{p}` must be a table"))),
                };
            }
            cur.entry("seed").or_insert(seed.clone());
        }
    }
    let cfg: ExperimentConfig =
        ExperimentConfig::deserialize(Value::Table(table)).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(s) = &cfg.system {
        s.validate()?;
    }
    cfg.train.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_loads() {
        for (name, _) in PRESETS {
            let cfg = load_config(&[Source::Preset(name.to_string())], &[]).unwrap();
            if !name.ends_with("-base") {
                assert!(cfg.system.is_some(), "{name}");
            }
        }
    }

    #[test]
    fn overrides_and_seed_inheritance() {
        let cfg = load_config(
            &[Source::Preset("case1-desk".into())],
            &[
                "seed=9".into(),
                "data.n_test=0".into(),
                "name=abc".into(),
                "arch.shared_summary=false".into(),
            ],
        )
        .unwrap();
        assert_eq!((cfg.seed, cfg.train.seed, cfg.pf.train.seed), (9, 9, 9));
        assert_eq!(cfg.data.n_test, 0);
        assert_eq!(cfg.name, "abc");
        assert!(!cfg.arch.shared_summary);
        let explicit = load_config(&[Source::Text("seed = 3\n[train]\nseed = 5\n".into())], &[]).unwrap();
        assert_eq!((explicit.train.seed, explicit.pf.train.seed), (5, 3));
    }

    #[test]
    fn include_files_merge_in_order() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("a.toml"),
            "include = \"preset:case1-desk\"\nseed = 4\n[data]\nn_train = 7\n",
        )
        .unwrap();
        std::fs::write(
            dir.path().join("b.toml"),
            "include = [\"a.toml\"]\n[data]\nn_test = 2\n",
        )
        .unwrap();
        let cfg = load_config(&[Source::File(dir.path().join("b.toml"))], &[]).unwrap();
        assert_eq!((cfg.seed, cfg.data.n_train, cfg.data.n_test), (4, 7, 2));
        assert_eq!(cfg.system().unwrap().state_dim(), 10);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(load_config(&[Source::Text("bogus = 1".into())], &[]).is_err());
        assert!(load_config(&[Source::Preset("nope".into())], &[]).is_err());
        assert!(load_config(&[], &["novalue".into()]).is_err());
        assert!(load_config(&[], &[]).unwrap().system().is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loop.toml");
        std::fs::write(&p, "include = \"loop.toml\"\n").unwrap();
        assert!(load_config(&[Source::File(p)], &[]).is_err());
    }

    #[test]
    fn hash_tracks_effective_config() {
        let a = load_config(&[Source::Preset("sv-desk".into())], &[]).unwrap();
        let b = load_config(&[Source::Preset("sv-desk".into())], &[]).unwrap();
        let c = load_config(&[Source::Preset("sv-desk".into())], &["seed=1".into()]).unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }
}
