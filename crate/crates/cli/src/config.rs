//! Run configuration files (JSON or TOML, chosen by extension).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use sbvqa_core::stacker::{Split, StackConfig};

pub fn load_document<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).with_context(|| format!("parsing {}", path.display())),
        Some("json") | None => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())),
        Some(other) => bail!("unsupported config extension .{other} (use .json or .toml)"),
    }
}

/// Settings applied to every branch, when present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub split: Split,
    /// Embed per-item predictions in report.json (they always go to items.csv).
    pub per_item_in_json: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            per_item_in_json: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub stack: StackConfig,
    pub training: TrainingOverrides,
    pub eval: EvalOptions,
}

impl RunConfig {
    /// Loads a config; relative paths inside it are resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let mut cfg: Self = load_document(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.manifest, &mut cfg.out_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn apply_flags(&mut self, manifest: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>) {
        if manifest.is_some() {
            self.manifest = manifest;
        }
        if out.is_some() {
            self.out_dir = out;
        }
        if let Some(seed) = seed {
            self.stack.seed = seed;
        }
    }

    pub fn resolved_stack(&self) -> StackConfig {
        let mut stack = self.stack.clone();
        for b in &mut stack.branches {
            if let Some(e) = self.training.epochs {
                b.train.epochs = e;
            }
            if let Some(bs) = self.training.batch_size {
                b.train.batch_size = bs;
            }
            if let Some(lr) = self.training.lr {
                b.train.lr = lr;
            }
        }
        stack
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("run.toml");
        std::fs::write(
            &toml_path,
            "manifest = \"data/manifest.jsonl\"\n[training]\nepochs = 3\n[stack]\nfolds = 2\nseed = 9\n[[stack.branches]]\n[stack.branches.backbone]\nwindow = [4, 4, 4]\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&toml_path).unwrap();
        assert_eq!(cfg.manifest, Some(dir.path().join("data/manifest.jsonl")));
        assert_eq!(cfg.stack.folds, 2);
        assert_eq!(cfg.stack.branches.len(), 1);
        assert_eq!(cfg.stack.branches[0].backbone.window, [4, 4, 4]);
        assert_eq!(cfg.resolved_stack().branches[0].train.epochs, 3);

        let json_path = dir.path().join("run.json");
        std::fs::write(&json_path, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(RunConfig::load(&json_path).unwrap(), cfg);
    }

    #[test]
    fn defaults_follow_the_reference_setup() {
        let cfg = RunConfig::default();
        let s = &cfg.stack;
        assert_eq!((s.sampler.grid_count, s.sampler.patch_size), (7, 32));
        assert_eq!(s.branches[0].backbone.window, [8, 7, 7]);
        assert_eq!(s.branches[0].train.lr, 1e-3);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn flags_override_the_file() {
        let mut cfg = RunConfig::default();
        cfg.apply_flags(Some("m.jsonl".into()), None, Some(4));
        assert_eq!(cfg.manifest, Some(PathBuf::from("m.jsonl")));
        assert_eq!(cfg.stack.seed, 4);
        assert!(RunConfig::load(Path::new("/nonexistent/run.toml")).is_err());
    }
}
