use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use regnet::data::SplitSpec;
use regnet::embed::AtomFeatureTable;
use regnet::model::ModelConfig;
use regnet::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSON table of per-element descriptors; one-hot over Z when absent.
    pub atom_table: Option<PathBuf>,
    /// Abort on the first invalid record instead of skipping it.
    pub strict: bool,
    pub split: SplitSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        // Relative table paths are taken relative to the config file.
        if let (Some(t), Some(dir)) = (&cfg.data.atom_table, path.parent()) {
            if t.is_relative() {
                cfg.data.atom_table = Some(dir.join(t));
            }
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// One seed for initialisation, shuffling, noise and the split.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.data.split.seed = seed;
    }
}

pub fn atom_table(path: Option<&Path>) -> Result<AtomFeatureTable> {
    match path {
        Some(p) => {
            AtomFeatureTable::load(p).with_context(|| format!("loading atom table {}", p.display()))
        }
        None => Ok(AtomFeatureTable::one_hot()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use regnet::data::SplitSizes;

    #[test]
    fn parses_full_example() {
        let text = r#"
            [model]
            num_blocks = 3
            hidden = 64
            tasks = ["e_form", "gap"]
            filter = "per_index_table"

            [model.moe]
            num_experts = 6
            top_k = 2

            [train]
            epochs = 10
            batch_size = 32

            [train.schedule]
            max_lr = 0.002
            pct_start = 0.3
            div_factor = 25.0
            final_div = 10000.0

            [data]
            strict = true

            [data.split]
            mode = "counts"
            train = 80
            val = 10
            test = 10
            seed = 3
        "#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.model.hidden, 64);
        assert_eq!(cfg.model.moe.unwrap().top_k, 2);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(
            cfg.data.split.sizes,
            SplitSizes::Counts {
                train: 80,
                val: 10,
                test: 10
            }
        );
        assert_eq!(cfg.data.split.seed, 3);
        let back: RunConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn readme_example_parses() {
        let readme = include_str!("../../../README.md");
        let start = readme.find("```toml\n").unwrap() + "```toml\n".len();
        let block = &readme[start..start + readme[start..].find("```").unwrap()];
        let cfg: RunConfig = toml::from_str(block).unwrap();
        assert_eq!(cfg.model.moe.unwrap().num_experts, 15);
        assert_eq!(cfg.model.tasks.len(), 3);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[model]\nhiden = 3\n").is_err());
    }
}
