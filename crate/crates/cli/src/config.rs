use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use dafnet::datagen::{DatagenConfig, Property};
use dafnet::lm::{LmConfig, PretrainConfig};
use dafnet::net::DafnetConfig;
use dafnet::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EditorKind {
    #[default]
    Dafnet,
    Ft,
    Null,
}

impl EditorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Dafnet => "dafnet",
            Self::Ft => "ft",
            Self::Null => "null",
        }
    }
}

/// Model shape; the vocabulary size comes from the generated graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub edit_layer_count: usize,
}

impl Default for LmSection {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 4,
            n_heads: 4,
            d_ff: 64,
            max_seq_len: 24,
            edit_layer_count: 1,
        }
    }
}

impl LmSection {
    pub fn to_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            edit_layer_count: self.edit_layer_count,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    /// Dataset groups the editor is trained on.
    pub splits: Vec<Property>,
    #[serde(flatten)]
    pub config: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            splits: vec![
                Property::Recent,
                Property::Popular,
                Property::LongTail,
                Property::Robust,
            ],
            config: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub editor: EditorKind,
    /// Length of the edit sequence; defaults to the largest checkpoint.
    pub edits: Option<usize>,
    pub checkpoints: Vec<usize>,
    pub ft_steps: usize,
    pub ft_lr: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            editor: EditorKind::Dafnet,
            edits: None,
            checkpoints: vec![10, 50],
            ft_steps: 10,
            ft_lr: 0.03,
        }
    }
}

/// Everything a command needs. Sub-section seeds are overwritten by the
/// top-level seed, which must be given in the file or on the command line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub datagen: DatagenConfig,
    pub lm: LmSection,
    pub pretrain: PretrainConfig,
    pub dafnet: DafnetConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).context("invalid config")
    }

    /// Reads `path`, returning the parsed config and its text.
    pub fn load(path: &Path) -> anyhow::Result<(Self, String)> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok((Self::parse(&text)?, text))
    }

    /// Fixes the seed (flag first, then file) and spreads it to every section.
    pub fn resolve(mut self, seed_flag: Option<u64>) -> anyhow::Result<Self> {
        let Some(seed) = seed_flag.or(self.seed) else {
            bail!("a seed is required (`seed = ...` in the config or --seed)");
        };
        self.seed = Some(seed);
        self.datagen.seed = seed;
        self.pretrain.seed = seed;
        self.dafnet.seed = seed;
        self.train.config.seed = seed;
        self.datagen.validate()?;
        self.dafnet.validate()?;
        self.train.config.validate()?;
        if self.train.splits.is_empty() || self.train.splits.contains(&Property::Eval) {
            bail!("train.splits must be nonempty and must not include `eval`");
        }
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("resolved config")
    }

    /// The edit count and sorted checkpoints of an evaluation.
    pub fn eval_plan(&self) -> anyhow::Result<(usize, Vec<usize>)> {
        let mut cps = self.eval.checkpoints.clone();
        cps.sort_unstable();
        cps.dedup();
        let edits = match (self.eval.edits, cps.last()) {
            (Some(n), _) => n,
            (None, Some(&c)) => c,
            (None, None) => bail!("eval needs --edits or --checkpoints"),
        };
        cps.retain(|&c| c <= edits);
        if cps.is_empty() {
            cps.push(edits);
        }
        if cps[0] == 0 {
            bail!("checkpoints start at 1");
        }
        Ok((edits, cps))
    }
}
