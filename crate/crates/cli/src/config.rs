//! Run configuration: a flat JSON object, overridable from the command line.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use exemplar::altmin::{AltminConfig, DEFAULT_DELTA, DEFAULT_ITERATIONS};
use exemplar::bm25::{Bm25Params, DEFAULT_B, DEFAULT_CANDIDATES, DEFAULT_K1};
use exemplar::dpp::{DppConfig, DEFAULT_K, DEFAULT_POOL, DEFAULT_SUBSETS};
use exemplar::prompt::Task;
use exemplar::retriever::RelevanceConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Full,
    RelevanceOnly,
    DppOnly,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::RelevanceOnly => "relevance-only",
            Mode::DppOnly => "dpp-only",
        }
    }

    pub fn uses_altmin(self) -> bool {
        self != Mode::DppOnly
    }

    pub fn uses_dpp(self) -> bool {
        self != Mode::RelevanceOnly
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [Mode::Full, Mode::RelevanceOnly, Mode::DppOnly]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?} (expected full, relevance-only or dpp-only)"))
    }
}

/// A configuration problem, reported with the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config field `{}`: {}", self.field, self.message)
    }
}

impl std::error::Error for UsageError {}

fn usage(field: &str, message: impl Into<String>) -> UsageError {
    UsageError {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding `<lang>.jsonl`, `<lang>.emb`, optional
    /// `<lang>.query.emb` and the target's `.validation` split.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub target: String,
    /// Candidate auxiliary languages, filtered by `delta`.
    pub auxiliary: Vec<String>,
    pub delta: f64,
    pub iterations: usize,
    pub epochs: usize,
    pub dpp_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub candidates: usize,
    pub k: usize,
    pub subsets: usize,
    pub tradeoff: f64,
    pub pool: usize,
    pub shortlist: Option<usize>,
    pub seed: u64,
    pub mode: Mode,
    pub endpoint: Option<String>,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub candidates_by_embedding: bool,
    pub validate_with_generation: bool,
    pub task: Task,
    pub templates: Option<PathBuf>,
    /// Directory relative paths are resolved against; not part of the config.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            target: String::new(),
            auxiliary: Vec::new(),
            delta: DEFAULT_DELTA,
            iterations: DEFAULT_ITERATIONS,
            epochs: 120,
            dpp_epochs: 10,
            batch: 64,
            lr: 1e-4,
            candidates: DEFAULT_CANDIDATES,
            k: DEFAULT_K,
            subsets: DEFAULT_SUBSETS,
            tradeoff: 1.0,
            pool: DEFAULT_POOL,
            shortlist: None,
            seed: 0,
            mode: Mode::Full,
            endpoint: None,
            bm25_k1: DEFAULT_K1,
            bm25_b: DEFAULT_B,
            candidates_by_embedding: false,
            validate_with_generation: false,
            task: Task::Translation,
            templates: None,
            base_dir: PathBuf::new(),
        }
    }
}

impl RunConfig {
    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading config {}: {e}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| anyhow::Error::new(usage("<file>", format!("{}: {e}", path.display()))))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn data_path(&self) -> PathBuf {
        self.resolve(&self.data_dir)
    }

    pub fn out_path(&self) -> PathBuf {
        self.resolve(&self.out_dir)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let positive = [
            ("iterations", self.iterations),
            ("epochs", self.epochs),
            ("dpp_epochs", self.dpp_epochs),
            ("batch", self.batch),
            ("candidates", self.candidates),
            ("k", self.k),
            ("pool", self.pool),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(usage(field, "must be a positive integer"));
            }
        }
        if self.subsets < 2 {
            return Err(usage("subsets", "needs one positive and at least one negative subset"));
        }
        if !(0.0..=100.0).contains(&self.delta) {
            return Err(usage("delta", format!("{} is outside [0, 100]", self.delta)));
        }
        for (field, v) in [("lr", self.lr), ("tradeoff", self.tradeoff), ("bm25_k1", self.bm25_k1)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(usage(field, format!("{v} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.bm25_b) {
            return Err(usage("bm25_b", format!("{} is outside [0, 1]", self.bm25_b)));
        }
        if self.target.is_empty() {
            return Err(usage("target", "target language is required"));
        }
        if self.auxiliary.iter().any(|a| a == &self.target) {
            return Err(usage("auxiliary", "lists the target language"));
        }
        if self.shortlist == Some(0) {
            return Err(usage("shortlist", "must be positive when given"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn relevance(&self) -> RelevanceConfig {
        RelevanceConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            learning_rate: self.lr,
            candidates: self.candidates,
            bm25: Bm25Params {
                k1: self.bm25_k1,
                b: self.bm25_b,
            },
            candidates_by_embedding: self.candidates_by_embedding,
        }
    }

    pub fn altmin(&self) -> AltminConfig {
        AltminConfig {
            iterations: self.iterations,
            relevance: self.relevance(),
            seed: self.seed,
        }
    }

    pub fn dpp(&self) -> DppConfig {
        DppConfig {
            epochs: self.dpp_epochs,
            k: self.k,
            subsets: self.subsets,
            tradeoff: self.tradeoff,
            pool: self.pool,
            batch_size: self.batch,
            learning_rate: self.lr,
            shortlist: self.shortlist,
        }
    }
}

/// Command-line values that replace config fields when given.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<String>,
    /// Comma-separated candidate auxiliary languages.
    #[arg(long, value_delimiter = ',')]
    pub auxiliary: Option<Vec<String>>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub dpp_epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub subsets: Option<usize>,
    #[arg(long)]
    pub tradeoff: Option<f64>,
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long)]
    pub shortlist: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub bm25_k1: Option<f64>,
    #[arg(long)]
    pub bm25_b: Option<f64>,
    #[arg(long)]
    pub candidates_by_embedding: bool,
    #[arg(long)]
    pub validate_with_generation: bool,
    #[arg(long, value_parser = |s: &str| s.parse::<Task>().map_err(|e| e.to_string()))]
    pub task: Option<Task>,
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

macro_rules! apply {
    ($cfg:ident, $o:ident, $($f:ident),*) => {
        $( if let Some(v) = $o.$f.clone() { $cfg.$f = v; } )*
    };
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let o = self;
        let absolute = |p: &PathBuf| std::path::absolute(p).unwrap_or_else(|_| p.clone());
        if let Some(p) = &o.data_dir {
            cfg.data_dir = absolute(p);
        }
        if let Some(p) = &o.out_dir {
            cfg.out_dir = absolute(p);
        }
        if let Some(p) = &o.templates {
            cfg.templates = Some(absolute(p));
        }
        apply!(
            cfg, o, target, auxiliary, delta, iterations, epochs, dpp_epochs, batch, lr, candidates, k, subsets,
            tradeoff, pool, seed, mode, bm25_k1, bm25_b, task
        );
        if let Some(v) = &o.shortlist {
            cfg.shortlist = Some(*v);
        }
        if let Some(v) = &o.endpoint {
            cfg.endpoint = Some(v.clone());
        }
        cfg.candidates_by_embedding |= o.candidates_by_embedding;
        cfg.validate_with_generation |= o.validate_with_generation;
    }
}
