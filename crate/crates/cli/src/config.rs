//! Pipeline configuration: one TOML file with a section per stage.
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use zpd_core::curriculum::{DEFAULT_BUCKETS, DEFAULT_EPOCHS_PER_STAGE};
use zpd_core::data::Task;
use zpd_core::gateway::{DecodeConfig, GatewayMode, LoglikReduction};
use zpd_core::irt::{ItemMode, Variant};
use zpd_core::oracle::DEFAULT_NUM_DEMOS;
use zpd_core::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub task: Task,
    /// Base seed; stages without an explicit seed derive theirs from it.
    #[serde(default)]
    pub seed: u64,
    /// Template body overriding the task default.
    #[serde(default)]
    pub template: Option<String>,
    pub paths: Paths,
    #[serde(default)]
    pub seeds: StageSeeds,
    #[serde(default)]
    pub gateway: GatewaySection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub retrieval: RetrievalSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub irt: IrtSection,
    #[serde(default)]
    pub selective: SelectiveSection,
    #[serde(default)]
    pub curriculum: CurriculumSection,
    #[serde(default)]
    pub dynamics: DynamicsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub queries: PathBuf,
    /// Pre-recorded DP/ICL responses. Missing DP records are generated
    /// through the gateway by `measure-zones`.
    #[serde(default)]
    pub responses: Option<PathBuf>,
    /// Query embeddings; the index defaults to `<file>.index.json`.
    pub embeddings: PathBuf,
    #[serde(default)]
    pub embeddings_index: Option<PathBuf>,
    /// Embeddings of rendered demonstrations (defaults to `embeddings`).
    #[serde(default)]
    pub pair_embeddings: Option<PathBuf>,
    /// Embeddings of gold answers (defaults to `embeddings`).
    #[serde(default)]
    pub answer_embeddings: Option<PathBuf>,
    pub cache: PathBuf,
    #[serde(default)]
    pub loss_log: Option<PathBuf>,
    /// ICL records of the strategy selective ICL routes to.
    #[serde(default)]
    pub strategy_records: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSeeds {
    pub split: Option<u64>,
    pub pool: Option<u64>,
    pub irt: Option<u64>,
    pub curriculum: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub mode: GatewayMode,
    pub endpoint: Option<String>,
    /// Environment variable holding the endpoint API key.
    pub api_key_env: String,
    pub models: Vec<String>,
    pub max_in_flight: usize,
    pub reduction: LoglikReduction,
    pub timeout_secs: u64,
    pub retries: u32,
    pub decode: DecodeConfig,
}

impl Default for GatewaySection {
    fn default() -> Self {
        GatewaySection {
            mode: GatewayMode::Replay,
            endpoint: None,
            api_key_env: "ZPD_API_KEY".into(),
            models: Vec::new(),
            max_in_flight: 1,
            reduction: LoglikReduction::Sum,
            timeout_secs: 120,
            retries: 3,
            decode: DecodeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub ratios: [f64; 3],
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { ratios: [0.8, 0.1, 0.1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    /// Top-K per retrieval config.
    pub k: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        RetrievalSection { k: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    /// Number of demonstrations to select.
    pub k: usize,
    /// Also record a dense-retrieval baseline (top-k by demo similarity).
    pub dense_baseline: bool,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            k: DEFAULT_NUM_DEMOS,
            dense_baseline: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrtSection {
    /// Variants to fit and report; `mirt_icl` is the one saved for
    /// prediction.
    pub variants: Vec<Variant>,
    pub item_mode: ItemMode,
    pub latent_dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Probability threshold for predicted zones.
    pub threshold: f64,
}

impl Default for IrtSection {
    fn default() -> Self {
        IrtSection {
            variants: Variant::ALL.to_vec(),
            item_mode: ItemMode::Content,
            latent_dim: 32,
            lr: 2e-4,
            batch_size: 16,
            epochs: 10,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectiveSection {
    pub grid_step: f64,
    pub token_budget: Option<u64>,
    /// Model whose routing is evaluated (defaults to the first model).
    pub model: Option<String>,
}

impl Default for SelectiveSection {
    fn default() -> Self {
        SelectiveSection {
            grid_step: 0.01,
            token_budget: None,
            model: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurriculumMethod {
    #[default]
    Zpd,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSection {
    pub method: CurriculumMethod,
    pub buckets: usize,
    pub epochs_per_stage: usize,
    pub model: Option<String>,
}

impl Default for CurriculumSection {
    fn default() -> Self {
        CurriculumSection {
            method: CurriculumMethod::Zpd,
            buckets: DEFAULT_BUCKETS,
            epochs_per_stage: DEFAULT_EPOCHS_PER_STAGE,
            model: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsSection {
    /// Model whose zones label the loss log (defaults to the curriculum
    /// model, then the first model).
    pub model: Option<String>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<GatewayMode>,
    pub out_dir: Option<PathBuf>,
    pub grid_step: Option<f64>,
    pub token_budget: Option<u64>,
    pub strategy_records: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Split,
    Pool,
    Irt,
    Curriculum,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        fix(&mut p.queries);
        fix(&mut p.embeddings);
        fix(&mut p.cache);
        fix(&mut p.out_dir);
        for opt in [
            &mut p.responses,
            &mut p.embeddings_index,
            &mut p.pair_embeddings,
            &mut p.answer_embeddings,
            &mut p.loss_log,
            &mut p.strategy_records,
        ] {
            if let Some(x) = opt.as_mut() {
                fix(x);
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = o.mode {
            self.gateway.mode = m;
        }
        if let Some(d) = &o.out_dir {
            self.paths.out_dir = d.clone();
        }
        if let Some(g) = o.grid_step {
            self.selective.grid_step = g;
        }
        if let Some(b) = o.token_budget {
            self.selective.token_budget = Some(b);
        }
        if let Some(p) = &o.strategy_records {
            self.paths.strategy_records = Some(p.clone());
        }
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        let (explicit, label) = match stage {
            Stage::Split => (self.seeds.split, "stage/split"),
            Stage::Pool => (self.seeds.pool, "stage/pool"),
            Stage::Irt => (self.seeds.irt, "stage/irt"),
            Stage::Curriculum => (self.seeds.curriculum, "stage/curriculum"),
        };
        explicit.unwrap_or_else(|| rng::derive_seed(self.seed, label))
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.paths.out_dir.join(name)
    }

    pub fn embeddings_index(&self) -> PathBuf {
        index_for(&self.paths.embeddings, self.paths.embeddings_index.as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        if self.retrieval.k == 0 || self.oracle.k == 0 {
            bail!("retrieval.k and oracle.k must be at least 1");
        }
        if !(self.irt.threshold > 0.0 && self.irt.threshold < 1.0) {
            bail!("irt.threshold must lie in (0, 1)");
        }
        if self.irt.variants.is_empty() {
            bail!("irt.variants is empty");
        }
        Ok(())
    }
}

/// `foo.f32` → `foo.index.json` unless given explicitly.
pub fn index_for(bin: &Path, explicit: Option<&Path>) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| bin.with_extension("index.json"))
}

/// Fails with a message naming every path that does not exist.
pub fn require_paths(paths: &[&Path]) -> Result<()> {
    let missing: Vec<String> = paths
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        bail!("missing input file(s): {}", missing.join(", "));
    }
    Ok(())
}
