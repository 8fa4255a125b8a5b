//! A small end-to-end fixture: arithmetic queries, random embeddings, a
//! deterministic mock endpoint, a loss log and a config tying them together.

#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;
use zpd_cli::commands::BackendFactory;
use zpd_cli::{run, Command, Context, PipelineConfig};
use zpd_core::curriculum::LossLogEntry;
use zpd_core::data::{self, EmbeddingStore, Query, Task};
use zpd_core::gateway::{Backend, Completion, DecodeConfig, GatewayMode};
use zpd_core::rng;

pub const MODELS: [&str; 2] = ["alpha", "beta"];
pub const EMB_DIM: usize = 16;

pub const PIPELINE: [Command; 8] = [
    Command::BuildOracle,
    Command::MeasureZones,
    Command::FitIrt,
    Command::PredictZones,
    Command::SelectIcl,
    Command::MakeCurriculum,
    Command::AnalyzeDynamics,
    Command::Report,
];

fn hash_of<T: Hash>(t: &T) -> u64 {
    let mut h = DefaultHasher::new();
    t.hash(&mut h);
    h.finish()
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Answers correctly with a probability that grows with model skill and
/// the number of demonstrations in the prompt; scores continuations by
/// hashing.
pub struct MockBackend {
    pub model: String,
    pub skill: f64,
    pub calls: Arc<AtomicUsize>,
}

impl Backend for MockBackend {
    fn complete(&self, prompt: &str, _cfg: &DecodeConfig) -> zpd_core::Result<Completion> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let last = prompt.rsplit("Question: ").next().unwrap_or("");
        let nums: Vec<i64> = last
            .split(|c: char| !c.is_ascii_digit())
            .filter_map(|t| t.parse().ok())
            .collect();
        let gold: i64 = nums.iter().take(2).sum();
        let demos = prompt.matches("Question: ").count().saturating_sub(1) as f64;
        let difficulty = unit(hash_of(&("difficulty", last))) * 3.0 - 1.5;
        let z = self.skill - difficulty + 0.8 * demos;
        let p = 1.0 / (1.0 + (-z).exp());
        let correct = unit(hash_of(&(&self.model, prompt))) < p;
        let answer = if correct { gold } else { gold + 1 };
        Ok(Completion {
            text: format!(" {answer}"),
            prompt_tokens: None,
            output_tokens: None,
        })
    }

    fn continuation_logprobs(&self, prompt: &str, continuation: &str) -> zpd_core::Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(continuation
            .split_whitespace()
            .enumerate()
            .map(|(i, _)| -((hash_of(&(&self.model, prompt, i)) % 997) as f64) / 300.0 - 0.01)
            .collect())
    }
}

pub fn mock_factory(calls: Arc<AtomicUsize>) -> BackendFactory {
    Arc::new(move |model: &str| {
        let skill = if model == "alpha" { 0.5 } else { -0.5 };
        Ok(Arc::new(MockBackend {
            model: model.to_string(),
            skill,
            calls: calls.clone(),
        }) as Arc<dyn Backend>)
    })
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub calls: Arc<AtomicUsize>,
}

pub fn queries(n: usize) -> Vec<Query> {
    let mut r = rng::seeded(11);
    (0..n)
        .map(|i| {
            let (a, b) = (r.random_range(1..40), r.random_range(1..40));
            Query::new(
                format!("q{i:03}"),
                Task::MathQa,
                format!("Tom has {a} apples and buys {b} more. How many apples now?"),
                (a + b).to_string(),
            )
        })
        .collect()
}

impl Fixture {
    /// Writes `n` queries, embeddings, a loss log and `zpd.toml`.
    pub fn new(n: usize, extra_toml: &str) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let qs = queries(n);
        data::write_jsonl(&dir.path().join("queries.jsonl"), &qs).unwrap();
        let mut store = EmbeddingStore::new(EMB_DIM);
        let mut r = rng::seeded(12);
        for q in &qs {
            let v: Vec<f32> = (0..EMB_DIM).map(|_| r.random_range(-1.0..1.0)).collect();
            store.insert(q.example_id.as_str(), &v).unwrap();
        }
        store
            .save(&dir.path().join("emb.f32"), &dir.path().join("emb.index.json"))
            .unwrap();
        let log: Vec<LossLogEntry> = qs
            .iter()
            .flat_map(|q| {
                (1..=3).map(move |epoch| LossLogEntry {
                    example_id: q.example_id.clone(),
                    epoch,
                    loss: unit(hash_of(&(&q.example_id, epoch))) * 2.0,
                })
            })
            .collect();
        data::write_jsonl(&dir.path().join("loss_log.jsonl"), &log).unwrap();
        let toml = format!(
            r#"task = "mathqa"
seed = 7

[paths]
queries = "queries.jsonl"
embeddings = "emb.f32"
cache = "cache.jsonl"
loss_log = "loss_log.jsonl"

[gateway]
models = ["alpha", "beta"]
max_in_flight = 2

[gateway.decode]
max_new_tokens = 16

[retrieval]
k = 4

[oracle]
k = 2

[irt]
latent_dim = 4
epochs = 5
lr = 0.01

[selective]
token_budget = 300
{extra_toml}"#
        );
        std::fs::write(dir.path().join("zpd.toml"), toml).unwrap();
        Fixture {
            dir,
            calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn context(&self, out: &str, mode: GatewayMode) -> Context {
        let mut cfg = PipelineConfig::load(&self.path("zpd.toml")).unwrap();
        cfg.paths.out_dir = self.path(out);
        cfg.gateway.mode = mode;
        Context {
            config: cfg,
            backend: Some(mock_factory(self.calls.clone())),
        }
    }

    /// Runs the model-facing stages live so the cache holds every request.
    pub fn prime(&self) {
        let ctx = self.context("prime", GatewayMode::Live);
        for cmd in [Command::BuildOracle, Command::MeasureZones] {
            run(cmd, &ctx).unwrap_or_else(|e| panic!("{e}"));
        }
    }

    pub fn run_all(&self, out: &str, mode: GatewayMode) {
        let ctx = self.context(out, mode);
        for cmd in PIPELINE {
            run(cmd, &ctx).unwrap_or_else(|e| panic!("{e}"));
        }
    }
}

/// Every regular file under `dir`, sorted, with its bytes.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}
