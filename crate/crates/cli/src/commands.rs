//! One function per subcommand. Each reads its inputs from the config and
//! the output directory, and writes its artifacts back there.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context as _, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use zpd_core::curriculum::{self, LossLogEntry};
use zpd_core::data::{self, EmbeddingStore, Query, ResponseRecord, ResponseSet, Setting, Split, SplitAssignment};
use zpd_core::gateway::{Backend, Gateway, GatewayMode, HttpBackend, HttpConfig, ReplayCache};
use zpd_core::irt::io::{self as irt_io, SavedModel};
use zpd_core::irt::{self, IrtConfig, IrtData, Variant};
use zpd_core::oracle::{self, OracleSelection};
use zpd_core::prompt::PromptTemplate;
use zpd_core::retrieval::{DenseViews, PoolBuilder, RetrievalConfig};
use zpd_core::scoring::score_answer;
use zpd_core::selective::{self, PolicyPoint, QueryProbs};
use zpd_core::zones::{self, MergedZone};

use crate::config::{index_for, require_paths, CurriculumMethod, PipelineConfig, Stage};

/// Builds the live backend for a model id.
pub type BackendFactory = Arc<dyn Fn(&str) -> Result<Arc<dyn Backend>> + Send + Sync>;

pub struct Context {
    pub config: PipelineConfig,
    /// Replaces the HTTP backend in live mode.
    pub backend: Option<BackendFactory>,
}

impl Context {
    pub fn new(config: PipelineConfig) -> Self {
        Context { config, backend: None }
    }

    fn cfg(&self) -> &PipelineConfig {
        &self.config
    }

    fn gateway(&self, model: &str) -> Result<Gateway> {
        let cfg = self.cfg();
        let cache = ReplayCache::open(&cfg.paths.cache)?;
        let gw = match cfg.gateway.mode {
            GatewayMode::Replay => Gateway::replay(model, cache),
            GatewayMode::Live => {
                let backend = match &self.backend {
                    Some(f) => f(model)?,
                    None => {
                        let endpoint = cfg
                            .gateway
                            .endpoint
                            .clone()
                            .ok_or_else(|| anyhow!("live mode needs gateway.endpoint"))?;
                        Arc::new(HttpBackend::new(HttpConfig {
                            base_url: endpoint,
                            model: model.to_string(),
                            api_key: std::env::var(&cfg.gateway.api_key_env).ok(),
                            timeout_secs: cfg.gateway.timeout_secs,
                            retries: cfg.gateway.retries,
                        }))
                    }
                };
                Gateway::live(model, cache, backend)
            }
        };
        Ok(gw
            .with_max_in_flight(cfg.gateway.max_in_flight)
            .with_reduction(cfg.gateway.reduction))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    MeasureZones,
    BuildOracle,
    FitIrt,
    PredictZones,
    SelectIcl,
    MakeCurriculum,
    AnalyzeDynamics,
    Report,
}

impl Command {
    pub fn stage(self) -> &'static str {
        match self {
            Command::MeasureZones => "measure-zones",
            Command::BuildOracle => "build-oracle",
            Command::FitIrt => "fit-irt",
            Command::PredictZones => "predict-zones",
            Command::SelectIcl => "select-icl",
            Command::MakeCurriculum => "make-curriculum",
            Command::AnalyzeDynamics => "analyze-dynamics",
            Command::Report => "report",
        }
    }
}

/// An error tagged with the stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: anyhow::Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {:#}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

impl StageError {
    pub fn to_json(&self) -> Value {
        json!({"error": {"stage": self.stage, "message": format!("{:#}", self.error)}})
    }
}

pub fn run(cmd: Command, ctx: &Context) -> std::result::Result<(), StageError> {
    let result = ctx.cfg().validate().and_then(|_| {
        std::fs::create_dir_all(&ctx.cfg().paths.out_dir)
            .with_context(|| format!("creating {}", ctx.cfg().paths.out_dir.display()))?;
        match cmd {
            Command::MeasureZones => measure_zones(ctx),
            Command::BuildOracle => build_oracle(ctx),
            Command::FitIrt => fit_irt(ctx),
            Command::PredictZones => predict_zones(ctx),
            Command::SelectIcl => select_icl(ctx),
            Command::MakeCurriculum => make_curriculum(ctx),
            Command::AnalyzeDynamics => analyze_dynamics(ctx),
            Command::Report => report(ctx),
        }
    });
    result.map_err(|error| StageError {
        stage: cmd.stage(),
        error,
    })
}

const DP_FILE: &str = "dp_responses.jsonl";
const ICL_FILE: &str = "icl_responses.jsonl";
const BASELINE_FILE: &str = "dense_baseline_responses.jsonl";
const ORACLE_FILE: &str = "oracle.jsonl";
const MODEL_FILE: &str = "irt_model.bin";

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn template(cfg: &PipelineConfig) -> Result<PromptTemplate> {
    Ok(match &cfg.template {
        Some(body) => PromptTemplate::new(cfg.task, body.clone())?,
        None => PromptTemplate::for_task(cfg.task),
    })
}

fn load_store(bin: &Path, index: &Path) -> Result<EmbeddingStore> {
    require_paths(&[bin, index])?;
    Ok(EmbeddingStore::load(bin, index)?)
}

/// Query manifest, optionally with the query-view embeddings attached.
fn load_queries(cfg: &PipelineConfig, embeddings: bool) -> Result<BTreeMap<String, Query>> {
    require_paths(&[&cfg.paths.queries])?;
    let mut queries = data::load_queries(&cfg.paths.queries)?;
    if let Some(q) = queries.values().find(|q| q.task != cfg.task) {
        bail!("query {} has task {:?} but the config task is {:?}", q.example_id, q.task, cfg.task);
    }
    if embeddings {
        let store = load_store(&cfg.paths.embeddings, &cfg.embeddings_index())?;
        for q in queries.values_mut() {
            q.embedding = store.get(&q.example_id).map(<[f32]>::to_vec);
        }
    }
    Ok(queries)
}

fn read_records(path: &Path) -> Result<Vec<ResponseRecord>> {
    data::read_jsonl(path).with_context(|| format!("reading {}", path.display()))
}

fn read_if_exists(path: &Path) -> Result<Vec<ResponseRecord>> {
    if path.exists() {
        read_records(path)
    } else {
        Ok(Vec::new())
    }
}

fn base_records(cfg: &PipelineConfig) -> Result<Vec<ResponseRecord>> {
    match &cfg.paths.responses {
        Some(p) => {
            require_paths(&[p])?;
            read_records(p)
        }
        None => Ok(Vec::new()),
    }
}

type Key = (String, String, Setting);

fn key(r: &ResponseRecord) -> Key {
    (r.model_id.clone(), r.example_id.clone(), r.setting)
}

/// Recorded responses plus the generated DP and oracle ICL records; a
/// recorded response wins over a generated one with the same key.
fn combined_records(cfg: &PipelineConfig) -> Result<Vec<ResponseRecord>> {
    let mut records = base_records(cfg)?;
    let mut seen: BTreeSet<Key> = records.iter().map(key).collect();
    for file in [DP_FILE, ICL_FILE] {
        for r in read_if_exists(&cfg.out(file))? {
            if seen.insert(key(&r)) {
                records.push(r);
            }
        }
    }
    Ok(records)
}

fn response_set(cfg: &PipelineConfig, embeddings: bool) -> Result<ResponseSet> {
    let queries = load_queries(cfg, embeddings)?;
    Ok(ResponseSet::new(queries, combined_records(cfg)?)?)
}

fn models(cfg: &PipelineConfig, records: &[ResponseRecord]) -> Result<Vec<String>> {
    if !cfg.gateway.models.is_empty() {
        return Ok(cfg.gateway.models.clone());
    }
    let set: BTreeSet<&str> = records.iter().map(|r| r.model_id.as_str()).collect();
    if set.is_empty() {
        bail!("no models: set gateway.models or provide paths.responses");
    }
    Ok(set.into_iter().map(String::from).collect())
}

fn generate_dp(gw: &Gateway, q: &Query, template: &PromptTemplate, cfg: &PipelineConfig) -> Result<ResponseRecord> {
    let prompt = template.render_open(q)?;
    let out = gw.complete(&prompt, &cfg.gateway.decode)?;
    let (_, label) = score_answer(q.task, &out.text, &q.gold_answer);
    Ok(ResponseRecord {
        model_id: gw.model().to_string(),
        example_id: q.example_id.clone(),
        setting: Setting::Dp,
        prompt_text: prompt,
        raw_output: out.text,
        label,
        prompt_token_count: out.token_count_prompt,
    })
}

#[derive(Serialize)]
struct ModelZoneSummary {
    #[serde(flatten)]
    distribution: zones::ZoneDistribution,
    acc_dp: f64,
    acc_icl: f64,
    icl_effect: zones::IclEffect,
}

fn measure_zones(ctx: &Context) -> Result<()> {
    let cfg = ctx.cfg();
    let queries = load_queries(cfg, false)?;
    let template = template(cfg)?;
    let base = base_records(cfg)?;
    let models = models(cfg, &base)?;
    let have: BTreeSet<Key> = base.iter().map(key).collect();

    let mut generated = Vec::new();
    for model in &models {
        let missing: Vec<&Query> = queries
            .values()
            .filter(|q| !have.contains(&(model.clone(), q.example_id.clone(), Setting::Dp)))
            .collect();
        if missing.is_empty() {
            continue;
        }
        let gw = ctx.gateway(model)?;
        for q in missing {
            generated.push(
                generate_dp(&gw, q, &template, cfg)
                    .with_context(|| format!("direct prompt for model {model}, query {}", q.example_id))?,
            );
        }
        log::info!("{model}: {} live calls", gw.live_calls());
    }
    data::write_jsonl(&cfg.out(DP_FILE), &generated)?;

    let rs = response_set(cfg, false)?;
    let report = data::validate_response_set(&rs);
    if let Some(m) = report.missing.first() {
        bail!(
            "{} unpaired record(s), e.g. model {} has no {} record for {}; run build-oracle or add the responses",
            report.missing.len(),
            m.model_id,
            m.missing,
            m.example_id
        );
    }
    write_csv(&cfg.out("zones.csv"), &zones::zone_rows(&rs)?)?;

    let mut summaries = Vec::new();
    for model in rs.models() {
        let labels = |s: Setting| -> BTreeMap<String, bool> {
            rs.records()
                .iter()
                .filter(|r| &r.model_id == model && r.setting == s)
                .map(|r| (r.example_id.clone(), r.label))
                .collect()
        };
        let (dp, icl) = (labels(Setting::Dp), labels(Setting::Icl));
        let acc = |m: &BTreeMap<String, bool>| m.values().filter(|&&l| l).count() as f64 / m.len() as f64;
        summaries.push(ModelZoneSummary {
            distribution: zones::zone_distribution(&rs, model)?,
            acc_dp: acc(&dp),
            acc_icl: acc(&icl),
            icl_effect: zones::icl_effect_decomposition(&dp, &icl)?,
        });
    }
    write_json(&cfg.out("zone_dist.json"), &json!({ "models": summaries }))?;

    let mut overlap = serde_json::Map::new();
    for zone in MergedZone::ALL {
        let entry = match zones::pairwise_overlap_stats(&rs, zone) {
            Ok(stats) => serde_json::to_value(stats)?,
            Err(e) => json!({ "skipped": e.to_string() }),
        };
        overlap.insert(zone.as_str().to_string(), entry);
    }
    write_json(&cfg.out("overlap.json"), &overlap)
}

/// One line of `oracle.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleRecord {
    pub model_id: String,
    #[serde(flatten)]
    pub selection: OracleSelection,
}

fn dense_views(cfg: &PipelineConfig) -> Result<(EmbeddingStore, EmbeddingStore, EmbeddingStore)> {
    let query = load_store(&cfg.paths.embeddings, &cfg.embeddings_index())?;
    let view = |p: &Option<PathBuf>| -> Result<EmbeddingStore> {
        match p {
            Some(bin) => load_store(bin, &index_for(bin, None)),
            None => Ok(query.clone()),
        }
    };
    let pair = view(&cfg.paths.pair_embeddings)?;
    let answer = view(&cfg.paths.answer_embeddings)?;
    Ok((query, pair, answer))
}

fn append_line<T: Serialize>(w: &mut BufWriter<File>, item: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, item)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn appender(path: &Path) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn build_oracle(ctx: &Context) -> Result<()> {
    let cfg = ctx.cfg();
    let queries = load_queries(cfg, false)?;
    let template = template(cfg)?;
    let models = models(cfg, &base_records(cfg)?)?;
    let (query_view, pair_view, answer_view) = dense_views(cfg)?;
    let bank: Vec<&Query> = queries.values().collect();
    let builder = PoolBuilder::new(
        &bank,
        &template,
        DenseViews {
            query: &query_view,
            pair: &pair_view,
            answer: &answer_view,
        },
    )?;
    let seed = cfg.stage_seed(Stage::Pool);
    let pools = bank
        .iter()
        .map(|q| builder.build(q, cfg.retrieval.k, seed).with_context(|| format!("pool for {}", q.example_id)))
        .collect::<Result<Vec<_>>>()?;
    data::write_jsonl(&cfg.out("pool.jsonl"), &pools)?;

    // Resume: a (model, query) is done once its oracle line exists along
    // with its ICL (and baseline) record.
    let oracle_path = cfg.out(ORACLE_FILE);
    let icl_path = cfg.out(ICL_FILE);
    let base_path = cfg.out(BASELINE_FILE);
    let mut oracle_done: Vec<OracleRecord> = if oracle_path.exists() {
        data::read_jsonl(&oracle_path)?
    } else {
        Vec::new()
    };
    let mut icl_done = read_if_exists(&icl_path)?;
    let mut base_done = read_if_exists(&base_path)?;
    let pair_of = |r: &ResponseRecord| (r.model_id.clone(), r.example_id.clone());
    let icl_keys: BTreeSet<_> = icl_done.iter().map(pair_of).collect();
    let base_keys: BTreeSet<_> = base_done.iter().map(pair_of).collect();
    let done: BTreeSet<(String, String)> = oracle_done
        .iter()
        .map(|o| (o.model_id.clone(), o.selection.query_id.clone()))
        .filter(|k| icl_keys.contains(k) && (!cfg.oracle.dense_baseline || base_keys.contains(k)))
        .collect();
    oracle_done.retain(|o| done.contains(&(o.model_id.clone(), o.selection.query_id.clone())));
    icl_done.retain(|r| done.contains(&pair_of(r)));
    base_done.retain(|r| done.contains(&pair_of(r)));
    if !done.is_empty() {
        log::info!("resuming: {} (model, query) pairs already complete", done.len());
    }
    data::write_jsonl(&oracle_path, &oracle_done)?;
    data::write_jsonl(&icl_path, &icl_done)?;
    data::write_jsonl(&base_path, &base_done)?;

    let mut oracle_w = appender(&oracle_path)?;
    let mut icl_w = appender(&icl_path)?;
    let mut base_w = appender(&base_path)?;
    for model in &models {
        let gw = ctx.gateway(model)?;
        for (q, pool) in bank.iter().zip(&pools) {
            if done.contains(&(model.clone(), q.example_id.clone())) {
                continue;
            }
            let context = || format!("model {model}, query {}", q.example_id);
            let sel = oracle::select_oracle_demos(q, pool, &queries, cfg.oracle.k, &gw, &template).with_context(context)?;
            for w in &sel.warnings {
                log::warn!("{}: {w}", context());
            }
            let rec = oracle::materialize_icl_record(&sel, &queries, &gw, &template, &cfg.gateway.decode).with_context(context)?;
            if cfg.oracle.dense_baseline {
                let demos: Vec<String> = pool
                    .retrieved(RetrievalConfig::DensePair)
                    .iter()
                    .take(cfg.oracle.k)
                    .map(|e| e.example_id.clone())
                    .collect();
                let baseline = OracleSelection {
                    query_id: q.example_id.clone(),
                    demos,
                    step_scores: Vec::new(),
                    final_loglik: 0.0,
                    warnings: Vec::new(),
                };
                let b = oracle::materialize_icl_record(&baseline, &queries, &gw, &template, &cfg.gateway.decode)
                    .with_context(context)?;
                append_line(&mut base_w, &b)?;
            }
            append_line(&mut icl_w, &rec)?;
            append_line(&mut oracle_w, &OracleRecord {
                model_id: model.clone(),
                selection: sel,
            })?;
        }
        log::info!("{model}: {} live calls", gw.live_calls());
    }
    drop((oracle_w, icl_w, base_w));

    // Canonical order, so a resumed run matches an uninterrupted one.
    let rank: BTreeMap<&str, usize> = models.iter().enumerate().map(|(i, m)| (m.as_str(), i)).collect();
    let order = |m: &str, q: &str| (rank.get(m).copied().unwrap_or(usize::MAX), q.to_string());
    let mut o: Vec<OracleRecord> = data::read_jsonl(&oracle_path)?;
    o.sort_by_key(|r| order(&r.model_id, &r.selection.query_id));
    data::write_jsonl(&oracle_path, &o)?;
    for path in [&icl_path, &base_path] {
        let mut r = read_records(path)?;
        r.sort_by_key(|r| order(&r.model_id, &r.example_id));
        data::write_jsonl(path, &r)?;
    }
    Ok(())
}

fn irt_config(cfg: &PipelineConfig, variant: Variant, embedding_dim: usize) -> IrtConfig {
    IrtConfig {
        variant,
        item_mode: cfg.irt.item_mode,
        latent_dim: cfg.irt.latent_dim,
        embedding_dim,
        lr: cfg.irt.lr,
        batch_size: cfg.irt.batch_size,
        epochs: cfg.irt.epochs,
        seed: cfg.stage_seed(Stage::Irt),
        ..IrtConfig::default()
    }
}

#[derive(Serialize)]
struct VariantResult {
    variant: Variant,
    content_aware: bool,
    test: irt::Evaluation,
    history: irt::TrainingHistory,
}

fn fit_irt(ctx: &Context) -> Result<()> {
    let cfg = ctx.cfg();
    let rs = response_set(cfg, true)?;
    let split = data::split_dataset(&rs, cfg.split.ratios, cfg.stage_seed(Stage::Split))?;
    split.save(&cfg.out("split.json"))?;
    let needs_embeddings = cfg
        .irt
        .variants
        .iter()
        .any(|&v| irt_config(cfg, v, 1).content_aware());
    let data = IrtData::from_response_set(&rs, needs_embeddings)?;
    let test_rows = data.rows_in(&split, Split::Test);
    let mut results = Vec::new();
    let mut pearson = Vec::new();
    for &variant in &cfg.irt.variants {
        let icfg = irt_config(cfg, variant, data.emb_dim.max(1));
        let (params, history) = irt::train(&data, &split, &icfg).with_context(|| format!("training {}", variant.as_str()))?;
        let test = irt::evaluate(&params, &data, &test_rows)?;
        log::info!("{}: test AUC {:?}", variant.as_str(), test.auc_overall);
        if variant == Variant::MirtIcl {
            let slots: Vec<usize> = split.ids(Split::Test).iter().filter_map(|id| data.item_slot(id)).collect();
            for (m, model_id) in data.models.iter().enumerate() {
                pearson.push(match irt::difficulty_learnability_correlation(&params, &data, &slots, m) {
                    Ok(c) => json!({"model_id": model_id, "r": c.r, "n": c.n}),
                    Err(e) => json!({"model_id": model_id, "error": e.to_string()}),
                });
            }
            irt_io::save(
                &cfg.out(MODEL_FILE),
                &SavedModel {
                    params: params.clone(),
                    models: data.models.clone(),
                    items: data.items.clone(),
                },
            )?;
        }
        results.push(VariantResult {
            variant,
            content_aware: icfg.content_aware(),
            test,
            history,
        });
    }
    if !cfg.irt.variants.contains(&Variant::MirtIcl) {
        log::warn!("mirt_icl not fitted; {MODEL_FILE} was not written");
    }
    let (train, val, test) = split.sizes();
    write_json(
        &cfg.out("irt_eval.json"),
        &json!({
            "split": {"train": train, "val": val, "test": test},
            "variants": results,
        }),
    )?;
    write_json(&cfg.out("irt_pearson.json"), &json!({"split": "test", "models": pearson}))
}

/// The fitted `mirt_icl` model with the data and split it was fitted on.
struct Fitted {
    saved: SavedModel,
    rs: ResponseSet,
    data: IrtData,
    split: SplitAssignment,
}

fn load_fitted(cfg: &PipelineConfig) -> Result<Fitted> {
    let model_path = cfg.out(MODEL_FILE);
    let split_path = cfg.out("split.json");
    require_paths(&[&model_path, &split_path]).context("run fit-irt first")?;
    let saved = irt_io::load(&model_path)?;
    if saved.params.variant() != Variant::MirtIcl {
        bail!("{MODEL_FILE} holds a {} model, expected mirt_icl", saved.params.variant().as_str());
    }
    let rs = response_set(cfg, true)?;
    let data = IrtData::from_response_set(&rs, true)?;
    if data.emb_dim != saved.params.config.embedding_dim {
        bail!(
            "embeddings have dimension {}, the model expects {}",
            data.emb_dim,
            saved.params.config.embedding_dim
        );
    }
    Ok(Fitted {
        saved,
        split: SplitAssignment::load(&split_path)?,
        rs,
        data,
    })
}

impl Fitted {
    fn model_index(&self, name: Option<&str>) -> Result<(usize, String)> {
        let name = name.unwrap_or_else(|| &self.saved.models[0]);
        let idx = self
            .saved
            .models
            .iter()
            .position(|m| m == name)
            .ok_or_else(|| anyhow!("model {name} is not in the fitted IRT model"))?;
        Ok((idx, name.to_string()))
    }

    fn probs(&self, model: usize, ids: &[String]) -> Result<Vec<QueryProbs>> {
        Ok(selective::predict_probs(&self.saved.params, &self.data, model, ids)?)
    }
}

#[derive(Serialize)]
struct PredictedZoneRow {
    model_id: String,
    example_id: String,
    split: Split,
    p_dp: f64,
    p_icl: f64,
    predicted_zone: MergedZone,
    actual_zone: Option<MergedZone>,
}

fn predict_zones(ctx: &Context) -> Result<()> {
    let cfg = ctx.cfg();
    let f = load_fitted(cfg)?;
    let ids: Vec<String> = f.split.assignment.keys().cloned().collect();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (m, model_id) in f.saved.models.iter().enumerate() {
        let actual = zones::model_zones(&f.rs, model_id).ok();
        let mut agree: BTreeMap<Split, (usize, usize)> = BTreeMap::new();
        for p in f.probs(m, &ids)? {
            let split = f.split.get(&p.example_id).expect("id from split");
            let predicted = irt::predicted_zone(p.p_dp, p.p_icl, cfg.irt.threshold);
            let actual_zone = actual.as_ref().and_then(|a| a.get(&p.example_id)).map(|z| z.merged());
            if let Some(z) = actual_zone {
                let e = agree.entry(split).or_default();
                e.0 += usize::from(z == predicted);
                e.1 += 1;
            }
            rows.push(PredictedZoneRow {
                model_id: model_id.clone(),
                example_id: p.example_id,
                split,
                p_dp: p.p_dp,
                p_icl: p.p_icl,
                predicted_zone: predicted,
                actual_zone,
            });
        }
        for (split, (hit, n)) in agree {
            summary.push(json!({"model_id": model_id, "split": split, "n": n, "agreement": hit as f64 / n as f64}));
        }
    }
    write_csv(&cfg.out("predicted_zones.csv"), &rows)?;
    write_json(
        &cfg.out("predicted_zones.json"),
        &json!({"threshold": cfg.irt.threshold, "agreement": summary}),
    )
}

fn select_icl(ctx: &Context) -> Result<()> {
    let cfg = ctx.cfg();
    let f = load_fitted(cfg)?;
    let (m, model_id) = f.model_index(cfg.selective.model.as_deref())?;
    let ids = f.split.ids(Split::Test);
    let probs = f.probs(m, &ids)?;

    let baseline = cfg.out(BASELINE_FILE);
    let (source, strategy) = if let Some(p) = &cfg.paths.strategy_records {
        require_paths(&[p])?;
        ("strategy_records", read_records(p)?)
    } else if baseline.exists() && std::fs::metadata(&baseline)?.len() > 0 {
        ("dense_baseline", read_records(&baseline)?)
    } else {
        log::warn!("no strategy records; routing to the recorded ICL responses");
        let icl = f.rs.records().iter().filter(|r| r.setting == Setting::Icl).cloned().collect();
        ("response_icl", icl)
    };
    let outcomes = selective::outcomes_from_records(&f.rs, &model_id, &strategy)?;
    let grid = selective::threshold_grid(cfg.selective.grid_step)?;
    let points = selective::grid_search(&outcomes, &probs, &grid)?;
    let frontier = selective::pareto_frontier(&points)?;
    write_csv(&cfg.out("policy_points.csv"), &points)?;
    write_csv(&cfg.out("pareto.csv"), &frontier)?;

    let full_dp: PolicyPoint = selective::evaluate_policy(&outcomes, &probs, 0.0, 0.0)?;
    let full_icl = selective::evaluate_policy(&outcomes, &probs, 1.0, 0.0)?;
    let selected = cfg
        .selective
        .token_budget
        .map(|b| selective::select_under_budget(&frontier, b).cloned());
    write_json(
        &cfg.out("selection.json"),
        &json!({
            "model_id": model_id,
            "strategy_source": source,
            "n_queries": probs.len(),
            "n_points": points.len(),
            "full_dp": full_dp,
            "full_icl": full_icl,
            "token_budget": cfg.selective.token_budget,
            "selected": selected.flatten(),
        }),
    )
}

#[derive(Serialize)]
struct RankingRow {
    rank: usize,
    example_id: String,
    gain: f64,
}

fn make_curriculum(ctx: &Context) -> Result<()> {
    let cfg = ctx.cfg();
    let f = load_fitted(cfg)?;
    let (m, model_id) = f.model_index(cfg.curriculum.model.as_deref())?;
    let ids = f.split.ids(Split::Train);
    let probs = f.probs(m, &ids)?;
    let ranked = curriculum::rank_by_learning_gain(&ids, &probs)?;
    let order: Vec<String> = ranked.iter().map(|r| r.example_id.clone()).collect();
    let (buckets, epochs, seed) = (
        cfg.curriculum.buckets,
        cfg.curriculum.epochs_per_stage,
        cfg.stage_seed(Stage::Curriculum),
    );
    let schedule = match cfg.curriculum.method {
        CurriculumMethod::Zpd => curriculum::make_schedule(&order, buckets, epochs, seed)?,
        CurriculumMethod::Random => curriculum::random_schedule(&ids, buckets, epochs, seed)?,
    };
    let mut manifest = serde_json::to_value(&schedule)?;
    manifest["model_id"] = json!(model_id);
    write_json(&cfg.out("schedule.json"), &manifest)?;
    let rows: Vec<RankingRow> = ranked
        .into_iter()
        .enumerate()
        .map(|(i, r)| RankingRow {
            rank: i + 1,
            example_id: r.example_id,
            gain: r.gain,
        })
        .collect();
    write_csv(&cfg.out("curriculum_ranking.csv"), &rows)
}

#[derive(Serialize)]
struct DynamicsRow {
    example_id: String,
    zone: MergedZone,
    mean_loss: f64,
    loss_variance: f64,
}

fn analyze_dynamics(ctx: &Context) -> Result<()> {
    let cfg = ctx.cfg();
    let log_path = cfg
        .paths
        .loss_log
        .as_ref()
        .ok_or_else(|| anyhow!("paths.loss_log is not set"))?;
    require_paths(&[log_path])?;
    let entries: Vec<LossLogEntry> = data::read_jsonl(log_path)?;
    let dynamics = curriculum::loss_dynamics(&curriculum::collect_loss_log(&entries)?)?;
    if dynamics.low_confidence {
        log::warn!("loss log has a single epoch; variances are all zero");
    }
    let rs = response_set(cfg, false)?;
    let model = cfg
        .dynamics
        .model
        .clone()
        .or_else(|| cfg.curriculum.model.clone())
        .or_else(|| rs.models().first().cloned())
        .ok_or_else(|| anyhow!("no models in the response set"))?;
    let zones: BTreeMap<String, MergedZone> = zones::model_zones(&rs, &model)?
        .into_iter()
        .map(|(id, z)| (id, z.merged()))
        .collect();
    let summary = curriculum::zone_loss_summary(&dynamics, &zones)?;
    write_csv(&cfg.out("zone_loss.csv"), &summary)?;
    let rows: Vec<DynamicsRow> = dynamics
        .per_example
        .iter()
        .map(|(id, d)| DynamicsRow {
            example_id: id.clone(),
            zone: zones[id],
            mean_loss: d.mean,
            loss_variance: d.variance,
        })
        .collect();
    write_csv(&cfg.out("loss_dynamics.csv"), &rows)?;
    write_json(
        &cfg.out("dynamics.json"),
        &json!({
            "model_id": model,
            "epochs": dynamics.epochs,
            "low_confidence": dynamics.low_confidence,
            "n_examples": dynamics.per_example.len(),
        }),
    )
}

fn csv_records(path: &Path) -> Result<Value> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let obj: serde_json::Map<String, Value> = headers
            .iter()
            .zip(rec.iter())
            .map(|(h, v)| {
                let value = v
                    .parse::<f64>()
                    .ok()
                    .and_then(|x| serde_json::Number::from_f64(x).map(Value::Number))
                    .unwrap_or_else(|| if v.is_empty() { Value::Null } else { Value::String(v.into()) });
                (h.to_string(), value)
            })
            .collect();
        rows.push(Value::Object(obj));
    }
    Ok(Value::Array(rows))
}

/// Gathers the summary artifacts that exist into `report.json`.
fn report(ctx: &Context) -> Result<()> {
    let cfg = ctx.cfg();
    let mut sections = serde_json::Map::new();
    let mut missing = Vec::new();
    for name in [
        "zone_dist.json",
        "overlap.json",
        "irt_eval.json",
        "irt_pearson.json",
        "predicted_zones.json",
        "selection.json",
        "dynamics.json",
    ] {
        let p = cfg.out(name);
        if p.exists() {
            let mut v = read_json(&p)?;
            if name == "irt_eval.json" {
                // per-epoch history stays in the source file
                if let Some(vs) = v["variants"].as_array_mut() {
                    for x in vs {
                        x.as_object_mut().map(|o| o.remove("history"));
                    }
                }
            }
            sections.insert(name.trim_end_matches(".json").to_string(), v);
        } else {
            missing.push(name);
        }
    }
    for name in ["pareto.csv", "zone_loss.csv"] {
        let p = cfg.out(name);
        if p.exists() {
            sections.insert(name.trim_end_matches(".csv").to_string(), csv_records(&p)?);
        } else {
            missing.push(name);
        }
    }
    write_json(&cfg.out("report.json"), &json!({"sections": sections, "missing": missing}))
}
