//! Greedy oracle demonstration selection: at each step append the pool
//! candidate that maximises the gold answer's log-likelihood given the
//! demonstrations chosen so far.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Query, ResponseRecord, Setting};
use crate::error::{Error, Result};
use crate::gateway::{DecodeConfig, Gateway};
use crate::prompt::{render_with_gold, PromptTemplate};
use crate::retrieval::CandidatePool;
use crate::scoring::score_answer;

pub const DEFAULT_NUM_DEMOS: usize = 8;

/// Anything that can score a continuation given a prompt.
pub trait LoglikScorer: Sync {
    fn loglik(&self, prompt: &str, continuation: &str) -> Result<f64>;

    /// Upper bound on concurrent `loglik` calls.
    fn max_in_flight(&self) -> usize {
        1
    }
}

impl LoglikScorer for Gateway {
    fn loglik(&self, prompt: &str, continuation: &str) -> Result<f64> {
        self.loglikelihood(prompt, continuation)
    }

    fn max_in_flight(&self) -> usize {
        Gateway::max_in_flight(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub candidate_id: String,
    pub loglik: f64,
}

/// One line of `oracle.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSelection {
    pub query_id: String,
    pub demos: Vec<String>,
    pub step_scores: Vec<Vec<StepScore>>,
    pub final_loglik: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl OracleSelection {
    pub fn evaluations(&self) -> usize {
        self.step_scores.iter().map(Vec::len).sum()
    }
}

/// Greedy selection over `candidates` (sorted ascending). Each step scores
/// `demos ++ [candidate]` followed by the open query; ties go to the
/// smaller id. Exactly `min(k, |candidates|)` steps are taken.
pub fn select_from_candidates(
    query: &Query,
    candidates: &[&Query],
    k: usize,
    scorer: &dyn LoglikScorer,
    template: &PromptTemplate,
) -> Result<OracleSelection> {
    if k == 0 {
        return Err(Error::InvalidArgument("number of demonstrations must be at least 1".into()));
    }
    if candidates.is_empty() {
        return Err(Error::EmptySet(format!("candidate pool for {}", query.example_id)));
    }
    let mut remaining: Vec<&Query> = candidates.to_vec();
    remaining.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    remaining.dedup_by(|a, b| a.example_id == b.example_id);
    if remaining.iter().any(|c| c.example_id == query.example_id) {
        return Err(Error::DemoIsTarget(query.example_id.clone()));
    }

    let mut warnings = Vec::new();
    if k > remaining.len() {
        let msg = format!("k={k} exceeds the {} distinct candidates; selection truncated", remaining.len());
        log::warn!("query {}: {msg}", query.example_id);
        warnings.push(msg);
    }
    let steps = k.min(remaining.len());
    let continuation = template.answer_segment(query, &query.gold_answer)?;
    let threads = scorer.max_in_flight().max(1);
    let pool = if threads > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
            .map(Some)?
    } else {
        None
    };

    let mut demos: Vec<&Query> = Vec::with_capacity(steps);
    let mut step_scores = Vec::with_capacity(steps);
    let mut final_loglik = f64::NEG_INFINITY;
    for step in 1..=steps {
        let score_one = |cand: &&Query| -> Result<f64> {
            let mut seq = demos.clone();
            seq.push(cand);
            let prompt = render_with_gold(query, &seq, template)?;
            scorer.loglik(&prompt, &continuation)
        };
        let scored: Result<Vec<f64>> = match &pool {
            Some(p) => p.install(|| remaining.par_iter().map(score_one).collect()),
            None => remaining.iter().map(score_one).collect(),
        };
        let scored = scored.map_err(|e| Error::Scorer {
            step,
            source: Box::new(e),
        })?;
        let mut best = 0;
        for (i, &v) in scored.iter().enumerate() {
            if v > scored[best] {
                best = i;
            }
        }
        step_scores.push(
            remaining
                .iter()
                .zip(&scored)
                .map(|(c, &v)| StepScore {
                    candidate_id: c.example_id.clone(),
                    loglik: v,
                })
                .collect(),
        );
        final_loglik = scored[best];
        demos.push(remaining.remove(best));
    }
    Ok(OracleSelection {
        query_id: query.example_id.clone(),
        demos: demos.iter().map(|d| d.example_id.clone()).collect(),
        step_scores,
        final_loglik,
        warnings,
    })
}

/// Greedy selection over the deduplicated view of `pool`.
pub fn select_oracle_demos(
    query: &Query,
    pool: &CandidatePool,
    bank: &BTreeMap<String, Query>,
    k: usize,
    scorer: &dyn LoglikScorer,
    template: &PromptTemplate,
) -> Result<OracleSelection> {
    if pool.query_id != query.example_id {
        return Err(Error::Mismatch(format!(
            "pool belongs to {}, not {}",
            pool.query_id, query.example_id
        )));
    }
    let candidates = pool
        .deduplicated()
        .iter()
        .map(|id| bank.get(id).ok_or_else(|| missing_demo(id)))
        .collect::<Result<Vec<_>>>()?;
    let mut sel = select_from_candidates(query, &candidates, k, scorer, template)?;
    sel.warnings.extend(pool.warnings.iter().cloned());
    Ok(sel)
}

fn missing_demo(id: &str) -> Error {
    Error::DanglingReference {
        line: 0,
        example_id: id.to_string(),
    }
}

/// Renders the selected demonstrations in selection order, completes the
/// prompt and scores the output into an ICL record.
pub fn materialize_icl_record(
    selection: &OracleSelection,
    queries: &BTreeMap<String, Query>,
    gateway: &Gateway,
    template: &PromptTemplate,
    decode: &DecodeConfig,
) -> Result<ResponseRecord> {
    let query = queries
        .get(&selection.query_id)
        .ok_or_else(|| missing_demo(&selection.query_id))?;
    let demos = selection
        .demos
        .iter()
        .map(|id| queries.get(id).ok_or_else(|| missing_demo(id)))
        .collect::<Result<Vec<_>>>()?;
    let prompt = render_with_gold(query, &demos, template)?;
    let out = gateway.complete(&prompt, decode)?;
    let (_, label) = score_answer(query.task, &out.text, &query.gold_answer);
    Ok(ResponseRecord {
        model_id: gateway.model().to_string(),
        example_id: query.example_id.clone(),
        setting: Setting::Icl,
        prompt_text: prompt,
        raw_output: out.text,
        label,
        prompt_token_count: out.token_count_prompt,
    })
}
