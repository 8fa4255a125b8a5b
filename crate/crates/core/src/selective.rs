//! Selective ICL: route a query to demonstrations only when it is predicted
//! too hard to answer directly yet learnable in context, then trade accuracy
//! against prompt tokens over a threshold grid.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ResponseRecord, ResponseSet, Setting};
use crate::error::{Error, Result};
use crate::irt::{IrtData, IrtParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryProbs {
    pub example_id: String,
    pub p_dp: f64,
    pub p_icl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptMode {
    #[serde(rename = "DP")]
    Dp,
    #[serde(rename = "ICL")]
    Icl,
}

/// Predicted probabilities without (gate 0) and with (gate 1) demonstrations.
pub fn predict_probs(params: &IrtParams, data: &IrtData, model: usize, example_ids: &[String]) -> Result<Vec<QueryProbs>> {
    example_ids
        .iter()
        .map(|id| {
            let slot = data.item_slot(id).ok_or_else(|| Error::MissingEmbedding(id.clone()))?;
            let item = data.item(slot);
            Ok(QueryProbs {
                example_id: id.clone(),
                p_dp: params.forward(model, &item, 0)?,
                p_icl: params.forward(model, &item, 1)?,
            })
        })
        .collect()
}

pub fn decide_prompt_mode(p: &QueryProbs, tau1: f64, tau2: f64) -> PromptMode {
    if p.p_dp < tau1 && p.p_icl > tau2 {
        PromptMode::Icl
    } else {
        PromptMode::Dp
    }
}

/// Example ids routed to ICL at `(tau1, tau2)`.
pub fn routed_icl(probs: &[QueryProbs], tau1: f64, tau2: f64) -> BTreeSet<String> {
    probs
        .iter()
        .filter(|p| decide_prompt_mode(p, tau1, tau2) == PromptMode::Icl)
        .map(|p| p.example_id.clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub label: bool,
    pub tokens: u64,
}

/// Recorded outcomes of one query under both prompt modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RecordedOutcomes {
    pub dp: Option<Outcome>,
    pub icl: Option<Outcome>,
}

/// DP outcomes come from the model's DP records; ICL outcomes from the
/// strategy records (any setting) of the same model.
pub fn outcomes_from_records(
    rs: &ResponseSet,
    model_id: &str,
    strategy: &[ResponseRecord],
) -> Result<BTreeMap<String, RecordedOutcomes>> {
    if rs.model_index(model_id).is_none() {
        return Err(Error::UnknownModel(model_id.to_string()));
    }
    let mut out: BTreeMap<String, RecordedOutcomes> = BTreeMap::new();
    for r in rs.records().iter().filter(|r| r.model_id == model_id && r.setting == Setting::Dp) {
        out.entry(r.example_id.clone()).or_default().dp = Some(Outcome {
            label: r.label,
            tokens: r.prompt_token_count,
        });
    }
    for r in strategy.iter().filter(|r| r.model_id == model_id) {
        out.entry(r.example_id.clone()).or_default().icl = Some(Outcome {
            label: r.label,
            tokens: r.prompt_token_count,
        });
    }
    Ok(out)
}

/// One threshold pair and its outcome; a row of `policy_points.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyPoint {
    pub tau1: f64,
    pub tau2: f64,
    pub accuracy: f64,
    pub total_tokens: u64,
    pub n_icl_routed: usize,
}

/// Resolved per-query outcomes in `probs` order, so grid evaluation does
/// no map lookups.
struct Table<'a> {
    probs: &'a [QueryProbs],
    dp: Vec<Option<Outcome>>,
    icl: Vec<Option<Outcome>>,
}

impl<'a> Table<'a> {
    fn new(outcomes: &BTreeMap<String, RecordedOutcomes>, probs: &'a [QueryProbs]) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptySet("policy evaluation needs at least one query".into()));
        }
        let mut dp = Vec::with_capacity(probs.len());
        let mut icl = Vec::with_capacity(probs.len());
        for p in probs {
            let o = outcomes
                .get(&p.example_id)
                .ok_or_else(|| Error::Mismatch(format!("no recorded outcomes for {}", p.example_id)))?;
            dp.push(o.dp);
            icl.push(o.icl);
        }
        Ok(Table { probs, dp, icl })
    }

    fn point(&self, tau1: f64, tau2: f64) -> Result<PolicyPoint> {
        let (mut correct, mut tokens, mut n_icl) = (0usize, 0u64, 0usize);
        for (i, p) in self.probs.iter().enumerate() {
            let mode = decide_prompt_mode(p, tau1, tau2);
            let o = match mode {
                PromptMode::Dp => self.dp[i],
                PromptMode::Icl => {
                    n_icl += 1;
                    self.icl[i]
                }
            };
            let o = o.ok_or_else(|| {
                Error::Mismatch(format!("query {} routed to {mode:?} has no recorded outcome", p.example_id))
            })?;
            correct += usize::from(o.label);
            tokens += o.tokens;
        }
        Ok(PolicyPoint {
            tau1,
            tau2,
            accuracy: correct as f64 / self.probs.len() as f64,
            total_tokens: tokens,
            n_icl_routed: n_icl,
        })
    }
}

pub fn evaluate_policy(
    outcomes: &BTreeMap<String, RecordedOutcomes>,
    probs: &[QueryProbs],
    tau1: f64,
    tau2: f64,
) -> Result<PolicyPoint> {
    Table::new(outcomes, probs)?.point(tau1, tau2)
}

/// `{step, 2·step, ...}` strictly inside (0, 1); a step of 0.01 gives 99
/// values.
pub fn threshold_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step < 1.0) {
        return Err(Error::InvalidArgument(format!("grid step must lie in (0, 1), got {step}")));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() < 1e-9 {
        // exact reciprocal steps are generated as i/n to avoid drift
        return Ok((1..n as usize).map(|i| i as f64 / n).collect());
    }
    Ok((1..).map(|i| i as f64 * step).take_while(|&t| t < 1.0).collect())
}

pub fn default_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

/// Every `(tau1, tau2)` in `grid × grid`, in row-major order.
pub fn grid_search(
    outcomes: &BTreeMap<String, RecordedOutcomes>,
    probs: &[QueryProbs],
    grid: &[f64],
) -> Result<Vec<PolicyPoint>> {
    let table = Table::new(outcomes, probs)?;
    let pairs: Vec<(f64, f64)> = grid.iter().flat_map(|&a| grid.iter().map(move |&b| (a, b))).collect();
    pairs.par_iter().map(|&(a, b)| table.point(a, b)).collect()
}

fn tau_cmp(a: &PolicyPoint, b: &PolicyPoint) -> std::cmp::Ordering {
    a.tau1.total_cmp(&b.tau1).then(a.tau2.total_cmp(&b.tau2))
}

/// Points not dominated on (max accuracy, min tokens), ascending by tokens.
/// Duplicate outcomes keep the lexicographically smallest thresholds.
pub fn pareto_frontier(points: &[PolicyPoint]) -> Result<Vec<PolicyPoint>> {
    if points.is_empty() {
        return Err(Error::EmptySet("no policy points".into()));
    }
    let mut sorted: Vec<&PolicyPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        a.total_tokens
            .cmp(&b.total_tokens)
            .then(b.accuracy.total_cmp(&a.accuracy))
            .then(tau_cmp(a, b))
    });
    let mut out: Vec<PolicyPoint> = Vec::new();
    for p in sorted {
        if out.last().is_none_or(|best| p.accuracy > best.accuracy) {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// Most accurate frontier point within `budget` tokens.
pub fn select_under_budget(frontier: &[PolicyPoint], budget: u64) -> Option<&PolicyPoint> {
    frontier
        .iter()
        .filter(|p| p.total_tokens <= budget)
        .max_by(|a, b| a.accuracy.total_cmp(&b.accuracy).then(b.total_tokens.cmp(&a.total_tokens)))
}
