//! Response tables, minibatch training with best-epoch selection, and
//! evaluation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{auc_opt, pearson};
use super::model::{init_params, Adam, IrtConfig, IrtParams, ItemRef, Observation, Variant};
use crate::data::{ResponseSet, Setting, Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::rng;
use crate::zones::MergedZone;

/// One response: model index, item slot, gate and label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Row {
    pub model: usize,
    pub item: usize,
    pub gate: u8,
    pub label: bool,
}

/// Dense response table with an item embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct IrtData {
    pub models: Vec<String>,
    pub items: Vec<String>,
    pub emb_dim: usize,
    /// `items.len() × emb_dim`, row-major; empty when no embeddings.
    pub embeddings: Vec<f64>,
    pub rows: Vec<Row>,
}

impl IrtData {
    /// Items are the queries referenced by any record, ascending by id.
    /// With `require_embeddings` every item must carry an embedding.
    pub fn from_response_set(rs: &ResponseSet, require_embeddings: bool) -> Result<Self> {
        let items: Vec<String> = rs
            .records()
            .iter()
            .map(|r| r.example_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let slot: BTreeMap<&str, usize> = items.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut emb_dim = 0;
        let mut embeddings = Vec::new();
        if require_embeddings {
            for id in &items {
                let e = rs
                    .query(id)
                    .and_then(|q| q.embedding.as_ref())
                    .ok_or_else(|| Error::MissingEmbedding(id.clone()))?;
                if emb_dim == 0 {
                    emb_dim = e.len();
                } else if e.len() != emb_dim {
                    return Err(Error::DimensionMismatch {
                        expected: emb_dim,
                        found: e.len(),
                    });
                }
                embeddings.extend(e.iter().map(|&x| x as f64));
            }
        }
        let rows = rs
            .records()
            .iter()
            .map(|r| Row {
                model: rs.model_index(&r.model_id).expect("model of a record"),
                item: slot[r.example_id.as_str()],
                gate: r.setting.gate(),
                label: r.label,
            })
            .collect();
        Ok(IrtData {
            models: rs.models().to_vec(),
            items,
            emb_dim,
            embeddings,
            rows,
        })
    }

    pub fn item(&self, slot: usize) -> ItemRef<'_> {
        let embedding = (!self.embeddings.is_empty()).then(|| &self.embeddings[slot * self.emb_dim..(slot + 1) * self.emb_dim]);
        ItemRef { slot, embedding }
    }

    pub fn item_slot(&self, example_id: &str) -> Option<usize> {
        self.items.binary_search_by(|id| id.as_str().cmp(example_id)).ok()
    }

    pub fn observation(&self, row: &Row) -> Observation<'_> {
        Observation {
            model: row.model,
            item: self.item(row.item),
            gate: row.gate,
            label: row.label,
        }
    }

    /// Rows whose item falls in `split`.
    pub fn rows_in(&self, assignment: &SplitAssignment, split: Split) -> Vec<Row> {
        self.rows
            .iter()
            .filter(|r| assignment.get(&self.items[r.item]) == Some(split))
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub auc_dp: Option<f64>,
    pub auc_icl: Option<f64>,
    pub auc_overall: Option<f64>,
    pub acc_dp: Option<f64>,
    pub acc_icl: Option<f64>,
    pub acc_overall: Option<f64>,
    pub n_dp: usize,
    pub n_icl: usize,
}

/// AUC and accuracy at 0.5, per setting and pooled. Undefined AUCs
/// (single-class labels) are `None`.
pub fn evaluate(params: &IrtParams, data: &IrtData, rows: &[Row]) -> Result<Evaluation> {
    let probs: Vec<f64> = rows
        .par_iter()
        .map(|r| params.forward(r.model, &data.item(r.item), r.gate))
        .collect::<Result<_>>()?;
    let group = |gate: Option<u8>| {
        let (labels, scores): (Vec<bool>, Vec<f64>) = rows
            .iter()
            .zip(&probs)
            .filter(|(r, _)| gate.is_none_or(|g| r.gate == g))
            .map(|(r, &p)| (r.label, p))
            .unzip();
        let acc = (!labels.is_empty()).then(|| {
            labels.iter().zip(&scores).filter(|(&l, &p)| (p >= 0.5) == l).count() as f64 / labels.len() as f64
        });
        (auc_opt(&labels, &scores), acc, labels.len())
    };
    let (auc_dp, acc_dp, n_dp) = group(Some(0));
    let (auc_icl, acc_icl, n_icl) = group(Some(1));
    let (auc_overall, acc_overall, _) = group(None);
    Ok(Evaluation {
        auc_dp,
        auc_icl,
        auc_overall,
        acc_dp,
        acc_icl,
        acc_overall,
        n_dp,
        n_icl,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val: Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub selected_epoch: usize,
    /// `"val_auc_overall"`, or `"val_loss"` when AUC was never defined.
    pub selected_by: String,
}

fn observations<'a>(data: &'a IrtData, rows: &[Row]) -> Vec<Observation<'a>> {
    rows.iter().map(|r| data.observation(r)).collect()
}

/// Trains on the train split (DP rows only below `mirt_icl`), evaluates
/// every epoch on the validation split and returns the parameters of the
/// epoch with the best validation AUC.
pub fn train(data: &IrtData, split: &SplitAssignment, cfg: &IrtConfig) -> Result<(IrtParams, TrainingHistory)> {
    let joint = cfg.variant == Variant::MirtIcl;
    let train_rows: Vec<Row> = data
        .rows_in(split, Split::Train)
        .into_iter()
        .filter(|r| joint || r.gate == 0)
        .collect();
    let val_rows = data.rows_in(split, Split::Val);
    if train_rows.is_empty() {
        return Err(Error::EmptySet("training split".into()));
    }
    if val_rows.is_empty() {
        return Err(Error::EmptySet("validation split".into()));
    }
    if cfg.content_aware() {
        if data.embeddings.is_empty() {
            return Err(Error::MissingEmbedding("all items".into()));
        }
        if data.emb_dim != cfg.embedding_dim {
            return Err(Error::DimensionMismatch {
                expected: cfg.embedding_dim,
                found: data.emb_dim,
            });
        }
    }
    train_rows_with(data, &train_rows, &val_rows, cfg)
}

pub fn train_rows_with(data: &IrtData, train_rows: &[Row], val_rows: &[Row], cfg: &IrtConfig) -> Result<(IrtParams, TrainingHistory)> {
    let mut params = init_params(cfg, data.models.len(), data.items.len())?;
    let train_obs = observations(data, train_rows);
    let val_obs = observations(data, val_rows);
    let mut adam = Adam::new(params.values.len(), cfg.adam_betas, cfg.adam_eps);
    let mut shuffle_rng = rng::seeded(rng::derive_seed(cfg.seed, "irt/shuffle"));
    let initial_train_loss = params.loss(&train_obs)?;

    let mut order: Vec<usize> = (0..train_obs.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, IrtParams)> = None;
    let mut best_key = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Observation<'_>> = chunk.iter().map(|&i| train_obs[i]).collect();
            let (_, grads) = params.loss_and_grads(&batch)?;
            adam.step(&mut params.values, &grads, cfg.lr);
        }
        let record = EpochRecord {
            epoch,
            train_loss: params.loss(&train_obs)?,
            val_loss: params.loss(&val_obs)?,
            val: evaluate(&params, data, val_rows)?,
        };
        log::debug!(
            "epoch {epoch}: train loss {:.4}, val auc {:?}",
            record.train_loss,
            record.val.auc_overall
        );
        // AUC first; among undefined AUCs the lower validation loss wins.
        let key = (record.val.auc_overall.unwrap_or(f64::NEG_INFINITY), -record.val_loss);
        if best.is_none() || key.0 > best_key.0 || (key.0 == best_key.0 && key.0 == f64::NEG_INFINITY && key.1 > best_key.1) {
            best_key = key;
            best = Some((epoch, params.clone()));
        }
        epochs.push(record);
    }
    let (selected_epoch, mut chosen) = match best {
        Some(b) => b,
        None => (0, params),
    };
    if !cfg.content_aware() {
        let trained: BTreeSet<usize> = train_rows.iter().map(|r| r.item).collect();
        fill_untrained_items(&mut chosen, &trained);
    }
    let selected_by = if best_key.0.is_finite() { "val_auc_overall" } else { "val_loss" };
    Ok((
        chosen,
        TrainingHistory {
            initial_train_loss,
            epochs,
            selected_epoch,
            selected_by: selected_by.to_string(),
        },
    ))
}

/// Per-item parameters of items never seen in training are replaced by the
/// mean over trained items, so held-out items get a population prior.
pub fn fill_untrained_items(params: &mut IrtParams, trained: &BTreeSet<usize>) {
    let l = params.layout.clone();
    if trained.is_empty() {
        return;
    }
    let mut fill = |at: usize, width: usize| {
        for h in 0..width {
            let mean = trained.iter().map(|&i| params.values[at + i * width + h]).sum::<f64>() / trained.len() as f64;
            for i in (0..l.n_items).filter(|i| !trained.contains(i)) {
                params.values[at + i * width + h] = mean;
            }
        }
    };
    if let Some(at) = l.item_d {
        fill(at, 1);
    }
    if let Some(at) = l.item_alpha {
        fill(at, l.k);
    }
}

/// Merged zone implied by predicted probabilities: correct directly,
/// correct only with demonstrations, or neither.
pub fn predicted_zone(p_dp: f64, p_icl: f64, threshold: f64) -> MergedZone {
    if p_dp > threshold {
        MergedZone::Ok
    } else if p_icl > threshold {
        MergedZone::Zpd
    } else {
        MergedZone::Fail
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub n: usize,
}

/// Pearson r between `θᵀα − d` and `θᶜᵀαᶜ` over the given item slots.
pub fn difficulty_learnability_correlation(params: &IrtParams, data: &IrtData, slots: &[usize], model: usize) -> Result<Correlation> {
    if slots.len() < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 items, got {}", slots.len())));
    }
    let (u, v): (Vec<f64>, Vec<f64>) = slots
        .iter()
        .map(|&s| params.decompose(model, &data.item(s)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok(Correlation {
        r: pearson(&u, &v)?,
        n: slots.len(),
    })
}

/// Predicted `(p_dp, p_icl)` per item slot.
pub fn predict_pairs(params: &IrtParams, data: &IrtData, model: usize, slots: &[usize]) -> Result<Vec<(f64, f64)>> {
    slots
        .iter()
        .map(|&s| {
            let item = data.item(s);
            Ok((params.forward(model, &item, 0)?, params.forward(model, &item, 1)?))
        })
        .collect()
}

/// Setting of a gate value.
pub fn setting_of(gate: u8) -> Setting {
    if gate == 1 {
        Setting::Icl
    } else {
        Setting::Dp
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_ids, Query, ResponseRecord, Task};
    use crate::irt::model::ItemMode;

    fn toy(models: usize, items: usize, correct: impl Fn(usize, usize) -> bool) -> (IrtData, SplitAssignment) {
        let mut queries = BTreeMap::new();
        let mut records = Vec::new();
        for j in 0..items {
            let id = format!("q{j:03}");
            let mut q = Query::new(&id, Task::MathQa, "x", "1");
            q.embedding = Some(vec![(j % 5) as f32 / 5.0, 1.0, (j % 3) as f32 / 3.0]);
            queries.insert(id.clone(), q);
            for m in 0..models {
                for setting in [Setting::Dp, Setting::Icl] {
                    records.push(ResponseRecord {
                        model_id: format!("m{m}"),
                        example_id: id.clone(),
                        setting,
                        prompt_text: String::new(),
                        raw_output: String::new(),
                        label: correct(m, j) || (setting == Setting::Icl && j % 2 == 0),
                        prompt_token_count: 1,
                    });
                }
            }
        }
        let rs = ResponseSet::new(queries, records).unwrap();
        let ids = rs.queries().keys().cloned().collect();
        (IrtData::from_response_set(&rs, true).unwrap(), split_ids(ids, [0.6, 0.2, 0.2], 1).unwrap())
    }

    #[test]
    fn one_pl_ranks_perfect_model_first() {
        let (data, split) = toy(3, 40, |m, j| m == 0 || (m == 1 && j % 2 == 0) || (m == 2 && j % 4 == 0));
        let cfg = IrtConfig {
            variant: Variant::OnePl,
            lr: 0.05,
            epochs: 20,
            ..IrtConfig::default()
        };
        let (p, _) = train(&data, &split, &cfg).unwrap();
        let th: Vec<f64> = (0..3).map(|m| p.theta(m)[0]).collect();
        assert!(th[0] > th[1] && th[0] > th[2], "{th:?}");
    }

    #[test]
    fn first_epoch_descends() {
        let (data, split) = toy(3, 40, |m, j| (m + j) % 3 != 0);
        let cfg = IrtConfig {
            embedding_dim: 3,
            latent_dim: 4,
            lr: 0.01,
            epochs: 2,
            ..IrtConfig::default()
        };
        let (_, h) = train(&data, &split, &cfg).unwrap();
        assert!(h.epochs[0].train_loss < h.initial_train_loss);
        let best = h
            .epochs
            .iter()
            .max_by(|a, b| a.val.auc_overall.partial_cmp(&b.val.auc_overall).unwrap().then(b.epoch.cmp(&a.epoch)))
            .unwrap();
        assert_eq!(best.epoch, h.selected_epoch);
        assert_eq!(h.selected_by, "val_auc_overall");
    }

    #[test]
    fn classic_items_unseen_in_training_get_the_mean() {
        let (data, split) = toy(2, 30, |m, j| (m + j) % 2 == 0);
        let cfg = IrtConfig {
            variant: Variant::Mirt,
            item_mode: ItemMode::Classic,
            latent_dim: 2,
            lr: 0.05,
            epochs: 3,
            ..IrtConfig::default()
        };
        let (p, _) = train(&data, &split, &cfg).unwrap();
        let test = data.rows_in(&split, Split::Test);
        let at = p.layout.item_d.unwrap();
        let d: Vec<f64> = test.iter().map(|r| p.values[at + r.item]).collect();
        assert!(d.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn evaluation_reports_undefined_auc() {
        let (data, split) = toy(2, 20, |_, _| true);
        let cfg = IrtConfig {
            embedding_dim: 3,
            latent_dim: 2,
            epochs: 1,
            ..IrtConfig::default()
        };
        let (p, h) = train(&data, &split, &cfg).unwrap();
        assert_eq!(h.selected_by, "val_loss");
        let e = evaluate(&p, &data, &data.rows).unwrap();
        assert!(e.auc_overall.is_none());
        assert!(e.acc_overall.is_some());
    }

    #[test]
    fn zone_regimes_partition() {
        assert_eq!(predicted_zone(0.7, 0.9, 0.5), MergedZone::Ok);
        assert_eq!(predicted_zone(0.3, 0.9, 0.5), MergedZone::Zpd);
        assert_eq!(predicted_zone(0.3, 0.2, 0.5), MergedZone::Fail);
    }
}
