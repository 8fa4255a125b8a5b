//! Baby-step curriculum schedules ranked by predicted ICL learning gain,
//! and per-example loss dynamics summarised by zone.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::selective::QueryProbs;
use crate::zones::MergedZone;

pub const DEFAULT_BUCKETS: usize = 3;
pub const DEFAULT_EPOCHS_PER_STAGE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedExample {
    pub example_id: String,
    pub gain: f64,
}

/// Descending `p_icl − p_dp`, ties by ascending id.
pub fn rank_by_learning_gain(examples: &[String], probs: &[QueryProbs]) -> Result<Vec<RankedExample>> {
    let by_id: BTreeMap<&str, &QueryProbs> = probs.iter().map(|p| (p.example_id.as_str(), p)).collect();
    let mut ranked = examples
        .iter()
        .map(|id| {
            let p = by_id.get(id.as_str()).ok_or_else(|| Error::MissingProbability(id.clone()))?;
            Ok(RankedExample {
                example_id: id.clone(),
                gain: p.p_icl - p.p_dp,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.gain.total_cmp(&a.gain).then_with(|| a.example_id.cmp(&b.example_id)));
    Ok(ranked)
}

/// Sizes of `n_buckets` contiguous near-equal buckets over `n` items; the
/// first `n % n_buckets` buckets take one extra.
pub fn bucket_sizes(n: usize, n_buckets: usize) -> Result<Vec<usize>> {
    if n_buckets == 0 {
        return Err(Error::InvalidArgument("need at least one bucket".into()));
    }
    if n == 0 {
        return Err(Error::EmptySet("curriculum examples".into()));
    }
    if n_buckets > n {
        return Err(Error::InvalidArgument(format!("{n_buckets} buckets for {n} examples")));
    }
    let (base, extra) = (n / n_buckets, n % n_buckets);
    Ok((0..n_buckets).map(|i| base + usize::from(i < extra)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub epoch: usize,
    pub seed: u64,
    pub order: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub stage: usize,
    pub pool: Vec<String>,
    pub epochs: Vec<EpochPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneHyperparameters {
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for FinetuneHyperparameters {
    fn default() -> Self {
        FinetuneHyperparameters { lr: 1e-5, batch_size: 4 }
    }
}

/// `schedule.json`: everything an external trainer needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub method: String,
    pub seed: u64,
    pub n_buckets: usize,
    pub epochs_per_stage: usize,
    pub total_epochs: usize,
    pub buckets: Vec<Vec<String>>,
    pub stages: Vec<Stage>,
    pub hyperparameters: FinetuneHyperparameters,
    /// Whether optimiser state carries across stages.
    pub optimizer_state: String,
}

fn build(method: &str, ranked: &[String], n_buckets: usize, epochs_per_stage: usize, seed: u64) -> Result<Schedule> {
    if epochs_per_stage == 0 {
        return Err(Error::InvalidArgument("epochs per stage must be at least 1".into()));
    }
    let sizes = bucket_sizes(ranked.len(), n_buckets)?;
    let mut buckets = Vec::with_capacity(n_buckets);
    let mut at = 0;
    for s in sizes {
        buckets.push(ranked[at..at + s].to_vec());
        at += s;
    }
    let mut stages = Vec::with_capacity(n_buckets);
    let mut pool: Vec<String> = Vec::new();
    let mut global_epoch = 0;
    for (i, bucket) in buckets.iter().enumerate() {
        pool.extend(bucket.iter().cloned());
        let epochs = (0..epochs_per_stage)
            .map(|_| {
                global_epoch += 1;
                let seed = rng::derive_seed(seed, &format!("curriculum/{method}/epoch/{global_epoch}"));
                let mut order = pool.clone();
                order.shuffle(&mut rng::seeded(seed));
                EpochPlan {
                    epoch: global_epoch,
                    seed,
                    order,
                }
            })
            .collect();
        stages.push(Stage {
            stage: i + 1,
            pool: pool.clone(),
            epochs,
        });
    }
    Ok(Schedule {
        method: method.to_string(),
        seed,
        n_buckets,
        epochs_per_stage,
        total_epochs: global_epoch,
        buckets,
        stages,
        hyperparameters: FinetuneHyperparameters::default(),
        optimizer_state: "continuous".to_string(),
    })
}

/// Splits the ranked list into buckets and introduces them cumulatively,
/// `epochs_per_stage` shuffled epochs per stage.
pub fn make_schedule(ranked: &[String], n_buckets: usize, epochs_per_stage: usize, seed: u64) -> Result<Schedule> {
    build("zpd", ranked, n_buckets, epochs_per_stage, seed)
}

/// The same scheduler over a seeded random ranking.
pub fn random_schedule(examples: &[String], n_buckets: usize, epochs_per_stage: usize, seed: u64) -> Result<Schedule> {
    let mut order = examples.to_vec();
    order.sort();
    order.shuffle(&mut rng::seeded(rng::derive_seed(seed, "curriculum/random/ranking")));
    build("random", &order, n_buckets, epochs_per_stage, seed)
}

/// One line of `loss_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossLogEntry {
    pub example_id: String,
    pub epoch: usize,
    pub loss: f64,
}

/// Groups log lines into per-example loss sequences ordered by epoch.
pub fn collect_loss_log(entries: &[LossLogEntry]) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut by_id: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
    for e in entries {
        if by_id.entry(e.example_id.clone()).or_default().insert(e.epoch, e.loss).is_some() {
            return Err(Error::RaggedEpochs(format!(
                "duplicate loss for {} at epoch {}",
                e.example_id, e.epoch
            )));
        }
    }
    Ok(by_id
        .into_iter()
        .map(|(id, m)| (id, m.into_values().collect()))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExampleDynamics {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossDynamics {
    pub epochs: usize,
    /// Set when only one epoch was logged, so every variance is 0.
    pub low_confidence: bool,
    pub per_example: BTreeMap<String, ExampleDynamics>,
}

/// Mean and population variance of each example's loss across epochs.
pub fn loss_dynamics(per_epoch: &BTreeMap<String, Vec<f64>>) -> Result<LossDynamics> {
    let epochs = per_epoch
        .values()
        .next()
        .map(Vec::len)
        .ok_or_else(|| Error::EmptySet("loss log".into()))?;
    let mut per_example = BTreeMap::new();
    for (id, losses) in per_epoch {
        if losses.len() != epochs {
            return Err(Error::RaggedEpochs(format!(
                "{id} has {} epochs, expected {epochs}",
                losses.len()
            )));
        }
        if epochs == 0 {
            return Err(Error::EmptySet(format!("losses for {id}")));
        }
        if losses.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidArgument(format!("{id} has a negative or non-finite loss")));
        }
        let n = epochs as f64;
        let mean = losses.iter().sum::<f64>() / n;
        let variance = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
        per_example.insert(id.clone(), ExampleDynamics { mean, variance });
    }
    Ok(LossDynamics {
        epochs,
        low_confidence: epochs == 1,
        per_example,
    })
}

/// One row of `zone_loss.csv`; means are empty for zones with no examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneLossRow {
    pub zone: MergedZone,
    pub count: usize,
    pub mean_loss: Option<f64>,
    pub mean_variance: Option<f64>,
}

pub fn zone_loss_summary(dynamics: &LossDynamics, zones: &BTreeMap<String, MergedZone>) -> Result<Vec<ZoneLossRow>> {
    let mut acc: BTreeMap<MergedZone, (usize, f64, f64)> = MergedZone::ALL.iter().map(|&z| (z, (0, 0.0, 0.0))).collect();
    for (id, d) in &dynamics.per_example {
        let z = zones
            .get(id)
            .ok_or_else(|| Error::Mismatch(format!("example {id} has no zone")))?;
        let slot = acc.get_mut(z).unwrap();
        slot.0 += 1;
        slot.1 += d.mean;
        slot.2 += d.variance;
    }
    Ok(MergedZone::ALL
        .iter()
        .map(|z| {
            let (n, m, v) = acc[z];
            ZoneLossRow {
                zone: *z,
                count: n,
                mean_loss: (n > 0).then(|| m / n as f64),
                mean_variance: (n > 0).then(|| v / n as f64),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("e{i:02}")).collect()
    }

    fn probs(gains: &[(&str, f64)]) -> Vec<QueryProbs> {
        gains
            .iter()
            .map(|&(id, g)| QueryProbs {
                example_id: id.into(),
                p_dp: 0.2,
                p_icl: 0.2 + g,
            })
            .collect()
    }

    #[test]
    fn ranking_examples() {
        let ex: Vec<String> = ["q1", "q2", "q3"].iter().map(|s| s.to_string()).collect();
        let r = rank_by_learning_gain(&ex, &probs(&[("q1", 0.4), ("q2", 0.1), ("q3", 0.7)])).unwrap();
        let order: Vec<&str> = r.iter().map(|e| e.example_id.as_str()).collect();
        assert_eq!(order, ["q3", "q1", "q2"]);
        let r = rank_by_learning_gain(&ex, &probs(&[("q3", 0.1), ("q1", 0.1), ("q2", 0.1)])).unwrap();
        assert_eq!(r[0].example_id, "q1");
        let r = rank_by_learning_gain(&ex, &probs(&[("q1", -0.1), ("q2", 0.1), ("q3", 0.0)])).unwrap();
        assert_eq!(r[2].example_id, "q1");
        assert!(matches!(
            rank_by_learning_gain(&ex, &probs(&[("q1", 0.1)])),
            Err(Error::MissingProbability(_))
        ));
    }

    #[test]
    fn six_examples_three_buckets() {
        let s = make_schedule(&ids(6), 3, 2, 0).unwrap();
        let pools: Vec<usize> = s.stages.iter().map(|st| st.pool.len()).collect();
        assert_eq!(pools, vec![2, 4, 6]);
        assert_eq!(s.total_epochs, 6);
        assert_eq!(s.hyperparameters, FinetuneHyperparameters { lr: 1e-5, batch_size: 4 });
        assert_eq!(s.optimizer_state, "continuous");
    }

    #[test]
    fn remainder_goes_to_front() {
        assert_eq!(bucket_sizes(7, 3).unwrap(), vec![3, 2, 2]);
        assert!(bucket_sizes(2, 3).is_err());
        let s = make_schedule(&ids(5), 1, 1, 0).unwrap();
        assert_eq!(s.stages.len(), 1);
        assert_eq!(s.stages[0].pool, ids(5));
    }

    #[test]
    fn random_baseline() {
        let a = random_schedule(&ids(9), 3, 2, 4).unwrap();
        assert_eq!(a, random_schedule(&ids(9), 3, 2, 4).unwrap());
        let mut flat: Vec<String> = a.buckets.concat();
        flat.sort();
        assert_eq!(flat, ids(9));
        let sizes: Vec<usize> = a.buckets.iter().map(Vec::len).collect();
        let z: Vec<usize> = make_schedule(&ids(9), 3, 2, 4).unwrap().buckets.iter().map(Vec::len).collect();
        assert_eq!(sizes, z);
    }

    #[test]
    fn dynamics_examples() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), vec![1.0, 0.5, 0.0]);
        m.insert("b".to_string(), vec![0.3, 0.3, 0.3]);
        let d = loss_dynamics(&m).unwrap();
        assert!((d.per_example["a"].mean - 0.5).abs() < 1e-15);
        assert!((d.per_example["a"].variance - 1.0 / 6.0).abs() < 1e-15);
        assert!(d.per_example["b"].variance.abs() < 1e-15);
        assert!(!d.low_confidence);
        let mut one = BTreeMap::new();
        one.insert("a".to_string(), vec![0.7]);
        let d = loss_dynamics(&one).unwrap();
        assert!(d.low_confidence);
        assert_eq!(d.per_example["a"].variance, 0.0);
        m.insert("c".to_string(), vec![0.1]);
        assert!(matches!(loss_dynamics(&m), Err(Error::RaggedEpochs(_))));
    }

    #[test]
    fn zone_summary() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), vec![0.1]);
        m.insert("b".to_string(), vec![0.3]);
        m.insert("c".to_string(), vec![0.9]);
        let d = loss_dynamics(&m).unwrap();
        let zones: BTreeMap<String, MergedZone> = [("a", MergedZone::Ok), ("b", MergedZone::Ok), ("c", MergedZone::Fail)]
            .iter()
            .map(|&(k, z)| (k.to_string(), z))
            .collect();
        let rows = zone_loss_summary(&d, &zones).unwrap();
        assert!((rows[0].mean_loss.unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(rows[1].count, 0);
        assert!(rows[1].mean_loss.is_none());
        assert_eq!(rows[2].mean_loss, Some(0.9));
        let mut partial = zones.clone();
        partial.remove("c");
        assert!(zone_loss_summary(&d, &partial).is_err());
    }

    #[test]
    fn log_collection() {
        let e = |id: &str, epoch, loss| LossLogEntry {
            example_id: id.into(),
            epoch,
            loss,
        };
        let m = collect_loss_log(&[e("a", 2, 0.5), e("a", 1, 0.9)]).unwrap();
        assert_eq!(m["a"], vec![0.9, 0.5]);
        assert!(collect_loss_log(&[e("a", 1, 0.5), e("a", 1, 0.9)]).is_err());
    }

    proptest! {
        #[test]
        fn variance_two_ways(xs in proptest::collection::vec(0.0f64..10.0, 1..30)) {
            let mut m = BTreeMap::new();
            m.insert("x".to_string(), xs.clone());
            let d = loss_dynamics(&m).unwrap().per_example["x"];
            let n = xs.len() as f64;
            let ex2 = xs.iter().map(|x| x * x).sum::<f64>() / n;
            prop_assert!((d.variance - (ex2 - d.mean * d.mean)).abs() < 1e-10);
            prop_assert!(d.variance >= 0.0);
        }

        #[test]
        fn schedule_invariants(n in 1usize..60, b in 1usize..8, e in 1usize..4, seed in 0u64..100) {
            prop_assume!(b <= n);
            let s = make_schedule(&ids(n), b, e, seed).unwrap();
            let sizes: Vec<usize> = s.buckets.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            prop_assert_eq!(s.buckets.concat(), ids(n));
            prop_assert_eq!(s.total_epochs, b * e);
            for (i, st) in s.stages.iter().enumerate() {
                prop_assert_eq!(&st.pool, &s.buckets[..=i].concat());
            }
        }
    }
}
