//! Zone assignment from paired DP/ICL correctness, zone distributions,
//! cross-model overlap and ICL gain/harm decomposition.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{ResponseSet, Setting};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ZoneLabel {
    #[serde(rename = "Z_OK")]
    Ok,
    #[serde(rename = "Z_ZPD")]
    Zpd,
    #[serde(rename = "Z_FAIL")]
    Fail,
    #[serde(rename = "Z_DEGRADE")]
    Degrade,
}

impl ZoneLabel {
    pub const ALL: [ZoneLabel; 4] = [ZoneLabel::Ok, ZoneLabel::Zpd, ZoneLabel::Fail, ZoneLabel::Degrade];

    pub fn merged(self) -> MergedZone {
        match self {
            ZoneLabel::Ok | ZoneLabel::Degrade => MergedZone::Ok,
            ZoneLabel::Zpd => MergedZone::Zpd,
            ZoneLabel::Fail => MergedZone::Fail,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ZoneLabel::Ok => "Z_OK",
            ZoneLabel::Zpd => "Z_ZPD",
            ZoneLabel::Fail => "Z_FAIL",
            ZoneLabel::Degrade => "Z_DEGRADE",
        }
    }
}

impl fmt::Display for ZoneLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Three-zone view with degrades folded into `Ok`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MergedZone {
    #[serde(rename = "Z_OK")]
    Ok,
    #[serde(rename = "Z_ZPD")]
    Zpd,
    #[serde(rename = "Z_FAIL")]
    Fail,
}

impl MergedZone {
    pub const ALL: [MergedZone; 3] = [MergedZone::Ok, MergedZone::Zpd, MergedZone::Fail];

    pub fn as_str(self) -> &'static str {
        match self {
            MergedZone::Ok => "Z_OK",
            MergedZone::Zpd => "Z_ZPD",
            MergedZone::Fail => "Z_FAIL",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Z_OK" | "ok" => Some(MergedZone::Ok),
            "Z_ZPD" | "zpd" => Some(MergedZone::Zpd),
            "Z_FAIL" | "fail" => Some(MergedZone::Fail),
            _ => None,
        }
    }
}

impl fmt::Display for MergedZone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn assign_zone(r_dp: bool, r_icl: bool) -> ZoneLabel {
    match (r_dp, r_icl) {
        (true, true) => ZoneLabel::Ok,
        (false, true) => ZoneLabel::Zpd,
        (false, false) => ZoneLabel::Fail,
        (true, false) => ZoneLabel::Degrade,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoneDistribution {
    pub model_id: String,
    pub counts: BTreeMap<ZoneLabel, usize>,
    pub merged_counts: BTreeMap<MergedZone, usize>,
    pub total: usize,
}

/// Per-query zone for one model, keyed by example id. Every example the
/// model has a record for must have both settings.
pub fn model_zones(rs: &ResponseSet, model_id: &str) -> Result<BTreeMap<String, ZoneLabel>> {
    if rs.model_index(model_id).is_none() {
        return Err(Error::UnknownModel(model_id.to_string()));
    }
    let mut out = BTreeMap::new();
    for ex in rs.examples_for(model_id) {
        let lookup = |setting| {
            rs.get(model_id, &ex, setting).ok_or_else(|| Error::Unpaired {
                model_id: model_id.to_string(),
                example_id: ex.clone(),
                missing: setting,
            })
        };
        let dp = lookup(Setting::Dp)?.label;
        let icl = lookup(Setting::Icl)?.label;
        out.insert(ex, assign_zone(dp, icl));
    }
    Ok(out)
}

pub fn zone_distribution(rs: &ResponseSet, model_id: &str) -> Result<ZoneDistribution> {
    let zones = model_zones(rs, model_id)?;
    let mut counts: BTreeMap<ZoneLabel, usize> = ZoneLabel::ALL.iter().map(|&z| (z, 0)).collect();
    let mut merged_counts: BTreeMap<MergedZone, usize> = MergedZone::ALL.iter().map(|&z| (z, 0)).collect();
    for z in zones.values() {
        *counts.get_mut(z).unwrap() += 1;
        *merged_counts.get_mut(&z.merged()).unwrap() += 1;
    }
    Ok(ZoneDistribution {
        model_id: model_id.to_string(),
        counts,
        merged_counts,
        total: zones.len(),
    })
}

pub fn overlap_coefficient<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet("overlap coefficient needs two nonempty sets".into()));
    }
    let inter = a.intersection(b).count();
    Ok(inter as f64 / a.len().min(b.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOverlap {
    pub model_a: String,
    pub model_b: String,
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    pub zone: MergedZone,
    pub max: f64,
    pub min: f64,
    pub avg: f64,
    pub pairs: Vec<PairOverlap>,
}

fn merged_set(rs: &ResponseSet, model_id: &str, zone: MergedZone) -> Result<BTreeSet<String>> {
    Ok(model_zones(rs, model_id)?
        .into_iter()
        .filter(|(_, z)| z.merged() == zone)
        .map(|(id, _)| id)
        .collect())
}

/// Overlap of the merged `zone` across every unordered model pair, in model
/// order of first appearance.
pub fn pairwise_overlap_stats(rs: &ResponseSet, zone: MergedZone) -> Result<OverlapStats> {
    let models = rs.models();
    if models.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "overlap needs at least 2 models, found {}",
            models.len()
        )));
    }
    let mut sets = Vec::with_capacity(models.len());
    for m in models {
        let set = merged_set(rs, m, zone)?;
        if set.is_empty() {
            return Err(Error::EmptyZone {
                model_id: m.clone(),
                zone: zone.to_string(),
            });
        }
        sets.push(set);
    }
    let mut pairs = Vec::new();
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            pairs.push(PairOverlap {
                model_a: models[i].clone(),
                model_b: models[j].clone(),
                overlap: overlap_coefficient(&sets[i], &sets[j])?,
            });
        }
    }
    Ok(summarize_pairs(zone, pairs))
}

fn summarize_pairs(zone: MergedZone, pairs: Vec<PairOverlap>) -> OverlapStats {
    let values: Vec<f64> = pairs.iter().map(|p| p.overlap).collect();
    OverlapStats {
        zone,
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        avg: values.iter().sum::<f64>() / values.len() as f64,
        pairs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IclEffect {
    pub gain: f64,
    pub harm: f64,
    pub net: f64,
}

/// Fractions of queries flipped 0→1 (gain) and 1→0 (harm) by a strategy.
pub fn icl_effect_decomposition(dp: &BTreeMap<String, bool>, strategy: &BTreeMap<String, bool>) -> Result<IclEffect> {
    if dp.len() != strategy.len() || dp.keys().zip(strategy.keys()).any(|(a, b)| a != b) {
        return Err(Error::Mismatch("DP and strategy labels cover different queries".into()));
    }
    if dp.is_empty() {
        return Err(Error::EmptySet("no queries to decompose".into()));
    }
    let n = dp.len() as f64;
    let (mut up, mut down) = (0usize, 0usize);
    for (d, s) in dp.values().zip(strategy.values()) {
        match (d, s) {
            (false, true) => up += 1,
            (true, false) => down += 1,
            _ => {}
        }
    }
    let gain = up as f64 / n;
    let harm = down as f64 / n;
    Ok(IclEffect {
        gain,
        harm,
        net: gain - harm,
    })
}

/// One row of `zones.csv`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoneRow {
    pub model_id: String,
    pub example_id: String,
    pub r_dp: u8,
    pub r_icl: u8,
    pub zone: ZoneLabel,
    pub merged_zone: MergedZone,
}

pub fn zone_rows(rs: &ResponseSet) -> Result<Vec<ZoneRow>> {
    let mut rows = Vec::new();
    for m in rs.models() {
        for (ex, z) in model_zones(rs, m)? {
            let (dp, icl) = match z {
                ZoneLabel::Ok => (1, 1),
                ZoneLabel::Zpd => (0, 1),
                ZoneLabel::Fail => (0, 0),
                ZoneLabel::Degrade => (1, 0),
            };
            rows.push(ZoneRow {
                model_id: m.clone(),
                example_id: ex,
                r_dp: dp,
                r_icl: icl,
                zone: z,
                merged_zone: z.merged(),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Query, ResponseRecord, Task};
    use proptest::prelude::*;

    fn record(model: &str, ex: &str, setting: Setting, label: bool) -> ResponseRecord {
        ResponseRecord {
            model_id: model.into(),
            example_id: ex.into(),
            setting,
            prompt_text: String::new(),
            raw_output: String::new(),
            label,
            prompt_token_count: 1,
        }
    }

    fn set(pairs: &[(&str, &str, bool, bool)]) -> ResponseSet {
        let mut queries = BTreeMap::new();
        let mut records = Vec::new();
        for &(m, ex, dp, icl) in pairs {
            queries.insert(ex.to_string(), Query::new(ex, Task::MathQa, "x", "1"));
            records.push(record(m, ex, Setting::Dp, dp));
            records.push(record(m, ex, Setting::Icl, icl));
        }
        ResponseSet::new(queries, records).unwrap()
    }

    #[test]
    fn four_pair_distribution() {
        let rs = set(&[
            ("m", "q1", true, true),
            ("m", "q2", false, true),
            ("m", "q3", false, false),
            ("m", "q4", true, false),
        ]);
        let d = zone_distribution(&rs, "m").unwrap();
        assert!(d.counts.values().all(|&c| c == 1));
        assert_eq!(d.merged_counts[&MergedZone::Ok], 2);
        assert_eq!(d.merged_counts[&MergedZone::Zpd], 1);
        assert_eq!(d.merged_counts[&MergedZone::Fail], 1);
        assert_eq!(d.total, 4);
    }

    #[test]
    fn unpaired_query_is_named() {
        let mut queries = BTreeMap::new();
        queries.insert("q7".to_string(), Query::new("q7", Task::MathQa, "x", "1"));
        let rs = ResponseSet::new(queries, vec![record("m", "q7", Setting::Dp, false)]).unwrap();
        let err = zone_distribution(&rs, "m").unwrap_err();
        assert!(err.to_string().contains("q7"), "{err}");
    }

    #[test]
    fn overlap_examples() {
        let a: BTreeSet<u32> = [1, 2, 3].into();
        let b: BTreeSet<u32> = [3, 4].into();
        assert_eq!(overlap_coefficient(&a, &b).unwrap(), 0.5);
        assert_eq!(overlap_coefficient(&a, &a).unwrap(), 1.0);
        assert_eq!(overlap_coefficient(&a, &[7].into()).unwrap(), 0.0);
        assert!(overlap_coefficient(&a, &BTreeSet::new()).is_err());
    }

    #[test]
    fn pair_stats_average() {
        let pairs = [0.2, 0.4, 0.6]
            .iter()
            .map(|&v| PairOverlap {
                model_a: "a".into(),
                model_b: "b".into(),
                overlap: v,
            })
            .collect();
        let s = summarize_pairs(MergedZone::Zpd, pairs);
        assert!((s.avg - 0.4).abs() < 1e-12);
        assert_eq!((s.max, s.min), (0.6, 0.2));
    }

    #[test]
    fn identical_models_overlap_fully() {
        let rs = set(&[("a", "q1", false, true), ("b", "q1", false, true), ("a", "q2", true, true), ("b", "q2", true, true)]);
        let s = pairwise_overlap_stats(&rs, MergedZone::Zpd).unwrap();
        assert_eq!((s.max, s.min, s.avg), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_zone_names_model() {
        let rs = set(&[("a", "q1", false, true), ("b", "q1", true, true)]);
        match pairwise_overlap_stats(&rs, MergedZone::Zpd) {
            Err(Error::EmptyZone { model_id, .. }) => assert_eq!(model_id, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn labels(v: &[u8]) -> BTreeMap<String, bool> {
        v.iter().enumerate().map(|(i, &l)| (format!("q{i}"), l == 1)).collect()
    }

    #[test]
    fn decomposition_examples() {
        let e = icl_effect_decomposition(&labels(&[0, 0, 1, 1]), &labels(&[1, 0, 0, 1])).unwrap();
        assert_eq!((e.gain, e.harm, e.net), (0.25, 0.25, 0.0));
        let same = icl_effect_decomposition(&labels(&[0, 1]), &labels(&[0, 1])).unwrap();
        assert_eq!((same.gain, same.harm, same.net), (0.0, 0.0, 0.0));
        let up = icl_effect_decomposition(&labels(&[0, 0]), &labels(&[1, 1])).unwrap();
        assert_eq!((up.gain, up.harm), (1.0, 0.0));
        assert!(icl_effect_decomposition(&labels(&[0]), &labels(&[0, 1])).is_err());
    }

    #[test]
    fn assign_zone_is_bijective() {
        let all: BTreeSet<ZoneLabel> = [(false, false), (false, true), (true, false), (true, true)]
            .iter()
            .map(|&(a, b)| assign_zone(a, b))
            .collect();
        assert_eq!(all.len(), 4);
        assert_eq!(assign_zone(false, true), ZoneLabel::Zpd);
        assert_eq!(assign_zone(true, false), ZoneLabel::Degrade);
        assert_eq!(assign_zone(false, false), ZoneLabel::Fail);
    }

    proptest! {
        #[test]
        fn net_equals_accuracy_difference(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
            let dp: BTreeMap<String, bool> = pairs.iter().enumerate().map(|(i, p)| (format!("q{i:03}"), p.0)).collect();
            let st: BTreeMap<String, bool> = pairs.iter().enumerate().map(|(i, p)| (format!("q{i:03}"), p.1)).collect();
            let e = icl_effect_decomposition(&dp, &st).unwrap();
            let n = pairs.len() as f64;
            let acc = |m: &BTreeMap<String, bool>| m.values().filter(|&&l| l).count() as f64 / n;
            prop_assert!((e.net - (acc(&st) - acc(&dp))).abs() < 1e-12);
        }

        #[test]
        fn overlap_is_symmetric_and_bounded(a in proptest::collection::btree_set(0u8..30, 1..20),
                                            b in proptest::collection::btree_set(0u8..30, 1..20)) {
            let ab = overlap_coefficient(&a, &b).unwrap();
            prop_assert_eq!(ab, overlap_coefficient(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            let union: BTreeSet<u8> = a.union(&b).copied().collect();
            prop_assert_eq!(overlap_coefficient(&a, &union).unwrap(), 1.0);
        }
    }
}
