//! Shared data model: queries, response records, embedding sidecars and
//! query-level dataset splits.
//!
//! Everything on disk is newline-delimited JSON except the embedding
//! sidecar, which is a little-endian binary matrix plus a JSON index.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_EMBEDDING_DIM: usize = 768;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[serde(rename = "mathqa")]
    MathQa,
    Stance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    #[serde(rename = "DP")]
    Dp,
    #[serde(rename = "ICL")]
    Icl,
}

impl Setting {
    pub fn gate(self) -> u8 {
        match self {
            Setting::Dp => 0,
            Setting::Icl => 1,
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Dp => "DP",
            Setting::Icl => "ICL",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub example_id: String,
    pub task: Task,
    pub input_text: String,
    pub gold_answer: String,
    /// Stance target; only meaningful for the stance task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    /// Attached from the embedding sidecar, never serialized inline.
    #[serde(skip)]
    pub embedding: Option<Vec<f32>>,
}

impl Query {
    pub fn new(example_id: impl Into<String>, task: Task, input_text: impl Into<String>, gold: impl Into<String>) -> Self {
        Query {
            example_id: example_id.into(),
            task,
            input_text: input_text.into(),
            gold_answer: gold.into(),
            target: None,
            embedding: None,
        }
    }
}

mod label01 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(de::Error::custom(format!("label must be 0 or 1, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub model_id: String,
    pub example_id: String,
    pub setting: Setting,
    pub prompt_text: String,
    pub raw_output: String,
    #[serde(with = "label01")]
    pub label: bool,
    pub prompt_token_count: u64,
}

type RecordKey = (String, String, Setting);

/// Immutable, validated collection of response records.
#[derive(Debug, Clone)]
pub struct ResponseSet {
    records: Vec<ResponseRecord>,
    models: Vec<String>,
    queries: BTreeMap<String, Query>,
    index: HashMap<RecordKey, usize>,
}

impl ResponseSet {
    /// Builds a set, rejecting duplicate keys and dangling example ids.
    /// Line numbers in errors are 1-based record positions.
    pub fn new(queries: BTreeMap<String, Query>, records: Vec<ResponseRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        let mut models: Vec<String> = Vec::new();
        for (i, r) in records.iter().enumerate() {
            if !queries.contains_key(&r.example_id) {
                return Err(Error::DanglingReference {
                    line: i + 1,
                    example_id: r.example_id.clone(),
                });
            }
            let key = (r.model_id.clone(), r.example_id.clone(), r.setting);
            if index.insert(key, i).is_some() {
                return Err(Error::DuplicateKey {
                    line: i + 1,
                    model_id: r.model_id.clone(),
                    example_id: r.example_id.clone(),
                    setting: r.setting,
                });
            }
            if !models.contains(&r.model_id) {
                models.push(r.model_id.clone());
            }
        }
        Ok(ResponseSet {
            records,
            models,
            queries,
            index,
        })
    }

    pub fn records(&self) -> &[ResponseRecord] {
        &self.records
    }

    /// Model ids in order of first appearance.
    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn queries(&self) -> &BTreeMap<String, Query> {
        &self.queries
    }

    pub fn query(&self, example_id: &str) -> Option<&Query> {
        self.queries.get(example_id)
    }

    pub fn get(&self, model_id: &str, example_id: &str, setting: Setting) -> Option<&ResponseRecord> {
        self.index
            .get(&(model_id.to_string(), example_id.to_string(), setting))
            .map(|&i| &self.records[i])
    }

    pub fn model_index(&self, model_id: &str) -> Option<usize> {
        self.models.iter().position(|m| m == model_id)
    }

    /// Example ids that have at least one record for `model_id`, sorted.
    pub fn examples_for(&self, model_id: &str) -> Vec<String> {
        let mut ids: Vec<String> = self
            .records
            .iter()
            .filter(|r| r.model_id == model_id)
            .map(|r| r.example_id.clone())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Attaches sidecar embeddings to every query that has one.
    pub fn attach_embeddings(&mut self, store: &EmbeddingStore) {
        for q in self.queries.values_mut() {
            if let Some(v) = store.get(&q.example_id) {
                q.embedding = Some(v.to_vec());
            }
        }
    }

    /// Returns a new set restricted to the given records predicate.
    pub fn filter(&self, keep: impl Fn(&ResponseRecord) -> bool) -> ResponseSet {
        let records = self.records.iter().filter(|r| keep(r)).cloned().collect();
        ResponseSet::new(self.queries.clone(), records).expect("subset of a valid set is valid")
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_queries(path: &Path) -> Result<BTreeMap<String, Query>> {
    let list: Vec<Query> = read_jsonl(path)?;
    let mut map = BTreeMap::new();
    for q in list {
        let id = q.example_id.clone();
        if map.insert(id.clone(), q).is_some() {
            return Err(Error::DuplicateQuery(id));
        }
    }
    Ok(map)
}

/// Loads and validates `responses.jsonl` against a query manifest.
///
/// Errors carry the 1-based line of the offending record. Blank lines are
/// skipped but still counted.
pub fn load_response_set(path: &Path, queries: BTreeMap<String, Query>) -> Result<ResponseSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ResponseRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
        lines.push(i + 1);
    }
    // Re-map record positions to physical line numbers.
    ResponseSet::new(queries, records).map_err(|e| match e {
        Error::DuplicateKey { line, model_id, example_id, setting } => Error::DuplicateKey {
            line: lines[line - 1],
            model_id,
            example_id,
            setting,
        },
        Error::DanglingReference { line, example_id } => Error::DanglingReference {
            line: lines[line - 1],
            example_id,
        },
        other => other,
    })
}

pub fn save_response_records(path: &Path, records: &[ResponseRecord]) -> Result<()> {
    write_jsonl(path, records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub assignment: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn ids(&self, split: Split) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        let count = |s| self.assignment.values().filter(|&&v| v == s).count();
        (count(Split::Train), count(Split::Val), count(Split::Test))
    }

    pub fn get(&self, example_id: &str) -> Option<Split> {
        self.assignment.get(example_id).copied()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Splits the set by example id so every record of a query lands in one split.
///
/// The sorted id list is shuffled with ChaCha8 seeded by `seed`; validation
/// and test receive `floor(n * ratio)` ids each and train takes the rest.
pub fn split_dataset(rs: &ResponseSet, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    let ids: Vec<String> = rs.queries().keys().cloned().collect();
    split_ids(ids, ratios, seed)
}

pub fn split_ids(mut ids: Vec<String>, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::InvalidRatios(format!("{ratios:?} must be nonnegative")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRatios(format!("{ratios:?} sum to {sum}")));
    }
    ids.sort();
    ids.dedup();
    let mut rng = rng::seeded(seed);
    ids.shuffle(&mut rng);

    let n = ids.len();
    // The epsilon absorbs representation error such as 0.29 * 100 = 28.999...
    let floor_size = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
    let n_val = floor_size(ratios[1]);
    let n_test = floor_size(ratios[2]).min(n - n_val);
    let n_train = n - n_val - n_test;

    let mut assignment = BTreeMap::new();
    for (i, id) in ids.into_iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        assignment.insert(id, split);
    }
    Ok(SplitAssignment {
        seed,
        ratios,
        assignment,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingRecord {
    pub model_id: String,
    pub example_id: String,
    pub missing: Setting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub model_id: String,
    pub setting: Setting,
    pub n: usize,
    pub n_correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub missing: Vec<MissingRecord>,
    pub label_stats: Vec<LabelStats>,
    pub missing_embeddings: Vec<String>,
}

impl ValidationReport {
    pub fn is_paired(&self) -> bool {
        self.missing.is_empty()
    }
}

pub fn validate_response_set(rs: &ResponseSet) -> ValidationReport {
    let mut missing = Vec::new();
    let mut label_stats = Vec::new();
    for model in rs.models() {
        for ex in rs.examples_for(model) {
            for setting in [Setting::Dp, Setting::Icl] {
                if rs.get(model, &ex, setting).is_none() {
                    missing.push(MissingRecord {
                        model_id: model.clone(),
                        example_id: ex.clone(),
                        missing: setting,
                    });
                }
            }
        }
        for setting in [Setting::Dp, Setting::Icl] {
            let (n, n_correct) = rs
                .records()
                .iter()
                .filter(|r| &r.model_id == model && r.setting == setting)
                .fold((0, 0), |(n, c), r| (n + 1, c + usize::from(r.label)));
            if n > 0 {
                label_stats.push(LabelStats {
                    model_id: model.clone(),
                    setting,
                    n,
                    n_correct,
                    accuracy: n_correct as f64 / n as f64,
                });
            }
        }
    }
    let missing_embeddings = rs
        .queries()
        .values()
        .filter(|q| q.embedding.is_none())
        .map(|q| q.example_id.clone())
        .collect();
    ValidationReport {
        missing,
        label_stats,
        missing_embeddings,
    }
}

/// Row-major f32 matrix keyed by example id.
///
/// Binary layout: `count: u64 LE`, `dim: u64 LE`, then `count * dim`
/// little-endian f32 values. The companion index is a JSON object
/// `{example_id: row}`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    rows: HashMap<String, usize>,
    data: Vec<f32>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn insert(&mut self, example_id: impl Into<String>, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        let id = example_id.into();
        if let Some(&row) = self.rows.get(&id) {
            self.data[row * self.dim..(row + 1) * self.dim].copy_from_slice(vector);
        } else {
            self.rows.insert(id.clone(), self.ids.len());
            self.ids.push(id);
            self.data.extend_from_slice(vector);
        }
        Ok(())
    }

    pub fn get(&self, example_id: &str) -> Option<&[f32]> {
        self.rows
            .get(example_id)
            .map(|&r| &self.data[r * self.dim..(r + 1) * self.dim])
    }

    pub fn save(&self, bin_path: &Path, index_path: &Path) -> Result<()> {
        let file = File::create(bin_path).map_err(|e| Error::io(bin_path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(bin_path, e);
        w.write_all(&(self.ids.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.dim as u64).to_le_bytes()).map_err(io)?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)?;
        let index: BTreeMap<&str, usize> = self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let text = serde_json::to_string(&index)?;
        std::fs::write(index_path, text).map_err(|e| Error::io(index_path, e))
    }

    pub fn load(bin_path: &Path, index_path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(bin_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(bin_path, e))?;
        if bytes.len() < 16 {
            return Err(Error::Format("embedding file shorter than header".into()));
        }
        let count = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let dim = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let expected = 16 + count * dim * 4;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "embedding file has {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let data: Vec<f32> = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let text = std::fs::read_to_string(index_path).map_err(|e| Error::io(index_path, e))?;
        let index: BTreeMap<String, usize> = serde_json::from_str(&text)?;
        let mut ids = vec![String::new(); count];
        for (id, row) in &index {
            if *row >= count {
                return Err(Error::Format(format!("index row {row} for {id} out of range")));
            }
            ids[*row] = id.clone();
        }
        if index.len() != count {
            return Err(Error::Format(format!("index has {} ids for {count} rows", index.len())));
        }
        let rows = index.into_iter().collect();
        Ok(EmbeddingStore { dim, ids, rows, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn queries(ids: &[&str]) -> BTreeMap<String, Query> {
        ids.iter()
            .map(|id| (id.to_string(), Query::new(*id, Task::MathQa, format!("q {id}"), "1")))
            .collect()
    }

    fn rec(model: &str, ex: &str, setting: Setting, label: bool) -> ResponseRecord {
        ResponseRecord {
            model_id: model.into(),
            example_id: ex.into(),
            setting,
            prompt_text: "p".into(),
            raw_output: "o".into(),
            label,
            prompt_token_count: 3,
        }
    }

    fn write_lines(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_two_valid_lines() {
        let lines: Vec<String> = [rec("m1", "q1", Setting::Dp, true), rec("m1", "q1", Setting::Icl, false)]
            .iter()
            .map(|r| serde_json::to_string(r).unwrap())
            .collect();
        let f = write_lines(&lines);
        let rs = load_response_set(f.path(), queries(&["q1"])).unwrap();
        assert_eq!(rs.records().len(), 2);
        assert_eq!(rs.models(), ["m1".to_string()]);
    }

    #[test]
    fn duplicate_key_names_line_two() {
        let r = serde_json::to_string(&rec("m1", "q1", Setting::Dp, true)).unwrap();
        let f = write_lines(&[r.clone(), r]);
        match load_response_set(f.path(), queries(&["q1"])) {
            Err(Error::DuplicateKey { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected duplicate key, got {other:?}"),
        }
    }

    #[test]
    fn dangling_reference_rejected() {
        let r = serde_json::to_string(&rec("m1", "q9", Setting::Dp, true)).unwrap();
        let f = write_lines(&[r]);
        assert!(matches!(
            load_response_set(f.path(), queries(&["q1"])),
            Err(Error::DanglingReference { line: 1, .. })
        ));
    }

    #[test]
    fn bad_label_is_parse_error_with_line() {
        let good = serde_json::to_string(&rec("m1", "q1", Setting::Dp, true)).unwrap();
        let bad = good.replace("\"label\":1", "\"label\":2");
        let f = write_lines(&[good, bad]);
        assert!(matches!(
            load_response_set(f.path(), queries(&["q1"])),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let ids: Vec<String> = (0..10).map(|i| format!("q{i}")).collect();
        let s = split_ids(ids, [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!(s.sizes(), (8, 1, 1));

        let ids: Vec<String> = (0..9).map(|i| format!("q{i}")).collect();
        let s = split_ids(ids, [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!(s.sizes(), (9, 0, 0));
    }

    #[test]
    fn split_is_deterministic_and_rejects_bad_ratios() {
        let ids: Vec<String> = (0..50).map(|i| format!("q{i}")).collect();
        let a = split_ids(ids.clone(), [0.8, 0.1, 0.1], 3).unwrap();
        let b = split_ids(ids.clone(), [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(matches!(split_ids(ids, [0.8, 0.1, 0.2], 3), Err(Error::InvalidRatios(_))));
    }

    #[test]
    fn validation_flags_missing_icl_and_accuracy() {
        let qs = queries(&["q1", "q2", "q3", "q4"]);
        let mut records = vec![
            rec("m1", "q1", Setting::Dp, true),
            rec("m1", "q2", Setting::Dp, true),
            rec("m1", "q3", Setting::Dp, true),
            rec("m1", "q4", Setting::Dp, false),
        ];
        for q in ["q2", "q3", "q4"] {
            records.push(rec("m1", q, Setting::Icl, true));
        }
        let rs = ResponseSet::new(qs, records).unwrap();
        let report = validate_response_set(&rs);
        assert_eq!(
            report.missing,
            vec![MissingRecord {
                model_id: "m1".into(),
                example_id: "q1".into(),
                missing: Setting::Icl
            }]
        );
        let dp = report.label_stats.iter().find(|s| s.setting == Setting::Dp).unwrap();
        assert_eq!(dp.accuracy, 0.75);
        assert_eq!(report.missing_embeddings.len(), 4);
    }

    #[test]
    fn complete_pairs_have_no_missing() {
        let qs = queries(&["q1"]);
        let rs = ResponseSet::new(qs, vec![rec("m1", "q1", Setting::Dp, true), rec("m1", "q1", Setting::Icl, true)]).unwrap();
        assert!(validate_response_set(&rs).is_paired());
    }

    #[test]
    fn embedding_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = EmbeddingStore::new(3);
        store.insert("a", &[1.0, 2.0, 3.0]).unwrap();
        store.insert("b", &[-1.0, 0.5, 0.0]).unwrap();
        assert!(store.insert("c", &[1.0]).is_err());
        let bin = dir.path().join("e.f32");
        let idx = dir.path().join("e.index.json");
        store.save(&bin, &idx).unwrap();
        let back = EmbeddingStore::load(&bin, &idx).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.get("b").unwrap(), &[-1.0, 0.5, 0.0]);
    }
}
