//! Offline evaluation: recall@K against a distractor pool, broken down by
//! relation, target popularity and relationship category.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingTable;
use crate::error::{bail, Error, Result};
use crate::index::dot;
use crate::mining::QueryTargetPair;
use crate::types::{ItemId, Relation, Role};

/// Share of items, by training interactions, counted as head.
pub const HEAD_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k: usize,
    pub distractor_count: usize,
    pub seed: u64,
    pub splits: (f64, f64, f64),
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 10,
            distractor_count: 10_000,
            seed: 0,
            splits: (0.8, 0.1, 0.1),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            bail!(Input, "k must be at least 1");
        }
        let (a, b, c) = self.splits;
        if [a, b, c].iter().any(|&x| !(0.0..=1.0).contains(&x)) || (a + b + c - 1.0).abs() > 1e-9 {
            bail!(Input, "splits {:?} must be fractions summing to 1", self.splits);
        }
        Ok(())
    }
}

/// Rank of one test pair's target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankOutcome {
    /// 1-based. Distractors scoring equal to the target rank ahead of it.
    pub rank: usize,
}

impl RankOutcome {
    pub fn hit(self, k: usize) -> bool {
        self.rank <= k
    }
}

/// Ranks each pair's target among `{target} ∪ distractors` by inner product
/// with the query embedding of the pair's relation.
pub fn rank_targets(
    pairs: &[QueryTargetPair],
    table: &EmbeddingTable,
    distractors: &[ItemId],
) -> Result<Vec<RankOutcome>> {
    let d_vecs: Vec<(&ItemId, &[f32])> = distractors
        .iter()
        .map(|d| {
            table
                .role(d.as_str(), Role::Target)
                .map(|v| (d, v))
                .ok_or_else(|| Error::Input(format!("no embedding for distractor {d}")))
        })
        .collect::<Result<_>>()?;
    pairs
        .par_iter()
        .map(|p| {
            let q = table
                .role(p.query_id.as_str(), Role::from(p.relation))
                .ok_or_else(|| Error::Input(format!("no embedding for query {}", p.query_id)))?;
            let t = table
                .role(p.target_id.as_str(), Role::Target)
                .ok_or_else(|| Error::Input(format!("no embedding for target {}", p.target_id)))?;
            let s = dot(q, t);
            let ahead = d_vecs
                .iter()
                .filter(|(id, v)| **id != p.target_id && dot(q, v) >= s)
                .count();
            Ok(RankOutcome { rank: ahead + 1 })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Recall {
    pub hits: usize,
    pub total: usize,
}

impl Recall {
    pub fn value(self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }

    fn add(&mut self, hit: bool) {
        self.total += 1;
        self.hits += hit as usize;
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecallResult {
    pub overall: Recall,
    pub per_relation: BTreeMap<Relation, Recall>,
}

/// recall@k overall and per relation.
pub fn recall_at_k(
    pairs: &[QueryTargetPair],
    table: &EmbeddingTable,
    distractors: &[ItemId],
    k: usize,
) -> Result<RecallResult> {
    let ranks = rank_targets(pairs, table, distractors)?;
    Ok(tally(pairs, &ranks, k, |_| Some(())).remove(&()).unwrap_or_default())
}

/// Groups outcomes by `key`, skipping pairs mapped to `None`.
fn tally<K: Ord>(
    pairs: &[QueryTargetPair],
    ranks: &[RankOutcome],
    k: usize,
    key: impl Fn(usize) -> Option<K>,
) -> BTreeMap<K, RecallResult> {
    let mut out: BTreeMap<K, RecallResult> = BTreeMap::new();
    for (i, (p, r)) in pairs.iter().zip(ranks).enumerate() {
        let Some(key) = key(i) else { continue };
        let e = out.entry(key).or_default();
        e.overall.add(r.hit(k));
        e.per_relation.entry(p.relation).or_default().add(r.hit(k));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationshipCategory {
    #[serde(rename = "1x1")]
    OneToOne,
    #[serde(rename = "1xn")]
    OneToMany,
    #[serde(rename = "mx1")]
    ManyToOne,
    #[serde(rename = "mxn")]
    ManyToMany,
}

impl RelationshipCategory {
    pub const ALL: [RelationshipCategory; 4] = [
        RelationshipCategory::OneToOne,
        RelationshipCategory::OneToMany,
        RelationshipCategory::ManyToOne,
        RelationshipCategory::ManyToMany,
    ];

    /// From the query's out-degree and the target's in-degree.
    pub fn from_degrees(query_out: usize, target_in: usize) -> Self {
        match (query_out > 1, target_in > 1) {
            (false, false) => RelationshipCategory::OneToOne,
            (true, false) => RelationshipCategory::OneToMany,
            (false, true) => RelationshipCategory::ManyToOne,
            (true, true) => RelationshipCategory::ManyToMany,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RelationshipCategory::OneToOne => "1x1",
            RelationshipCategory::OneToMany => "1xn",
            RelationshipCategory::ManyToOne => "mx1",
            RelationshipCategory::ManyToMany => "mxn",
        }
    }
}

impl fmt::Display for RelationshipCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Category counts and percentages.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Distribution {
    pub counts: BTreeMap<RelationshipCategory, usize>,
    pub total: usize,
}

impl Distribution {
    pub fn percent(&self, c: RelationshipCategory) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.counts.get(&c).copied().unwrap_or(0) as f64 / self.total as f64
        }
    }
}

/// Labels `(query, target)` pairs of one dataset by degree within it.
/// Duplicate pairs count once toward degrees.
pub fn classify_relationships(pairs: &[(&str, &str)]) -> (Vec<RelationshipCategory>, Distribution) {
    let unique: std::collections::HashSet<(&str, &str)> = pairs.iter().copied().collect();
    let mut out_deg: HashMap<&str, usize> = HashMap::new();
    let mut in_deg: HashMap<&str, usize> = HashMap::new();
    for &(q, t) in &unique {
        *out_deg.entry(q).or_default() += 1;
        *in_deg.entry(t).or_default() += 1;
    }
    let labels: Vec<RelationshipCategory> = pairs
        .iter()
        .map(|(q, t)| RelationshipCategory::from_degrees(out_deg[q], in_deg[t]))
        .collect();
    let mut dist = Distribution {
        total: labels.len(),
        ..Default::default()
    };
    for &l in &labels {
        *dist.counts.entry(l).or_default() += 1;
    }
    (labels, dist)
}

/// Labels mixed-relation pairs with degrees computed per relation.
pub fn classify_by_relation(pairs: &[QueryTargetPair]) -> Vec<RelationshipCategory> {
    let mut out = vec![RelationshipCategory::OneToOne; pairs.len()];
    for rel in Relation::ALL {
        let idx: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].relation == rel).collect();
        let sub: Vec<(&str, &str)> = idx
            .iter()
            .map(|&i| (pairs[i].query_id.as_str(), pairs[i].target_id.as_str()))
            .collect();
        let (labels, _) = classify_relationships(&sub);
        for (i, l) in idx.into_iter().zip(labels) {
            out[i] = l;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopularitySegment {
    Cold,
    Tail,
    Head,
}

impl PopularitySegment {
    pub fn as_str(self) -> &'static str {
        match self {
            PopularitySegment::Cold => "cold",
            PopularitySegment::Tail => "tail",
            PopularitySegment::Head => "head",
        }
    }
}

/// How often each item appears, in either role, among training pairs.
pub fn interaction_counts(train: &[QueryTargetPair]) -> HashMap<ItemId, u64> {
    let mut out: HashMap<ItemId, u64> = HashMap::new();
    for p in train {
        *out.entry(p.query_id.clone()).or_default() += 1;
        *out.entry(p.target_id.clone()).or_default() += 1;
    }
    out
}

/// Cold when the target has no training interactions, head when it is among
/// the top `ceil(1% of items)` by count (ties by id), tail otherwise.
pub fn segment_by_popularity(pairs: &[QueryTargetPair], counts: &HashMap<ItemId, u64>) -> Vec<PopularitySegment> {
    let mut ranked: Vec<(&ItemId, u64)> = counts.iter().map(|(k, &v)| (k, v)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let quota = (HEAD_FRACTION * ranked.len() as f64).ceil() as usize;
    let head: std::collections::HashSet<&ItemId> = ranked
        .iter()
        .take(quota)
        .filter(|(_, c)| *c > 0)
        .map(|(id, _)| *id)
        .collect();
    pairs
        .iter()
        .map(|p| match counts.get(&p.target_id) {
            None | Some(0) => PopularitySegment::Cold,
            Some(_) if head.contains(&p.target_id) => PopularitySegment::Head,
            Some(_) => PopularitySegment::Tail,
        })
        .collect()
}

/// One line of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Model configuration label, e.g. `simo-64-mixed_plus_self`.
    pub config: String,
    pub dimension: usize,
    pub sampling: String,
    /// `view`, `buy` or `all`.
    pub dataset: String,
    /// `overall`, `popularity` or `relationship`.
    pub breakdown: String,
    /// Segment within the breakdown, `all` for overall.
    pub segment: String,
    pub k: usize,
    pub hits: usize,
    pub total: usize,
    pub recall: f64,
}

/// What a report row describes besides the counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLabel {
    pub config: String,
    pub dimension: usize,
    pub sampling: String,
}

fn records_for(label: &ModelLabel, k: usize, breakdown: &str, segment: &str, r: &RecallResult) -> Vec<EvalRecord> {
    let rec = |dataset: &str, x: Recall| EvalRecord {
        config: label.config.clone(),
        dimension: label.dimension,
        sampling: label.sampling.clone(),
        dataset: dataset.to_string(),
        breakdown: breakdown.to_string(),
        segment: segment.to_string(),
        k,
        hits: x.hits,
        total: x.total,
        recall: x.value(),
    };
    let mut out = vec![rec("all", r.overall)];
    out.extend(r.per_relation.iter().map(|(rel, &x)| rec(rel.as_str(), x)));
    out
}

/// Full breakdown of one model's ranks on `pairs`.
pub fn summarize(
    label: &ModelLabel,
    pairs: &[QueryTargetPair],
    ranks: &[RankOutcome],
    k: usize,
    popularity: &[PopularitySegment],
    relationships: &[RelationshipCategory],
) -> Vec<EvalRecord> {
    let mut out = Vec::new();
    if pairs.is_empty() {
        return out;
    }
    for r in tally(pairs, ranks, k, |_| Some(())).values() {
        out.extend(records_for(label, k, "overall", "all", r));
    }
    for (seg, r) in tally(pairs, ranks, k, |i| popularity.get(i).copied()) {
        out.extend(records_for(label, k, "popularity", seg.as_str(), &r));
    }
    for (cat, r) in tally(pairs, ranks, k, |i| relationships.get(i).copied()) {
        out.extend(records_for(label, k, "relationship", cat.as_str(), &r));
    }
    out
}

/// Evaluation output plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub header: serde_json::Map<String, serde_json::Value>,
    pub records: Vec<EvalRecord>,
}

impl Report {
    /// Line-delimited JSON. The first line is the header object under a
    /// `header` key; every other line is a record.
    pub fn write_jsonl(&self, w: &mut dyn Write) -> Result<()> {
        let header = serde_json::json!({ "header": self.header });
        writeln!(w, "{header}")?;
        for r in &self.records {
            writeln!(w, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut out = Report::default();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if i == 0 {
                let v: serde_json::Value = serde_json::from_str(&line)?;
                if let Some(h) = v.get("header").and_then(|h| h.as_object()) {
                    out.header = h.clone();
                    continue;
                }
            }
            out.records.push(serde_json::from_str(&line)?);
        }
        Ok(out)
    }

    /// Aligned text table, header fields first as `# key=value` lines.
    pub fn write_table(&self, w: &mut dyn Write) -> Result<()> {
        for (k, v) in &self.header {
            writeln!(w, "# {k}={v}")?;
        }
        let head = ["config", "dim", "sampling", "dataset", "breakdown", "segment", "k", "hits", "total", "recall"];
        let rows: Vec<[String; 10]> = self
            .records
            .iter()
            .map(|r| {
                [
                    r.config.clone(),
                    r.dimension.to_string(),
                    r.sampling.clone(),
                    r.dataset.clone(),
                    r.breakdown.clone(),
                    r.segment.clone(),
                    r.k.to_string(),
                    r.hits.to_string(),
                    r.total.to_string(),
                    format!("{:.4}", r.recall),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..head.len())
            .map(|c| rows.iter().map(|r| r[c].len()).chain([head[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: Vec<&str>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        writeln!(w, "{}", line(head.to_vec()))?;
        for r in &rows {
            writeln!(w, "{}", line(r.iter().map(String::as_str).collect()))?;
        }
        Ok(())
    }
}
