//! Customer profiles and lookup-only feed composition.
//!
//! A feed is built from a customer's recent queries alone: every query is
//! looked up in the precomputed [`SimilarityStore`], results are filtered to
//! the eligible set, and the per-query lists are interleaved newest query
//! first. No encoder pass or index search happens here.

mod service;

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::SimilarityStore;
use crate::types::{Catalog, Event, EventType, ItemId, Relation};

pub use service::FeedService;

pub const MAX_QUERIES: usize = 100;
pub const MAX_RUN: usize = 3;
pub const NEW_FRACTION: f64 = 0.10;
pub const POPULAR_FRACTION: f64 = 0.20;

/// One query in a profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub item_id: ItemId,
    pub relation: Relation,
    pub category: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CustomerProfile {
    pub customer_id: String,
    /// Newest first, unique per (item, relation).
    pub queries: Vec<QueryEntry>,
    pub bought: HashSet<ItemId>,
}

impl CustomerProfile {
    pub fn new(customer_id: impl Into<String>) -> Self {
        CustomerProfile {
            customer_id: customer_id.into(),
            ..Default::default()
        }
    }

    /// Adds a query, replacing an older entry for the same (item, relation)
    /// and evicting the oldest beyond `max_queries`. An entry older than the
    /// one already held is ignored.
    pub fn push(&mut self, q: QueryEntry, max_queries: usize) {
        if let Some(i) = self
            .queries
            .iter()
            .position(|e| e.item_id == q.item_id && e.relation == q.relation)
        {
            if self.queries[i].timestamp > q.timestamp {
                return;
            }
            self.queries.remove(i);
        }
        let at = self.queries.partition_point(|e| e.timestamp > q.timestamp);
        self.queries.insert(at, q);
        self.queries.truncate(max_queries);
    }
}

/// Profiles for every customer seen so far.
#[derive(Debug, Clone, Default)]
pub struct Profiles {
    map: HashMap<String, CustomerProfile>,
    max_queries: usize,
    /// Events skipped because their item is not in the catalog.
    pub skipped: u64,
}

impl Profiles {
    pub fn new(max_queries: usize) -> Self {
        Profiles {
            map: HashMap::new(),
            max_queries,
            skipped: 0,
        }
    }

    /// Applies one event. Returns false when the item is unknown.
    pub fn ingest(&mut self, event: &Event, catalog: &Catalog) -> bool {
        let Some(item) = catalog.get(event.item_id.as_str()) else {
            self.skipped += 1;
            log::warn!("event for unknown item {}", event.item_id);
            return false;
        };
        let profile = self
            .map
            .entry(event.customer_id.clone())
            .or_insert_with(|| CustomerProfile::new(event.customer_id.clone()));
        profile.push(
            QueryEntry {
                item_id: event.item_id.clone(),
                relation: event.event_type.into(),
                category: item.leaf_category().to_string(),
                timestamp: event.timestamp,
            },
            self.max_queries,
        );
        if event.event_type == EventType::Buy {
            profile.bought.insert(event.item_id.clone());
        }
        true
    }

    pub fn ingest_all(&mut self, events: &[Event], catalog: &Catalog) {
        for e in events {
            self.ingest(e, catalog);
        }
    }

    pub fn get(&self, customer: &str) -> Option<&CustomerProfile> {
        self.map.get(customer)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Customer ids in sorted order.
    pub fn customers(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.map.keys().map(String::as_str).collect();
        ids.sort_unstable();
        ids
    }

    pub fn insert(&mut self, profile: CustomerProfile) {
        self.map.insert(profile.customer_id.clone(), profile);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Surface {
    All,
    Deals,
    New,
    Popular,
}

impl Surface {
    pub const ALL: [Surface; 4] = [Surface::All, Surface::Deals, Surface::New, Surface::Popular];

    pub fn as_str(self) -> &'static str {
        match self {
            Surface::All => "all",
            Surface::Deals => "deals",
            Surface::New => "new",
            Surface::Popular => "popular",
        }
    }
}

impl fmt::Display for Surface {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Surface {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Surface::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown surface {s:?}")))
    }
}

/// Items a surface may show. `None` members means the whole catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct EligibleSet {
    pub surface: Surface,
    members: Option<HashSet<ItemId>>,
}

impl EligibleSet {
    pub fn all() -> Self {
        EligibleSet {
            surface: Surface::All,
            members: None,
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.members.as_ref().is_none_or(|m| m.contains(id))
    }

    /// Member count, or `None` for the unrestricted set.
    pub fn member_count(&self) -> Option<usize> {
        self.members.as_ref().map(HashSet::len)
    }
}

/// Top `ceil(fraction * n)` items of each leaf category under `key`
/// (larger first, ties by id).
fn per_category_top<K: Ord>(catalog: &Catalog, fraction: f64, key: impl Fn(&crate::Item) -> K) -> HashSet<ItemId> {
    let mut groups: BTreeMap<&str, Vec<&crate::Item>> = BTreeMap::new();
    for item in catalog.items() {
        groups.entry(item.leaf_category()).or_default().push(item);
    }
    let mut out = HashSet::new();
    for mut items in groups.into_values() {
        items.sort_by(|a, b| key(b).cmp(&key(a)).then(a.id.cmp(&b.id)));
        let take = (fraction * items.len() as f64).ceil() as usize;
        out.extend(items.into_iter().take(take).map(|i| i.id.clone()));
    }
    out
}

pub fn build_eligible_set(catalog: &Catalog, surface: Surface) -> EligibleSet {
    let members = match surface {
        Surface::All => None,
        Surface::Deals => Some(catalog.items().iter().filter(|i| i.deal).map(|i| i.id.clone()).collect()),
        Surface::New => Some(per_category_top(catalog, NEW_FRACTION, |i| i.release_date)),
        Surface::Popular => Some(per_category_top(catalog, POPULAR_FRACTION, |i| i.popularity)),
    };
    EligibleSet { surface, members }
}

/// One recommendation and the query it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedItem {
    pub item_id: ItemId,
    pub score: f32,
    pub source_item_id: ItemId,
    pub source_relation: Relation,
    pub source_timestamp: i64,
    /// 1-based position in the feed.
    pub rank: usize,
}

pub type BusinessFilter = Arc<dyn Fn(&FeedItem) -> bool + Send + Sync>;

#[derive(Clone)]
pub struct FeedOptions {
    /// Longest allowed run of same-category items.
    pub max_run: usize,
    /// Extra predicate every candidate must pass.
    pub filter: Option<BusinessFilter>,
}

impl Default for FeedOptions {
    fn default() -> Self {
        FeedOptions {
            max_run: MAX_RUN,
            filter: None,
        }
    }
}

impl fmt::Debug for FeedOptions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeedOptions")
            .field("max_run", &self.max_run)
            .field("filter", &self.filter.is_some())
            .finish()
    }
}

struct Candidate {
    item: FeedItem,
    category: String,
    leading: bool,
}

/// Builds a feed with the default options.
pub fn compose_feed(
    profile: &CustomerProfile,
    store: &SimilarityStore,
    catalog: &Catalog,
    eligible: &EligibleSet,
    feed_size: usize,
) -> Vec<FeedItem> {
    compose_feed_with(profile, store, catalog, eligible, feed_size, &FeedOptions::default())
}

/// Looks up every query, drops ineligible, bought and filtered results,
/// credits each target to the newest query that retrieved it, interleaves
/// the per-query lists round-robin (newest query first, each list in score
/// order), then limits same-category runs.
///
/// A run is broken by pulling forward the earliest later item of another
/// category that is not some query's first result; when there is none the
/// run is allowed to continue. Query-leading items therefore keep their
/// recency order.
pub fn compose_feed_with(
    profile: &CustomerProfile,
    store: &SimilarityStore,
    catalog: &Catalog,
    eligible: &EligibleSet,
    feed_size: usize,
    opts: &FeedOptions,
) -> Vec<FeedItem> {
    let mut seen: HashSet<&str> = HashSet::new();
    let mut lists: Vec<VecDeque<Candidate>> = Vec::with_capacity(profile.queries.len());
    for q in &profile.queries {
        let mut list = VecDeque::new();
        for hit in store.lookup(q.item_id.as_str(), q.relation) {
            let id = hit.id.as_str();
            if !eligible.contains(id) || profile.bought.contains(id) || seen.contains(id) {
                continue;
            }
            let item = FeedItem {
                item_id: hit.id.clone(),
                score: hit.score,
                source_item_id: q.item_id.clone(),
                source_relation: q.relation,
                source_timestamp: q.timestamp,
                rank: 0,
            };
            if opts.filter.as_ref().is_some_and(|f| !f(&item)) {
                continue;
            }
            seen.insert(id);
            let category = catalog.get(id).map_or("", |i| i.leaf_category()).to_string();
            list.push_back(Candidate {
                item,
                category,
                leading: list.is_empty(),
            });
        }
        if !list.is_empty() {
            lists.push(list);
        }
    }

    let mut merged: VecDeque<Candidate> = VecDeque::new();
    while !lists.is_empty() {
        for list in &mut lists {
            merged.extend(list.pop_front());
        }
        lists.retain(|l| !l.is_empty());
    }

    let mut out: Vec<Candidate> = Vec::with_capacity(feed_size.min(merged.len()));
    while out.len() < feed_size && !merged.is_empty() {
        let cat = &merged[0].category;
        let run = out.iter().rev().take_while(|c| &c.category == cat).count();
        let pick = if opts.max_run > 0 && run >= opts.max_run {
            (1..merged.len())
                .find(|&j| !merged[j].leading && &merged[j].category != cat)
                .unwrap_or(0)
        } else {
            0
        };
        out.push(merged.remove(pick).expect("index in range"));
    }
    out.into_iter()
        .enumerate()
        .map(|(i, c)| FeedItem { rank: i + 1, ..c.item })
        .collect()
}

/// Feeds for every known customer, in customer-id order.
pub fn batch_refresh(
    profiles: &Profiles,
    store: &SimilarityStore,
    catalog: &Catalog,
    eligible: &EligibleSet,
    feed_size: usize,
    opts: &FeedOptions,
) -> Vec<(String, Vec<FeedItem>)> {
    profiles
        .customers()
        .par_iter()
        .map(|&c| {
            let p = &profiles.map[c];
            (c.to_string(), compose_feed_with(p, store, catalog, eligible, feed_size, opts))
        })
        .collect()
}

/// Recomputes feeds for `active` customers only, on the calling thread.
/// Unknown ids are skipped.
pub fn incremental_refresh(
    active: &[String],
    profiles: &Profiles,
    store: &SimilarityStore,
    catalog: &Catalog,
    eligible: &EligibleSet,
    feed_size: usize,
    opts: &FeedOptions,
) -> Vec<(String, Vec<FeedItem>)> {
    let mut ids: Vec<&String> = active.iter().collect();
    ids.sort();
    ids.dedup();
    ids.into_iter()
        .filter_map(|c| {
            let p = profiles.get(c)?;
            Some((c.clone(), compose_feed_with(p, store, catalog, eligible, feed_size, opts)))
        })
        .collect()
}

#[cfg(test)]
mod tests;
