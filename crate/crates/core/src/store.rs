//! Precomputed query-to-results lookup table.
//!
//! Every item gets a view and a buy result list: the nearest targets to its
//! query embedding, without itself, scoring strictly above a threshold
//! derived from held-out positive pairs.

use std::collections::HashMap;
use std::io::{BufRead, Read, Write};

use rayon::prelude::*;

use crate::embeddings::EmbeddingTable;
use crate::error::{bail, Error, Result};
use crate::index::{Hit, Index};
use crate::io::{expect_magic, get_f32, get_str, get_u32, get_u64, put_f32, put_str, put_u32, put_u64};
use crate::metrics;
use crate::mining::QueryTargetPair;
use crate::types::{ItemId, Relation, Role};

const MAGIC: &[u8; 4] = b"PFS1";
pub const DEFAULT_M: usize = 10;
pub const DEFAULT_PERCENTILE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdSpec {
    pub tau: f64,
    pub percentile: f64,
    /// Number of scores the threshold was taken from.
    pub support: usize,
}

/// The `ceil(p/100 * n)`-th smallest score.
pub fn nearest_rank(scores: &[f64], percentile: f64) -> Result<f64> {
    if scores.is_empty() {
        bail!(Input, "no scores to take a percentile of");
    }
    if !(0.0..=100.0).contains(&percentile) {
        bail!(Input, "percentile {percentile} outside [0, 100]");
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((percentile * n as f64) / 100.0).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

/// Scores each validation pair as `Q(q, r) . T(t)` and takes the
/// nearest-rank percentile.
pub fn compute_threshold(
    pairs: &[QueryTargetPair],
    embeddings: &EmbeddingTable,
    percentile: f64,
) -> Result<ThresholdSpec> {
    if pairs.is_empty() {
        bail!(Input, "no validation pairs for the threshold");
    }
    let mut scores = Vec::with_capacity(pairs.len());
    for p in pairs {
        let missing = |id: &ItemId| Error::Input(format!("no embedding for {id}"));
        let q = embeddings
            .role(p.query_id.as_str(), Role::from(p.relation))
            .ok_or_else(|| missing(&p.query_id))?;
        let t = embeddings
            .role(p.target_id.as_str(), Role::Target)
            .ok_or_else(|| missing(&p.target_id))?;
        scores.push(q.iter().zip(t).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum());
    }
    Ok(ThresholdSpec {
        tau: nearest_rank(&scores, percentile)?,
        percentile,
        support: scores.len(),
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Entry {
    view: Vec<Hit>,
    buy: Vec<Hit>,
}

impl Entry {
    fn get(&self, r: Relation) -> &Vec<Hit> {
        match r {
            Relation::View => &self.view,
            Relation::Buy => &self.buy,
        }
    }

    fn get_mut(&mut self, r: Relation) -> &mut Vec<Hit> {
        match r {
            Relation::View => &mut self.view,
            Relation::Buy => &mut self.buy,
        }
    }
}

/// Immutable lookup table keyed by (query item, relation).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimilarityStore {
    pub tau: f64,
    pub m: usize,
    entries: HashMap<ItemId, Entry>,
}

impl SimilarityStore {
    /// Searches the index with both query embeddings of every item in
    /// `queries`. Keeps up to `m` non-self hits scoring above `tau`.
    pub fn precompute(index: &Index, queries: &EmbeddingTable, m: usize, tau: f64) -> Result<Self> {
        let per_item: Vec<(ItemId, Entry)> = queries
            .rows()
            .par_iter()
            .map(|e| {
                let mut entry = Entry::default();
                for r in Relation::ALL {
                    let hits = index.search(e.role(Role::from(r)), m + 1)?;
                    *entry.get_mut(r) = hits
                        .into_iter()
                        .filter(|h| h.id != e.item_id && f64::from(h.score) > tau)
                        .take(m)
                        .collect();
                }
                Ok((e.item_id.clone(), entry))
            })
            .collect::<Result<_>>()?;
        let entries = per_item
            .into_iter()
            .filter(|(_, e)| !(e.view.is_empty() && e.buy.is_empty()))
            .collect();
        Ok(SimilarityStore { tau, m, entries })
    }

    /// Stored results for a key, or an empty list.
    pub fn lookup(&self, item: &str, relation: Relation) -> &[Hit] {
        metrics::record_store_lookup();
        self.entries.get(item).map_or(&[], |e| e.get(relation).as_slice())
    }

    /// Number of non-empty (item, relation) lists.
    pub fn len(&self) -> usize {
        self.entries
            .values()
            .map(|e| usize::from(!e.view.is_empty()) + usize::from(!e.buy.is_empty()))
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total stored results across all keys.
    pub fn result_count(&self) -> usize {
        self.entries.values().map(|e| e.view.len() + e.buy.len()).sum()
    }

    /// Non-empty keys in (item id, relation) order.
    pub fn keys(&self) -> Vec<(&ItemId, Relation)> {
        let mut ids: Vec<&ItemId> = self.entries.keys().collect();
        ids.sort();
        ids.into_iter()
            .flat_map(|id| {
                let e = &self.entries[id];
                Relation::ALL
                    .into_iter()
                    .filter(|&r| !e.get(r).is_empty())
                    .map(move |r| (id, r))
            })
            .collect()
    }

    /// Builds a store from explicit result lists. Lists are kept as given.
    pub fn from_entries(
        tau: f64,
        m: usize,
        entries: impl IntoIterator<Item = (ItemId, Relation, Vec<Hit>)>,
    ) -> Self {
        let mut store = SimilarityStore {
            tau,
            m,
            entries: HashMap::new(),
        };
        for (id, r, hits) in entries {
            store.insert(id, r, hits);
        }
        store
    }

    fn insert(&mut self, id: ItemId, r: Relation, hits: Vec<Hit>) {
        if !hits.is_empty() {
            *self.entries.entry(id).or_default().get_mut(r) = hits;
        }
    }

    /// One line per key: item, relation, then target and score pairs with six
    /// decimals, all tab-separated. Header lines carry `tau` and `m`.
    pub fn write_text(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "# tau={}", self.tau)?;
        writeln!(w, "# m={}", self.m)?;
        for (id, r) in self.keys() {
            write!(w, "{id}\t{r}")?;
            for h in self.entries[id].get(r) {
                write!(w, "\t{}\t{:.6}", h.id, h.score)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut store = SimilarityStore::default();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let bad = || Error::Format(format!("store line {}: {line:?}", n + 1));
            if let Some(meta) = line.strip_prefix("# ") {
                match meta.split_once('=') {
                    Some(("tau", v)) => store.tau = v.parse().map_err(|_| bad())?,
                    Some(("m", v)) => store.m = v.parse().map_err(|_| bad())?,
                    _ => {}
                }
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() < 2 || !f.len().is_multiple_of(2) {
                return Err(bad());
            }
            let rel: Relation = f[1].parse().map_err(|_| bad())?;
            let hits = f[2..]
                .chunks_exact(2)
                .map(|c| {
                    Ok(Hit {
                        id: c[0].into(),
                        score: c[1].parse().map_err(|_| bad())?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            store.insert(f[0].into(), rel, hits);
        }
        Ok(store)
    }

    pub fn write_binary(&self, w: &mut dyn Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u64(w, self.tau.to_bits())?;
        put_u32(w, self.m as u32)?;
        let keys = self.keys();
        put_u32(w, keys.len() as u32)?;
        for (id, r) in keys {
            put_str(w, id.as_str())?;
            put_u32(w, r as u32)?;
            let hits = self.entries[id].get(r);
            put_u32(w, hits.len() as u32)?;
            for h in hits {
                put_str(w, h.id.as_str())?;
                put_f32(w, h.score)?;
            }
        }
        Ok(())
    }

    pub fn read_binary(r: &mut dyn Read) -> Result<Self> {
        expect_magic(r, MAGIC)?;
        let mut store = SimilarityStore {
            tau: f64::from_bits(get_u64(r)?),
            m: get_u32(r)? as usize,
            entries: HashMap::new(),
        };
        let n = get_u32(r)?;
        for _ in 0..n {
            let id = ItemId::new(get_str(r)?);
            let rel = match get_u32(r)? {
                0 => Relation::View,
                1 => Relation::Buy,
                t => bail!(Format, "bad relation tag {t}"),
            };
            let len = get_u32(r)?;
            let hits = (0..len)
                .map(|_| {
                    Ok(Hit {
                        id: ItemId::new(get_str(r)?),
                        score: get_f32(r)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            store.insert(id, rel, hits);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::encoder::ItemEmbeddings;

    fn unit(v: Vec<f32>) -> Vec<f32> {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_table(n: usize, dim: usize, seed: u64) -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || unit((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f32>>());
        EmbeddingTable::new(
            (0..n)
                .map(|i| ItemEmbeddings {
                    item_id: ItemId::new(format!("i{i:03}")),
                    q_view: v(),
                    q_buy: v(),
                    target: v(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn target_index(t: &EmbeddingTable) -> Index {
        Index::exact(
            t.rows().iter().map(|r| r.item_id.clone()).collect(),
            t.rows().iter().map(|r| r.target.clone()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn nearest_rank_percentiles() {
        let scores: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        assert_eq!(nearest_rank(&scores, 1.0).unwrap(), 0.01);
        assert_eq!(nearest_rank(&scores, 100.0).unwrap(), 1.0);
        assert_eq!(nearest_rank(&scores, 50.0).unwrap(), 0.5);
        assert_eq!(nearest_rank(&[0.3; 7], 1.0).unwrap(), 0.3);
        assert_eq!(nearest_rank(&[0.9, 0.1, 0.5], 0.0).unwrap(), 0.1);
        assert!(nearest_rank(&[], 1.0).is_err());
    }

    #[test]
    fn threshold_from_validation_pairs() {
        let t = random_table(10, 4, 1);
        let pair = |q: usize, r: Relation, tg: usize| QueryTargetPair {
            query_id: ItemId::new(format!("i{q:03}")),
            relation: r,
            target_id: ItemId::new(format!("i{tg:03}")),
            count: 2,
            association: 1.0,
        };
        let pairs = vec![pair(0, Relation::View, 1), pair(2, Relation::Buy, 3), pair(4, Relation::View, 5)];
        let thr = compute_threshold(&pairs, &t, 100.0).unwrap();
        let score = |q: usize, role: Role, tg: usize| -> f64 {
            let a = t.rows()[q].role(role);
            let b = &t.rows()[tg].target;
            a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
        };
        let want = score(0, Role::View, 1).max(score(2, Role::Buy, 3)).max(score(4, Role::View, 5));
        assert_eq!(thr.tau, want);
        assert_eq!(thr.support, 3);
        let mut missing = pairs.clone();
        missing[0].target_id = "nope".into();
        assert!(matches!(compute_threshold(&missing, &t, 1.0), Err(Error::Input(_))));
    }

    #[test]
    fn high_threshold_gives_empty_store() {
        let t = random_table(20, 5, 2);
        let store = SimilarityStore::precompute(&target_index(&t), &t, 10, 1.01).unwrap();
        assert!(store.is_empty());
        assert!(store.lookup("i000", Relation::View).is_empty());
    }

    #[test]
    fn lowest_threshold_keeps_all_other_items() {
        let n = 12;
        let t = random_table(n, 5, 3);
        let store = SimilarityStore::precompute(&target_index(&t), &t, n, -1.0 - 1e-6).unwrap();
        for e in t.rows() {
            for r in Relation::ALL {
                let hits = store.lookup(e.item_id.as_str(), r);
                assert_eq!(hits.len(), n - 1);
                assert!(hits.iter().all(|h| h.id != e.item_id));
            }
        }
    }

    /// Five hand-placed items on the unit circle against a brute-force
    /// filter of all pairwise scores.
    #[test]
    fn hand_built_store_matches_brute_force() {
        let angle = |deg: f32| {
            let r = deg.to_radians();
            vec![r.cos(), r.sin()]
        };
        let rows: Vec<ItemEmbeddings> = [0.0f32, 20.0, 45.0, 100.0, 200.0]
            .iter()
            .enumerate()
            .map(|(i, &a)| ItemEmbeddings {
                item_id: ItemId::new(format!("{}", (b'a' + i as u8) as char)),
                q_view: angle(a + 5.0),
                q_buy: angle(a + 60.0),
                target: angle(a),
            })
            .collect();
        let t = EmbeddingTable::new(rows).unwrap();
        let (m, tau) = (2, 0.2);
        let store = SimilarityStore::precompute(&target_index(&t), &t, m, tau).unwrap();
        for q in t.rows() {
            for r in Relation::ALL {
                let qv = q.role(Role::from(r));
                let mut all: Vec<(f32, &ItemId)> = t
                    .rows()
                    .iter()
                    .filter(|x| x.item_id != q.item_id)
                    .map(|x| (qv[0] * x.target[0] + qv[1] * x.target[1], &x.item_id))
                    .filter(|(s, _)| f64::from(*s) > tau)
                    .collect();
                all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
                all.truncate(m);
                let got: Vec<&ItemId> = store.lookup(q.item_id.as_str(), r).iter().map(|h| &h.id).collect();
                let want: Vec<&ItemId> = all.iter().map(|x| x.1).collect();
                assert_eq!(got, want, "{} {r}", q.item_id);
            }
        }
    }

    #[test]
    fn stored_lists_are_sorted_and_above_threshold() {
        let t = random_table(60, 6, 4);
        let tau = 0.1;
        let store = SimilarityStore::precompute(&target_index(&t), &t, 5, tau).unwrap();
        for (id, r) in store.keys() {
            let hits = store.lookup(id.as_str(), r);
            assert!(hits.len() <= 5);
            for w in hits.windows(2) {
                assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].id < w[1].id));
            }
            assert!(hits.iter().all(|h| f64::from(h.score) > tau));
        }
    }

    #[test]
    fn retained_results_shrink_as_threshold_grows() {
        let t = random_table(50, 4, 5);
        let idx = target_index(&t);
        let mut last = usize::MAX;
        for tau in [-1.1, -0.5, 0.0, 0.3, 0.6, 0.9, 1.01] {
            let n = SimilarityStore::precompute(&idx, &t, 8, tau).unwrap().result_count();
            assert!(n <= last);
            last = n;
        }
        assert_eq!(last, 0);
    }

    #[test]
    fn text_and_binary_round_trip() {
        let t = random_table(30, 4, 6);
        let store = SimilarityStore::precompute(&target_index(&t), &t, 4, 0.0).unwrap();
        let mut a = Vec::new();
        store.write_text(&mut a).unwrap();
        let back = SimilarityStore::read_text(a.as_slice()).unwrap();
        assert_eq!(back.tau, store.tau);
        assert_eq!(back.keys(), store.keys());
        for (id, r) in store.keys() {
            for (x, y) in store.lookup(id.as_str(), r).iter().zip(back.lookup(id.as_str(), r)) {
                assert_eq!(x.id, y.id);
                // half a unit in the sixth decimal, plus one f32 ulp near 1
                assert!((x.score - y.score).abs() <= 5e-7 + f32::EPSILON);
            }
        }
        let mut b = Vec::new();
        back.write_text(&mut b).unwrap();
        assert_eq!(a, b);

        let mut bin = Vec::new();
        store.write_binary(&mut bin).unwrap();
        assert_eq!(&bin[..4], b"PFS1");
        assert_eq!(SimilarityStore::read_binary(&mut bin.as_slice()).unwrap(), store);
    }

    #[test]
    fn precompute_is_reproducible_byte_for_byte() {
        let t = random_table(40, 4, 7);
        let idx = target_index(&t);
        let write = || {
            let mut out = Vec::new();
            SimilarityStore::precompute(&idx, &t, 5, 0.2).unwrap().write_text(&mut out).unwrap();
            out
        };
        assert_eq!(write(), write());
    }
}
