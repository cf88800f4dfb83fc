//! Positive pair mining from view and buy logs, plus uniform negatives.
//!
//! A pair is counted at most once per unit of co-occurrence: a converting
//! session for view-buy pairs and a customer for buy-buy pairs. Marginal
//! counts are the number of units in which an item appears in the role it
//! plays in the candidate (query or target), so the cosine association
//! `c(q,t) / sqrt(c(q) c(t))` never exceeds one.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::types::{Event, EventType, ItemId, Relation};

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MineConfig {
    pub top_n: usize,
    pub min_count: u64,
    pub horizon_days: i64,
}

impl Default for MineConfig {
    fn default() -> Self {
        MineConfig {
            top_n: 10_000,
            min_count: 2,
            horizon_days: 90,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTargetPair {
    pub query_id: ItemId,
    pub relation: Relation,
    pub target_id: ItemId,
    pub count: u64,
    pub association: f64,
}

type UnitCandidates<'a> = BTreeSet<(&'a str, &'a str)>;

/// Aggregates per-unit candidate sets into ranked pairs.
fn rank<'a>(
    units: impl IntoIterator<Item = UnitCandidates<'a>>,
    relation: Relation,
    top_n: usize,
    min_count: u64,
) -> Vec<QueryTargetPair> {
    let mut pair_count: HashMap<(&str, &str), u64> = HashMap::new();
    let mut q_count: HashMap<&str, u64> = HashMap::new();
    let mut t_count: HashMap<&str, u64> = HashMap::new();
    for cands in units {
        let qs: BTreeSet<&str> = cands.iter().map(|c| c.0).collect();
        let ts: BTreeSet<&str> = cands.iter().map(|c| c.1).collect();
        for q in qs {
            *q_count.entry(q).or_default() += 1;
        }
        for t in ts {
            *t_count.entry(t).or_default() += 1;
        }
        for c in cands {
            *pair_count.entry(c).or_default() += 1;
        }
    }
    let mut out: Vec<QueryTargetPair> = pair_count
        .into_iter()
        .filter(|&(_, c)| c >= min_count.max(1))
        .map(|((q, t), c)| QueryTargetPair {
            query_id: q.into(),
            relation,
            target_id: t.into(),
            count: c,
            association: c as f64 / ((q_count[q] * t_count[t]) as f64).sqrt(),
        })
        .collect();
    out.sort_by(|a, b| {
        b.association
            .total_cmp(&a.association)
            .then(b.count.cmp(&a.count))
            .then_with(|| a.query_id.cmp(&b.query_id))
            .then_with(|| a.target_id.cmp(&b.target_id))
    });
    out.truncate(top_n);
    out
}

/// Items viewed in a session that ends in a purchase become view queries for
/// each purchased item of that session.
pub fn mine_view_buy(events: &[Event], top_n: usize, min_count: u64) -> Vec<QueryTargetPair> {
    let mut sessions: BTreeMap<(&str, &str), (BTreeSet<&str>, BTreeSet<&str>)> = BTreeMap::new();
    for e in events {
        let Some(s) = e.session_id.as_deref() else { continue };
        let entry = sessions.entry((e.customer_id.as_str(), s)).or_default();
        match e.event_type {
            EventType::View => entry.0.insert(e.item_id.as_str()),
            EventType::Buy => entry.1.insert(e.item_id.as_str()),
        };
    }
    let units = sessions.into_values().filter(|(_, b)| !b.is_empty()).map(|(views, buys)| {
        let mut c = UnitCandidates::new();
        for &v in &views {
            for &b in &buys {
                if v != b {
                    c.insert((v, b));
                }
            }
        }
        c
    });
    rank(units, Relation::View, top_n, min_count)
}

/// Items bought earlier become buy queries for items the same customer buys
/// strictly later, within `horizon_days`.
pub fn mine_buy_buy(
    events: &[Event],
    horizon_days: i64,
    top_n: usize,
    min_count: u64,
) -> Vec<QueryTargetPair> {
    let horizon = horizon_days * SECONDS_PER_DAY;
    let mut buys: BTreeMap<&str, Vec<(i64, &str)>> = BTreeMap::new();
    for e in events.iter().filter(|e| e.event_type == EventType::Buy) {
        buys.entry(e.customer_id.as_str())
            .or_default()
            .push((e.timestamp, e.item_id.as_str()));
    }
    let units = buys.into_values().map(|mut seq| {
        seq.sort();
        let mut c = UnitCandidates::new();
        for (i, &(t1, a)) in seq.iter().enumerate() {
            for &(t2, b) in &seq[i + 1..] {
                let dt = t2 - t1;
                if dt > horizon {
                    break;
                }
                if dt > 0 && a != b {
                    c.insert((a, b));
                }
            }
        }
        c
    });
    rank(units, Relation::Buy, top_n, min_count)
}

/// `k` distinct items drawn uniformly without replacement.
pub fn sample_negative_items(items: &[ItemId], k: usize, seed: u64) -> Result<Vec<ItemId>> {
    if k > items.len() {
        bail!(Input, "cannot sample {k} negatives from {} items", items.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, items.len(), k)
        .into_iter()
        .map(|i| items[i].clone())
        .collect())
}

const PAIR_HEADER: &str = "query_id\trelation\ttarget_id\tcount\tassociation";

pub fn write_pairs(w: &mut dyn Write, pairs: &[QueryTargetPair]) -> Result<()> {
    writeln!(w, "{PAIR_HEADER}")?;
    for p in pairs {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            p.query_id, p.relation, p.target_id, p.count, p.association
        )?;
    }
    Ok(())
}

/// Reads pairs written by [`write_pairs`]; `#` lines and the header are
/// skipped.
pub fn read_pairs<R: BufRead>(r: R) -> Result<Vec<QueryTargetPair>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() || line.starts_with('#') || line == PAIR_HEADER {
            continue;
        }
        let bad = || Error::Format(format!("pairs line {}: {line:?}", n + 1));
        let f: Vec<&str> = line.split('\t').collect();
        let [q, r, t, c, a] = f[..] else { return Err(bad()) };
        out.push(QueryTargetPair {
            query_id: q.into(),
            relation: r.parse().map_err(|_| bad())?,
            target_id: t.into(),
            count: c.parse().map_err(|_| bad())?,
            association: a.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub train: Vec<QueryTargetPair>,
    pub valid: Vec<QueryTargetPair>,
    pub test: Vec<QueryTargetPair>,
}

/// Seeded 80/10/10 split, done separately per relation so every part holds
/// both kinds of pair.
pub fn split_pairs(pairs: &[QueryTargetPair], seed: u64) -> Splits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Splits::default();
    for rel in Relation::ALL {
        let mut part: Vec<&QueryTargetPair> = pairs.iter().filter(|p| p.relation == rel).collect();
        part.shuffle(&mut rng);
        let n = part.len();
        let n_train = n * 8 / 10;
        let n_valid = n / 10;
        for (i, p) in part.into_iter().enumerate() {
            let dst = if i < n_train {
                &mut out.train
            } else if i < n_train + n_valid {
                &mut out.valid
            } else {
                &mut out.test
            };
            dst.push(p.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(c: &str, item: &str, kind: EventType, ts: i64, s: Option<&str>) -> Event {
        Event {
            customer_id: c.into(),
            item_id: item.into(),
            event_type: kind,
            timestamp: ts,
            session_id: s.map(Into::into),
        }
    }

    fn view(c: &str, s: &str, item: &str, ts: i64) -> Event {
        ev(c, item, EventType::View, ts, Some(s))
    }

    fn buy(c: &str, s: Option<&str>, item: &str, ts: i64) -> Event {
        ev(c, item, EventType::Buy, ts, s)
    }

    fn ids(p: &[QueryTargetPair]) -> Vec<(&str, &str)> {
        p.iter().map(|p| (p.query_id.as_str(), p.target_id.as_str())).collect()
    }

    #[test]
    fn session_views_become_queries_for_the_purchase() {
        let events = vec![view("u", "s1", "A", 1), view("u", "s1", "B", 2), buy("u", Some("s1"), "C", 3)];
        let got = mine_view_buy(&events, 10, 1);
        assert_eq!(ids(&got), vec![("A", "C"), ("B", "C")]);
        assert!(got.iter().all(|p| p.relation == Relation::View));
    }

    #[test]
    fn sessions_without_a_buy_are_ignored() {
        let events = vec![view("u", "s1", "A", 1), view("u", "s1", "B", 2)];
        assert!(mine_view_buy(&events, 10, 1).is_empty());
    }

    #[test]
    fn the_purchased_item_is_not_its_own_query() {
        let events = vec![view("u", "s1", "C", 1), buy("u", Some("s1"), "C", 3)];
        assert!(mine_view_buy(&events, 10, 1).is_empty());
    }

    #[test]
    fn perfectly_coupled_items_have_unit_association() {
        let mut events = Vec::new();
        for s in 0..4 {
            let s = format!("s{s}");
            events.push(view("u", &s, "A", 1));
            events.push(buy("u", Some(&s), "C", 2));
        }
        let got = mine_view_buy(&events, 10, 2);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].count, 4);
        assert_eq!(got[0].association, 1.0);
    }

    #[test]
    fn later_purchases_are_targets() {
        let events = vec![buy("u", None, "A", 100), buy("u", None, "C", 200)];
        assert_eq!(ids(&mine_buy_buy(&events, 90, 10, 1)), vec![("A", "C")]);
    }

    #[test]
    fn simultaneous_purchases_and_far_ones_are_excluded() {
        let day = SECONDS_PER_DAY;
        let events = vec![
            buy("u", None, "A", 0),
            buy("u", None, "B", 0),
            buy("u", None, "C", 90 * day),
            buy("u", None, "D", 90 * day + 1),
        ];
        let pairs = mine_buy_buy(&events, 90, 10, 1);
        let got = ids(&pairs);
        assert!(!got.contains(&("A", "B")) && !got.contains(&("B", "A")));
        assert!(got.contains(&("A", "C")));
        assert!(!got.contains(&("A", "D")));
        assert!(got.contains(&("C", "D")));
    }

    #[test]
    fn association_uses_role_marginals() {
        // a is a buy query for 4 customers, b a target for 9, together for 2
        let mut events = Vec::new();
        for c in 0..2 {
            let c = format!("p{c}");
            events.push(buy(&c, None, "a", 0));
            events.push(buy(&c, None, "b", 10));
        }
        for c in 0..2 {
            let c = format!("q{c}");
            events.push(buy(&c, None, "a", 0));
            events.push(buy(&c, None, &format!("x{c}"), 10));
        }
        for c in 0..7 {
            let c = format!("r{c}");
            events.push(buy(&c, None, &format!("y{c}"), 0));
            events.push(buy(&c, None, "b", 10));
        }
        let got = mine_buy_buy(&events, 90, 100, 2);
        let p = got.iter().find(|p| p.query_id.as_str() == "a" && p.target_id.as_str() == "b").unwrap();
        assert_eq!(p.count, 2);
        assert!((p.association - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn min_count_top_n_and_ranking() {
        let mut events = Vec::new();
        let mut s = 0;
        let mut session = |q: &str, t: &str, events: &mut Vec<Event>| {
            s += 1;
            let sid = format!("s{s}");
            events.push(view("u", &sid, q, 0));
            events.push(buy("u", Some(&sid), t, 1));
        };
        for _ in 0..3 {
            session("A", "B", &mut events);
        }
        for _ in 0..2 {
            session("C", "D", &mut events);
        }
        session("E", "F", &mut events);
        session("A", "D", &mut events);
        let got = mine_view_buy(&events, 10, 2);
        // (C,D): 2/sqrt(2*3); (A,B): 3/sqrt(4*3); (E,F) dropped by min_count
        assert_eq!(ids(&got), vec![("A", "B"), ("C", "D")]);
        assert_eq!(mine_view_buy(&events, 1, 2).len(), 1);
        for p in &got {
            assert!(p.association > 0.0 && p.association <= 1.0);
        }
    }

    #[test]
    fn ties_break_on_count_then_ids() {
        let mut events = Vec::new();
        for (i, (q, t)) in [("B", "Y"), ("A", "Z"), ("A2", "Z2"), ("A2", "Z2")].iter().enumerate() {
            let sid = format!("s{i}");
            events.push(view("u", &sid, q, 0));
            events.push(buy("u", Some(&sid), t, 1));
        }
        let got = mine_view_buy(&events, 10, 1);
        assert_eq!(ids(&got), vec![("A2", "Z2"), ("A", "Z"), ("B", "Y")]);
    }

    #[test]
    fn negatives_are_seeded_and_distinct() {
        let items: Vec<ItemId> = (0..20).map(|i| ItemId::new(format!("i{i}"))).collect();
        let a = sample_negative_items(&items, 5, 7).unwrap();
        assert_eq!(a, sample_negative_items(&items, 5, 7).unwrap());
        assert_eq!(a.iter().collect::<BTreeSet<_>>().len(), 5);
        let mut all = sample_negative_items(&items, 20, 1).unwrap();
        all.sort();
        let mut want = items.clone();
        want.sort();
        assert_eq!(all, want);
        assert!(matches!(sample_negative_items(&items, 21, 1), Err(Error::Input(_))));
    }

    #[test]
    fn negatives_are_uniform() {
        let n = 20;
        let items: Vec<ItemId> = (0..n).map(|i| ItemId::new(format!("i{i}"))).collect();
        let draws = 10_000;
        let mut freq: HashMap<ItemId, u64> = HashMap::new();
        for seed in 0..draws {
            for id in sample_negative_items(&items, 1, seed).unwrap() {
                *freq.entry(id).or_default() += 1;
            }
        }
        let p = 1.0 / n as f64;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for id in &items {
            let f = *freq.get(id).unwrap_or(&0) as f64;
            assert!((f - mean).abs() <= 3.0 * sd + 1.0, "{id}: {f} vs {mean}");
        }
    }

    #[test]
    fn pairs_round_trip_through_text() {
        let pairs = vec![QueryTargetPair {
            query_id: "a".into(),
            relation: Relation::Buy,
            target_id: "b".into(),
            count: 2,
            association: 2.0 / 6.0,
        }];
        let mut buf = b"# seed=1\n".to_vec();
        write_pairs(&mut buf, &pairs).unwrap();
        assert_eq!(read_pairs(buf.as_slice()).unwrap(), pairs);
        assert!(read_pairs(&b"a\tbuy\tb\n"[..]).is_err());
    }

    #[test]
    fn split_proportions() {
        let pairs: Vec<QueryTargetPair> = (0..100)
            .map(|i| QueryTargetPair {
                query_id: ItemId::new(format!("q{i}")),
                relation: if i < 50 { Relation::View } else { Relation::Buy },
                target_id: ItemId::new(format!("t{i}")),
                count: 2,
                association: 0.5,
            })
            .collect();
        let s = split_pairs(&pairs, 3);
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (80, 10, 10));
        assert_eq!(s, split_pairs(&pairs, 3));
        let mut all: Vec<_> = s.train.iter().chain(&s.valid).chain(&s.test).map(|p| p.query_id.clone()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);
    }
}
