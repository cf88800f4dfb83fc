use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::index::Hit;
use crate::metrics;
use crate::types::Item;

fn item(id: &str, cat: &str) -> Item {
    Item {
        id: id.into(),
        title: format!("thing {id}"),
        category: vec!["root".into(), cat.into()],
        deal: false,
        release_date: 0,
        popularity: 0,
    }
}

fn catalog(items: &[(&str, &str)]) -> Catalog {
    Catalog::new(items.iter().map(|(i, c)| item(i, c)).collect()).unwrap()
}

fn event(c: &str, id: &str, kind: EventType, ts: i64) -> Event {
    Event {
        customer_id: c.into(),
        item_id: id.into(),
        event_type: kind,
        timestamp: ts,
        session_id: None,
    }
}

fn hits(list: &[(&str, f32)]) -> Vec<Hit> {
    list.iter().map(|&(id, score)| Hit { id: id.into(), score }).collect()
}

fn ids(feed: &[FeedItem]) -> Vec<&str> {
    feed.iter().map(|f| f.item_id.as_str()).collect()
}

#[test]
fn first_event_creates_a_profile() {
    let cat = catalog(&[("a", "x")]);
    let mut p = Profiles::new(MAX_QUERIES);
    assert!(p.ingest(&event("u", "a", EventType::View, 5), &cat));
    let q = &p.get("u").unwrap().queries;
    assert_eq!(q.len(), 1);
    assert_eq!(q[0].relation, Relation::View);
    assert_eq!(q[0].category, "x");
}

#[test]
fn repeated_view_keeps_newest_entry() {
    let cat = catalog(&[("a", "x"), ("b", "x")]);
    let mut p = Profiles::new(MAX_QUERIES);
    p.ingest(&event("u", "a", EventType::View, 1), &cat);
    p.ingest(&event("u", "b", EventType::View, 2), &cat);
    p.ingest(&event("u", "a", EventType::View, 3), &cat);
    let q = &p.get("u").unwrap().queries;
    assert_eq!(q.len(), 2);
    assert_eq!((q[0].item_id.as_str(), q[0].timestamp), ("a", 3));
    // an older duplicate does not overwrite
    p.ingest(&event("u", "a", EventType::View, 0), &cat);
    assert_eq!(p.get("u").unwrap().queries[0].timestamp, 3);
}

#[test]
fn view_and_buy_of_one_item_are_separate_queries() {
    let cat = catalog(&[("a", "x")]);
    let mut p = Profiles::new(MAX_QUERIES);
    p.ingest(&event("u", "a", EventType::View, 1), &cat);
    p.ingest(&event("u", "a", EventType::Buy, 2), &cat);
    let prof = p.get("u").unwrap();
    assert_eq!(prof.queries.len(), 2);
    assert_eq!(prof.queries[0].relation, Relation::Buy);
    assert!(prof.bought.contains("a"));
}

#[test]
fn only_the_newest_hundred_queries_are_kept() {
    let items: Vec<(String, String)> = (0..105).map(|i| (format!("i{i:03}"), "x".to_string())).collect();
    let refs: Vec<(&str, &str)> = items.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let cat = catalog(&refs);
    let mut p = Profiles::new(MAX_QUERIES);
    // shuffled arrival order
    let mut order: Vec<usize> = (0..105).collect();
    order.reverse();
    order.swap(3, 70);
    for i in order {
        p.ingest(&event("u", &format!("i{i:03}"), EventType::View, i as i64), &cat);
    }
    let q = &p.get("u").unwrap().queries;
    assert_eq!(q.len(), 100);
    let kept: Vec<i64> = q.iter().map(|e| e.timestamp).collect();
    assert_eq!(kept, (5..105).rev().collect::<Vec<i64>>());
}

#[test]
fn unknown_items_are_counted_and_skipped() {
    let cat = catalog(&[("a", "x")]);
    let mut p = Profiles::new(MAX_QUERIES);
    assert!(!p.ingest(&event("u", "zzz", EventType::View, 1), &cat));
    assert_eq!(p.skipped, 1);
    assert!(p.is_empty());
}

fn profile(queries: &[(&str, Relation, i64)], bought: &[&str]) -> CustomerProfile {
    CustomerProfile {
        customer_id: "u".into(),
        queries: queries
            .iter()
            .map(|&(id, r, ts)| QueryEntry {
                item_id: id.into(),
                relation: r,
                category: String::new(),
                timestamp: ts,
            })
            .collect(),
        bought: bought.iter().map(|&b| ItemId::from(b)).collect(),
    }
}

#[test]
fn single_query_feed_is_its_results_in_score_order() {
    let cat = catalog(&[("q", "x"), ("a", "y"), ("b", "z"), ("c", "w")]);
    let store = SimilarityStore::from_entries(0.0, 10, [("q".into(), Relation::View, hits(&[("a", 0.9), ("b", 0.8), ("c", 0.7)]))]);
    let feed = compose_feed(&profile(&[("q", Relation::View, 1)], &[]), &store, &cat, &EligibleSet::all(), 10);
    assert_eq!(ids(&feed), vec!["a", "b", "c"]);
    assert_eq!(feed.iter().map(|f| f.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(feed.iter().all(|f| f.source_item_id.as_str() == "q"));
}

#[test]
fn shared_target_goes_to_the_newer_query() {
    let cat = catalog(&[("new", "x"), ("old", "x"), ("a", "y"), ("b", "z"), ("t", "w")]);
    let store = SimilarityStore::from_entries(
        0.0,
        10,
        [
            ("new".into(), Relation::View, hits(&[("a", 0.9), ("b", 0.8), ("t", 0.5)])),
            ("old".into(), Relation::Buy, hits(&[("t", 0.95)])),
        ],
    );
    let p = profile(&[("new", Relation::View, 10), ("old", Relation::Buy, 1)], &[]);
    let feed = compose_feed(&p, &store, &cat, &EligibleSet::all(), 10);
    assert_eq!(ids(&feed), vec!["a", "b", "t"]);
    let t = feed.iter().find(|f| f.item_id.as_str() == "t").unwrap();
    assert_eq!(t.source_item_id.as_str(), "new");
    assert_eq!(t.score, 0.5);
}

#[test]
fn round_robin_puts_recent_queries_first() {
    let cat = catalog(&[("q1", "x"), ("q2", "x"), ("a", "a"), ("b", "b"), ("c", "c"), ("d", "d")]);
    let store = SimilarityStore::from_entries(
        0.0,
        10,
        [
            ("q1".into(), Relation::View, hits(&[("a", 0.5), ("b", 0.4)])),
            ("q2".into(), Relation::View, hits(&[("c", 0.9), ("d", 0.8)])),
        ],
    );
    let p = profile(&[("q1", Relation::View, 2), ("q2", Relation::View, 1)], &[]);
    let feed = compose_feed(&p, &store, &cat, &EligibleSet::all(), 10);
    assert_eq!(ids(&feed), vec!["a", "c", "b", "d"]);
    assert_eq!(ids(&compose_feed(&p, &store, &cat, &EligibleSet::all(), 3)), vec!["a", "c", "b"]);
}

#[test]
fn bought_items_never_appear() {
    let cat = catalog(&[("q", "x"), ("a", "y"), ("b", "y")]);
    let store = SimilarityStore::from_entries(0.0, 10, [("q".into(), Relation::Buy, hits(&[("a", 0.9), ("b", 0.8)]))]);
    let feed = compose_feed(&profile(&[("q", Relation::Buy, 1)], &["a"]), &store, &cat, &EligibleSet::all(), 10);
    assert_eq!(ids(&feed), vec!["b"]);
}

#[test]
fn long_category_runs_are_broken_not_dropped() {
    let cat = catalog(&[
        ("q1", "z"),
        ("q2", "z"),
        ("s1", "shoe"),
        ("s2", "shoe"),
        ("s3", "shoe"),
        ("s4", "shoe"),
        ("s5", "shoe"),
        ("h1", "hat"),
        ("h2", "hat"),
    ]);
    let store = SimilarityStore::from_entries(
        0.0,
        10,
        [
            ("q1".into(), Relation::View, hits(&[("s1", 0.9), ("s2", 0.8), ("s3", 0.7), ("s4", 0.6), ("s5", 0.5)])),
            ("q2".into(), Relation::View, hits(&[("s9", 0.99)])),
        ],
    );
    let p = profile(&[("q1", Relation::View, 2)], &[]);
    let feed = compose_feed(&p, &store, &cat, &EligibleSet::all(), 10);
    // nothing else to interleave: the run stays
    assert_eq!(ids(&feed), vec!["s1", "s2", "s3", "s4", "s5"]);

    let store = SimilarityStore::from_entries(
        0.0,
        10,
        [(
            "q1".into(),
            Relation::View,
            hits(&[("s1", 0.9), ("s2", 0.8), ("s3", 0.7), ("s4", 0.6), ("s5", 0.5), ("h1", 0.4), ("h2", 0.3)]),
        )],
    );
    let feed = compose_feed(&p, &store, &cat, &EligibleSet::all(), 10);
    assert_eq!(ids(&feed), vec!["s1", "s2", "s3", "h1", "s4", "s5", "h2"]);
}

#[test]
fn leading_results_are_not_pulled_ahead() {
    // q2's first result is the only other category; it must not jump over
    // anything to break q1's run, since q2 is older than q1
    let cat = catalog(&[("q1", "z"), ("q2", "z"), ("s1", "shoe"), ("s2", "shoe"), ("s3", "shoe"), ("s4", "shoe"), ("h", "hat")]);
    let store = SimilarityStore::from_entries(
        0.0,
        10,
        [
            ("q1".into(), Relation::View, hits(&[("s1", 0.9), ("s2", 0.8), ("s3", 0.7), ("s4", 0.6)])),
            ("q2".into(), Relation::View, hits(&[("h", 0.5)])),
        ],
    );
    let p = profile(&[("q1", Relation::View, 2), ("q2", Relation::View, 1)], &[]);
    let feed = compose_feed(&p, &store, &cat, &EligibleSet::all(), 10);
    assert_eq!(ids(&feed), vec!["s1", "h", "s2", "s3", "s4"]);
}

#[test]
fn business_filter_is_applied() {
    let cat = catalog(&[("q", "x"), ("a", "y"), ("b", "y")]);
    let store = SimilarityStore::from_entries(0.0, 10, [("q".into(), Relation::View, hits(&[("a", 0.9), ("b", 0.8)]))]);
    let opts = FeedOptions {
        filter: Some(Arc::new(|f: &FeedItem| f.item_id.as_str() != "a")),
        ..FeedOptions::default()
    };
    let feed = compose_feed_with(&profile(&[("q", Relation::View, 1)], &[]), &store, &cat, &EligibleSet::all(), 10, &opts);
    assert_eq!(ids(&feed), vec!["b"]);
}

#[test]
fn eligible_sets_follow_surface_rules() {
    let mut items: Vec<Item> = (0..10)
        .map(|i| Item {
            release_date: i,
            popularity: 100 - i as u64,
            ..item(&format!("c{i}"), "cam")
        })
        .collect();
    items.extend((0..3).map(|i| Item {
        release_date: 50,
        popularity: 7,
        ..item(&format!("l{i}"), "lens")
    }));
    let cat = Catalog::new(items).unwrap();
    let new = build_eligible_set(&cat, Surface::New);
    // one of ten cameras, and the first id among three tied lenses
    assert_eq!(new.member_count(), Some(2));
    assert!(new.contains("c9") && new.contains("l0"));
    let popular = build_eligible_set(&cat, Surface::Popular);
    assert_eq!(popular.member_count(), Some(3));
    assert!(popular.contains("c0") && popular.contains("c1") && popular.contains("l0"));
    assert_eq!(build_eligible_set(&cat, Surface::Deals).member_count(), Some(0));
    let all = build_eligible_set(&cat, Surface::All);
    assert!(cat.ids().all(|i| all.contains(i.as_str())));
    assert_eq!("popular".parse::<Surface>().unwrap(), Surface::Popular);
}

#[test]
fn ineligible_results_are_filtered() {
    let mut items = vec![item("q", "x"), item("a", "y"), item("b", "y")];
    items[2].deal = true;
    let cat = Catalog::new(items).unwrap();
    let store = SimilarityStore::from_entries(0.0, 10, [("q".into(), Relation::View, hits(&[("a", 0.9), ("b", 0.8)]))]);
    let deals = build_eligible_set(&cat, Surface::Deals);
    let feed = compose_feed(&profile(&[("q", Relation::View, 1)], &[]), &store, &cat, &deals, 10);
    assert_eq!(ids(&feed), vec!["b"]);
}

struct World {
    catalog: Catalog,
    store: SimilarityStore,
}

fn random_world(rng: &mut ChaCha8Rng, n_items: usize) -> World {
    let cats = ["a", "b", "c", "d"];
    let items: Vec<Item> = (0..n_items)
        .map(|i| Item {
            deal: rng.random_bool(0.5),
            release_date: rng.random_range(0..1000),
            popularity: rng.random_range(0..1000),
            ..item(&format!("i{i:04}"), cats[rng.random_range(0..cats.len())])
        })
        .collect();
    let catalog = Catalog::new(items).unwrap();
    let mut entries = Vec::new();
    for i in 0..n_items {
        for r in Relation::ALL {
            let k = rng.random_range(0..8);
            let mut list: Vec<Hit> = rand::seq::index::sample(rng, n_items, k)
                .into_iter()
                .filter(|&j| j != i)
                .map(|j| Hit {
                    id: ItemId::new(format!("i{j:04}")),
                    score: rng.random_range(0.0..1.0),
                })
                .collect();
            list.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
            entries.push((ItemId::new(format!("i{i:04}")), r, list));
        }
    }
    World {
        catalog,
        store: SimilarityStore::from_entries(0.0, 8, entries),
    }
}

fn random_profile(rng: &mut ChaCha8Rng, w: &World, customer: &str) -> CustomerProfile {
    let mut p = Profiles::new(MAX_QUERIES);
    let n = w.catalog.len();
    for t in 0..rng.random_range(1..40) {
        let id = format!("i{:04}", rng.random_range(0..n));
        let kind = if rng.random_bool(0.3) { EventType::Buy } else { EventType::View };
        p.ingest(&event(customer, &id, kind, t), &w.catalog);
    }
    p.get(customer).unwrap().clone()
}

/// Feed invariants checked against the profile and store directly.
fn check_feed(feed: &[FeedItem], p: &CustomerProfile, w: &World, eligible: &EligibleSet, size: usize) {
    assert!(feed.len() <= size);
    let mut seen = HashSet::new();
    for (i, f) in feed.iter().enumerate() {
        assert_eq!(f.rank, i + 1);
        assert!(seen.insert(&f.item_id), "duplicate {}", f.item_id);
        assert!(!p.bought.contains(&f.item_id));
        assert!(eligible.contains(f.item_id.as_str()));
        let src = p
            .queries
            .iter()
            .find(|q| q.item_id == f.source_item_id && q.relation == f.source_relation)
            .expect("source query in profile");
        assert_eq!(src.timestamp, f.source_timestamp);
        let stored = w.store.lookup(src.item_id.as_str(), src.relation);
        assert!(stored.iter().any(|h| h.id == f.item_id && h.score == f.score));
    }
    // first surviving result of each query, in feed order, follows recency
    let pos = |q: &QueryEntry| {
        feed.iter()
            .position(|f| f.source_item_id == q.item_id && f.source_relation == q.relation)
    };
    let firsts: Vec<usize> = p.queries.iter().filter_map(pos).collect();
    assert!(firsts.windows(2).all(|w| w[0] < w[1]), "{firsts:?}");
}

/// First surviving result of every query, before any merging.
fn leading_items(p: &CustomerProfile, w: &World, eligible: &EligibleSet) -> HashSet<ItemId> {
    let mut taken = HashSet::new();
    let mut leading = HashSet::new();
    for q in &p.queries {
        let mut first = true;
        for h in w.store.lookup(q.item_id.as_str(), q.relation) {
            if eligible.contains(h.id.as_str()) && !p.bought.contains(&h.id) && taken.insert(h.id.clone()) {
                if first {
                    leading.insert(h.id.clone());
                }
                first = false;
            }
        }
    }
    leading
}

#[test]
fn randomized_profiles_satisfy_feed_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = random_world(&mut rng, 200);
    let surfaces: Vec<EligibleSet> = Surface::ALL.iter().map(|&s| build_eligible_set(&w.catalog, s)).collect();
    for c in 0..300 {
        let p = random_profile(&mut rng, &w, &format!("c{c}"));
        let eligible = &surfaces[c % surfaces.len()];
        let size = rng.random_range(1..30);
        let feed = compose_feed(&p, &w.store, &w.catalog, eligible, size);
        check_feed(&feed, &p, &w, eligible, size);
        assert_eq!(feed, compose_feed(&p, &w.store, &w.catalog, eligible, size));
        // a run of four is only allowed when everything after it shares the
        // category or opens some query's list
        let leading = leading_items(&p, &w, eligible);
        let cat = |f: &FeedItem| w.catalog.get(f.item_id.as_str()).unwrap().leaf_category();
        for (i, win) in feed.windows(MAX_RUN + 1).enumerate() {
            if win.iter().all(|f| cat(f) == cat(&win[0])) {
                for f in &feed[i + MAX_RUN + 1..] {
                    assert!(cat(f) == cat(&win[0]) || leading.contains(&f.item_id));
                }
            }
        }
    }
}

#[test]
fn refresh_is_lookup_only_and_matches_compose() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = random_world(&mut rng, 100);
    let mut profiles = Profiles::new(MAX_QUERIES);
    for c in 0..50 {
        profiles.insert(random_profile(&mut rng, &w, &format!("c{c:02}")));
    }
    let all = EligibleSet::all();
    let opts = FeedOptions::default();
    assert!(batch_refresh(&Profiles::new(MAX_QUERIES), &w.store, &w.catalog, &all, 10, &opts).is_empty());

    let batch = batch_refresh(&profiles, &w.store, &w.catalog, &all, 10, &opts);
    assert_eq!(batch.len(), 50);
    for (c, feed) in &batch {
        assert_eq!(feed, &compose_feed(profiles.get(c).unwrap(), &w.store, &w.catalog, &all, 10));
    }

    let active: Vec<String> = vec!["c03".into(), "c07".into(), "nobody".into(), "c03".into()];
    let before = metrics::snapshot();
    let inc = incremental_refresh(&active, &profiles, &w.store, &w.catalog, &all, 10, &opts);
    let used = metrics::snapshot().since(before);
    assert_eq!(used.encoder_calls, 0);
    assert_eq!(used.index_searches, 0);
    assert!(used.store_lookups > 0);
    assert_eq!(inc.iter().map(|(c, _)| c.as_str()).collect::<Vec<_>>(), vec!["c03", "c07"]);
    assert!(incremental_refresh(&[], &profiles, &w.store, &w.catalog, &all, 10, &opts).is_empty());
}

#[test]
fn service_serves_cached_feeds_until_refresh() {
    let cat = catalog(&[("q1", "x"), ("q2", "x"), ("a", "y"), ("b", "z")]);
    let store = SimilarityStore::from_entries(
        0.0,
        10,
        [
            ("q1".into(), Relation::View, hits(&[("a", 0.9)])),
            ("q2".into(), Relation::View, hits(&[("b", 0.8)])),
        ],
    );
    let svc = FeedService::new(cat, store, Profiles::new(MAX_QUERIES), 10, FeedOptions::default());
    assert!(svc.feed("u", Surface::All, 10).is_empty());
    assert!(svc.ingest(&event("u", "q1", EventType::View, 1)).unwrap());
    assert_eq!(ids(&svc.feed("u", Surface::All, 10)), vec!["a"]);
    assert!(svc.ingest(&event("u", "q2", EventType::View, 2)).unwrap());
    assert_eq!(ids(&svc.feed("u", Surface::All, 10)), vec!["a"]);
    assert_eq!(svc.pending(), 1);
    assert_eq!(svc.refresh_incremental(), 1);
    assert_eq!(ids(&svc.feed("u", Surface::All, 10)), vec!["b", "a"]);
    assert_eq!(ids(&svc.feed("u", Surface::All, 1)), vec!["b"]);
    assert!(!svc.ingest(&event("u", "nope", EventType::View, 3)).unwrap());
    assert!(svc.ingest(&event("u", "q1", EventType::View, -1)).is_err());

    svc.swap_store(SimilarityStore::default());
    assert_eq!(svc.refresh_batch(), 1);
    assert!(svc.feed("u", Surface::All, 10).is_empty());
}
