//! Seeded synthetic catalog and event log with planted structure.
//!
//! Categories come in complementary pairs and each category is split into
//! product lines. A line word is shared by the matching lines of both
//! categories in a pair, so titles carry the signal the encoder has to learn.
//!
//! Converting sessions view items mostly from the purchased item's category
//! (and mostly its line), then buy. A purchase is often followed weeks later
//! by a purchase from the complementary category, same line when possible.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::mining::SECONDS_PER_DAY;
use crate::types::{Catalog, Event, EventType, Item, ItemId};

const EPOCH: i64 = 1_600_000_000;
const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Must be even: categories are paired with their complement.
    pub categories: usize,
    pub items_per_category: usize,
    pub lines_per_category: usize,
    pub customers: usize,
    pub sessions: usize,
    pub seed: u64,
    /// Chance a viewed item shares the purchased item's category.
    pub within_category: f64,
    /// Chance a related item also shares the line.
    pub line_affinity: f64,
    pub conversion_rate: f64,
    /// Chance a purchase is followed by a complementary purchase.
    pub follow_up_rate: f64,
    pub zipf_exponent: f64,
    pub days: i64,
    pub follow_up_max_days: i64,
    pub noise_words: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            categories: 20,
            items_per_category: 100,
            lines_per_category: 10,
            customers: 10_000,
            sessions: 20_000,
            seed: 0,
            within_category: 0.9,
            line_affinity: 0.8,
            conversion_rate: 0.6,
            follow_up_rate: 0.5,
            zipf_exponent: 1.0,
            days: 365,
            follow_up_max_days: 60,
            noise_words: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.categories < 2 || !self.categories.is_multiple_of(2) {
            bail!(Input, "categories must be a positive even number, got {}", self.categories);
        }
        if self.items_per_category < 2 || self.lines_per_category == 0 {
            bail!(Input, "need at least two items and one line per category");
        }
        if self.lines_per_category > self.items_per_category {
            bail!(Input, "more lines than items per category");
        }
        if self.customers == 0 || self.sessions == 0 || self.days <= 0 || self.follow_up_max_days <= 0 {
            bail!(Input, "customers, sessions and day ranges must be positive");
        }
        for (name, p) in [
            ("within_category", self.within_category),
            ("line_affinity", self.line_affinity),
            ("conversion_rate", self.conversion_rate),
            ("follow_up_rate", self.follow_up_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                bail!(Input, "{name} {p} outside [0, 1]");
            }
        }
        if self.zipf_exponent < 0.0 || !self.zipf_exponent.is_finite() {
            bail!(Input, "zipf exponent must be finite and non-negative");
        }
        Ok(())
    }
}

/// Catalog, events, and the planted category layout.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub catalog: Catalog,
    pub events: Vec<Event>,
    category_names: Vec<String>,
    item_category: HashMap<ItemId, usize>,
}

impl SyntheticWorld {
    pub fn category_names(&self) -> &[String] {
        &self.category_names
    }

    /// Category index of an item.
    pub fn category(&self, id: &str) -> Option<usize> {
        self.item_category.get(id).copied()
    }

    /// The category paired with `c`.
    pub fn complement(c: usize) -> usize {
        c ^ 1
    }

    /// Whether `t` lies in the complementary category of `q`.
    pub fn respects_complement(&self, q: &str, t: &str) -> bool {
        match (self.category(q), self.category(t)) {
            (Some(a), Some(b)) => b == Self::complement(a),
            _ => false,
        }
    }

    pub fn same_category(&self, a: &str, b: &str) -> bool {
        matches!((self.category(a), self.category(b)), (Some(x), Some(y)) if x == y)
    }
}

/// Pronounceable word number `i`, three syllables.
fn word(i: usize) -> String {
    let n = CONSONANTS.len() * VOWELS.len();
    let mut x = i;
    let mut s = String::with_capacity(6);
    for _ in 0..3 {
        let syl = x % n;
        x /= n;
        s.push(CONSONANTS[syl / VOWELS.len()] as char);
        s.push(VOWELS[syl % VOWELS.len()] as char);
    }
    s
}

struct Layout {
    per_cat: usize,
    per_line: usize,
    lines: usize,
}

impl Layout {
    fn index(&self, cat: usize, within: usize) -> usize {
        cat * self.per_cat + within
    }

    fn line_of(&self, within: usize) -> usize {
        (within / self.per_line).min(self.lines - 1)
    }

    fn line_range(&self, line: usize) -> std::ops::Range<usize> {
        let start = line * self.per_line;
        let end = if line + 1 == self.lines { self.per_cat } else { start + self.per_line };
        start..end
    }
}

fn pick_other(rng: &mut ChaCha8Rng, range: std::ops::Range<usize>, not: usize) -> usize {
    debug_assert!(range.len() >= 2 || !range.contains(&not));
    loop {
        let x = rng.random_range(range.clone());
        if x != not {
            return x;
        }
    }
}

/// Builds a world. The same config always yields the same world.
pub fn generate_synthetic_world(cfg: &SynthConfig) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layout = Layout {
        per_cat: cfg.items_per_category,
        per_line: cfg.items_per_category / cfg.lines_per_category,
        lines: cfg.lines_per_category,
    };
    let n_items = cfg.categories * cfg.items_per_category;

    let category_names: Vec<String> = (0..cfg.categories).map(|c| word(7 + c)).collect();
    let group_names: Vec<String> = (0..cfg.categories / 2).map(|g| word(400 + g)).collect();
    let noise_pool = 300;
    let mut items = Vec::with_capacity(n_items);
    let mut item_category = HashMap::with_capacity(n_items);
    for c in 0..cfg.categories {
        for j in 0..cfg.items_per_category {
            let line_word = word(1_000 + (c / 2) * cfg.lines_per_category + layout.line_of(j));
            let mut title = vec![line_word, category_names[c].clone()];
            title.extend((0..cfg.noise_words).map(|_| word(20_000 + rng.random_range(0..noise_pool))));
            title.push(format!("{}{}", (b'a' + rng.random_range(0..26u8)) as char, rng.random_range(10..1000)));
            let id = ItemId::new(format!("p{:05}", c * cfg.items_per_category + j));
            item_category.insert(id.clone(), c);
            items.push(Item {
                id,
                title: title.join(" "),
                category: vec!["shop".into(), group_names[c / 2].clone(), category_names[c].clone()],
                deal: rng.random_bool(0.15),
                release_date: EPOCH / SECONDS_PER_DAY - rng.random_range(0..730),
                popularity: 0,
            });
        }
    }

    // Popularity rank to item, shuffled so heads spread over categories.
    let mut by_rank: Vec<usize> = (0..n_items).collect();
    rand::seq::SliceRandom::shuffle(by_rank.as_mut_slice(), &mut rng);
    let zipf = Zipf::new(n_items as f64, cfg.zipf_exponent)
        .map_err(|e| crate::Error::Input(format!("zipf: {e}")))?;
    let popular = |rng: &mut ChaCha8Rng| by_rank[zipf.sample(rng) as usize - 1];

    // An item related to `anchor`: same category with `p_within`, then same
    // line with the line affinity; otherwise anywhere else.
    let related = |rng: &mut ChaCha8Rng, anchor: usize, cat: usize, p_within: f64| -> usize {
        let within = anchor % layout.per_cat;
        if rng.random_bool(p_within) {
            let line = layout.line_range(layout.line_of(within));
            if line.len() >= 2 && rng.random_bool(cfg.line_affinity) {
                layout.index(cat, pick_other(rng, line, within))
            } else {
                layout.index(cat, pick_other(rng, 0..layout.per_cat, within))
            }
        } else {
            let other = pick_other(rng, 0..cfg.categories, cat);
            layout.index(other, rng.random_range(0..layout.per_cat))
        }
    };

    let mut events = Vec::new();
    let mut push = |c: usize, item: usize, kind: EventType, ts: i64, s: &str| {
        events.push(Event {
            customer_id: format!("c{c:05}"),
            item_id: items[item].id.clone(),
            event_type: kind,
            timestamp: ts,
            session_id: Some(s.to_string()),
        });
    };
    let mut follow_ups = 0usize;
    for s in 0..cfg.sessions {
        let customer = rng.random_range(0..cfg.customers);
        let mut ts = EPOCH + rng.random_range(0..cfg.days * SECONDS_PER_DAY);
        let anchor = popular(&mut rng);
        let cat = anchor / layout.per_cat;
        let converts = rng.random_bool(cfg.conversion_rate);
        let sid = format!("s{s:06}");
        for _ in 0..rng.random_range(1..=4) {
            let v = related(&mut rng, anchor, cat, cfg.within_category);
            push(customer, v, EventType::View, ts, &sid);
            ts += rng.random_range(20..300);
        }
        if !converts {
            continue;
        }
        push(customer, anchor, EventType::View, ts, &sid);
        push(customer, anchor, EventType::Buy, ts + 60, &sid);
        if rng.random_bool(cfg.follow_up_rate) {
            let comp = SyntheticWorld::complement(cat);
            let within = anchor % layout.per_cat;
            let range = if rng.random_bool(cfg.line_affinity) {
                layout.line_range(layout.line_of(within))
            } else {
                0..layout.per_cat
            };
            let t = layout.index(comp, rng.random_range(range));
            let later = ts + rng.random_range(SECONDS_PER_DAY..=cfg.follow_up_max_days * SECONDS_PER_DAY);
            let fid = format!("f{follow_ups:06}");
            follow_ups += 1;
            push(customer, t, EventType::View, later, &fid);
            push(customer, t, EventType::Buy, later + 60, &fid);
        }
    }
    events.sort_by(|a, b| {
        a.timestamp
            .cmp(&b.timestamp)
            .then_with(|| a.customer_id.cmp(&b.customer_id))
            .then_with(|| a.session_id.cmp(&b.session_id))
    });

    let mut counts: HashMap<&ItemId, u64> = HashMap::new();
    for e in &events {
        *counts.entry(&e.item_id).or_default() += 1;
    }
    let counts: Vec<u64> = items.iter().map(|i| counts.get(&i.id).copied().unwrap_or(0)).collect();
    for (item, c) in items.iter_mut().zip(counts) {
        item.popularity = c;
    }
    Ok(SyntheticWorld {
        catalog: Catalog::new(items)?,
        events,
        category_names,
        item_category,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::{mine_buy_buy, mine_view_buy};

    fn small() -> SynthConfig {
        SynthConfig {
            categories: 8,
            items_per_category: 30,
            lines_per_category: 5,
            customers: 3_000,
            sessions: 10_000,
            seed: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate_synthetic_world(&small()).unwrap();
        let b = generate_synthetic_world(&small()).unwrap();
        assert_eq!(a.events, b.events);
        assert_eq!(a.catalog.items(), b.catalog.items());
        let c = generate_synthetic_world(&SynthConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate_synthetic_world(&SynthConfig { categories: 3, ..small() }).is_err());
        assert!(generate_synthetic_world(&SynthConfig { within_category: 1.5, ..small() }).is_err());
        assert!(generate_synthetic_world(&SynthConfig { lines_per_category: 31, ..small() }).is_err());
    }

    #[test]
    fn within_category_rate_matches_plan() {
        let w = generate_synthetic_world(&small()).unwrap();
        // every (view, buy) pair of a converting session, views of the
        // bought item itself excluded
        let mut sessions: HashMap<&str, (Vec<&str>, Vec<&str>)> = HashMap::new();
        for e in &w.events {
            let s = sessions.entry(e.session_id.as_deref().unwrap()).or_default();
            match e.event_type {
                EventType::View => s.0.push(e.item_id.as_str()),
                EventType::Buy => s.1.push(e.item_id.as_str()),
            }
        }
        let (mut within, mut total) = (0usize, 0usize);
        for (views, buys) in sessions.values() {
            for b in buys {
                for v in views.iter().filter(|v| *v != b) {
                    total += 1;
                    within += w.same_category(v, b) as usize;
                }
            }
        }
        let rate = within as f64 / total as f64;
        assert!(total > 10_000, "{total}");
        assert!((rate - 0.9).abs() <= 0.03, "{rate}");
    }

    #[test]
    fn mined_buy_pairs_follow_complement_map() {
        let w = generate_synthetic_world(&small()).unwrap();
        let pairs = mine_buy_buy(&w.events, 90, 200, 2);
        assert!(pairs.len() >= 100, "{}", pairs.len());
        let ok = pairs
            .iter()
            .filter(|p| w.respects_complement(p.query_id.as_str(), p.target_id.as_str()))
            .count();
        assert!(ok as f64 >= 0.95 * pairs.len() as f64, "{ok}/{}", pairs.len());
        let views = mine_view_buy(&w.events, 200, 2);
        let within = views
            .iter()
            .filter(|p| w.same_category(p.query_id.as_str(), p.target_id.as_str()))
            .count();
        assert!(within as f64 >= 0.9 * views.len() as f64);
    }

    #[test]
    fn popularity_is_event_count() {
        let w = generate_synthetic_world(&small()).unwrap();
        let total: u64 = w.catalog.items().iter().map(|i| i.popularity).sum();
        assert_eq!(total, w.events.len() as u64);
        assert!(w.catalog.items().iter().any(|i| i.deal));
        assert_eq!(w.catalog.items()[0].category.len(), 3);
    }

    #[test]
    fn words_are_distinct() {
        let words: std::collections::HashSet<String> = (0..25_000).map(word).collect();
        assert_eq!(words.len(), 25_000);
    }
}
