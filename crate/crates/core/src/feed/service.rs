use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex, RwLock};

use super::{
    build_eligible_set, compose_feed_with, CustomerProfile, EligibleSet, FeedItem, FeedOptions,
    Profiles, Surface,
};
use crate::error::Result;
use crate::store::SimilarityStore;
use crate::types::{Catalog, Event};

type FeedKey = (String, Surface);

/// Shared state behind the feed server.
///
/// Feeds are cached per (customer, surface) and only change on refresh.
/// Events update the profile immediately and mark the customer active for
/// the next incremental refresh. The store is swapped as a whole, so a
/// composition sees either the old or the new table.
pub struct FeedService {
    catalog: Arc<Catalog>,
    eligible: HashMap<Surface, EligibleSet>,
    store: RwLock<Arc<SimilarityStore>>,
    profiles: RwLock<Profiles>,
    cache: RwLock<HashMap<FeedKey, Arc<Vec<FeedItem>>>>,
    active: Mutex<HashSet<String>>,
    feed_size: usize,
    options: FeedOptions,
}

impl FeedService {
    pub fn new(
        catalog: Catalog,
        store: SimilarityStore,
        profiles: Profiles,
        feed_size: usize,
        options: FeedOptions,
    ) -> Self {
        let eligible = Surface::ALL
            .into_iter()
            .map(|s| (s, build_eligible_set(&catalog, s)))
            .collect();
        FeedService {
            catalog: Arc::new(catalog),
            eligible,
            store: RwLock::new(Arc::new(store)),
            profiles: RwLock::new(profiles),
            cache: RwLock::new(HashMap::new()),
            active: Mutex::new(HashSet::new()),
            feed_size,
            options,
        }
    }

    pub fn feed_size(&self) -> usize {
        self.feed_size
    }

    pub fn store(&self) -> Arc<SimilarityStore> {
        self.store.read().expect("store lock").clone()
    }

    /// Replaces the lookup table. Cached feeds stay until refreshed.
    pub fn swap_store(&self, store: SimilarityStore) -> Arc<SimilarityStore> {
        std::mem::replace(&mut *self.store.write().expect("store lock"), Arc::new(store))
    }

    pub fn customers(&self) -> usize {
        self.profiles.read().expect("profile lock").len()
    }

    pub fn profile(&self, customer: &str) -> Option<CustomerProfile> {
        self.profiles.read().expect("profile lock").get(customer).cloned()
    }

    /// Records an event. Returns false when its item is not in the catalog.
    pub fn ingest(&self, event: &Event) -> Result<bool> {
        event.validate()?;
        let known = self
            .profiles
            .write()
            .expect("profile lock")
            .ingest(event, &self.catalog);
        if known {
            self.active.lock().expect("active lock").insert(event.customer_id.clone());
        }
        Ok(known)
    }

    fn compose(&self, customer: &str, surface: Surface, store: &SimilarityStore) -> Option<Vec<FeedItem>> {
        let profiles = self.profiles.read().expect("profile lock");
        let p = profiles.get(customer)?;
        Some(compose_feed_with(
            p,
            store,
            &self.catalog,
            &self.eligible[&surface],
            self.feed_size,
            &self.options,
        ))
    }

    /// The cached feed, composed on first request. Unknown customers get an
    /// empty feed.
    pub fn feed(&self, customer: &str, surface: Surface, size: usize) -> Vec<FeedItem> {
        let key = (customer.to_string(), surface);
        let cached = self.cache.read().expect("cache lock").get(&key).cloned();
        let feed = match cached {
            Some(f) => f,
            None => {
                let store = self.store();
                let Some(f) = self.compose(customer, surface, &store) else {
                    return Vec::new();
                };
                let f = Arc::new(f);
                self.cache.write().expect("cache lock").insert(key, f.clone());
                f
            }
        };
        feed.iter().take(size).cloned().collect()
    }

    fn recompute(&self, keys: Vec<FeedKey>) -> usize {
        let store = self.store();
        let fresh: Vec<(FeedKey, Arc<Vec<FeedItem>>)> = keys
            .into_iter()
            .filter_map(|(c, s)| {
                let f = self.compose(&c, s, &store)?;
                Some(((c, s), Arc::new(f)))
            })
            .collect();
        let n = fresh.len();
        self.cache.write().expect("cache lock").extend(fresh);
        n
    }

    /// Recomputes the feeds of customers with events since the last
    /// incremental refresh: the `all` surface plus any surface already
    /// served to them. Returns the number of feeds rebuilt.
    pub fn refresh_incremental(&self) -> usize {
        let active: Vec<String> = self.active.lock().expect("active lock").drain().collect();
        if active.is_empty() {
            return 0;
        }
        let set: HashSet<&str> = active.iter().map(String::as_str).collect();
        let mut keys: Vec<FeedKey> = self
            .cache
            .read()
            .expect("cache lock")
            .keys()
            .filter(|(c, _)| set.contains(c.as_str()))
            .cloned()
            .collect();
        keys.extend(active.iter().map(|c| (c.clone(), Surface::All)));
        keys.sort();
        keys.dedup();
        self.recompute(keys)
    }

    /// Recomputes the `all` feed of every customer and every cached feed.
    pub fn refresh_batch(&self) -> usize {
        self.active.lock().expect("active lock").clear();
        let mut keys: Vec<FeedKey> = self.cache.read().expect("cache lock").keys().cloned().collect();
        keys.extend(
            self.profiles
                .read()
                .expect("profile lock")
                .customers()
                .into_iter()
                .map(|c| (c.to_string(), Surface::All)),
        );
        keys.sort();
        keys.dedup();
        self.recompute(keys)
    }

    /// Customers waiting for an incremental refresh.
    pub fn pending(&self) -> usize {
        self.active.lock().expect("active lock").len()
    }
}
