//! Top-M inner-product search over unit vectors.
//!
//! [`Index::exact`] scans every row. [`Index::ivf`] partitions rows with
//! spherical k-means and scans only the `nprobe` clusters whose centroids
//! score highest against the query. Rows are kept sorted by item id, so ties
//! in score resolve to the smaller id in both variants.

use std::io::{Read, Write};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::io::{expect_magic, get_f32, get_str, get_u32, put_f32, put_str, put_u32};
use crate::metrics;
use crate::types::ItemId;

pub const UNIT_TOL: f32 = 1e-5;
const MAGIC: &[u8; 4] = b"PFI1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexVariant {
    Exact,
    Ivf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IvfParams {
    pub clusters: usize,
    pub nprobe: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for IvfParams {
    fn default() -> Self {
        IvfParams {
            clusters: 64,
            nprobe: 16,
            iterations: 25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: ItemId,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq)]
struct Ivf {
    centroids: Vec<f32>,
    lists: Vec<Vec<u32>>,
    nprobe: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    dim: usize,
    ids: Vec<ItemId>,
    vectors: Vec<f32>,
    ivf: Option<Ivf>,
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Keeps the best `m` of `(score, row)` candidates, best first.
fn top_m(mut cands: Vec<(f32, u32)>, m: usize) -> Vec<(f32, u32)> {
    let cmp = |a: &(f32, u32), b: &(f32, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if m == 0 {
        return Vec::new();
    }
    if cands.len() > m {
        cands.select_nth_unstable_by(m - 1, cmp);
        cands.truncate(m);
    }
    cands.sort_unstable_by(cmp);
    cands
}

impl Index {
    fn rows(ids: Vec<ItemId>, vectors: Vec<Vec<f32>>) -> Result<(usize, Vec<ItemId>, Vec<f32>)> {
        if ids.is_empty() || ids.len() != vectors.len() {
            bail!(Input, "index needs matching non-empty ids ({}) and vectors ({})", ids.len(), vectors.len());
        }
        let dim = vectors[0].len();
        if dim == 0 {
            bail!(Input, "zero-dimensional vectors");
        }
        let mut rows: Vec<(ItemId, Vec<f32>)> = ids.into_iter().zip(vectors).collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        let mut flat = Vec::with_capacity(rows.len() * dim);
        let mut out_ids = Vec::with_capacity(rows.len());
        for (i, (id, v)) in rows.into_iter().enumerate() {
            if v.len() != dim {
                bail!(Input, "vector for {id} has dimension {} instead of {dim}", v.len());
            }
            let n = dot(&v, &v).sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                bail!(Input, "vector for {id} has norm {n}");
            }
            if out_ids.last() == Some(&id) {
                bail!(Input, "duplicate id {id} at row {i}");
            }
            flat.extend_from_slice(&v);
            out_ids.push(id);
        }
        Ok((dim, out_ids, flat))
    }

    pub fn exact(ids: Vec<ItemId>, vectors: Vec<Vec<f32>>) -> Result<Self> {
        let (dim, ids, vectors) = Self::rows(ids, vectors)?;
        Ok(Index {
            dim,
            ids,
            vectors,
            ivf: None,
        })
    }

    pub fn ivf(ids: Vec<ItemId>, vectors: Vec<Vec<f32>>, params: &IvfParams) -> Result<Self> {
        let (dim, ids, vectors) = Self::rows(ids, vectors)?;
        let n = ids.len();
        if params.clusters == 0 || params.clusters > n {
            bail!(Input, "cluster count {} outside [1, {n}]", params.clusters);
        }
        if params.nprobe == 0 {
            bail!(Input, "nprobe must be positive");
        }
        let (centroids, assign) = spherical_kmeans(&vectors, dim, params.clusters, params.iterations, params.seed);
        let mut lists = vec![Vec::new(); params.clusters];
        for (row, &c) in assign.iter().enumerate() {
            lists[c].push(row as u32);
        }
        Ok(Index {
            dim,
            ids,
            vectors,
            ivf: Some(Ivf {
                centroids,
                lists,
                nprobe: params.nprobe.min(params.clusters),
            }),
        })
    }

    pub fn build(
        ids: Vec<ItemId>,
        vectors: Vec<Vec<f32>>,
        variant: IndexVariant,
        params: &IvfParams,
    ) -> Result<Self> {
        match variant {
            IndexVariant::Exact => Self::exact(ids, vectors),
            IndexVariant::Ivf => Self::ivf(ids, vectors, params),
        }
    }

    pub fn variant(&self) -> IndexVariant {
        if self.ivf.is_some() {
            IndexVariant::Ivf
        } else {
            IndexVariant::Exact
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

    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    pub fn clusters(&self) -> Option<usize> {
        self.ivf.as_ref().map(|v| v.lists.len())
    }

    /// Cluster member rows, for IVF indexes.
    pub fn cluster_rows(&self) -> Option<&[Vec<u32>]> {
        self.ivf.as_ref().map(|v| v.lists.as_slice())
    }

    pub fn nprobe(&self) -> Option<usize> {
        self.ivf.as_ref().map(|v| v.nprobe)
    }

    pub fn set_nprobe(&mut self, nprobe: usize) {
        if let Some(ivf) = &mut self.ivf {
            ivf.nprobe = nprobe.clamp(1, ivf.lists.len());
        }
    }

    /// Clusters scanned for `query`, best centroid first.
    pub fn probed_clusters(&self, query: &[f32]) -> Vec<usize> {
        let Some(ivf) = &self.ivf else { return Vec::new() };
        let scores: Vec<(f32, u32)> = ivf
            .centroids
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(c, v)| (dot(query, v), c as u32))
            .collect();
        top_m(scores, ivf.nprobe).into_iter().map(|(_, c)| c as usize).collect()
    }

    /// Best `m` rows as `(row, score)`.
    pub fn search_rows(&self, query: &[f32], m: usize) -> Result<Vec<(usize, f32)>> {
        if query.len() != self.dim {
            bail!(Input, "query has dimension {} instead of {}", query.len(), self.dim);
        }
        metrics::record_index_search();
        let cands: Vec<(f32, u32)> = match &self.ivf {
            None => self
                .vectors
                .chunks_exact(self.dim)
                .enumerate()
                .map(|(r, v)| (dot(query, v), r as u32))
                .collect(),
            Some(ivf) => self
                .probed_clusters(query)
                .into_iter()
                .flat_map(|c| ivf.lists[c].iter())
                .map(|&r| (dot(query, self.vector(r as usize)), r))
                .collect(),
        };
        Ok(top_m(cands, m).into_iter().map(|(s, r)| (r as usize, s)).collect())
    }

    pub fn search(&self, query: &[f32], m: usize) -> Result<Vec<Hit>> {
        Ok(self
            .search_rows(query, m)?
            .into_iter()
            .map(|(r, score)| Hit {
                id: self.ids[r].clone(),
                score,
            })
            .collect())
    }

    /// Searches every query in parallel; output order follows input order.
    pub fn batch_search(&self, queries: &[Vec<f32>], m: usize) -> Result<Vec<Vec<Hit>>> {
        queries.par_iter().map(|q| self.search(q, m)).collect()
    }

    pub fn write_to(&self, w: &mut dyn Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, self.ivf.is_some() as u32)?;
        put_u32(w, self.dim as u32)?;
        put_u32(w, self.ids.len() as u32)?;
        for id in &self.ids {
            put_str(w, id.as_str())?;
        }
        for &x in &self.vectors {
            put_f32(w, x)?;
        }
        if let Some(ivf) = &self.ivf {
            put_u32(w, ivf.lists.len() as u32)?;
            put_u32(w, ivf.nprobe as u32)?;
            for &x in &ivf.centroids {
                put_f32(w, x)?;
            }
            for list in &ivf.lists {
                put_u32(w, list.len() as u32)?;
                for &r in list {
                    put_u32(w, r)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut dyn Read) -> Result<Self> {
        expect_magic(r, MAGIC)?;
        let tag = get_u32(r)?;
        let dim = get_u32(r)? as usize;
        let n = get_u32(r)? as usize;
        if tag > 1 || dim == 0 || n == 0 {
            bail!(Format, "bad index header: tag {tag}, dim {dim}, n {n}");
        }
        let ids = (0..n).map(|_| get_str(r).map(ItemId::new)).collect::<Result<Vec<_>>>()?;
        let vectors = (0..n * dim).map(|_| get_f32(r)).collect::<Result<Vec<_>>>()?;
        let ivf = if tag == 1 {
            let c = get_u32(r)? as usize;
            let nprobe = get_u32(r)? as usize;
            let centroids = (0..c * dim).map(|_| get_f32(r)).collect::<Result<Vec<_>>>()?;
            let mut lists = Vec::with_capacity(c);
            let mut seen = vec![false; n];
            for _ in 0..c {
                let len = get_u32(r)? as usize;
                let list = (0..len).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
                for &row in &list {
                    match seen.get_mut(row as usize) {
                        Some(s) if !*s => *s = true,
                        _ => bail!(Format, "cluster lists do not partition the rows"),
                    }
                }
                lists.push(list);
            }
            if seen.iter().any(|s| !s) || nprobe == 0 || nprobe > c {
                bail!(Format, "incomplete cluster lists or bad nprobe {nprobe}");
            }
            Some(Ivf {
                centroids,
                lists,
                nprobe,
            })
        } else {
            None
        };
        Ok(Index {
            dim,
            ids,
            vectors,
            ivf,
        })
    }
}

fn nearest(v: &[f32], centroids: &[f32], dim: usize) -> (usize, f32) {
    let mut best = (0, f32::NEG_INFINITY);
    for (c, cv) in centroids.chunks_exact(dim).enumerate() {
        let s = dot(v, cv);
        if s > best.1 {
            best = (c, s);
        }
    }
    best
}

fn normalize(v: &mut [f32]) -> bool {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
        true
    } else {
        false
    }
}

/// Seeded spherical k-means. Returns unit centroids and the final
/// nearest-centroid assignment of each row.
fn spherical_kmeans(
    data: &[f32],
    dim: usize,
    k: usize,
    iterations: usize,
    seed: u64,
) -> (Vec<f32>, Vec<usize>) {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<f32> = index::sample(&mut rng, n, k)
        .into_iter()
        .flat_map(|i| row(i).to_vec())
        .collect();
    let assign_all = |centroids: &[f32]| -> Vec<(usize, f32)> {
        (0..n).into_par_iter().map(|i| nearest(row(i), centroids, dim)).collect()
    };
    let mut assign = assign_all(&centroids);
    for _ in 0..iterations {
        let mut sums = vec![0f32; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += x;
            }
        }
        // Empty clusters take the rows that fit their centroid worst.
        let mut worst: Vec<usize> = (0..n).collect();
        worst.sort_by(|&a, &b| assign[a].1.total_cmp(&assign[b].1).then(a.cmp(&b)));
        let mut donors = worst.into_iter();
        for c in 0..k {
            let slot = &mut sums[c * dim..(c + 1) * dim];
            if counts[c] == 0 || !normalize(slot) {
                if let Some(d) = donors.next() {
                    slot.copy_from_slice(row(d));
                }
            }
        }
        let next = assign_all(&sums);
        centroids = sums;
        let stable = next.iter().zip(&assign).all(|(a, b)| a.0 == b.0);
        assign = next;
        if stable {
            break;
        }
    }
    (centroids, assign.into_iter().map(|(c, _)| c).collect())
}
