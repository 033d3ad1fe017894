//! Maximum-inner-product search over response embeddings.
//!
//! [`MipsIndex`] is either an exhaustive scan or an [`HnswGraph`]. Both
//! return results sorted by descending score with ties broken by ascending
//! id, so result lists from the two kinds compare directly.

mod bench;
mod hnsw;

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{G2rError, Result};
use crate::rng::sha256_hex;

pub use bench::{bench_latency, random_gaussian_vectors, BenchOutput, LatencyReport};
pub use hnsw::{HnswGraph, HnswParams};
use hnsw::Cand;

const MAGIC: &[u8; 4] = b"G2RI";
const VERSION: u16 = 1;

/// Search width used when the caller does not pick one.
pub const DEFAULT_EF_SEARCH: usize = 256;

/// Sixteen-lane f32 dot product with a fixed reduction order.
#[inline]
pub fn dot32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 16];
    let ca = a.chunks_exact(16);
    let cb = b.chunks_exact(16);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..16 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let mut half = [0f32; 8];
    for k in 0..8 {
        half[k] = acc[k] + acc[k + 8];
    }
    ((half[0] + half[4]) + (half[1] + half[5])) + ((half[2] + half[6]) + (half[3] + half[7])) + tail
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    Exact,
    Hnsw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub response_id: u32,
    pub score: f32,
}

#[derive(Clone, Debug)]
pub struct MipsIndex {
    kind: IndexKind,
    dim: usize,
    vectors: Vec<f32>,
    hnsw: Option<HnswGraph>,
    source: String,
}

fn flatten(vectors: &[Vec<f32>]) -> Result<(Vec<f32>, usize)> {
    let dim = vectors
        .first()
        .ok_or_else(|| G2rError::Empty("no vectors to index".into()))?
        .len();
    if dim == 0 {
        return Err(G2rError::invalid("vectors must have at least one dimension"));
    }
    let mut flat = Vec::with_capacity(dim * vectors.len());
    for v in vectors {
        if v.len() != dim {
            return Err(G2rError::ShapeMismatch {
                expected: format!("dimension {dim}"),
                actual: format!("dimension {}", v.len()),
            });
        }
        flat.extend_from_slice(v);
    }
    Ok((flat, dim))
}

fn check_flat(data: &[f32], dim: usize) -> Result<()> {
    if dim == 0 {
        return Err(G2rError::invalid("vectors must have at least one dimension"));
    }
    if data.is_empty() {
        return Err(G2rError::Empty("no vectors to index".into()));
    }
    if !data.len().is_multiple_of(dim) {
        return Err(G2rError::ShapeMismatch {
            expected: format!("a multiple of {dim} values"),
            actual: format!("{} values", data.len()),
        });
    }
    Ok(())
}

pub fn build_exact(vectors: &[Vec<f32>]) -> Result<MipsIndex> {
    let (flat, dim) = flatten(vectors)?;
    MipsIndex::exact_flat(flat, dim)
}

pub fn build_hnsw(vectors: &[Vec<f32>], m: usize, ef_construction: usize, seed: u64) -> Result<MipsIndex> {
    let (flat, dim) = flatten(vectors)?;
    MipsIndex::hnsw_flat(flat, dim, HnswParams::new(m, ef_construction, seed))
}

pub fn query(index: &MipsIndex, vector: &[f32], top_n: usize, ef_search: usize) -> Result<Vec<QueryResult>> {
    index.query(vector, top_n, ef_search)
}

impl MipsIndex {
    /// Exhaustive index over `data`, laid out row-major with `dim` columns.
    pub fn exact_flat(data: Vec<f32>, dim: usize) -> Result<Self> {
        check_flat(&data, dim)?;
        Ok(MipsIndex {
            kind: IndexKind::Exact,
            dim,
            vectors: data,
            hnsw: None,
            source: String::new(),
        })
    }

    pub fn hnsw_flat(data: Vec<f32>, dim: usize, params: HnswParams) -> Result<Self> {
        check_flat(&data, dim)?;
        let graph = HnswGraph::build(&data, dim, params)?;
        Ok(MipsIndex {
            kind: IndexKind::Hnsw,
            dim,
            vectors: data,
            hnsw: Some(graph),
            source: String::new(),
        })
    }

    pub fn kind(&self) -> IndexKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, id: u32) -> &[f32] {
        let s = id as usize * self.dim;
        &self.vectors[s..s + self.dim]
    }

    pub fn graph(&self) -> Option<&HnswGraph> {
        self.hnsw.as_ref()
    }

    /// Fingerprint of whatever produced the vectors (empty when unset).
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn set_source(&mut self, source: impl Into<String>) {
        self.source = source.into();
    }

    /// Top `top_n` stored vectors by inner product with `vector`. HNSW
    /// indexes search with a beam of `max(ef_search, top_n)`; exact indexes
    /// ignore `ef_search`.
    pub fn query(&self, vector: &[f32], top_n: usize, ef_search: usize) -> Result<Vec<QueryResult>> {
        if self.is_empty() {
            return Err(G2rError::Empty("index is empty".into()));
        }
        if vector.len() != self.dim {
            return Err(G2rError::ShapeMismatch {
                expected: format!("dimension {}", self.dim),
                actual: format!("dimension {}", vector.len()),
            });
        }
        if top_n == 0 {
            return Err(G2rError::invalid("top_n must be at least 1"));
        }
        let found = match &self.hnsw {
            None => self.scan(vector, top_n),
            Some(g) => {
                let vs = hnsw::Vectors {
                    data: &self.vectors,
                    dim: self.dim,
                };
                let mut c = g.search(vs, vector, ef_search.max(top_n));
                c.truncate(top_n);
                c
            }
        };
        Ok(found
            .into_iter()
            .map(|c| QueryResult {
                response_id: c.id,
                score: c.score,
            })
            .collect())
    }

    fn scan(&self, vector: &[f32], top_n: usize) -> Vec<Cand> {
        let mut heap: BinaryHeap<Reverse<Cand>> = BinaryHeap::with_capacity(top_n + 1);
        for (i, v) in self.vectors.chunks_exact(self.dim).enumerate() {
            let c = Cand {
                score: dot32(vector, v),
                id: i as u32,
            };
            if heap.len() < top_n {
                heap.push(Reverse(c));
            } else if c > heap.peek().unwrap().0 {
                heap.pop();
                heap.push(Reverse(c));
            }
        }
        let mut out: Vec<Cand> = heap.into_iter().map(|r| r.0).collect();
        out.sort_unstable_by(|a, b| b.cmp(a));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(MAGIC, VERSION);
        w.u8(match self.kind {
            IndexKind::Exact => 0,
            IndexKind::Hnsw => 1,
        });
        w.u32(self.dim as u32);
        w.u64(self.len() as u64);
        w.str(&self.source);
        w.f32s(&self.vectors);
        if let Some(g) = &self.hnsw {
            let p = g.params();
            w.u32(p.m as u32);
            w.u32(p.ef_construction as u32);
            w.u64(p.seed);
            w.u32(g.entry());
            w.u32(g.max_level() as u32);
            w.bytes(&g.levels);
            for i in 0..g.len() as u32 {
                for level in 0..=g.level_of(i) {
                    let l = g.neighbors(i, level);
                    w.u32(l.len() as u32);
                    for &x in l {
                        w.u32(x);
                    }
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, _) = ByteReader::open(bytes, MAGIC, VERSION)?;
        let kind = match r.u8()? {
            0 => IndexKind::Exact,
            1 => IndexKind::Hnsw,
            k => return Err(G2rError::Format(format!("unknown index kind {k}"))),
        };
        let dim = r.u32()? as usize;
        let n = r.u64()? as usize;
        let source = r.str()?;
        let len = n
            .checked_mul(dim)
            .ok_or_else(|| G2rError::Format("index size overflow".into()))?;
        let vectors = r.f32s(len)?;
        let hnsw = match kind {
            IndexKind::Exact => None,
            IndexKind::Hnsw => {
                let m = r.u32()? as usize;
                let ef_construction = r.u32()? as usize;
                let seed = r.u64()?;
                let entry = r.u32()?;
                let max_level = r.u32()? as usize;
                let levels = r.bytes(n)?.to_vec();
                let mut adjacency = Vec::with_capacity(n);
                for &lv in &levels {
                    let mut lists = Vec::with_capacity(lv as usize + 1);
                    for _ in 0..=lv {
                        let k = r.u32()? as usize;
                        if k > 2 * m {
                            return Err(G2rError::Format("adjacency list too long".into()));
                        }
                        lists.push((0..k).map(|_| r.u32()).collect::<Result<Vec<_>>>()?);
                    }
                    adjacency.push(lists);
                }
                Some(HnswGraph::from_parts(
                    HnswParams::new(m, ef_construction, seed),
                    entry,
                    max_level,
                    levels,
                    adjacency,
                )?)
            }
        };
        r.expect_end()?;
        if dim == 0 || n == 0 {
            return Err(G2rError::Format("index has no vectors".into()));
        }
        Ok(MipsIndex {
            kind,
            dim,
            vectors,
            hnsw,
            source,
        })
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| G2rError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| G2rError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub top_n: usize,
    pub ef_search: usize,
    pub queries: usize,
    pub recall: f64,
}

/// Mean overlap between approximate and exact top-`top_n` lists.
pub fn recall(
    approx: &MipsIndex,
    exact: &MipsIndex,
    queries: &[Vec<f32>],
    top_n: usize,
    ef_search: usize,
) -> Result<RecallReport> {
    if approx.len() != exact.len() || approx.dim() != exact.dim() {
        return Err(G2rError::invalid("recall needs two indexes over the same vectors"));
    }
    if queries.is_empty() {
        return Err(G2rError::Empty("no recall queries".into()));
    }
    let mut total = 0.0;
    for q in queries {
        let a = approx.query(q, top_n, ef_search)?;
        let e = exact.query(q, top_n, ef_search)?;
        let hit = a
            .iter()
            .filter(|x| e.iter().any(|y| y.response_id == x.response_id))
            .count();
        total += hit as f64 / e.len() as f64;
    }
    Ok(RecallReport {
        top_n,
        ef_search,
        queries: queries.len(),
        recall: total / queries.len() as f64,
    })
}

/// The MIPS-to-cosine reduction: every stored vector gains the coordinate
/// `sqrt(phi² − ‖x‖²)` with `phi` the largest norm, and queries gain a zero.
/// Inner products with queries are unchanged while all stored vectors share
/// the norm `phi`, so nearest-by-inner-product between stored vectors agrees
/// with nearest by Euclidean distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormAugment {
    pub phi: f32,
}

impl NormAugment {
    pub fn fit(data: &[f32], dim: usize) -> Result<Self> {
        check_flat(data, dim)?;
        let phi = data
            .chunks_exact(dim)
            .map(|v| dot32(v, v).sqrt())
            .fold(0f32, f32::max);
        Ok(NormAugment { phi })
    }

    pub fn data(&self, data: &[f32], dim: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(data.len() / dim * (dim + 1));
        for v in data.chunks_exact(dim) {
            out.extend_from_slice(v);
            out.push((self.phi * self.phi - dot32(v, v)).max(0.0).sqrt());
        }
        out
    }

    pub fn query(&self, q: &[f32]) -> Vec<f32> {
        let mut out = q.to_vec();
        out.push(0.0);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle(vs: &[Vec<f32>], q: &[f32], top_n: usize) -> Vec<u32> {
        let mut s: Vec<(f32, u32)> = vs
            .iter()
            .enumerate()
            .map(|(i, v)| (v.iter().zip(q).map(|(a, b)| a * b).sum(), i as u32))
            .collect();
        s.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        s.into_iter().take(top_n).map(|x| x.1).collect()
    }

    #[test]
    fn dot32_matches_naive_sum() {
        let a: Vec<f32> = (0..19).map(|i| i as f32 * 0.5).collect();
        let b: Vec<f32> = (0..19).map(|i| 1.0 - i as f32 * 0.25).collect();
        let naive: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot32(&a, &b) - naive).abs() < 1e-3);
    }

    #[test]
    fn single_vector_index() {
        let idx = build_exact(&[vec![0.3, -1.0]]).unwrap();
        for q in [[1.0, 0.0], [-5.0, 2.0]] {
            assert_eq!(idx.query(&q, 1, 1).unwrap()[0].response_id, 0);
        }
        let h = build_hnsw(&[vec![0.3, -1.0]], 4, 10, 0).unwrap();
        assert_eq!(h.graph().unwrap().entry(), 0);
        assert_eq!(h.query(&[1.0, 1.0], 3, 1).unwrap().len(), 1);
    }

    #[test]
    fn orthogonal_unit_vectors() {
        let vs: Vec<Vec<f32>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let idx = build_exact(&vs).unwrap();
        let r = idx.query(&vs[2], 1, 1).unwrap();
        assert_eq!(r[0], QueryResult { response_id: 2, score: 1.0 });
    }

    #[test]
    fn hand_sorted_top3() {
        // Query (1, 2): dots are 5, -1, 3, 5, 0.
        let vs = vec![
            vec![1.0, 2.0],
            vec![1.0, -1.0],
            vec![3.0, 0.0],
            vec![-1.0, 3.0],
            vec![0.0, 0.0],
        ];
        let idx = build_exact(&vs).unwrap();
        let r = idx.query(&[1.0, 2.0], 3, 1).unwrap();
        let ids: Vec<u32> = r.iter().map(|x| x.response_id).collect();
        assert_eq!(ids, vec![0, 3, 2]);
        assert_eq!(r[0].score, 5.0);
        assert_eq!(r[2].score, 3.0);
    }

    #[test]
    fn errors() {
        assert!(build_exact(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(build_exact(&[]).is_err());
        assert!(build_hnsw(&[vec![1.0]], 1, 10, 0).is_err());
        let idx = build_exact(&[vec![1.0, 2.0]]).unwrap();
        assert!(idx.query(&[1.0], 1, 1).is_err());
        assert!(idx.query(&[1.0, 0.0], 0, 1).is_err());
    }

    #[test]
    fn top_n_beyond_size_returns_everything_sorted() {
        let vs = random_gaussian_vectors(3, 7, 5);
        let idx = build_exact(&vs).unwrap();
        let h = build_hnsw(&vs, 4, 16, 1).unwrap();
        let q = &random_gaussian_vectors(4, 1, 5)[0];
        let want = oracle(&vs, q, 20);
        for index in [&idx, &h] {
            let r = index.query(q, 20, 1).unwrap();
            assert_eq!(r.iter().map(|x| x.response_id).collect::<Vec<_>>(), want);
        }
    }

    #[test]
    fn hnsw_invariants_on_small_graph() {
        let vs = random_gaussian_vectors(5, 600, 8);
        let idx = build_hnsw(&vs, 4, 32, 9).unwrap();
        let g = idx.graph().unwrap();
        for level in 0..=g.max_level() {
            let seen = g.reachable(level);
            for i in 0..g.len() as u32 {
                if g.level_of(i) < level {
                    continue;
                }
                assert!(seen[i as usize], "node {i} unreachable on layer {level}");
                let nb = g.neighbors(i, level);
                assert!(nb.len() <= g.capacity(level));
                for &j in nb {
                    assert_ne!(i, j);
                    assert!(g.neighbors(j, level).contains(&i), "edge {i}-{j} not symmetric");
                }
            }
        }
    }

    #[test]
    fn full_beam_is_exact_on_tiny_index() {
        let vs = random_gaussian_vectors(6, 150, 6);
        let e = build_exact(&vs).unwrap();
        let h = build_hnsw(&vs, 4, 20, 2).unwrap();
        let qs = random_gaussian_vectors(7, 50, 6);
        let r = recall(&h, &e, &qs, 5, vs.len()).unwrap();
        assert_eq!(r.recall, 1.0);
        assert_eq!(recall(&e, &e, &qs, 5, 1).unwrap().recall, 1.0);
    }

    #[test]
    fn round_trip_preserves_results() {
        let vs = random_gaussian_vectors(8, 300, 5);
        let mut h = build_hnsw(&vs, 6, 30, 3).unwrap();
        h.set_source("abc");
        let back = MipsIndex::from_bytes(&h.to_bytes()).unwrap();
        assert_eq!(back.source(), "abc");
        assert_eq!(back.to_bytes(), h.to_bytes());
        for q in random_gaussian_vectors(9, 20, 5) {
            assert_eq!(back.query(&q, 4, 12).unwrap(), h.query(&q, 4, 12).unwrap());
        }
        let e = build_exact(&vs).unwrap();
        assert_eq!(MipsIndex::from_bytes(&e.to_bytes()).unwrap().to_bytes(), e.to_bytes());
        let mut bad = e.to_bytes();
        bad[0] = b'X';
        assert!(MipsIndex::from_bytes(&bad).is_err());
        assert!(MipsIndex::from_bytes(&e.to_bytes()[..20]).is_err());
    }

    #[test]
    fn norm_augment_preserves_query_products() {
        let vs = random_gaussian_vectors(10, 40, 4);
        let flat: Vec<f32> = vs.concat();
        let aug = NormAugment::fit(&flat, 4).unwrap();
        let data = aug.data(&flat, 4);
        let q = [0.5, -1.0, 2.0, 0.25];
        let qa = aug.query(&q);
        for (i, v) in vs.iter().enumerate() {
            let d = &data[i * 5..i * 5 + 5];
            assert!((dot32(d, &qa) - dot32(v, &q)).abs() < 1e-5);
            assert!((dot32(d, d).sqrt() - aug.phi).abs() < 1e-4);
        }
    }
}
