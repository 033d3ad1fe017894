//! Hierarchical navigable small-world graph ordered by raw inner product.
//!
//! Insertion follows the usual HNSW procedure: greedy descent through the
//! upper layers, then a beam search of width `ef_construction` on each layer
//! the new node joins. Neighbours are chosen with the pruning heuristic
//! adapted to similarities: a candidate `e` is kept only if
//! `ip(q, e) > ip(e, r)` for every neighbour `r` already kept, so
//! neighbours point in different directions. Remaining slots are filled with
//! the best pruned candidates. When a full list gains an edge, the weakest
//! dominated neighbour is dropped (the weakest overall if none is
//! dominated). Edges are kept symmetric: when a node drops a neighbour the
//! reverse edge goes too. A final repair pass
//! reconnects any node no longer reachable from the entry point.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};
use std::sync::Mutex;

use rand::Rng;

use super::dot32;
use crate::error::{G2rError, Result};
use crate::rng::rng_from_seed;

const MAX_LEVEL: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Cand {
    pub score: f32,
    pub id: u32,
}

// Greater means better: higher score, then lower id.
impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Eq for Cand {}

/// Row-major vector storage seen by the graph.
#[derive(Clone, Copy)]
pub(crate) struct Vectors<'a> {
    pub data: &'a [f32],
    pub dim: usize,
}

impl<'a> Vectors<'a> {
    #[inline]
    pub fn get(&self, i: u32) -> &'a [f32] {
        let s = i as usize * self.dim;
        &self.data[s..s + self.dim]
    }

    #[inline]
    fn score(&self, q: &[f32], i: u32) -> f32 {
        dot32(q, self.get(i))
    }

    /// Hints the cache lines of vector `i` into L1.
    #[inline]
    fn prefetch(&self, i: u32) {
        #[cfg(target_arch = "x86_64")]
        {
            use std::arch::x86_64::{_mm_prefetch, _MM_HINT_T0};
            let v = self.get(i);
            for off in (0..v.len()).step_by(16) {
                // SAFETY: prefetching is a hint and never faults; the
                // address is inside `v`.
                unsafe { _mm_prefetch::<_MM_HINT_T0>(v.as_ptr().add(off) as *const i8) };
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HnswParams {
    pub m: usize,
    pub ef_construction: usize,
    pub seed: u64,
}

impl HnswParams {
    pub fn new(m: usize, ef_construction: usize, seed: u64) -> Self {
        HnswParams {
            m,
            ef_construction,
            seed,
        }
    }
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams::new(32, 200, 0)
    }
}

struct Visited {
    marks: Vec<u16>,
    epoch: u16,
}

impl Visited {
    fn new(n: usize) -> Self {
        Visited {
            marks: vec![0; n],
            epoch: 0,
        }
    }

    fn reset(&mut self, n: usize) {
        if self.marks.len() < n {
            self.marks.resize(n, 0);
        }
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.epoch = 1;
        }
    }

    /// Marks `i` and returns whether it was unmarked.
    #[inline]
    fn insert(&mut self, i: u32) -> bool {
        let m = &mut self.marks[i as usize];
        if *m == self.epoch {
            false
        } else {
            *m = self.epoch;
            true
        }
    }
}

#[derive(Default)]
struct VisitedPool(Mutex<Vec<Visited>>);

impl VisitedPool {
    fn get(&self, n: usize) -> Visited {
        let mut v = self
            .0
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .pop()
            .unwrap_or_else(|| Visited::new(n));
        v.reset(n);
        v
    }

    fn put(&self, v: Visited) {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).push(v);
    }
}

pub struct HnswGraph {
    pub(crate) params: HnswParams,
    pub(crate) entry: u32,
    pub(crate) max_level: usize,
    pub(crate) levels: Vec<u8>,
    /// Layer 0: `[count, ids...]` in fixed strides of `1 + 2M`.
    pub(crate) level0: Vec<u32>,
    /// Layers 1.. per node, `upper[i][l - 1]`.
    pub(crate) upper: Vec<Vec<Vec<u32>>>,
    pool: VisitedPool,
}

impl std::fmt::Debug for HnswGraph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HnswGraph")
            .field("params", &self.params)
            .field("entry", &self.entry)
            .field("max_level", &self.max_level)
            .field("n", &self.levels.len())
            .finish()
    }
}

impl Clone for HnswGraph {
    fn clone(&self) -> Self {
        HnswGraph {
            params: self.params,
            entry: self.entry,
            max_level: self.max_level,
            levels: self.levels.clone(),
            level0: self.level0.clone(),
            upper: self.upper.clone(),
            pool: VisitedPool::default(),
        }
    }
}

struct Builder<'a> {
    g: HnswGraph,
    data: &'a [f32],
    dim: usize,
}

impl HnswGraph {
    pub fn params(&self) -> HnswParams {
        self.params
    }

    pub fn entry(&self) -> u32 {
        self.entry
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level_of(&self, id: u32) -> usize {
        self.levels[id as usize] as usize
    }

    pub fn capacity(&self, level: usize) -> usize {
        if level == 0 {
            2 * self.params.m
        } else {
            self.params.m
        }
    }

    pub fn neighbors(&self, id: u32, level: usize) -> &[u32] {
        if level == 0 {
            let stride = 1 + 2 * self.params.m;
            let base = id as usize * stride;
            let n = self.level0[base] as usize;
            &self.level0[base + 1..base + 1 + n]
        } else {
            &self.upper[id as usize][level - 1]
        }
    }

    pub(crate) fn from_parts(
        params: HnswParams,
        entry: u32,
        max_level: usize,
        levels: Vec<u8>,
        adjacency: Vec<Vec<Vec<u32>>>,
    ) -> Result<Self> {
        let n = levels.len();
        let stride = 1 + 2 * params.m;
        let mut level0 = vec![0u32; n * stride];
        let mut upper = Vec::with_capacity(n);
        for (i, mut lists) in adjacency.into_iter().enumerate() {
            if lists.len() != levels[i] as usize + 1 {
                return Err(G2rError::Format(format!("node {i}: layer count mismatch")));
            }
            let l0 = lists.remove(0);
            if l0.len() > 2 * params.m || lists.iter().any(|l| l.len() > params.m) {
                return Err(G2rError::Format(format!("node {i}: degree above capacity")));
            }
            if l0.iter().chain(lists.iter().flatten()).any(|&j| j as usize >= n) {
                return Err(G2rError::Format(format!("node {i}: neighbour out of range")));
            }
            level0[i * stride] = l0.len() as u32;
            level0[i * stride + 1..i * stride + 1 + l0.len()].copy_from_slice(&l0);
            upper.push(lists);
        }
        if n > 0 && (entry as usize >= n || levels[entry as usize] as usize != max_level) {
            return Err(G2rError::Format("invalid entry point".into()));
        }
        Ok(HnswGraph {
            params,
            entry,
            max_level,
            levels,
            level0,
            upper,
            pool: VisitedPool::default(),
        })
    }

    pub fn build(data: &[f32], dim: usize, params: HnswParams) -> Result<Self> {
        if params.m < 2 {
            return Err(G2rError::invalid(format!("M = {} must be at least 2", params.m)));
        }
        if params.ef_construction == 0 {
            return Err(G2rError::invalid("ef_construction must be at least 1"));
        }
        let n = data.len() / dim;
        if n == 0 {
            return Err(G2rError::Empty("no vectors to index".into()));
        }
        if n > u32::MAX as usize {
            return Err(G2rError::invalid("too many vectors for 32-bit ids"));
        }
        let ml = 1.0 / (params.m as f64).ln();
        let mut rng = rng_from_seed(params.seed);
        let levels: Vec<u8> = (0..n)
            .map(|_| {
                let u: f64 = 1.0 - rng.random::<f64>();
                ((-u.ln() * ml).floor() as usize).min(MAX_LEVEL) as u8
            })
            .collect();
        let upper = levels.iter().map(|&l| vec![Vec::new(); l as usize]).collect();
        let g = HnswGraph {
            params,
            entry: 0,
            max_level: levels[0] as usize,
            levels,
            level0: vec![0; n * (1 + 2 * params.m)],
            upper,
            pool: VisitedPool::default(),
        };
        let mut b = Builder { g, data, dim };
        for i in 1..n as u32 {
            b.insert(i);
        }
        b.repair();
        Ok(b.g)
    }

    /// Best-first search on one layer from `entry_points`, returning at most
    /// `ef` candidates, best first.
    pub(crate) fn search_layer(
        &self,
        vs: Vectors,
        q: &[f32],
        entry_points: &[Cand],
        ef: usize,
        level: usize,
    ) -> Vec<Cand> {
        let mut visited = self.pool.get(self.len());
        let mut fresh: Vec<u32> = Vec::with_capacity(2 * self.params.m);
        let mut frontier: BinaryHeap<Cand> = BinaryHeap::new();
        let mut results: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
        for &c in entry_points {
            if visited.insert(c.id) {
                frontier.push(c);
                results.push(Reverse(c));
                if results.len() > ef {
                    results.pop();
                }
            }
        }
        while let Some(c) = frontier.pop() {
            if results.len() >= ef && c < results.peek().unwrap().0 {
                break;
            }
            fresh.clear();
            for &e in self.neighbors(c.id, level) {
                if visited.insert(e) {
                    vs.prefetch(e);
                    fresh.push(e);
                }
            }
            for &e in &fresh {
                let cand = Cand {
                    score: vs.score(q, e),
                    id: e,
                };
                if results.len() < ef || cand > results.peek().unwrap().0 {
                    frontier.push(cand);
                    results.push(Reverse(cand));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        self.pool.put(visited);
        let mut out: Vec<Cand> = results.into_iter().map(|r| r.0).collect();
        out.sort_unstable_by(|a, b| b.cmp(a));
        out
    }

    /// Greedy descent to layer 0 followed by a beam of width `ef` there.
    pub(crate) fn search(&self, vs: Vectors, q: &[f32], ef: usize) -> Vec<Cand> {
        let mut ep = Cand {
            score: vs.score(q, self.entry),
            id: self.entry,
        };
        for level in (1..=self.max_level).rev() {
            ep = self.search_layer(vs, q, &[ep], 1, level)[0];
        }
        self.search_layer(vs, q, &[ep], ef.max(1), 0)
    }

    /// Ids reachable from the entry point on `level`.
    pub fn reachable(&self, level: usize) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let mut queue = VecDeque::from([self.entry]);
        seen[self.entry as usize] = true;
        while let Some(u) = queue.pop_front() {
            for &v in self.neighbors(u, level) {
                if !seen[v as usize] {
                    seen[v as usize] = true;
                    queue.push_back(v);
                }
            }
        }
        seen
    }
}

impl<'a> Builder<'a> {
    fn vs(&self) -> Vectors<'a> {
        Vectors {
            data: self.data,
            dim: self.dim,
        }
    }

    #[inline]
    fn ip(&self, a: u32, b: u32) -> f32 {
        let vs = self.vs();
        dot32(vs.get(a), vs.get(b))
    }

    fn list(&self, id: u32, level: usize) -> Vec<u32> {
        self.g.neighbors(id, level).to_vec()
    }

    fn set_list(&mut self, id: u32, level: usize, ids: &[u32]) {
        if level == 0 {
            let stride = 1 + 2 * self.g.params.m;
            let base = id as usize * stride;
            self.g.level0[base] = ids.len() as u32;
            self.g.level0[base + 1..base + 1 + ids.len()].copy_from_slice(ids);
        } else {
            self.g.upper[id as usize][level - 1] = ids.to_vec();
        }
    }

    fn remove_edge(&mut self, from: u32, to: u32, level: usize) {
        let mut l = self.list(from, level);
        l.retain(|&x| x != to);
        self.set_list(from, level, &l);
    }

    /// Heuristic selection from candidates sorted best first.
    fn select(&self, cands: &[Cand], keep: usize) -> Vec<u32> {
        let mut chosen: Vec<u32> = Vec::with_capacity(keep);
        let mut pruned = Vec::new();
        for c in cands {
            if chosen.len() >= keep {
                break;
            }
            if chosen.iter().all(|&r| self.ip(c.id, r) < c.score) {
                chosen.push(c.id);
            } else {
                pruned.push(c.id);
            }
        }
        for p in pruned {
            if chosen.len() >= keep {
                break;
            }
            chosen.push(p);
        }
        chosen
    }

    fn connect(&mut self, a: u32, b: u32, level: usize) {
        let mut l = self.list(a, level);
        if l.contains(&b) {
            return;
        }
        l.push(b);
        let cap = self.g.capacity(level);
        if l.len() <= cap {
            self.set_list(a, level, &l);
            return;
        }
        let mut cands: Vec<Cand> = l
            .iter()
            .map(|&x| Cand {
                score: self.ip(a, x),
                id: x,
            })
            .collect();
        cands.sort_unstable_by(|x, y| y.cmp(x));
        // Drop the weakest neighbour that a stronger one dominates, or the
        // weakest outright when none is dominated.
        let drop = (1..cands.len())
            .rev()
            .find(|&i| cands[..i].iter().any(|r| self.ip(cands[i].id, r.id) >= cands[i].score))
            .unwrap_or(cands.len() - 1);
        let gone = cands.remove(drop).id;
        self.remove_edge(gone, a, level);
        let kept: Vec<u32> = cands.iter().map(|c| c.id).collect();
        self.set_list(a, level, &kept);
    }

    fn insert(&mut self, q: u32) {
        let level = self.g.levels[q as usize] as usize;
        let vs = self.vs();
        let qv = vs.get(q);
        let mut eps = vec![Cand {
            score: vs.score(qv, self.g.entry),
            id: self.g.entry,
        }];
        for l in (level + 1..=self.g.max_level).rev() {
            eps = self.g.search_layer(vs, qv, &eps, 1, l);
        }
        for l in (0..=level.min(self.g.max_level)).rev() {
            let found = self.g.search_layer(vs, qv, &eps, self.g.params.ef_construction, l);
            let chosen = self.select(&found, self.g.params.m);
            self.set_list(q, l, &chosen);
            for &e in &chosen {
                self.connect(e, q, l);
            }
            eps = found;
        }
        if level > self.g.max_level {
            self.g.max_level = level;
            self.g.entry = q;
        }
    }

    /// Reconnects nodes that pruning cut off from the entry point.
    fn repair(&mut self) {
        for level in 0..=self.g.max_level {
            let mut seen = self.g.reachable(level);
            let cap = self.g.capacity(level);
            for u in 0..self.g.len() as u32 {
                if seen[u as usize] || (self.g.levels[u as usize] as usize) < level {
                    continue;
                }
                let vs = self.vs();
                let uv = vs.get(u);
                let score = |i: u32| vs.score(uv, i);
                let mut eps = vec![Cand {
                    score: score(self.g.entry),
                    id: self.g.entry,
                }];
                for l in (level + 1..=self.g.max_level).rev() {
                    eps = self.g.search_layer(vs, uv, &eps, 1, l);
                }
                let found = self.g.search_layer(vs, uv, &eps, 4 * cap, level);
                let mut target = found
                    .iter()
                    .find(|c| seen[c.id as usize] && self.g.neighbors(c.id, level).len() < cap)
                    .map(|c| c.id);
                if target.is_none() {
                    target = (0..self.g.len() as u32)
                        .filter(|&v| {
                            seen[v as usize]
                                && self.g.levels[v as usize] as usize >= level
                                && self.g.neighbors(v, level).len() < cap
                        })
                        .max_by(|&a, &b| Cand { score: score(a), id: a }.cmp(&Cand { score: score(b), id: b }));
                }
                let Some(v) = target else { continue };
                if self.g.neighbors(u, level).len() >= cap {
                    // Make room by dropping u's weakest edge.
                    let mut l = self.list(u, level);
                    let worst = *l
                        .iter()
                        .min_by(|&&a, &&b| {
                            Cand { score: self.ip(u, a), id: a }.cmp(&Cand { score: self.ip(u, b), id: b })
                        })
                        .unwrap();
                    l.retain(|&x| x != worst);
                    self.set_list(u, level, &l);
                    self.remove_edge(worst, u, level);
                }
                let mut lu = self.list(u, level);
                lu.push(v);
                self.set_list(u, level, &lu);
                let mut lv = self.list(v, level);
                lv.push(u);
                self.set_list(v, level, &lv);
                // Everything reachable from u is now reachable from the entry.
                let mut queue = VecDeque::from([u]);
                seen[u as usize] = true;
                while let Some(x) = queue.pop_front() {
                    for &y in self.g.neighbors(x, level) {
                        if !seen[y as usize] {
                            seen[y as usize] = true;
                            queue.push_back(y);
                        }
                    }
                }
            }
        }
    }
}
