//! Cluster routing layer: a hierarchical small-world graph over centroids
//! used to pick the clusters a query scans.
//!
//! Each inserted node links to its `out_d - 1` nearest already-inserted
//! nodes plus one uniformly random long-range node. Short-range links are
//! mirrored back and the receiving list is trimmed to its nearest entries,
//! which can leave nodes without incoming edges. [`RoutingGraph::connectivity_augment`]
//! repairs that by adding a minimum edge set that makes the ground layer
//! strongly connected.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clustering::ClusterModel;
use crate::distance::l2_sq;
use crate::error::{Error, Result};
use crate::topk::Entry;

/// Layered adjacency over `n` nodes. Layer 0 holds every node; a node is a
/// member of layer `i` iff `node_levels[node] >= i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingGraph {
    out_d: usize,
    entry_point: u32,
    node_levels: Vec<u8>,
    layers: Vec<Vec<Vec<u32>>>,
}

/// Ground-layer connectivity summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphStats {
    pub indegree_histogram: BTreeMap<usize, usize>,
    pub scc_count: usize,
    pub zero_indegree_count: usize,
}

struct Visited {
    bits: Vec<u64>,
}

impl Visited {
    fn new(n: usize) -> Self {
        Self { bits: vec![0; n.div_ceil(64)] }
    }

    /// Marks `i`; returns true if it was unmarked.
    #[inline]
    fn insert(&mut self, i: u32) -> bool {
        let (w, b) = ((i / 64) as usize, i % 64);
        let fresh = self.bits[w] & (1 << b) == 0;
        self.bits[w] |= 1 << b;
        fresh
    }
}

impl RoutingGraph {
    /// Builds the layered graph over the model's centroids, inserting nodes
    /// in id order.
    pub fn build(centroids: &ClusterModel, out_d: usize, ef_construction: usize, seed: u64) -> Result<Self> {
        if out_d < 2 {
            return Err(Error::arg(format!("out_d={out_d} must be at least 2")));
        }
        let ef_construction = ef_construction.max(out_d);
        let n = centroids.n_cluster();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let max_level = if n <= 1 {
            0
        } else {
            ((n as f64).ln() / (out_d as f64).ln()).ceil() as usize
        }
        .min(u8::MAX as usize);
        let promote = 1.0 / out_d as f64;
        let node_levels: Vec<u8> = (0..n)
            .map(|_| {
                let mut level = 0;
                while level < max_level && rng.random_bool(promote) {
                    level += 1;
                }
                level as u8
            })
            .collect();

        let num_layers = node_levels.iter().copied().max().unwrap_or(0) as usize + 1;
        let mut graph = RoutingGraph {
            out_d,
            entry_point: 0,
            node_levels,
            layers: vec![vec![Vec::new(); n]; num_layers],
        };
        // per layer: members inserted so far, and each node's long-range target
        let mut members: Vec<Vec<u32>> = vec![Vec::new(); num_layers];
        let mut long_edge: Vec<Vec<Option<u32>>> = vec![vec![None; n]; num_layers];
        if n == 0 {
            return Ok(graph);
        }
        for layer in 0..=graph.node_levels[0] as usize {
            members[layer].push(0);
        }
        let mut top = graph.node_levels[0] as usize;

        for node in 1..n as u32 {
            let q = centroids.centroid(node as usize);
            let level = graph.node_levels[node as usize] as usize;
            let mut ep = graph.entry_point;
            for layer in (level + 1..=top).rev() {
                ep = graph.greedy_closest(centroids, q, ep, layer);
            }
            for layer in (0..=level.min(top)).rev() {
                let found = graph.search_layer(centroids, q, ep, ef_construction, layer);
                ep = found[0].id;
                let mut out: Vec<u32> = found.iter().take(out_d - 1).map(|e| e.id).collect();
                let pool = &members[layer];
                let long = (0..8)
                    .map(|_| pool[rng.random_range(0..pool.len())])
                    .find(|c| !out.contains(c));
                if let Some(c) = long {
                    out.push(c);
                    long_edge[layer][node as usize] = Some(c);
                }
                for &nb in out.iter().take(out_d - 1) {
                    graph.layers[layer][nb as usize].push(node);
                    if graph.layers[layer][nb as usize].len() > out_d {
                        graph.trim(centroids, layer, nb, long_edge[layer][nb as usize]);
                    }
                }
                graph.layers[layer][node as usize] = out;
            }
            for layer in 0..=level {
                members[layer].push(node);
            }
            if level > top {
                top = level;
                graph.entry_point = node;
            }
        }
        Ok(graph)
    }

    /// Shrinks an overfull list to `out_d` entries: the long-range link,
    /// then neighbors chosen nearest-first while skipping any that lies
    /// closer to an already kept neighbor than to `node`, backfilled with
    /// the nearest skipped ones.
    fn trim(&mut self, centroids: &ClusterModel, layer: usize, node: u32, long: Option<u32>) {
        let base = centroids.centroid(node as usize);
        let list = &mut self.layers[layer][node as usize];
        let mut short: Vec<(f32, u32)> = list
            .iter()
            .filter(|&&x| Some(x) != long)
            .map(|&x| (l2_sq(base, centroids.centroid(x as usize)), x))
            .collect();
        short.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let keep = self.out_d - usize::from(long.is_some() && list.contains(&long.unwrap()));
        // diversity first: skip a candidate closer to an already kept one
        // than to `node`, then backfill with the nearest skipped ones
        let mut kept: Vec<u32> = Vec::with_capacity(self.out_d);
        let mut skipped = Vec::new();
        for &(dist, x) in &short {
            if kept.len() == keep {
                break;
            }
            let cx = centroids.centroid(x as usize);
            if kept.iter().all(|&k| l2_sq(cx, centroids.centroid(k as usize)) > dist) {
                kept.push(x);
            } else {
                skipped.push(x);
            }
        }
        for x in skipped {
            if kept.len() == keep {
                break;
            }
            kept.push(x);
        }
        if let Some(l) = long.filter(|l| list.contains(l)) {
            kept.push(l);
        }
        *list = kept;
    }

    fn greedy_closest(&self, centroids: &ClusterModel, q: &[f32], start: u32, layer: usize) -> u32 {
        let mut cur = start;
        let mut cur_dist = l2_sq(q, centroids.centroid(cur as usize));
        loop {
            let mut moved = false;
            for &nb in &self.layers[layer][cur as usize] {
                let dist = l2_sq(q, centroids.centroid(nb as usize));
                if dist < cur_dist || (dist == cur_dist && nb < cur) {
                    cur = nb;
                    cur_dist = dist;
                    moved = true;
                }
            }
            if !moved {
                return cur;
            }
        }
    }

    /// Best-first search bounded by `ef`; returns the result set ascending.
    fn search_layer(&self, centroids: &ClusterModel, q: &[f32], entry: u32, ef: usize, layer: usize) -> Vec<Entry> {
        let mut visited = Visited::new(self.node_levels.len());
        visited.insert(entry);
        let d0 = l2_sq(q, centroids.centroid(entry as usize));
        let start = Entry { dist: d0, tie: entry as u64, id: entry };
        let mut frontier = BinaryHeap::from([Reverse(start)]);
        let mut results = BinaryHeap::from([start]);

        while let Some(Reverse(best)) = frontier.pop() {
            if results.len() >= ef && best > *results.peek().unwrap() {
                break;
            }
            for &nb in &self.layers[layer][best.id as usize] {
                if !visited.insert(nb) {
                    continue;
                }
                let e = Entry { dist: l2_sq(q, centroids.centroid(nb as usize)), tie: nb as u64, id: nb };
                if results.len() < ef {
                    results.push(e);
                    frontier.push(Reverse(e));
                } else if e < *results.peek().unwrap() {
                    results.pop();
                    results.push(e);
                    frontier.push(Reverse(e));
                }
            }
        }
        results.into_sorted_vec()
    }

    /// Approximate `nscan` nearest clusters to `query` with their exact
    /// squared centroid distances, ascending.
    pub fn route(&self, centroids: &ClusterModel, query: &[f32], nscan: usize, ef_search: usize) -> Result<Vec<(u32, f32)>> {
        let n = self.node_levels.len();
        if query.len() != centroids.d() {
            return Err(Error::arg(format!("query has dimension {}, centroids have {}", query.len(), centroids.d())));
        }
        if centroids.n_cluster() != n {
            return Err(Error::arg("centroid table does not match the routing graph"));
        }
        if nscan == 0 || nscan > n {
            return Err(Error::arg(format!("nscan={nscan} must be in 1..={n}")));
        }
        if ef_search < nscan {
            return Err(Error::arg(format!("ef_search={ef_search} is below nscan={nscan}")));
        }
        let mut ep = self.entry_point;
        for layer in (1..self.layers.len()).rev() {
            ep = self.greedy_closest(centroids, query, ep, layer);
        }
        let found = self.search_layer(centroids, query, ep, ef_search, 0);
        Ok(found.into_iter().take(nscan).map(|e| (e.id, e.dist)).collect())
    }

    /// Makes the ground layer strongly connected with the minimum number of
    /// added edges, `max(#sources, #sinks)` of the SCC condensation. Each
    /// condensation edge is realized between the closest centroid pair of
    /// the two components. Returns the number of edges added.
    pub fn connectivity_augment(&mut self, centroids: &ClusterModel) -> usize {
        let n = self.node_levels.len();
        let (comp, c) = kosaraju(&self.layers[0]);
        if c <= 1 {
            return 0;
        }
        let mut dag: Vec<Vec<usize>> = vec![Vec::new(); c];
        let mut indeg = vec![0usize; c];
        for (u, nbrs) in self.layers[0].iter().enumerate() {
            for &v in nbrs {
                let (cu, cv) = (comp[u], comp[v as usize]);
                if cu != cv && !dag[cu].contains(&cv) {
                    dag[cu].push(cv);
                    indeg[cv] += 1;
                }
            }
        }
        let outdeg: Vec<usize> = dag.iter().map(Vec::len).collect();
        let sources: Vec<usize> = (0..c).filter(|&x| indeg[x] == 0).collect();
        let sinks: Vec<usize> = (0..c).filter(|&x| outdeg[x] == 0).collect();

        let comp_edges = if sources.len() <= sinks.len() {
            eswaran_tarjan(&dag, &sources, &sinks)
        } else {
            let mut rev: Vec<Vec<usize>> = vec![Vec::new(); c];
            for (u, nbrs) in dag.iter().enumerate() {
                for &v in nbrs {
                    rev[v].push(u);
                }
            }
            eswaran_tarjan(&rev, &sinks, &sources)
                .into_iter()
                .map(|(a, b)| (b, a))
                .collect()
        };

        let mut members: Vec<Vec<u32>> = vec![Vec::new(); c];
        for node in 0..n {
            members[comp[node]].push(node as u32);
        }
        let cap = self.out_d + 1;
        for &(from, to) in &comp_edges {
            let (a, b) = self.closest_pair(centroids, &members[from], &members[to], cap);
            self.layers[0][a as usize].push(b);
        }
        comp_edges.len()
    }

    fn closest_pair(&self, centroids: &ClusterModel, from: &[u32], to: &[u32], cap: usize) -> (u32, u32) {
        let open: Vec<u32> = from
            .iter()
            .copied()
            .filter(|&a| self.layers[0][a as usize].len() < cap)
            .collect();
        let from = if open.is_empty() { from } else { &open };
        let mut best = (f32::INFINITY, from[0], to[0]);
        for &a in from {
            let ca = centroids.centroid(a as usize);
            for &b in to {
                let dist = l2_sq(ca, centroids.centroid(b as usize));
                if dist < best.0 {
                    best = (dist, a, b);
                }
            }
        }
        (best.1, best.2)
    }

    pub fn stats(&self) -> GraphStats {
        let n = self.node_levels.len();
        let mut indeg = vec![0usize; n];
        for nbrs in &self.layers[0] {
            for &v in nbrs {
                indeg[v as usize] += 1;
            }
        }
        let mut indegree_histogram = BTreeMap::new();
        for &x in &indeg {
            *indegree_histogram.entry(x).or_insert(0) += 1;
        }
        GraphStats {
            zero_indegree_count: indeg.iter().filter(|&&x| x == 0).count(),
            indegree_histogram,
            scc_count: kosaraju(&self.layers[0]).1,
        }
    }

    /// A single-layer graph from explicit adjacency, entry point 0.
    pub fn from_ground_adjacency(out_d: usize, adjacency: Vec<Vec<u32>>) -> Result<Self> {
        Self::from_layers(out_d, 0, vec![0; adjacency.len()], vec![adjacency])
    }

    /// Reassembles a graph from its parts, checking structural invariants.
    pub fn from_layers(out_d: usize, entry_point: u32, node_levels: Vec<u8>, layers: Vec<Vec<Vec<u32>>>) -> Result<Self> {
        let n = node_levels.len();
        if layers.is_empty() || layers.iter().any(|l| l.len() != n) {
            return Err(Error::arg("every layer must have one adjacency list per node"));
        }
        if n > 0 && entry_point as usize >= n {
            return Err(Error::arg("entry point out of range"));
        }
        for (li, layer) in layers.iter().enumerate() {
            for (u, nbrs) in layer.iter().enumerate() {
                if !nbrs.is_empty() && (node_levels[u] as usize) < li {
                    return Err(Error::arg(format!("node {u} has edges on layer {li} above its level")));
                }
                if nbrs.iter().any(|&v| v as usize >= n || (node_levels[v as usize] as usize) < li) {
                    return Err(Error::arg(format!("node {u} links outside layer {li}")));
                }
            }
        }
        Ok(Self { out_d, entry_point, node_levels, layers })
    }

    pub fn out_d(&self) -> usize {
        self.out_d
    }

    pub fn entry_point(&self) -> u32 {
        self.entry_point
    }

    pub fn node_count(&self) -> usize {
        self.node_levels.len()
    }

    pub fn node_levels(&self) -> &[u8] {
        &self.node_levels
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Out-neighbors of `node` on `layer`.
    pub fn neighbors(&self, layer: usize, node: u32) -> &[u32] {
        &self.layers[layer][node as usize]
    }

    /// Node ids present on `layer`, ascending.
    pub fn layer_nodes(&self, layer: usize) -> Vec<u32> {
        (0..self.node_levels.len() as u32)
            .filter(|&u| self.node_levels[u as usize] as usize >= layer)
            .collect()
    }
}

/// Builds and augments in one step; the graph handed to search.
pub fn build_routing(centroids: &ClusterModel, out_d: usize, ef_construction: usize, seed: u64) -> Result<(RoutingGraph, usize)> {
    let mut graph = RoutingGraph::build(centroids, out_d, ef_construction, seed)?;
    let added = graph.connectivity_augment(centroids);
    Ok((graph, added))
}

/// Kosaraju's two-pass SCC labelling. Returns per-node component ids and
/// the component count.
pub fn kosaraju(adj: &[Vec<u32>]) -> (Vec<usize>, usize) {
    let n = adj.len();
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    for root in 0..n {
        if seen[root] {
            continue;
        }
        seen[root] = true;
        let mut stack = vec![(root, 0usize)];
        while let Some((u, next)) = stack.last_mut() {
            if let Some(&v) = adj[*u].get(*next) {
                *next += 1;
                if !seen[v as usize] {
                    seen[v as usize] = true;
                    stack.push((v as usize, 0));
                }
            } else {
                order.push(*u);
                stack.pop();
            }
        }
    }

    let mut radj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (u, nbrs) in adj.iter().enumerate() {
        for &v in nbrs {
            radj[v as usize].push(u);
        }
    }
    let mut comp = vec![usize::MAX; n];
    let mut count = 0;
    for &root in order.iter().rev() {
        if comp[root] != usize::MAX {
            continue;
        }
        comp[root] = count;
        let mut stack = vec![root];
        while let Some(u) = stack.pop() {
            for &v in &radj[u] {
                if comp[v] == usize::MAX {
                    comp[v] = count;
                    stack.push(v);
                }
            }
        }
        count += 1;
    }
    (comp, count)
}

/// Edge set making a DAG strongly connected, for `sources.len() <= sinks.len()`.
fn eswaran_tarjan(dag: &[Vec<usize>], sources: &[usize], sinks: &[usize]) -> Vec<(usize, usize)> {
    let c = dag.len();
    let mut marked = vec![false; c];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for &s in sources {
        if marked[s] {
            continue;
        }
        // depth-first search, marking nodes on entry, until the first sink
        let mut stack = vec![(s, 0usize)];
        marked[s] = true;
        while let Some((u, next)) = stack.last_mut() {
            let u = *u;
            if dag[u].is_empty() {
                pairs.push((s, u));
                break;
            }
            match dag[u].get(*next) {
                Some(&v) => {
                    *next += 1;
                    if !marked[v] {
                        marked[v] = true;
                        stack.push((v, 0));
                    }
                }
                None => {
                    stack.pop();
                }
            }
        }
    }

    let p = pairs.len();
    let mut v: Vec<usize> = pairs.iter().map(|x| x.0).collect();
    v.extend(sources.iter().filter(|s| !pairs.iter().any(|x| x.0 == **s)));
    let mut w: Vec<usize> = pairs.iter().map(|x| x.1).collect();
    w.extend(sinks.iter().filter(|t| !pairs.iter().any(|x| x.1 == **t)));
    let (s, t) = (v.len(), w.len());

    let mut edges = Vec::with_capacity(t);
    for i in 0..p - 1 {
        edges.push((w[i], v[i + 1]));
    }
    for i in p..s {
        edges.push((w[i], v[i]));
    }
    if s == t {
        edges.push((w[p - 1], v[0]));
    } else {
        edges.push((w[p - 1], w[s]));
        for i in s..t - 1 {
            edges.push((w[i], w[i + 1]));
        }
        edges.push((w[t - 1], v[0]));
    }
    edges
}
