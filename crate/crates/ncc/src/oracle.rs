//! Sequential reference implementations used to verify protocol outputs.
//! Everything here is straightforward textbook code with no dependence on
//! the simulator, so protocol bugs and oracle bugs stay independent.

use crate::graph::{Edge, Graph};
use std::collections::{BinaryHeap, HashMap};

pub struct UnionFind {
    parent: Vec<u32>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub fn new(n: u32) -> Self {
        UnionFind { parent: (0..=n).collect(), rank: vec![0; n as usize + 1] }
    }

    pub fn find(&mut self, x: u32) -> u32 {
        let mut r = x;
        while self.parent[r as usize] != r {
            r = self.parent[r as usize];
        }
        let mut c = x;
        while self.parent[c as usize] != r {
            let next = self.parent[c as usize];
            self.parent[c as usize] = r;
            c = next;
        }
        r
    }

    /// Returns true if the two were in different sets.
    pub fn union(&mut self, a: u32, b: u32) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (hi, lo) = if self.rank[ra as usize] >= self.rank[rb as usize] {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[lo as usize] = hi;
        if self.rank[hi as usize] == self.rank[lo as usize] {
            self.rank[hi as usize] += 1;
        }
        true
    }

    pub fn same(&mut self, a: u32, b: u32) -> bool {
        self.find(a) == self.find(b)
    }
}

/// Component label for every vertex (1-based; label = smallest member id).
pub fn components(n: u32, edges: &[Edge]) -> Vec<u32> {
    let mut uf = UnionFind::new(n);
    for e in edges {
        uf.union(e.u, e.v);
    }
    let mut min_of_root: HashMap<u32, u32> = HashMap::new();
    for v in 1..=n {
        let r = uf.find(v);
        min_of_root.entry(r).or_insert(v); // v ascending, first is min
    }
    (0..=n).map(|v| if v == 0 { 0 } else { min_of_root[&uf.find(v)] }).collect()
}

/// Minimum spanning forest under the (w, u, v) total order, by Kruskal.
pub fn kruskal(n: u32, edges: &[Edge]) -> Vec<Edge> {
    let mut es: Vec<Edge> = edges.to_vec();
    es.sort_by_key(|e| e.key());
    let mut uf = UnionFind::new(n);
    let mut out = Vec::new();
    for e in es {
        if uf.union(e.u, e.v) {
            out.push(e);
        }
    }
    out.sort_by_key(|e| e.key());
    out
}

/// Same forest via Prim from each unvisited vertex; cross-checks Kruskal.
pub fn prim(n: u32, edges: &[Edge]) -> Vec<Edge> {
    let mut adj: Vec<Vec<(u32, u64, u32, u32)>> = vec![Vec::new(); n as usize + 1];
    for e in edges {
        adj[e.u as usize].push((e.v, e.w, e.u, e.v));
        adj[e.v as usize].push((e.u, e.w, e.u, e.v));
    }
    let mut visited = vec![false; n as usize + 1];
    let mut out = Vec::new();
    for start in 1..=n {
        if visited[start as usize] {
            continue;
        }
        visited[start as usize] = true;
        // min-heap on edge key via Reverse ordering
        let mut heap: BinaryHeap<std::cmp::Reverse<((u64, u32, u32), u32)>> = BinaryHeap::new();
        for &(to, w, u, v) in &adj[start as usize] {
            heap.push(std::cmp::Reverse(((w, u, v), to)));
        }
        while let Some(std::cmp::Reverse(((w, u, v), to))) = heap.pop() {
            if visited[to as usize] {
                continue;
            }
            visited[to as usize] = true;
            out.push(Edge { u, v, w });
            for &(t2, w2, u2, v2) in &adj[to as usize] {
                if !visited[t2 as usize] {
                    heap.push(std::cmp::Reverse(((w2, u2, v2), t2)));
                }
            }
        }
    }
    out.sort_by_key(|e| e.key());
    out
}

/// Checks that `forest` is a spanning forest of (n, edges): every forest edge
/// is an input edge, the forest is acyclic, and it connects exactly the same
/// components as the input.
pub fn is_spanning_forest(n: u32, edges: &[Edge], forest: &[Edge]) -> bool {
    let set: std::collections::HashSet<(u32, u32)> =
        edges.iter().map(|e| (e.u, e.v)).collect();
    let mut uf = UnionFind::new(n);
    for f in forest {
        if !set.contains(&(f.u, f.v)) {
            return false;
        }
        if !uf.union(f.u, f.v) {
            return false; // cycle
        }
    }
    let want = components(n, edges);
    let mut label: HashMap<u32, u32> = HashMap::new();
    for v in 1..=n {
        let r = uf.find(v);
        label.entry(r).or_insert(v);
    }
    (1..=n).all(|v| label[&uf.find(v)] == want[v as usize])
}

/// An edge e is light with respect to forest F when e belongs to the minimum
/// spanning forest of F + e. Brute force straight from that definition.
pub fn f_light_edges(n: u32, forest: &[Edge], candidates: &[Edge]) -> Vec<Edge> {
    let mut out = Vec::new();
    for &e in candidates {
        if forest.iter().any(|f| (f.u, f.v) == (e.u, e.v)) {
            // an edge of F is trivially in MSF(F + e) = F
            out.push(e);
            continue;
        }
        let mut with: Vec<Edge> = forest.to_vec();
        with.push(e);
        let msf = kruskal(n, &with);
        if msf.iter().any(|f| (f.u, f.v) == (e.u, e.v)) {
            out.push(e);
        }
    }
    out
}

/// Cut edges of a vertex set: edges with exactly one endpoint inside.
pub fn cut_edges(g: &Graph, inside: &[bool]) -> Vec<Edge> {
    g.edges
        .iter()
        .copied()
        .filter(|e| inside[e.u as usize] != inside[e.v as usize])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{self, Weights};

    #[test]
    fn kruskal_and_prim_agree() {
        for seed in 0..20 {
            let g = graph::gnm(40, 100, Weights::Small(12), seed);
            let a = kruskal(g.n, &g.edges);
            let b = prim(g.n, &g.edges);
            assert_eq!(a, b, "seed {seed}");
            assert!(is_spanning_forest(g.n, &g.edges, &a));
        }
    }

    #[test]
    fn msf_weight_is_minimal_among_spanning_trees() {
        // spot check: on a small connected graph, exhaustively verify no
        // spanning tree weighs less than Kruskal's.
        let g = graph::gnm(7, 14, Weights::Small(9), 3);
        let forest = kruskal(g.n, &g.edges);
        let comps = components(g.n, &g.edges);
        let target: u64 = forest.iter().map(|e| e.w).sum();
        let m = g.edges.len();
        let mut best = u64::MAX;
        for mask in 0u32..(1 << m) {
            if mask.count_ones() != forest.len() as u32 {
                continue;
            }
            let chosen: Vec<Edge> = (0..m)
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| g.edges[i])
                .collect();
            let mut uf = UnionFind::new(g.n);
            if chosen.iter().all(|e| uf.union(e.u, e.v)) {
                let mut label: HashMap<u32, u32> = HashMap::new();
                for v in 1..=g.n {
                    let r = uf.find(v);
                    label.entry(r).or_insert(v);
                }
                if (1..=g.n).all(|v| label[&uf.find(v)] == comps[v as usize]) {
                    best = best.min(chosen.iter().map(|e| e.w).sum());
                }
            }
        }
        assert_eq!(best, target);
    }

    #[test]
    fn components_label_by_min_member() {
        let edges = vec![Edge::new(2, 5, 1), Edge::new(5, 7, 1), Edge::new(3, 4, 1)];
        let c = components(8, &edges);
        assert_eq!(c[2], 2);
        assert_eq!(c[5], 2);
        assert_eq!(c[7], 2);
        assert_eq!(c[3], 3);
        assert_eq!(c[4], 3);
        assert_eq!(c[1], 1);
        assert_eq!(c[6], 6);
        assert_eq!(c[8], 8);
    }

    #[test]
    fn f_light_matches_path_maximum_characterization() {
        // On a forest path, an edge is light iff its key beats the maximum
        // key on the path between its endpoints.
        for seed in 0..10 {
            let g = graph::gnm(16, 40, Weights::Small(20), 100 + seed);
            let f = kruskal(g.n, &g.edges);
            let light = f_light_edges(g.n, &f, &g.edges);
            for &e in &g.edges {
                let claimed = light.contains(&e);
                let expect = match path_max_key(g.n, &f, e.u, e.v) {
                    None => true, // different components
                    Some(maxk) => e.key() < maxk || f.contains(&e),
                };
                assert_eq!(claimed, expect, "seed {seed} edge {e:?}");
            }
        }
    }

    fn path_max_key(n: u32, forest: &[Edge], a: u32, b: u32) -> Option<(u64, u32, u32)> {
        // BFS through the forest from a to b tracking the max edge key.
        let mut adj: Vec<Vec<(u32, (u64, u32, u32))>> = vec![Vec::new(); n as usize + 1];
        for e in forest {
            adj[e.u as usize].push((e.v, e.key()));
            adj[e.v as usize].push((e.u, e.key()));
        }
        let mut seen = vec![false; n as usize + 1];
        let mut q = std::collections::VecDeque::new();
        seen[a as usize] = true;
        q.push_back((a, None::<(u64, u32, u32)>));
        while let Some((x, mx)) = q.pop_front() {
            if x == b {
                return mx;
            }
            for &(y, k) in &adj[x as usize] {
                if !seen[y as usize] {
                    seen[y as usize] = true;
                    let nm = Some(mx.map_or(k, |m| m.max(k)));
                    q.push_back((y, nm));
                }
            }
        }
        None
    }
}
