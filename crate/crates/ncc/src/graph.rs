//! Graph representation, text format, and generators.
//!
//! File format: first line `n m`, then m lines `u v w` with 1 <= u < v <= n
//! and w an unsigned 64-bit weight. Duplicate pairs and self loops are
//! rejected.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub u: u32,
    pub v: u32,
    pub w: u64,
}

impl Edge {
    /// Normalized so u < v.
    pub fn new(a: u32, b: u32, w: u64) -> Self {
        assert_ne!(a, b, "self loop");
        let (u, v) = if a < b { (a, b) } else { (b, a) };
        Edge { u, v, w }
    }

    /// Total order making the minimum spanning forest unique: weight first,
    /// then endpoint ids.
    pub fn key(&self) -> (u64, u32, u32) {
        (self.w, self.u, self.v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    pub n: u32,
    pub edges: Vec<Edge>,
}

#[derive(Debug, thiserror::Error)]
pub enum GraphParseError {
    #[error("line {line}: {msg}")]
    Bad { line: usize, msg: String },
}

impl Graph {
    pub fn new(n: u32, edges: Vec<Edge>) -> Self {
        Graph { n, edges }
    }

    pub fn m(&self) -> usize {
        self.edges.len()
    }

    pub fn parse(text: &str) -> Result<Graph, GraphParseError> {
        let bad = |line: usize, msg: String| GraphParseError::Bad { line, msg };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, header) = lines
            .next()
            .ok_or_else(|| bad(0, "empty input".into()))?;
        let mut it = header.split_whitespace();
        let n: u32 = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(hl + 1, "expected node count".into()))?;
        let m: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(hl + 1, "expected edge count".into()))?;
        if n == 0 {
            return Err(bad(hl + 1, "n must be positive".into()));
        }
        let mut edges = Vec::with_capacity(m);
        let mut seen = HashSet::with_capacity(m);
        for (ln, raw) in lines {
            let mut it = raw.split_whitespace();
            let mut num = |what: &str| -> Result<u64, GraphParseError> {
                it.next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad(ln + 1, format!("expected {what}")))
            };
            let u = num("source id")? as u32;
            let v = num("target id")? as u32;
            let w = num("weight")?;
            if u == 0 || v == 0 || u > n || v > n {
                return Err(bad(ln + 1, format!("endpoint out of range 1..={n}")));
            }
            if u >= v {
                return Err(bad(ln + 1, "edges must satisfy u < v".into()));
            }
            if !seen.insert((u, v)) {
                return Err(bad(ln + 1, format!("duplicate edge {u} {v}")));
            }
            edges.push(Edge { u, v, w });
        }
        if edges.len() != m {
            return Err(bad(0, format!("header said {m} edges, found {}", edges.len())));
        }
        Ok(Graph { n, edges })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {}", self.n, self.edges.len());
        for e in &self.edges {
            let _ = writeln!(s, "{} {} {}", e.u, e.v, e.w);
        }
        s
    }
}

/// Weight assignment for generators.
#[derive(Debug, Clone, Copy)]
pub enum Weights {
    /// Uniform over the full u64 range (distinct with overwhelming odds).
    Random,
    /// Uniform in 1..=limit, so ties are common.
    Small(u64),
    Unit,
}

fn draw_w(rng: &mut ChaCha8Rng, w: Weights) -> u64 {
    match w {
        Weights::Random => rng.gen(),
        Weights::Small(limit) => rng.gen_range(1..=limit),
        Weights::Unit => 1,
    }
}

pub fn path(n: u32, weights: Weights, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges = (1..n).map(|i| Edge::new(i, i + 1, draw_w(&mut rng, weights))).collect();
    Graph { n, edges }
}

pub fn cycle(n: u32, weights: Weights, seed: u64) -> Graph {
    assert!(n >= 3);
    let mut g = path(n, weights, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1c1_e000);
    g.edges.push(Edge::new(1, n, draw_w(&mut rng, weights)));
    g
}

pub fn star(n: u32, weights: Weights, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges = (2..=n).map(|i| Edge::new(1, i, draw_w(&mut rng, weights))).collect();
    Graph { n, edges }
}

pub fn complete(n: u32, weights: Weights, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::with_capacity((n as usize * (n as usize - 1)) / 2);
    for u in 1..n {
        for v in (u + 1)..=n {
            edges.push(Edge { u, v, w: draw_w(&mut rng, weights) });
        }
    }
    Graph { n, edges }
}

pub fn grid(rows: u32, cols: u32, weights: Weights, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rows * cols;
    let id = |r: u32, c: u32| r * cols + c + 1;
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                edges.push(Edge::new(id(r, c), id(r, c + 1), draw_w(&mut rng, weights)));
            }
            if r + 1 < rows {
                edges.push(Edge::new(id(r, c), id(r + 1, c), draw_w(&mut rng, weights)));
            }
        }
    }
    Graph { n, edges }
}

/// Uniform graph with exactly m distinct edges.
pub fn gnm(n: u32, m: usize, weights: Weights, seed: u64) -> Graph {
    let max = (n as u64) * (n as u64 - 1) / 2;
    assert!(m as u64 <= max, "too many edges for n={n}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(m);
    let mut edges = Vec::with_capacity(m);
    while edges.len() < m {
        let u = rng.gen_range(1..=n);
        let v = rng.gen_range(1..=n);
        if u == v {
            continue;
        }
        let (u, v) = if u < v { (u, v) } else { (v, u) };
        if seen.insert((u, v)) {
            edges.push(Edge { u, v, w: draw_w(&mut rng, weights) });
        }
    }
    Graph { n, edges }
}

/// Each pair kept independently with probability p.
pub fn gnp(n: u32, p: f64, weights: Weights, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 1..n {
        for v in (u + 1)..=n {
            if rng.gen_bool(p) {
                edges.push(Edge { u, v, w: draw_w(&mut rng, weights) });
            }
        }
    }
    Graph { n, edges }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip() {
        let g = gnm(20, 40, Weights::Small(100), 5);
        let text = g.to_text();
        let back = Graph::parse(&text).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn parse_rejects_bad_input() {
        assert!(Graph::parse("").is_err());
        assert!(Graph::parse("3 1\n2 2 5\n").is_err()); // self loop (u >= v)
        assert!(Graph::parse("3 1\n3 1 5\n").is_err()); // u >= v
        assert!(Graph::parse("3 2\n1 2 5\n1 2 7\n").is_err()); // duplicate
        assert!(Graph::parse("3 2\n1 2 5\n").is_err()); // count mismatch
        assert!(Graph::parse("3 1\n1 4 5\n").is_err()); // out of range
        assert!(Graph::parse("3 1\n1 2 5\n").is_ok());
    }

    #[test]
    fn generators_have_expected_shape() {
        assert_eq!(path(5, Weights::Unit, 0).m(), 4);
        assert_eq!(cycle(5, Weights::Unit, 0).m(), 5);
        assert_eq!(star(5, Weights::Unit, 0).m(), 4);
        assert_eq!(complete(5, Weights::Unit, 0).m(), 10);
        assert_eq!(grid(3, 4, Weights::Unit, 0).m(), 2 * 12 - 3 - 4);
        assert_eq!(gnm(10, 17, Weights::Random, 1).m(), 17);
        let g = gnp(30, 0.5, Weights::Random, 2);
        assert!(g.m() > 100 && g.m() < 335);
        // all normalized
        for e in &g.edges {
            assert!(e.u < e.v);
        }
    }

    #[test]
    fn same_seed_same_graph() {
        assert_eq!(gnm(50, 200, Weights::Random, 9), gnm(50, 200, Weights::Random, 9));
        assert_ne!(gnm(50, 200, Weights::Random, 9), gnm(50, 200, Weights::Random, 10));
    }
}
