//! Wall-time probe for k-edge recovery: dense in-part graphs with a small
//! cut, the shape the forest layer feeds it. Run with --release.

use ncc::comm::RealComm;
use ncc::engine::{Engine, SimConfig};
use ncc::group::Partition;
use ncc::sketch::k_edge_recovery;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::time::Instant;

fn ceil_log2(n: u32) -> u32 {
    (u32::BITS - (n.max(2) - 1).leading_zeros()).max(1)
}

fn main() {
    for &(n, cut) in &[(64u32, 40u32), (256, 120), (512, 200)] {
        let mut rng = ChaCha8Rng::seed_from_u64(7 + n as u64);
        let half = n / 2;
        let mut edges: BTreeSet<(u32, u32)> = BTreeSet::new();
        for _ in 0..4 * n {
            for lo in [1, half + 1] {
                let a = rng.gen_range(lo..lo + half);
                let b = rng.gen_range(lo..lo + half);
                if a != b {
                    edges.insert((a.min(b), a.max(b)));
                }
            }
        }
        let mut crossings = 0;
        while crossings < cut {
            let a = rng.gen_range(1..=half);
            let b = rng.gen_range(half + 1..=n);
            if edges.insert((a, b)) {
                crossings += 1;
            }
        }

        let mut incident: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n as usize + 1];
        for &(u, v) in &edges {
            incident[u as usize].push((u, v));
            incident[v as usize].push((u, v));
        }
        let mut labels = vec![0u32; n as usize + 1];
        for v in 1..=n {
            labels[v as usize] = if v <= half { 1 } else { half + 1 };
        }
        let part = Partition::from_labels(&labels).unwrap();
        let k = 24 * ceil_log2(n);

        let t0 = Instant::now();
        let mut eng = Engine::new(SimConfig::new(n, 5));
        let mut comm = RealComm::new(&mut eng);
        let out = k_edge_recovery(&mut comm, &part, k, &incident).unwrap();
        let dt = t0.elapsed();
        drop(comm);
        let rounds = eng.report().rounds;
        assert!(out.iter().all(|c| c.len() == cut as usize));
        println!(
            "n={n} m={} cut={cut} k={k}: {dt:?}  rounds={}",
            edges.len(),
            rounds
        );
    }
}
