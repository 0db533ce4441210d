//! temp: stage timing for the ledger path at n=256
use ncc::comm::{Comm, RealComm, Transport};
use ncc::engine::{Engine, SimConfig};
use ncc::group::{broadcast_shared_randomness_via, build_comm_trees, max_payload_bits, Partition};
use ncc::sketch::{aggregate_field_vectors, KSparseParams, KSparseRecovery, SketchSeed};
use std::time::Instant;

fn main() {
    let n = 256u32;
    let lg = 8u32;
    let k = 24 * lg;
    let pool_bits = 16 * (k * lg + lg * lg);
    let half = n / 2;
    let mut labels = vec![0u32; n as usize + 1];
    for v in 1..=n {
        labels[v as usize] = if v <= half { 1 } else { half + 1 };
    }
    let part = Partition::from_labels(&labels).unwrap();
    let params = KSparseParams::new(k, n as u64 * n as u64);

    let mut eng = Engine::new(SimConfig::new(n, 5));
    let mut comm = RealComm::new(&mut eng);

    let t0 = Instant::now();
    let pool = broadcast_shared_randomness_via(&mut comm, pool_bits, Transport::Ledger).unwrap();
    let t_pool = t0.elapsed();
    let r_pool = comm.rounds();

    let t0 = Instant::now();
    let cap = max_payload_bits(&comm);
    let _trees = build_comm_trees(&mut comm, &part, cap).unwrap();
    let t_trees = t0.elapsed();

    let t0 = Instant::now();
    let seed = SketchSeed::from_pool(&pool);
    let template = KSparseRecovery::new(params, &seed);
    let zero = template.elements();
    let t_tmpl = t0.elapsed();

    let elems: Vec<Vec<u64>> = (0..=n as usize).map(|_| zero.clone()).collect();
    let t0 = Instant::now();
    let sums =
        aggregate_field_vectors(&mut comm, &part, &elems, params.element_count(), Transport::Ledger)
            .unwrap();
    let t_stream = t0.elapsed();
    let r_total = comm.rounds();
    assert_eq!(sums.len(), 2);

    println!(
        "pool={t_pool:?} (rounds {r_pool})  trees={t_trees:?}  template+elems={t_tmpl:?}  stream={t_stream:?}  rounds_total={r_total}"
    );
}
