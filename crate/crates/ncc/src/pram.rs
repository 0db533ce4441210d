//! EREW-PRAM step simulation. Processors and shared memory cells are hosted
//! round-robin on the comm's nodes; a write is one routed send from the
//! processor's host to the cell's host, a read is a routed request followed
//! by a routed response. Exclusivity (at most one access per cell per step)
//! is validated before any message moves.

use crate::bits::{width_for, BitReader, BitWriter};
use crate::comm::Comm;
use crate::engine::SimError;
use crate::route::{route, RouteRecord};
use crate::sort::route_width;

/// Shared-memory machine state. Processor ids and cell addresses are
/// 0-based; processor i lives on node (i mod m) + 1 and cell a on node
/// (a mod m) + 1.
pub struct PramState {
    pub processors: u64,
    pub cells: u64,
    mem: Vec<u64>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PramOp {
    Read { addr: u64 },
    Write { addr: u64, value: u64 },
}

impl PramOp {
    fn addr(&self) -> u64 {
        match *self {
            PramOp::Read { addr } | PramOp::Write { addr, .. } => addr,
        }
    }
}

impl PramState {
    pub fn new(processors: u64, cells: u64) -> Self {
        Self { processors, cells, mem: vec![0; cells as usize], step: 0 }
    }

    pub fn mem(&self) -> &[u64] {
        &self.mem
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

fn host(id: u64, m: u32) -> u32 {
    (id % m as u64) as u32 + 1
}

/// One exclusive-read exclusive-write step. `requests` holds at most one
/// operation per processor; the result vector carries read answers in the
/// same positions.
pub fn erew_step(
    comm: &mut impl Comm,
    state: &mut PramState,
    requests: &[(u64, PramOp)],
) -> Result<Vec<(u64, Option<u64>)>, SimError> {
    let m = comm.size();
    state.step += 1;
    let a_bits = width_for(state.cells.max(1) - 1) as u32;
    let p_bits = width_for(state.processors.max(1) - 1) as u32;

    // validate addresses and exclusivity before any communication
    let mut touched = std::collections::BTreeMap::new();
    let mut seen_proc = std::collections::BTreeSet::new();
    for &(p, op) in requests {
        assert!(p < state.processors, "processor id out of range");
        assert!(seen_proc.insert(p), "one op per processor per step");
        let addr = op.addr();
        if addr >= state.cells {
            return Err(SimError::AddressOutOfRange { addr, size: state.cells });
        }
        if touched.insert(addr, p).is_some() {
            return Err(SimError::ExclusivityViolation { step: state.step, cell: addr });
        }
    }

    // writes and read requests travel together, one routed phase
    let mut outbox: Vec<Vec<RouteRecord>> = vec![Vec::new(); m as usize + 1];
    for &(p, op) in requests {
        let src = host(p, m);
        let mut w = BitWriter::new();
        match op {
            PramOp::Write { addr, value } => {
                w.push(1, 1);
                w.push(addr, a_bits as usize);
                w.push(value, 64);
            }
            PramOp::Read { addr } => {
                w.push(0, 1);
                w.push(addr, a_bits as usize);
                w.push(p, p_bits as usize);
            }
        }
        let (payload, bits) = w.into_payload();
        outbox[src as usize].push(RouteRecord {
            dst: host(op.addr(), m),
            payload,
            bits: bits as u32,
        });
    }
    let a = route_width(&outbox, comm)?;
    let (delivered, _) = route(comm, outbox, a)?;

    // cell hosts apply writes and answer reads, second routed phase
    let mut outbox: Vec<Vec<RouteRecord>> = vec![Vec::new(); m as usize + 1];
    for v in 1..=m {
        for dl in &delivered[v as usize] {
            let mut r = BitReader::new(&dl.payload, dl.bits as usize);
            let is_write = r.pull(1) == 1;
            let addr = r.pull(a_bits as usize);
            debug_assert_eq!(host(addr, m), v);
            if is_write {
                state.mem[addr as usize] = r.pull(64);
            } else {
                let p = r.pull(p_bits as usize);
                let mut w = BitWriter::new();
                w.push(p, p_bits as usize);
                w.push(state.mem[addr as usize], 64);
                let (payload, bits) = w.into_payload();
                outbox[v as usize].push(RouteRecord {
                    dst: host(p, m),
                    payload,
                    bits: bits as u32,
                });
            }
        }
    }
    let a = route_width(&outbox, comm)?;
    let (delivered, _) = route(comm, outbox, a)?;

    let mut answers: std::collections::BTreeMap<u64, u64> = std::collections::BTreeMap::new();
    for v in 1..=m {
        for dl in &delivered[v as usize] {
            let mut r = BitReader::new(&dl.payload, dl.bits as usize);
            let p = r.pull(p_bits as usize);
            let value = r.pull(64);
            debug_assert_eq!(host(p, m), v);
            answers.insert(p, value);
        }
    }
    Ok(requests
        .iter()
        .map(|&(p, op)| match op {
            PramOp::Read { .. } => (p, Some(answers[&p])),
            PramOp::Write { .. } => (p, None),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::RealComm;
    use crate::engine::{Engine, SimConfig};
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn writes_then_shifted_reads_match_oracle() {
        let mut eng = Engine::new(SimConfig::new(32, 11));
        let mut state = PramState::new(64, 64);
        {
            let mut comm = RealComm::new(&mut eng);
            let writes: Vec<(u64, PramOp)> = (0..64)
                .map(|p| (p, PramOp::Write { addr: p, value: 1000 + p }))
                .collect();
            erew_step(&mut comm, &mut state, &writes).unwrap();
            let reads: Vec<(u64, PramOp)> =
                (0..64).map(|p| (p, PramOp::Read { addr: (p + 17) % 64 })).collect();
            let got = erew_step(&mut comm, &mut state, &reads).unwrap();
            for (p, val) in got {
                assert_eq!(val, Some(1000 + (p + 17) % 64));
            }
        }
        assert_eq!(eng.report().violations, 0);
    }

    #[test]
    fn random_steps_match_sequential_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut eng = Engine::new(SimConfig::new(24, 5));
        let mut state = PramState::new(96, 128);
        let mut oracle = vec![0u64; 128];
        let mut comm = RealComm::new(&mut eng);
        for _ in 0..6 {
            let mut addrs: Vec<u64> = (0..128).collect();
            addrs.shuffle(&mut rng);
            let reqs: Vec<(u64, PramOp)> = (0..96)
                .map(|p| {
                    let addr = addrs[p as usize];
                    if rng.gen_bool(0.5) {
                        (p, PramOp::Write { addr, value: rng.gen() })
                    } else {
                        (p, PramOp::Read { addr })
                    }
                })
                .collect();
            let got = erew_step(&mut comm, &mut state, &reqs).unwrap();
            for (i, &(p, op)) in reqs.iter().enumerate() {
                match op {
                    PramOp::Read { addr } => {
                        assert_eq!(got[i], (p, Some(oracle[addr as usize])));
                    }
                    PramOp::Write { addr, value } => {
                        oracle[addr as usize] = value;
                        assert_eq!(got[i], (p, None));
                    }
                }
            }
        }
        assert_eq!(state.mem(), oracle.as_slice());
    }

    #[test]
    fn two_writers_same_cell_is_exclusivity_violation() {
        let mut eng = Engine::new(SimConfig::new(16, 2));
        let mut state = PramState::new(32, 32);
        let mut comm = RealComm::new(&mut eng);
        let reqs = vec![
            (0, PramOp::Write { addr: 7, value: 1 }),
            (1, PramOp::Write { addr: 7, value: 2 }),
        ];
        match erew_step(&mut comm, &mut state, &reqs) {
            Err(SimError::ExclusivityViolation { cell: 7, .. }) => {}
            other => panic!("expected exclusivity violation, got {other:?}"),
        }
        let reqs = vec![(0, PramOp::Read { addr: 9 }), (1, PramOp::Write { addr: 9, value: 2 })];
        assert!(matches!(
            erew_step(&mut comm, &mut state, &reqs),
            Err(SimError::ExclusivityViolation { cell: 9, .. })
        ));
    }

    #[test]
    fn address_out_of_range() {
        let mut eng = Engine::new(SimConfig::new(16, 2));
        let mut state = PramState::new(32, 32);
        let mut comm = RealComm::new(&mut eng);
        assert!(matches!(
            erew_step(&mut comm, &mut state, &[(0, PramOp::Read { addr: 32 })]),
            Err(SimError::AddressOutOfRange { addr: 32, size: 32 })
        ));
    }
}
