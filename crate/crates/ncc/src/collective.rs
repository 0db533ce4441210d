//! Tree collectives over consecutive id ranges of a `Comm`.
//!
//! All three use the same implicit block tree: positions are grouped into
//! blocks of `beta` consecutive ids, the first member of each block is the
//! block leader, and leaders recurse. A node that leads a block at level l
//! also occupies level l+1, so the leader chain is one physical node and
//! aggregation along it is free. Depth is ceil(log_beta m), which is
//! O(log m / log log m) at the default fanout beta ~ log n.

use crate::bits::{BitReader, BitWriter};
use crate::comm::{gather_wide, send_wide, Comm};
use crate::engine::SimError;

/// Default fanout: ceil(log2 n) + 1, at least 2.
pub fn default_beta(comm: &impl Comm) -> u32 {
    (crate::engine::ceil_log2(comm.real_n()) + 1).max(2)
}

fn levels(m: u32, beta: u32) -> u32 {
    let mut d = 0;
    let mut span = 1u64; // ids covered by one level-d node's block span
    while span < m as u64 {
        span *= beta as u64;
        d += 1;
    }
    d.max(1)
}

/// id of the j-th node (0-based) at level l.
fn id_at(l: u32, j: u64, beta: u32, lo: u32) -> u32 {
    lo + (j * (beta as u64).pow(l)) as u32
}

/// Number of nodes at level l for a range of `len` positions.
fn width_at(l: u32, len: u32, beta: u32) -> u64 {
    (len as u64).div_ceil((beta as u64).pow(l))
}

/// Exclusive prefix scan plus total over ids lo..=hi. `vals` is indexed by
/// position (0-based, len = hi-lo+1). Returns (exclusive prefixes, total);
/// after the call every participating id also knows the total in-model.
#[allow(clippy::too_many_arguments)]
pub fn prefix_scan<V: Clone>(
    comm: &mut impl Comm,
    lo: u32,
    hi: u32,
    vals: &[V],
    identity: V,
    combine: impl Fn(&V, &V) -> V,
    width: u32,
    encode: impl Fn(&V, &mut BitWriter),
    decode: impl Fn(&mut BitReader) -> V,
    beta: u32,
) -> Result<(Vec<V>, V), SimError> {
    let len = hi - lo + 1;
    assert_eq!(vals.len() as u32, len);
    assert!(beta >= 2);
    let units_up = comm.units_for(width);
    let units_down = comm.units_for(2 * width);
    assert!(
        (beta - 1) * units_up.max(units_down) <= comm.alpha(),
        "scan fanout exceeds budget: beta={beta} units={units_up}/{units_down} alpha={}",
        comm.alpha()
    );
    let depth = levels(len, beta);

    // sums[l][j] = subtree sum of the j-th level-l node, filled level by level.
    let mut sums: Vec<Vec<V>> = Vec::with_capacity(depth as usize + 1);
    sums.push(vals.to_vec());

    // Up-sweep.
    for l in 0..depth {
        let w_l = width_at(l, len, beta);
        let w_up = width_at(l + 1, len, beta);
        for j in 0..w_l {
            if j % beta as u64 != 0 {
                let src = id_at(l, j, beta, lo);
                let dst = id_at(l + 1, j / beta as u64, beta, lo);
                let mut w = BitWriter::with_capacity(width as usize);
                encode(&sums[l as usize][j as usize], &mut w);
                let (payload, bits) = w.into_payload();
                send_wide(comm, src, dst, &payload, bits as u32)?;
            }
        }
        comm.advance()?;
        // Each level-(l+1) node folds its own chain value with received kids.
        let mut next: Vec<V> = (0..w_up)
            .map(|j| sums[l as usize][(j * beta as u64) as usize].clone())
            .collect();
        for j in 0..w_up {
            let dst = id_at(l + 1, j, beta, lo);
            let recs = gather_wide(comm, dst, width);
            // children arrive in staging order; sort by child index for a
            // deterministic fold.
            let mut kids: Vec<(u64, V)> = recs
                .into_iter()
                .map(|r| {
                    let mut rd = BitReader::new(&r.payload, r.bits as usize);
                    let v = decode(&mut rd);
                    let child_j = ((r.src - lo) as u64) / (beta as u64).pow(l);
                    (child_j, v)
                })
                .collect();
            kids.sort_by_key(|(cj, _)| *cj);
            for (_, v) in kids {
                next[j as usize] = combine(&next[j as usize], &v);
            }
        }
        sums.push(next);
    }

    let total = sums[depth as usize][0].clone();

    // Down-sweep: prefixes[l][j] = exclusive prefix of the j-th level-l
    // subtree. Root starts at identity; every message carries (prefix, total).
    let mut pref: Vec<V> = vec![identity.clone()];
    for l in (0..depth).rev() {
        let w_l = width_at(l, len, beta);
        let w_up = width_at(l + 1, len, beta);
        let mut next: Vec<Option<V>> = vec![None; w_l as usize];
        for j in 0..w_up {
            let src = id_at(l + 1, j, beta, lo);
            let mut acc = pref[j as usize].clone();
            for k in 0..beta as u64 {
                let cj = j * beta as u64 + k;
                if cj >= w_l {
                    break;
                }
                if k == 0 {
                    next[cj as usize] = Some(acc.clone());
                } else {
                    let dst = id_at(l, cj, beta, lo);
                    let mut w = BitWriter::with_capacity(2 * width as usize);
                    encode(&acc, &mut w);
                    encode(&total, &mut w);
                    let (payload, bits) = w.into_payload();
                    send_wide(comm, src, dst, &payload, bits as u32)?;
                }
                acc = combine(&acc, &sums[l as usize][cj as usize]);
            }
        }
        comm.advance()?;
        for j in 0..w_l {
            if next[j as usize].is_none() {
                let dst = id_at(l, j, beta, lo);
                let recs = gather_wide(comm, dst, 2 * width);
                debug_assert_eq!(recs.len(), 1);
                let mut rd = BitReader::new(&recs[0].payload, recs[0].bits as usize);
                next[j as usize] = Some(decode(&mut rd));
            }
        }
        pref = next.into_iter().map(|v| v.unwrap()).collect();
    }

    Ok((pref, total))
}

/// Fold every participant's value to id `lo` (the range root). Up-sweep only.
#[allow(clippy::too_many_arguments)]
pub fn reduce<V: Clone>(
    comm: &mut impl Comm,
    lo: u32,
    hi: u32,
    vals: &[V],
    combine: impl Fn(&V, &V) -> V,
    width: u32,
    encode: impl Fn(&V, &mut BitWriter),
    decode: impl Fn(&mut BitReader) -> V,
    beta: u32,
) -> Result<V, SimError> {
    let len = hi - lo + 1;
    assert_eq!(vals.len() as u32, len);
    let units = comm.units_for(width);
    assert!((beta - 1) * units <= comm.alpha());
    let depth = levels(len, beta);
    let mut cur: Vec<V> = vals.to_vec();
    for l in 0..depth {
        let w_l = width_at(l, len, beta);
        let w_up = width_at(l + 1, len, beta);
        for j in 0..w_l {
            if j % beta as u64 != 0 {
                let src = id_at(l, j, beta, lo);
                let dst = id_at(l + 1, j / beta as u64, beta, lo);
                let mut w = BitWriter::with_capacity(width as usize);
                encode(&cur[j as usize], &mut w);
                let (payload, bits) = w.into_payload();
                send_wide(comm, src, dst, &payload, bits as u32)?;
            }
        }
        comm.advance()?;
        let mut next: Vec<V> = (0..w_up)
            .map(|j| cur[(j * beta as u64) as usize].clone())
            .collect();
        for j in 0..w_up {
            let dst = id_at(l + 1, j, beta, lo);
            let mut kids: Vec<(u64, V)> = gather_wide(comm, dst, width)
                .into_iter()
                .map(|r| {
                    let mut rd = BitReader::new(&r.payload, r.bits as usize);
                    let v = decode(&mut rd);
                    (((r.src - lo) as u64) / (beta as u64).pow(l), v)
                })
                .collect();
            kids.sort_by_key(|(cj, _)| *cj);
            for (_, v) in kids {
                next[j as usize] = combine(&next[j as usize], &v);
            }
        }
        cur = next;
    }
    Ok(cur.remove(0))
}

/// Deliver a payload held by id `lo` to every id in lo..=hi. Chunks are
/// pipelined: a relay forwards chunk t to its children one round after
/// receiving it, so the cost is depth + units - 1 rounds, not depth * units.
pub fn broadcast(
    comm: &mut impl Comm,
    lo: u32,
    hi: u32,
    payload: &[u8],
    bits: u32,
    beta: u32,
) -> Result<Vec<u8>, SimError> {
    let len = hi - lo + 1;
    if len == 1 {
        return Ok(payload.to_vec());
    }
    assert!(beta >= 2);
    assert!(beta - 1 <= comm.alpha(), "broadcast fanout exceeds budget");
    let depth = levels(len, beta);
    let units = comm.units_for(bits);
    let b = comm.bmsg();

    // chunk t of the payload
    let chunk = |t: u32| -> (Vec<u8>, u32) {
        let off = t * b;
        let take = b.min(bits.saturating_sub(off)).max(0);
        let mut r = BitReader::new(payload, (off + take) as usize);
        let mut skipped = 0;
        while skipped < off {
            let s = 64.min(off - skipped);
            r.pull(s as usize);
            skipped += s;
        }
        let mut w = BitWriter::with_capacity(take as usize);
        let mut copied = 0;
        while copied < take {
            let s = 64.min(take - copied);
            w.push(r.pull(s as usize), s as usize);
            copied += s;
        }
        let (p, l) = w.into_payload();
        (p, l as u32)
    };

    // children of id x: at the deepest level l where x is a leader (i.e. the
    // largest l with (x-lo) divisible by beta^l), its level-(l..1) children.
    // We schedule by (level, chunk): at step s = lvl + t, level-(depth-lvl)
    // parents forward chunk t.
    let total_steps = depth + units - 1;
    let mut have: Vec<u32> = vec![0; len as usize]; // chunks received so far per position
    have[0] = units; // root has everything
    for step in 0..total_steps {
        // At this step, a parent at tree level l (counting root = depth) may
        // forward chunk t = step - (depth - l) to its children if it has it.
        for l in (1..=depth).rev() {
            let lvl_step = depth - l; // 0 for topmost parents
            if step < lvl_step {
                continue;
            }
            let t = step - lvl_step;
            if t >= units {
                continue;
            }
            let w_parent = width_at(l, len, beta);
            let w_child = width_at(l - 1, len, beta);
            for j in 0..w_parent {
                let ppos = j * (beta as u64).pow(l);
                if have[ppos as usize] <= t {
                    continue;
                }
                let src = id_at(l, j, beta, lo);
                for k in 1..beta as u64 {
                    let cj = j * beta as u64 + k;
                    if cj >= w_child {
                        break;
                    }
                    let dst = id_at(l - 1, cj, beta, lo);
                    let (p, pb) = chunk(t);
                    comm.send_raw(src, dst, &p, pb)?;
                }
            }
        }
        comm.advance()?;
        // Collect: a node appearing at several levels is one physical id; its
        // inbox has at most one chunk this round (from its unique parent).
        for pos in 1..len as u64 {
            // only exact block starts receive; others got theirs at level 0
            let id = lo + pos as u32;
            let inbox = comm.take_inbox(id);
            if !inbox.is_empty() {
                debug_assert_eq!(inbox.len(), 1);
                have[pos as usize] += 1;
                let _ = &inbox[0];
            }
        }
    }
    debug_assert!(have.iter().all(|&h| h == units));
    Ok(payload.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::RealComm;
    use crate::engine::{Engine, SimConfig};

    fn enc_u64(v: &u64, w: &mut BitWriter) {
        w.push(*v, 64);
    }
    fn dec_u64(r: &mut BitReader) -> u64 {
        r.pull(64)
    }

    #[test]
    fn scan_matches_sequential_fold() {
        for &n in &[1u32, 2, 3, 7, 16, 33, 64] {
            // fat budget so 64-bit test values fit even at tiny n
            let mut cfg = SimConfig::new(n.max(2), 7);
            cfg.c_msg = 16;
            cfg.c_bits = 16;
            let mut eng = Engine::new(cfg);
            let mut comm = RealComm::new(&mut eng);
            let beta = default_beta(&comm);
            let vals: Vec<u64> = (0..n as u64).map(|i| i * i + 1).collect();
            let (pref, total) = prefix_scan(
                &mut comm, 1, n, &vals, 0u64, |a, b| a + b, 64, enc_u64, dec_u64, beta,
            )
            .unwrap();
            let mut acc = 0u64;
            for i in 0..n as usize {
                assert_eq!(pref[i], acc, "n={n} i={i}");
                acc += vals[i];
            }
            assert_eq!(total, acc);
            assert_eq!(eng.report().violations, 0);
        }
    }

    #[test]
    fn scan_is_ordered_not_commutative_safe() {
        // combine = composition of affine maps x -> p*x + q over u32, packed
        // (p, q) into one u64: associative but not commutative, so this
        // verifies children fold in position order, not arrival order.
        let n = 20u32;
        let mut eng = Engine::new(SimConfig::new(n, 3));
        let mut comm = RealComm::new(&mut eng);
        let vals: Vec<u64> = (1..=n as u64)
            .map(|i| ((2 * i as u32 + 1) as u64) << 32 | i)
            .collect();
        let compose = |a: &u64, b: &u64| -> u64 {
            // apply a first, then b: x -> pb*(pa*x + qa) + qb
            let (pa, qa) = ((*a >> 32) as u32, *a as u32);
            let (pb, qb) = ((*b >> 32) as u32, *b as u32);
            let p = pb.wrapping_mul(pa);
            let q = pb.wrapping_mul(qa).wrapping_add(qb);
            (p as u64) << 32 | q as u64
        };
        let identity = 1u64 << 32;
        let (pref, total) =
            prefix_scan(&mut comm, 1, n, &vals, identity, compose, 64, enc_u64, dec_u64, 4)
                .unwrap();
        let mut acc = identity;
        for i in 0..n as usize {
            assert_eq!(pref[i], acc, "i={i}");
            acc = compose(&acc, &vals[i]);
        }
        assert_eq!(total, acc);
    }

    #[test]
    fn reduce_and_broadcast() {
        let n = 50u32;
        let mut eng = Engine::new(SimConfig::new(n, 11));
        {
            let mut comm = RealComm::new(&mut eng);
            let beta = default_beta(&comm);
            let vals: Vec<u64> = (1..=n as u64).collect();
            let r = reduce(&mut comm, 1, n, &vals, |a, b| a + b, 64, enc_u64, dec_u64, beta)
                .unwrap();
            assert_eq!(r, (n as u64) * (n as u64 + 1) / 2);

            let mut w = BitWriter::new();
            w.push(0xfeed_f00d_dead_beef, 64);
            w.push(0xabc, 12);
            let (payload, bits) = w.into_payload();
            broadcast(&mut comm, 1, n, &payload, bits as u32, beta).unwrap();
        }
        assert_eq!(eng.report().violations, 0);
    }

    #[test]
    fn scan_rounds_scale_subloglinear() {
        // depth * units rounds per sweep; sanity-check the round count is
        // small and deterministic.
        let n = 256u32;
        let mut eng = Engine::new(SimConfig::new(n, 1));
        let mut comm = RealComm::new(&mut eng);
        let beta = default_beta(&comm);
        let vals: Vec<u64> = vec![1; n as usize];
        prefix_scan(&mut comm, 1, n, &vals, 0u64, |a, b| a + b, 64, enc_u64, dec_u64, beta)
            .unwrap();
        let r = eng.report().rounds;
        assert!(r <= 24, "scan rounds {r} too large for n={n}");
    }
}
