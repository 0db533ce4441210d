//! Distributed sort: items spread across all comm nodes end up globally
//! sorted by (key, val), each node holding a contiguous, exactly balanced
//! rank range and knowing its start rank and the total count.
//!
//! Recursive sample sort with branching d ~ log n. Each level runs on every
//! active interval in lockstep: local sort, paced binary sample-merge toward
//! the interval leader, splitter pick, pipelined splitter broadcast, a
//! per-bucket counting scan for exact balanced targets, then one global
//! route call to redistribute. A final counting scan plus route rebalances
//! to exact rank ranges.
//!
//! Inboxes live for one communication phase only, so every multi-round
//! transfer here drains receivers after each advance into stream
//! accumulators keyed by (dst, src).

use std::collections::BTreeMap;

use crate::bits::{BitReader, BitWriter};
use crate::comm::{append_bits, Comm};
use crate::engine::SimError;
use crate::route::{route, RouteRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SortItem {
    pub key: u128,
    pub val: u64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SortStats {
    pub levels: u32,
    pub route_calls: u32,
}

pub struct SortOutput {
    /// Sorted items per node, contiguous in global rank order.
    pub items: Vec<Vec<SortItem>>,
    /// Global rank of each node's first item.
    pub start_rank: Vec<u64>,
    pub total: u64,
}

const OVERSAMPLE: u32 = 8;

/// Streams accumulated across paced rounds, keyed by (dst, src).
type Streams = BTreeMap<(u32, u32), (Vec<u8>, u32)>;

fn drain_all(comm: &mut impl Comm, acc: &mut Streams) {
    for dst in 1..=comm.size() {
        for msg in comm.take_inbox(dst) {
            let (buf, bits) = acc.entry((dst, msg.src)).or_default();
            append_bits(buf, bits, &msg.payload, msg.bits);
        }
    }
}

fn enc_item(it: &SortItem, kb: u32, vb: u32, w: &mut BitWriter) {
    if kb > 64 {
        w.push(it.key as u64, 64);
        w.push((it.key >> 64) as u64, (kb - 64) as usize);
    } else {
        w.push(it.key as u64 & mask64(kb), kb as usize);
    }
    w.push(it.val & mask64(vb), vb as usize);
}

fn dec_item(r: &mut BitReader, kb: u32, vb: u32) -> SortItem {
    let key = if kb > 64 {
        let lo = r.pull(64) as u128;
        let hi = r.pull((kb - 64) as usize) as u128;
        lo | hi << 64
    } else {
        r.pull(kb as usize) as u128
    };
    SortItem { key, val: r.pull(vb as usize) }
}

fn mask64(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

/// Regular subsample down to at most s entries.
fn subsample(sorted: &[SortItem], s: usize) -> Vec<SortItem> {
    if sorted.len() <= s {
        return sorted.to_vec();
    }
    (0..s).map(|i| sorted[i * sorted.len() / s]).collect()
}

fn merge(a: &[SortItem], b: &[SortItem]) -> Vec<SortItem> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Send bits [lo_bit, lo_bit+len) of `payload` as unit messages.
fn send_slice(
    comm: &mut impl Comm,
    src: u32,
    dst: u32,
    payload: &[u8],
    lo_bit: u32,
    len: u32,
) -> Result<(), SimError> {
    let b = comm.bmsg();
    let mut off = lo_bit;
    let end = lo_bit + len;
    while off < end {
        let t = b.min(end - off);
        let chunk = crate::comm::slice_bits(payload, off, t);
        comm.send_raw(src, dst, &chunk, t)?;
        off += t;
    }
    Ok(())
}

pub fn sort_distributed(
    comm: &mut impl Comm,
    input: Vec<Vec<SortItem>>,
    key_bits: u32,
    val_bits: u32,
) -> Result<(SortOutput, SortStats), SimError> {
    let m = comm.size();
    assert_eq!(input.len() as u32, m + 1);
    assert!(key_bits <= 128 && val_bits <= 64);
    let alpha = comm.alpha();
    let b = comm.bmsg();
    let w_item = key_bits + val_bits;
    let d_max = crate::engine::ceil_log2(comm.real_n()).max(2);
    let s_samples = (OVERSAMPLE * d_max).min(96) as usize;

    let mut items: Vec<Vec<SortItem>> = input;
    for v in 1..=m {
        items[v as usize].sort_unstable();
    }
    let mut stats = SortStats { levels: 0, route_calls: 0 };
    let mut intervals: Vec<(u32, u32)> = vec![(1, m)];

    while intervals.iter().any(|&(lo, hi)| hi > lo) {
        stats.levels += 1;
        // --- paced binary sample-merge toward each interval leader ---
        let mut samples: Vec<Vec<SortItem>> =
            (0..=m).map(|v| subsample(&items[v as usize], s_samples)).collect();
        let max_len = intervals.iter().map(|&(lo, hi)| hi - lo + 1).max().unwrap();
        let tree_levels = 32 - (max_len - 1).leading_zeros();
        for t in 0..tree_levels {
            let stride = 1u32 << t;
            // encode each sender's current array once
            let mut enc_of: BTreeMap<u32, (Vec<u8>, u32)> = BTreeMap::new();
            let mut pairs: Vec<(u32, u32)> = Vec::new();
            for &(lo, hi) in &intervals {
                let len = hi - lo + 1;
                let mut pos = stride;
                while pos < len {
                    let src = lo + pos;
                    let dst = lo + pos - stride;
                    let mut w = BitWriter::new();
                    w.push(samples[src as usize].len() as u64, 8);
                    for it in &samples[src as usize] {
                        enc_item(it, key_bits, val_bits, &mut w);
                    }
                    let (payload, bits) = w.into_payload();
                    enc_of.insert(src, (payload, bits as u32));
                    pairs.push((src, dst));
                    pos += 2 * stride;
                }
            }
            let max_bits = enc_of.values().map(|&(_, bits)| bits).max().unwrap_or(0);
            let pace_rounds = max_bits.div_ceil(alpha * b).max(1);
            let mut acc = Streams::new();
            for r in 0..pace_rounds {
                for &(src, dst) in &pairs {
                    let (ref payload, bits) = enc_of[&src];
                    let lo_bit = r * alpha * b;
                    if lo_bit < bits {
                        let hi_bit = (lo_bit + alpha * b).min(bits);
                        send_slice(comm, src, dst, payload, lo_bit, hi_bit - lo_bit)?;
                    }
                }
                comm.advance()?;
                drain_all(comm, &mut acc);
            }
            for &(src, dst) in &pairs {
                let (buf, bits) = acc.remove(&(dst, src)).unwrap_or_default();
                let mut r = BitReader::new(&buf, bits as usize);
                let cnt = r.pull(8) as usize;
                let incoming: Vec<SortItem> =
                    (0..cnt).map(|_| dec_item(&mut r, key_bits, val_bits)).collect();
                let merged = merge(&samples[dst as usize], &incoming);
                samples[dst as usize] = subsample(&merged, s_samples);
            }
        }

        // --- splitters, then pipelined broadcast over each interval ---
        let mut splitters_of: Vec<Vec<SortItem>> = Vec::with_capacity(intervals.len());
        let mut d_of: Vec<u32> = Vec::with_capacity(intervals.len());
        for &(lo, hi) in &intervals {
            let len = hi - lo + 1;
            let d = d_max.min(len);
            let s = &samples[lo as usize];
            let spl: Vec<SortItem> = if len == 1 || s.is_empty() {
                Vec::new()
            } else {
                (1..d).map(|j| s[(j as usize * s.len()) / d as usize]).collect()
            };
            splitters_of.push(spl);
            d_of.push(d);
        }
        let spl_recv = broadcast_multi(comm, &intervals, &splitters_of, key_bits, val_bits)?;

        // --- per-bucket counting scan for balanced targets ---
        let mut counts: Vec<Vec<u32>> = vec![Vec::new(); m as usize + 1];
        let mut bucket_of: Vec<Vec<u32>> = vec![Vec::new(); m as usize + 1];
        for (ii, &(lo, hi)) in intervals.iter().enumerate() {
            let d = d_of[ii];
            for v in lo..=hi {
                let spl = &spl_recv[v as usize];
                debug_assert_eq!(spl, &splitters_of[ii]);
                let mut c = vec![0u32; d as usize];
                let bks: Vec<u32> = items[v as usize]
                    .iter()
                    .map(|it| {
                        let bk = spl.partition_point(|s| s <= it) as u32;
                        c[bk as usize] += 1;
                        bk
                    })
                    .collect();
                counts[v as usize] = c;
                bucket_of[v as usize] = bks;
            }
        }
        let (offsets, totals) = scan_counts_multi(comm, &intervals, &counts, &d_of)?;

        // --- route items to their bucket's sub-interval, balanced ---
        let mut outbox: Vec<Vec<RouteRecord>> = vec![Vec::new(); m as usize + 1];
        let mut subs: Vec<(u32, u32)> = Vec::new();
        for (ii, &(lo, hi)) in intervals.iter().enumerate() {
            let len = hi - lo + 1;
            let d = d_of[ii];
            let base = len / d;
            let rem = len % d;
            let mut sub_lo = lo;
            let mut sub_bounds = Vec::with_capacity(d as usize);
            for j in 0..d {
                let sl = base + u32::from(j < rem);
                sub_bounds.push((sub_lo, sub_lo + sl - 1));
                sub_lo += sl;
            }
            for v in lo..=hi {
                let mut cur = offsets[v as usize].clone();
                for (t, it) in items[v as usize].iter().enumerate() {
                    let bk = bucket_of[v as usize][t] as usize;
                    let rank = cur[bk];
                    cur[bk] += 1;
                    let (slo, shi) = sub_bounds[bk];
                    let size = (shi - slo + 1) as u64;
                    let per = totals[ii][bk].div_ceil(size).max(1);
                    let target = slo + ((rank / per) as u32).min(size as u32 - 1);
                    let mut w = BitWriter::with_capacity(w_item as usize);
                    enc_item(it, key_bits, val_bits, &mut w);
                    let (payload, bits) = w.into_payload();
                    outbox[v as usize].push(RouteRecord {
                        dst: target,
                        payload,
                        bits: bits as u32,
                    });
                }
                items[v as usize].clear();
            }
            if len > 1 {
                subs.extend(sub_bounds);
            } else {
                subs.push((lo, hi));
            }
        }
        let a = route_width(&outbox, comm)?;
        let (delivered, _) = route(comm, outbox, a)?;
        stats.route_calls += 1;
        for v in 1..=m {
            items[v as usize] = delivered[v as usize]
                .iter()
                .map(|dl| {
                    let mut r = BitReader::new(&dl.payload, dl.bits as usize);
                    dec_item(&mut r, key_bits, val_bits)
                })
                .collect();
            items[v as usize].sort_unstable();
        }
        intervals = subs;
    }

    // --- exact rebalance to contiguous rank ranges ---
    let counts: Vec<Vec<u32>> =
        (0..=m).map(|v| vec![items[v as usize].len() as u32]).collect();
    let (offsets, totals) = scan_counts_multi(comm, &[(1, m)], &counts, &[1])?;
    let total = totals[0][0];
    let per = total / m as u64;
    let extra = (total % m as u64) as u32;
    // node i (1-based) holds ranks [start(i), start(i+1))
    let start = |node: u32| -> u64 {
        let i = node as u64 - 1;
        i * per + i.min(extra as u64)
    };
    let owner_of_rank = |rank: u64| -> u32 {
        let fat = (per + 1) * extra as u64;
        if rank < fat {
            (rank / (per + 1)) as u32 + 1
        } else if per > 0 {
            ((rank - fat) / per) as u32 + extra + 1
        } else {
            m
        }
    };
    let mut outbox: Vec<Vec<RouteRecord>> = vec![Vec::new(); m as usize + 1];
    for v in 1..=m {
        for (t, it) in items[v as usize].iter().enumerate() {
            let rank = offsets[v as usize][0] + t as u64;
            let mut w = BitWriter::with_capacity(w_item as usize);
            enc_item(it, key_bits, val_bits, &mut w);
            let (payload, bits) = w.into_payload();
            outbox[v as usize].push(RouteRecord {
                dst: owner_of_rank(rank),
                payload,
                bits: bits as u32,
            });
        }
        items[v as usize].clear();
    }
    let a = route_width(&outbox, comm)?;
    let (delivered, _) = route(comm, outbox, a)?;
    stats.route_calls += 1;
    let mut out_items: Vec<Vec<SortItem>> = vec![Vec::new(); m as usize + 1];
    let mut start_rank = vec![0u64; m as usize + 1];
    for v in 1..=m {
        out_items[v as usize] = delivered[v as usize]
            .iter()
            .map(|dl| {
                let mut r = BitReader::new(&dl.payload, dl.bits as usize);
                dec_item(&mut r, key_bits, val_bits)
            })
            .collect();
        out_items[v as usize].sort_unstable();
        start_rank[v as usize] = start(v);
    }
    Ok((SortOutput { items: out_items, start_rank, total }, stats))
}

/// Smallest `a` such that every node's sent and received fragment load fits
/// in a * alpha, from the orchestrator's global view of the outbox.
pub(crate) fn route_width(
    outbox: &[Vec<RouteRecord>],
    comm: &impl Comm,
) -> Result<u32, SimError> {
    let b = comm.bmsg();
    let s_bits = crate::bits::width_for(comm.size() as u64) as u32;
    let f_bits = b.saturating_sub(2 * s_bits + 10);
    if f_bits < 8 {
        return Err(SimError::CapacityExceeded {
            what: "unit message width for routing".into(),
            got: b as u64,
            limit: (2 * s_bits + 18) as u64,
        });
    }
    let mut per_src = vec![0u64; outbox.len()];
    let mut per_dst = vec![0u64; outbox.len()];
    for (src, recs) in outbox.iter().enumerate() {
        // per-(src,dst) streams share fragments; counting per record only
        // overestimates, which is safe here
        for r in recs {
            let f = ((r.bits + 16).div_ceil(f_bits)).max(1) as u64;
            per_src[src] += f;
            per_dst[r.dst as usize] += f;
        }
    }
    let max = per_src.iter().chain(per_dst.iter()).copied().max().unwrap_or(0);
    Ok(max.div_ceil(comm.alpha() as u64).max(1) as u32)
}

/// Pipelined broadcast of per-interval item arrays from each interval
/// leader, all intervals in lockstep. Returns the array each node decoded
/// from its received chunks (leaders keep their own).
fn broadcast_multi(
    comm: &mut impl Comm,
    intervals: &[(u32, u32)],
    payload_of: &[Vec<SortItem>],
    kb: u32,
    vb: u32,
) -> Result<Vec<Vec<SortItem>>, SimError> {
    let b = comm.bmsg();
    let alpha = comm.alpha();
    let m = comm.size();
    let encoded: Vec<(Vec<u8>, u32)> = payload_of
        .iter()
        .map(|spl| {
            let mut w = BitWriter::new();
            w.push(spl.len() as u64, 8);
            for it in spl {
                enc_item(it, kb, vb, &mut w);
            }
            let (p, bits) = w.into_payload();
            (p, bits as u32)
        })
        .collect();
    let max_units = encoded.iter().map(|(_, bits)| bits.div_ceil(b).max(1)).max().unwrap_or(1);
    let max_len = intervals.iter().map(|&(lo, hi)| hi - lo + 1).max().unwrap_or(1);
    let depth_for = |beta: u32| -> u32 {
        let mut depth = 0;
        let mut span = 1u64;
        while span < max_len as u64 {
            span *= beta as u64;
            depth += 1;
        }
        depth.max(1)
    };
    // a relay can be a parent at up to depth levels in one round, sending
    // beta - 1 chunks at each; keep that inside the send budget
    let mut beta = crate::collective::default_beta(comm);
    while beta > 2 && (beta - 1) * depth_for(beta) > alpha {
        beta -= 1;
    }
    let depth = depth_for(beta);

    let mut have: Vec<u32> = vec![0; m as usize + 1];
    let mut acc: Vec<(Vec<u8>, u32)> = vec![(Vec::new(), 0); m as usize + 1];
    for &(lo, _) in intervals {
        have[lo as usize] = max_units;
    }
    let total_steps = depth + max_units - 1;
    for step in 0..total_steps {
        for (ii, &(lo, hi)) in intervals.iter().enumerate() {
            let len = hi - lo + 1;
            if len == 1 {
                continue;
            }
            let (ref payload, bits) = encoded[ii];
            let units = bits.div_ceil(b).max(1);
            for l in (1..=depth).rev() {
                let lvl_step = depth - l;
                if step < lvl_step {
                    continue;
                }
                let t = step - lvl_step;
                if t >= units {
                    continue;
                }
                let stride = (beta as u64).pow(l);
                let child_stride = (beta as u64).pow(l - 1);
                let w_parent = (len as u64).div_ceil(stride);
                let w_child = (len as u64).div_ceil(child_stride);
                for j in 0..w_parent {
                    let ppos = j * stride;
                    if have[(lo + ppos as u32) as usize] <= t {
                        continue;
                    }
                    let src = lo + ppos as u32;
                    for k in 1..beta as u64 {
                        let cj = j * beta as u64 + k;
                        if cj >= w_child {
                            break;
                        }
                        let dst = lo + (cj * child_stride) as u32;
                        let lo_bit = t * b;
                        let hi_bit = (lo_bit + b).min(bits);
                        send_slice(comm, src, dst, payload, lo_bit, hi_bit - lo_bit)?;
                    }
                }
            }
        }
        comm.advance()?;
        for dst in 1..=m {
            for msg in comm.take_inbox(dst) {
                let (buf, bits) = &mut acc[dst as usize];
                append_bits(buf, bits, &msg.payload, msg.bits);
                have[dst as usize] += 1;
            }
        }
    }
    // decode what each node received over the wire
    let mut out: Vec<Vec<SortItem>> = vec![Vec::new(); m as usize + 1];
    for (ii, &(lo, hi)) in intervals.iter().enumerate() {
        out[lo as usize] = payload_of[ii].clone();
        for v in lo + 1..=hi {
            let (buf, bits) = &acc[v as usize];
            let mut r = BitReader::new(buf, *bits as usize);
            let cnt = r.pull(8) as usize;
            out[v as usize] = (0..cnt).map(|_| dec_item(&mut r, kb, vb)).collect();
        }
    }
    Ok(out)
}

/// Exclusive prefix scan of per-node count vectors within each interval, all
/// in lockstep. Returns (offsets per node as u64, totals per interval).
pub(crate) fn scan_counts_multi(
    comm: &mut impl Comm,
    intervals: &[(u32, u32)],
    counts: &[Vec<u32>],
    d_of: &[u32],
) -> Result<(Vec<Vec<u64>>, Vec<Vec<u64>>), SimError> {
    let alpha = comm.alpha();
    let b = comm.bmsg();
    let d_max = d_of.iter().copied().max().unwrap_or(1);
    let width = d_max * 34; // 34-bit counters cover any aggregate load here
    let units = width.div_ceil(b).max(1);
    // fanout the budget affords: (beta - 1) * units <= alpha / 2
    let beta = (alpha / (2 * units).max(1)).clamp(2, crate::collective::default_beta(comm));
    let max_len = intervals.iter().map(|&(lo, hi)| hi - lo + 1).max().unwrap_or(1);
    let mut depth = 0;
    {
        let mut span = 1u64;
        while span < max_len as u64 {
            span *= beta as u64;
            depth += 1;
        }
        depth = depth.max(1);
    }
    let pace_rounds = units.div_ceil(alpha).max(1);

    let enc = |vals: &[u64], w: &mut BitWriter| {
        for &v in vals {
            w.push(v & ((1 << 34) - 1), 34);
        }
    };
    let dec = |r: &mut BitReader, d: u32| -> Vec<u64> { (0..d).map(|_| r.pull(34)).collect() };

    // sums[ii][l][j]: subtree sums per interval, level, level-index
    let mut sums: Vec<Vec<Vec<Vec<u64>>>> = Vec::with_capacity(intervals.len());
    for (ii, &(lo, hi)) in intervals.iter().enumerate() {
        let d = d_of[ii] as usize;
        let level0: Vec<Vec<u64>> = (lo..=hi)
            .map(|v| {
                let c = &counts[v as usize];
                (0..d).map(|k| c.get(k).copied().unwrap_or(0) as u64).collect()
            })
            .collect();
        sums.push(vec![level0]);
    }

    // up-sweep in lockstep
    for l in 0..depth {
        let mut acc = Streams::new();
        for r in 0..pace_rounds {
            for (ii, &(lo, hi)) in intervals.iter().enumerate() {
                let len = (hi - lo + 1) as u64;
                let w_l = len.div_ceil((beta as u64).pow(l));
                for j in 0..w_l {
                    if j % beta as u64 != 0 {
                        let src = lo + (j * (beta as u64).pow(l)) as u32;
                        let dst = lo + ((j / beta as u64) * (beta as u64).pow(l + 1)) as u32;
                        let mut w = BitWriter::new();
                        enc(&sums[ii][l as usize][j as usize], &mut w);
                        let (payload, bits) = w.into_payload();
                        let bits = bits as u32;
                        let lo_bit = r * alpha * b;
                        if lo_bit < bits {
                            let hi_bit = (lo_bit + alpha * b).min(bits);
                            send_slice(comm, src, dst, &payload, lo_bit, hi_bit - lo_bit)?;
                        }
                    }
                }
            }
            comm.advance()?;
            drain_all(comm, &mut acc);
        }
        for (ii, &(lo, hi)) in intervals.iter().enumerate() {
            let d = d_of[ii];
            let len = (hi - lo + 1) as u64;
            let w_l = len.div_ceil((beta as u64).pow(l));
            let w_up = len.div_ceil((beta as u64).pow(l + 1));
            let mut next: Vec<Vec<u64>> = (0..w_up)
                .map(|j| sums[ii][l as usize][(j * beta as u64) as usize].clone())
                .collect();
            for j in 0..w_l {
                if j % beta as u64 != 0 {
                    let src = lo + (j * (beta as u64).pow(l)) as u32;
                    let dst = lo + ((j / beta as u64) * (beta as u64).pow(l + 1)) as u32;
                    let (buf, bits) = acc.remove(&(dst, src)).unwrap_or_default();
                    let mut rd = BitReader::new(&buf, bits as usize);
                    let kid = dec(&mut rd, d);
                    let up = &mut next[(j / beta as u64) as usize];
                    for k in 0..d as usize {
                        up[k] += kid[k];
                    }
                }
            }
            sums[ii].push(next);
        }
    }

    let totals: Vec<Vec<u64>> = (0..intervals.len())
        .map(|ii| sums[ii][depth as usize][0].clone())
        .collect();

    // down-sweep in lockstep
    let mut pref: Vec<Vec<Vec<u64>>> =
        (0..intervals.len()).map(|ii| vec![vec![0u64; d_of[ii] as usize]]).collect();
    for l in (0..depth).rev() {
        // parents compute each child's exclusive prefix, then send
        let mut staged: Vec<Vec<Option<Vec<u64>>>> = Vec::with_capacity(intervals.len());
        for (ii, &(lo, hi)) in intervals.iter().enumerate() {
            let d = d_of[ii] as usize;
            let len = (hi - lo + 1) as u64;
            let w_l = len.div_ceil((beta as u64).pow(l));
            let w_up = len.div_ceil((beta as u64).pow(l + 1));
            let mut next: Vec<Option<Vec<u64>>> = vec![None; w_l as usize];
            for j in 0..w_up {
                let mut acc_pref = pref[ii][j as usize].clone();
                for k in 0..beta as u64 {
                    let cj = j * beta as u64 + k;
                    if cj >= w_l {
                        break;
                    }
                    next[cj as usize] = Some(acc_pref.clone());
                    for t in 0..d {
                        acc_pref[t] += sums[ii][l as usize][cj as usize][t];
                    }
                }
            }
            staged.push(next);
        }
        let mut acc = Streams::new();
        for r in 0..pace_rounds {
            for (ii, &(lo, hi)) in intervals.iter().enumerate() {
                let len = (hi - lo + 1) as u64;
                let w_l = len.div_ceil((beta as u64).pow(l));
                let w_up = len.div_ceil((beta as u64).pow(l + 1));
                for j in 0..w_up {
                    let src = lo + (j * (beta as u64).pow(l + 1)) as u32;
                    for k in 1..beta as u64 {
                        let cj = j * beta as u64 + k;
                        if cj >= w_l {
                            break;
                        }
                        let dst = lo + (cj * (beta as u64).pow(l)) as u32;
                        let val = staged[ii][cj as usize].as_ref().expect("staged").clone();
                        let mut w = BitWriter::new();
                        enc(&val, &mut w);
                        let (payload, bits) = w.into_payload();
                        let bits = bits as u32;
                        let lo_bit = r * alpha * b;
                        if lo_bit < bits {
                            let hi_bit = (lo_bit + alpha * b).min(bits);
                            send_slice(comm, src, dst, &payload, lo_bit, hi_bit - lo_bit)?;
                        }
                    }
                }
            }
            comm.advance()?;
            drain_all(comm, &mut acc);
        }
        for (ii, &(lo, hi)) in intervals.iter().enumerate() {
            let d = d_of[ii];
            let len = (hi - lo + 1) as u64;
            let w_l = len.div_ceil((beta as u64).pow(l));
            let w_up = len.div_ceil((beta as u64).pow(l + 1));
            let mut next = std::mem::take(&mut staged[ii]);
            for j in 0..w_up {
                let src = lo + (j * (beta as u64).pow(l + 1)) as u32;
                for k in 1..beta as u64 {
                    let cj = j * beta as u64 + k;
                    if cj >= w_l {
                        break;
                    }
                    let dst = lo + (cj * (beta as u64).pow(l)) as u32;
                    let (buf, bits) = acc.remove(&(dst, src)).unwrap_or_default();
                    let mut rd = BitReader::new(&buf, bits as usize);
                    next[cj as usize] = Some(dec(&mut rd, d));
                }
            }
            pref[ii] = next.into_iter().map(|v| v.unwrap()).collect();
        }
    }

    // per-node offsets come from the level-0 prefixes
    let mut offsets: Vec<Vec<u64>> = vec![Vec::new(); counts.len()];
    for (ii, &(lo, hi)) in intervals.iter().enumerate() {
        for v in lo..=hi {
            offsets[v as usize] = pref[ii][(v - lo) as usize].clone();
        }
    }
    Ok((offsets, totals))
}
