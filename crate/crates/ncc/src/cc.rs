//! Connected components and spanning forests over distributed edge lists,
//! via randomized hook-and-contract with a star-flattening doubling step.
//!
//! Vertex v's parent pointer lives at owner ((v-1) mod m) + 1. All fan-in
//! reads go through `sort_join`: table records and queries are sorted
//! together, a segment-fill scan carries the in-effect table entry across
//! node boundaries, and answers route back to the askers. Each iteration
//! joins the edge endpoints against the parent table, flips one shared
//! pairwise-hashed coin per root (seed broadcast once from node 1), hooks
//! tail roots onto head neighbors (winner per root = lowest new label),
//! then flattens with one more join. Components merge with constant
//! probability per iteration, so O(log n) iterations suffice w.h.p.

use rand::Rng;

use crate::bits::{width_for, BitReader, BitWriter};
use crate::collective::{broadcast, default_beta, prefix_scan, reduce};
use crate::comm::Comm;
use crate::engine::SimError;
use crate::field::{self, P};
use crate::route::{route, RouteRecord};
use crate::sort::{route_width, sort_distributed, SortItem};

/// Distributed hash join: every query key must appear in the table exactly
/// once; answers (tag, value) route back to the node that issued the query.
pub fn sort_join(
    comm: &mut impl Comm,
    table: &[Vec<(u64, u64)>],
    queries: &[Vec<(u64, u64)>],
    key_bits: u32,
    value_bits: u32,
    tag_bits: u32,
) -> Result<Vec<Vec<(u64, u64)>>, SimError> {
    let m = comm.size();
    let m_bits = width_for(m as u64) as u32;
    assert!(value_bits.max(m_bits + tag_bits) <= 64);
    let mut items: Vec<Vec<SortItem>> = vec![Vec::new(); m as usize + 1];
    for v in 1..=m {
        for &(k, val) in &table[v as usize] {
            items[v as usize].push(SortItem { key: (k as u128) << 1, val });
        }
        for &(k, tag) in &queries[v as usize] {
            debug_assert!(tag < 1 << tag_bits);
            items[v as usize].push(SortItem {
                key: ((k as u128) << 1) | 1,
                val: ((v as u64) << tag_bits) | tag,
            });
        }
    }
    let val_bits = value_bits.max(m_bits + tag_bits);
    let (sorted, _) = sort_distributed(comm, items, key_bits + 1, val_bits)?;

    // carry the last table record across node boundaries
    type Seg = Option<(u64, u64)>;
    let vals: Vec<Seg> = (1..=m)
        .map(|v| {
            sorted.items[v as usize]
                .iter()
                .rev()
                .find(|it| it.key & 1 == 0)
                .map(|it| ((it.key >> 1) as u64, it.val))
        })
        .collect();
    let seg_w = 1 + key_bits + value_bits;
    let units = comm.units_for(2 * seg_w);
    let beta = (comm.alpha() / units).clamp(2, default_beta(comm));
    let (prefixes, _) = prefix_scan(
        comm,
        1,
        m,
        &vals,
        None,
        |a: &Seg, b: &Seg| if b.is_some() { *b } else { *a },
        seg_w,
        |v, w| match v {
            Some((k, val)) => {
                w.push(1, 1);
                w.push(*k, key_bits as usize);
                w.push(*val, value_bits as usize);
            }
            None => w.push(0, (1 + key_bits + value_bits) as usize),
        },
        |r| {
            if r.pull(1) == 1 {
                Some((r.pull(key_bits as usize), r.pull(value_bits as usize)))
            } else {
                let _ = (r.pull(key_bits as usize), r.pull(value_bits as usize));
                None
            }
        },
        beta,
    )?;

    // answer queries locally, route answers home
    let mut outbox: Vec<Vec<RouteRecord>> = vec![Vec::new(); m as usize + 1];
    for v in 1..=m {
        let mut cur = prefixes[(v - 1) as usize];
        for it in &sorted.items[v as usize] {
            let k = (it.key >> 1) as u64;
            if it.key & 1 == 0 {
                debug_assert!(cur.map_or(true, |(ck, _)| ck != k), "duplicate table key {k}");
                cur = Some((k, it.val));
            } else {
                let (ck, cv) = cur.expect("query key missing from table");
                assert_eq!(ck, k, "query key {k} missing from table");
                let asker = (it.val >> tag_bits) as u32;
                let tag = it.val & ((1 << tag_bits) - 1);
                let mut w = BitWriter::new();
                w.push(tag, tag_bits as usize);
                w.push(cv, value_bits as usize);
                let (payload, bits) = w.into_payload();
                outbox[v as usize].push(RouteRecord { dst: asker, payload, bits: bits as u32 });
            }
        }
    }
    let a = route_width(&outbox, comm)?;
    let (delivered, _) = route(comm, outbox, a)?;
    let mut answers: Vec<Vec<(u64, u64)>> = vec![Vec::new(); m as usize + 1];
    for v in 1..=m {
        for dl in &delivered[v as usize] {
            let mut r = BitReader::new(&dl.payload, dl.bits as usize);
            let tag = r.pull(tag_bits as usize);
            let value = r.pull(value_bits as usize);
            answers[v as usize].push((tag, value));
        }
    }
    Ok(answers)
}

fn owner(v: u32, m: u32) -> u32 {
    (v - 1) % m + 1
}

struct HookOutcome {
    labels: Vec<u32>,
    forest: Vec<Vec<(u32, u32)>>,
}

fn hook_and_contract(
    comm: &mut impl Comm,
    vertices: u32,
    edges: &[Vec<(u32, u32)>],
) -> Result<HookOutcome, SimError> {
    let m = comm.size();
    assert_eq!(edges.len() as u32, m + 1);
    let v_bits = width_for(vertices as u64) as u32;
    let m_bits = width_for(m as u64) as u32;
    let max_slots = edges.iter().map(|e| e.len()).max().unwrap_or(0) as u64;
    let tag_bits = width_for((2 * max_slots + 1).max(1)) as u32;
    let slot_bits = width_for(max_slots.max(1)) as u32;
    let beta = default_beta(comm);

    // shared coin material: node 1 broadcasts one seed word
    let seed = comm.node_rng(1).gen::<u64>();
    let mut w = BitWriter::new();
    w.push(seed, 64);
    let (payload, bits) = w.into_payload();
    let seed_wire = broadcast(comm, 1, m, &payload, bits as u32, beta)?;
    let seed = {
        let mut r = BitReader::new(&seed_wire, 64);
        r.pull(64)
    };

    let mut parent: Vec<u32> = (0..=vertices).collect();
    let mut forest: Vec<Vec<(u32, u32)>> = vec![Vec::new(); m as usize + 1];
    let cap = 4 * crate::engine::ceil_log2(vertices.max(2)) + 16;
    let mut iterations = 0;

    loop {
        if iterations >= cap {
            return Err(SimError::RetryExhausted { attempts: cap });
        }
        iterations += 1;

        // per-iteration pairwise coin on roots, identical at every node
        let (ca, cb) = {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ iterations as u64);
            let a = rng.gen_range(1..P);
            let b = rng.gen_range(0..P);
            (a, b)
        };
        let coin = |r: u32| -> bool {
            field::add(field::mul(ca, r as u64), cb) & 1 == 1 // true = head
        };

        // join 1: edge endpoints -> labels
        let table: Vec<Vec<(u64, u64)>> = (0..=m)
            .map(|w| {
                if w == 0 {
                    return Vec::new();
                }
                (w..=vertices)
                    .step_by(m as usize)
                    .map(|v| (v as u64, parent[v as usize] as u64))
                    .collect()
            })
            .collect();
        let mut queries: Vec<Vec<(u64, u64)>> = vec![Vec::new(); m as usize + 1];
        for v in 1..=m {
            for (slot, &(x, y)) in edges[v as usize].iter().enumerate() {
                queries[v as usize].push((x as u64, (slot as u64) << 1));
                queries[v as usize].push((y as u64, ((slot as u64) << 1) | 1));
            }
        }
        let answers = sort_join(comm, &table, &queries, v_bits, v_bits, tag_bits)?;
        let mut lab: Vec<Vec<(u32, u32)>> =
            (0..=m).map(|v| vec![(0, 0); edges[v as usize].len()]).collect();
        for v in 1..=m {
            for &(tag, value) in &answers[v as usize] {
                let slot = (tag >> 1) as usize;
                if tag & 1 == 0 {
                    lab[v as usize][slot].0 = value as u32;
                } else {
                    lab[v as usize][slot].1 = value as u32;
                }
            }
        }

        // any cross edge left? reduce an OR, then share the verdict
        let cross_bits: Vec<u64> = (0..m)
            .map(|i| {
                u64::from(lab[i as usize + 1].iter().any(|&(lx, ly)| lx != ly && lx != 0))
            })
            .collect();
        let any_cross = reduce(
            comm,
            1,
            m,
            &cross_bits,
            |a, b| a | b,
            1,
            |v, w| w.push(*v, 1),
            |r| r.pull(1),
            beta,
        )?;
        let verdict = broadcast(comm, 1, m, &[any_cross as u8], 1, beta)?;
        if verdict[0] & 1 == 0 {
            break;
        }

        // proposals: tail roots hook onto head neighbors
        let mut proposals: Vec<Vec<SortItem>> = vec![Vec::new(); m as usize + 1];
        for v in 1..=m {
            for (slot, &(lx, ly)) in lab[v as usize].iter().enumerate() {
                if lx == ly || lx == 0 {
                    continue;
                }
                let (target, newp) = if !coin(lx) && coin(ly) {
                    (lx, ly)
                } else if !coin(ly) && coin(lx) {
                    (ly, lx)
                } else {
                    continue;
                };
                proposals[v as usize].push(SortItem {
                    key: ((target as u128) << v_bits) | newp as u128,
                    val: ((v as u64) << slot_bits) | slot as u64,
                });
            }
        }
        let (sorted, _) = sort_distributed(comm, proposals, 2 * v_bits, m_bits + slot_bits)?;

        // winner per target = first item of its run; runs can span nodes
        type Last = Option<u64>;
        let last_target: Vec<Last> = (1..=m)
            .map(|v| sorted.items[v as usize].last().map(|it| (it.key >> v_bits) as u64))
            .collect();
        let seg_w = 1 + v_bits;
        let units = comm.units_for(2 * seg_w);
        let sbeta = (comm.alpha() / units).clamp(2, beta);
        let (prefixes, _) = prefix_scan(
            comm,
            1,
            m,
            &last_target,
            None,
            |a: &Last, b: &Last| if b.is_some() { *b } else { *a },
            seg_w,
            |v, w| match v {
                Some(t) => {
                    w.push(1, 1);
                    w.push(*t, v_bits as usize);
                }
                None => w.push(0, (1 + v_bits) as usize),
            },
            |r| {
                if r.pull(1) == 1 {
                    Some(r.pull(v_bits as usize))
                } else {
                    let _ = r.pull(v_bits as usize);
                    None
                }
            },
            sbeta,
        )?;

        // winners: notify the target's owner (apply hook) and the edge's
        // holder (forest membership)
        let mut outbox: Vec<Vec<RouteRecord>> = vec![Vec::new(); m as usize + 1];
        for v in 1..=m {
            let mut prev = prefixes[(v - 1) as usize];
            for it in &sorted.items[v as usize] {
                let target = (it.key >> v_bits) as u64;
                if prev != Some(target) {
                    let newp = (it.key as u64) & ((1 << v_bits) - 1);
                    let holder = (it.val >> slot_bits) as u32;
                    let slot = it.val & ((1 << slot_bits) - 1);
                    let mut w = BitWriter::new();
                    w.push(0, 1);
                    w.push(target, v_bits as usize);
                    w.push(newp, v_bits as usize);
                    let (payload, bits) = w.into_payload();
                    outbox[v as usize].push(RouteRecord {
                        dst: owner(target as u32, m),
                        payload,
                        bits: bits as u32,
                    });
                    let mut w = BitWriter::new();
                    w.push(1, 1);
                    w.push(slot, slot_bits as usize);
                    let (payload, bits) = w.into_payload();
                    outbox[v as usize].push(RouteRecord {
                        dst: holder,
                        payload,
                        bits: bits as u32,
                    });
                }
                prev = Some(target);
            }
        }
        let a = route_width(&outbox, comm)?;
        let (delivered, _) = route(comm, outbox, a)?;
        for v in 1..=m {
            for dl in &delivered[v as usize] {
                let mut r = BitReader::new(&dl.payload, dl.bits as usize);
                if r.pull(1) == 0 {
                    let target = r.pull(v_bits as usize) as u32;
                    let newp = r.pull(v_bits as usize) as u32;
                    debug_assert_eq!(owner(target, m), v);
                    debug_assert_eq!(parent[target as usize], target, "hook on non-root");
                    parent[target as usize] = newp;
                } else {
                    let slot = r.pull(slot_bits as usize) as usize;
                    forest[v as usize].push(edges[v as usize][slot]);
                }
            }
        }

        // join 2: flatten back to stars (depth was at most 2)
        let table: Vec<Vec<(u64, u64)>> = (0..=m)
            .map(|w| {
                if w == 0 {
                    return Vec::new();
                }
                (w..=vertices)
                    .step_by(m as usize)
                    .map(|v| (v as u64, parent[v as usize] as u64))
                    .collect()
            })
            .collect();
        let queries: Vec<Vec<(u64, u64)>> = (0..=m)
            .map(|w| {
                if w == 0 {
                    return Vec::new();
                }
                (w..=vertices)
                    .step_by(m as usize)
                    .map(|v| (parent[v as usize] as u64, v as u64))
                    .collect()
            })
            .collect();
        let answers = sort_join(comm, &table, &queries, v_bits, v_bits, v_bits)?;
        for v in 1..=m {
            for &(tag, value) in &answers[v as usize] {
                debug_assert_eq!(owner(tag as u32, m), v);
                parent[tag as usize] = value as u32;
            }
        }
    }

    Ok(HookOutcome { labels: parent, forest })
}

/// Component labels for vertices 1..=vertices; label(v) is the id of one
/// member of v's component, equal across a component.
pub fn pram_cc(
    comm: &mut impl Comm,
    vertices: u32,
    edges: &[Vec<(u32, u32)>],
) -> Result<Vec<u32>, SimError> {
    Ok(hook_and_contract(comm, vertices, edges)?.labels)
}

/// A spanning forest of the input edges, returned per holding node, plus the
/// component labels.
pub fn pram_sf(
    comm: &mut impl Comm,
    vertices: u32,
    edges: &[Vec<(u32, u32)>],
) -> Result<(Vec<u32>, Vec<Vec<(u32, u32)>>), SimError> {
    let out = hook_and_contract(comm, vertices, edges)?;
    Ok((out.labels, out.forest))
}
