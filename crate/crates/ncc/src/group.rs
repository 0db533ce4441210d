//! Multicast and aggregation over communication trees spanning disjoint
//! node sets.
//!
//! Each set gets a d-ary tree: root = leader, leaves = the members in id
//! order, internal nodes = virtual ids n+1..=2n hosted on real node
//! (id - n). One virtual id per set covers every internal level at its
//! index, so ceil(s/d) virtual ids per set suffice and the global pool of
//! n is never exhausted. Payloads flow one level per routed phase, with
//! all trees in lockstep; pipelining streams x waves in x + depth - 1
//! phases. A convergecast ack (leaf counts summed upward) tells leaders a
//! multicast reached all members.

use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;

use crate::bits::{width_for, BitReader, BitWriter};
use crate::cc::sort_join;
use crate::collective::{default_beta, prefix_scan};
use crate::comm::{append_bits, slice_bits, Comm, Transport};
use crate::engine::{ceil_log2, SimError};
use crate::route::{route, route_via, RouteRecord};
use crate::sort::{route_width, sort_distributed, SortItem};

/// Disjoint node sets, each with a designated leader inside it.
#[derive(Debug, Clone)]
pub struct Partition {
    pub sets: Vec<Vec<u32>>,
    pub leaders: Vec<u32>,
}

impl Partition {
    pub fn new(sets: Vec<Vec<u32>>, leaders: Vec<u32>) -> Result<Self, SimError> {
        assert_eq!(sets.len(), leaders.len());
        let mut seen = BTreeSet::new();
        for (i, set) in sets.iter().enumerate() {
            assert!(!set.is_empty(), "empty set {i}");
            for &x in set {
                if !seen.insert(x) {
                    return Err(SimError::PartitionOverlap { node: x });
                }
            }
            assert!(set.contains(&leaders[i]), "leader {} outside set {i}", leaders[i]);
        }
        Ok(Self { sets, leaders })
    }

    /// One set holding every node, led by node 1.
    pub fn whole(n: u32) -> Self {
        Self { sets: vec![(1..=n).collect()], leaders: vec![1] }
    }

    pub fn singletons(n: u32) -> Self {
        Self { sets: (1..=n).map(|v| vec![v]).collect(), leaders: (1..=n).collect() }
    }

    /// Group nodes by label; the label value doubles as the leader id, so
    /// labels[l] == l must hold for every used label. Label 0 = in no set.
    pub fn from_labels(labels: &[u32]) -> Result<Self, SimError> {
        let mut groups: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (v, &l) in labels.iter().enumerate().skip(1) {
            if l != 0 {
                groups.entry(l).or_default().push(v as u32);
            }
        }
        for (&l, members) in &groups {
            assert!(members.contains(&l), "label {l} is not a member of its own set");
        }
        let leaders: Vec<u32> = groups.keys().copied().collect();
        Self::new(groups.into_values().collect(), leaders)
    }
}

/// Largest payload a single tree message may carry.
pub fn max_payload_bits(comm: &impl Comm) -> u32 {
    let lg = ceil_log2(comm.real_n());
    (lg * lg / 2).max(1)
}

/// Tree fanout for c-bit payloads.
pub fn fanout(comm: &impl Comm, c_bits: u32) -> u32 {
    let lg = ceil_log2(comm.real_n());
    (lg * lg / c_bits.max(1)).max(2)
}

/// widths[level] = node count at that level; widths[0] = 1 (root),
/// widths[depth] = s (leaves).
pub(crate) fn level_widths(s: u64, d: u32) -> Vec<u64> {
    let mut ws = vec![s];
    while *ws.last().unwrap() > 1 {
        ws.push(ws.last().unwrap().div_ceil(d as u64));
    }
    ws.reverse();
    ws
}

fn depth_for(s: u64, d: u32) -> u32 {
    level_widths(s, d).len() as u32 - 1
}

#[derive(Debug, Clone)]
struct MemberRole {
    leader: u32,
    leaf_index: u64,
    s: u64,
    base: u32,
}

#[derive(Debug, Clone)]
struct HostRole {
    leader: u32,
    s: u64,
    base: u32,
    k: u64,
    /// (leaf index, member id), sorted; children of this id's level-(D-1)
    /// role.
    leaf_children: Vec<(u64, u32)>,
}

#[derive(Debug, Clone)]
struct LeaderRole {
    set_idx: usize,
    s: u64,
    base: u32,
    /// Filled only when depth == 1 (members hang off the root directly).
    leaf_children: Vec<(u64, u32)>,
}

#[derive(Debug, Clone, Default)]
struct NodeView {
    member: Option<MemberRole>,
    host: Option<HostRole>,
    leader: Option<LeaderRole>,
}

#[derive(Debug)]
pub struct CommTrees {
    pub c_bits: u32,
    pub d: u32,
    n: u32,
    views: Vec<NodeView>,
    leaders: Vec<u32>,
    lvl_bits: u32,
    max_depth: u32,
}

impl CommTrees {
    pub fn set_count(&self) -> usize {
        self.leaders.len()
    }

    pub fn depth_of_set(&self, i: usize) -> u32 {
        let s = self.views[self.leaders[i] as usize].leader.as_ref().unwrap().s;
        depth_for(s, self.d)
    }

    fn parent_of_leaf(&self, role: &MemberRole) -> u32 {
        let depth = depth_for(role.s, self.d);
        debug_assert!(depth >= 1);
        if depth == 1 {
            role.leader
        } else {
            role.base + (role.leaf_index / self.d as u64) as u32
        }
    }

    /// Real node hosting tree id `id` (real ids host themselves).
    fn host_of(&self, id: u32) -> u32 {
        if id <= self.n {
            id
        } else {
            id - self.n
        }
    }

    /// Structural invariants, cross-checked against the partition the trees
    /// were built from. Panics on violation.
    pub fn audit(&self, part: &Partition) {
        let mut spans: Vec<(u32, u64)> = Vec::new();
        for (i, set) in part.sets.iter().enumerate() {
            let leader = part.leaders[i];
            let s = set.len() as u64;
            let lr = self.views[leader as usize].leader.as_ref().expect("leader role");
            assert_eq!(lr.s, s);
            assert_eq!(lr.set_idx, i);
            let depth = depth_for(s, self.d);
            let mut sorted = set.clone();
            sorted.sort_unstable();
            let mut leaves: Vec<(u64, u32)> = Vec::new();
            for &x in &sorted {
                let mr = self.views[x as usize].member.as_ref().expect("member role");
                assert_eq!(mr.leader, leader);
                assert_eq!(mr.s, s);
                if depth >= 2 {
                    assert_eq!(mr.base, lr.base);
                }
                leaves.push((mr.leaf_index, x));
            }
            // every member is exactly one leaf, indices 0..s in id order
            for (j, &(li, _)) in leaves.iter().enumerate() {
                assert_eq!(li, j as u64);
            }
            if depth >= 2 {
                let pool = level_widths(s, self.d)[depth as usize - 1];
                assert!(lr.base > self.n && lr.base as u64 + pool - 1 <= 2 * self.n as u64);
                spans.push((lr.base, pool));
                let mut seen = Vec::new();
                for k in 0..pool {
                    let host = self.host_of(lr.base + k as u32);
                    let hr = self.views[host as usize].host.as_ref().expect("host role");
                    assert_eq!((hr.leader, hr.s, hr.base, hr.k), (leader, s, lr.base, k));
                    assert!(hr.leaf_children.len() <= self.d as usize);
                    for &(li, x) in &hr.leaf_children {
                        assert_eq!(li / self.d as u64, k);
                        seen.push((li, x));
                    }
                }
                seen.sort_unstable();
                assert_eq!(seen, leaves);
                assert!(lr.leaf_children.is_empty());
            } else if depth == 1 {
                let mut got = lr.leaf_children.clone();
                got.sort_unstable();
                assert_eq!(got, leaves);
            }
        }
        // no virtual id serves two sets
        spans.sort_unstable();
        for w in spans.windows(2) {
            assert!(w[0].0 as u64 + w[0].1 <= w[1].0 as u64, "virtual id reuse across sets");
        }
    }
}

/// Last-segment-start monoid: a chunk of the sorted membership list is
/// either empty, a single indefinite run, or ends in a run that definitely
/// started inside the chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Seg {
    Empty,
    Uniform { leader: u32, first: u64 },
    Mixed { leader: u32, start: u64 },
}

fn seg_combine(a: &Seg, b: &Seg) -> Seg {
    match (*a, *b) {
        (a, Seg::Empty) => a,
        (_, m @ Seg::Mixed { .. }) => m,
        (Seg::Empty, Seg::Uniform { leader, first }) => Seg::Mixed { leader, start: first },
        (Seg::Uniform { leader: la, first: fa }, Seg::Uniform { leader, first }) => {
            if la == leader {
                Seg::Uniform { leader: la, first: fa }
            } else {
                Seg::Mixed { leader, start: first }
            }
        }
        (Seg::Mixed { leader: la, start: sa }, Seg::Uniform { leader, first }) => {
            if la == leader {
                Seg::Mixed { leader: la, start: sa }
            } else {
                Seg::Mixed { leader, start: first }
            }
        }
    }
}

pub fn build_comm_trees(
    comm: &mut impl Comm,
    part: &Partition,
    c_bits: u32,
) -> Result<CommTrees, SimError> {
    let n = comm.size();
    let cap = max_payload_bits(comm);
    if c_bits > cap || c_bits == 0 {
        return Err(SimError::MessageSizeTooLarge { bits: c_bits, limit: cap });
    }
    let d = fanout(comm, c_bits);
    let v_bits = width_for(n as u64) as u32;
    let r_bits = width_for(n as u64) as u32; // ranks and counts, up to n
    let beta = default_beta(comm);

    let mut views: Vec<NodeView> = vec![NodeView::default(); n as usize + 1];
    let mut leader_of = vec![0u32; n as usize + 1];
    let mut set_of_leader: BTreeMap<u32, usize> = BTreeMap::new();
    let mut items: Vec<Vec<SortItem>> = vec![Vec::new(); n as usize + 1];
    for (i, set) in part.sets.iter().enumerate() {
        let l = part.leaders[i];
        set_of_leader.insert(l, i);
        for &x in set {
            if x == 0 || x > n {
                return Err(SimError::InvalidNode { id: x, n });
            }
            leader_of[x as usize] = l;
            items[x as usize].push(SortItem { key: ((l as u128) << v_bits) | x as u128, val: 0 });
        }
    }
    let max_depth =
        part.sets.iter().map(|s| depth_for(s.len() as u64, d)).max().unwrap_or(0);
    if part.sets.is_empty() {
        return Ok(CommTrees { c_bits, d, n, views, leaders: Vec::new(), lvl_bits: 1, max_depth });
    }

    // sort membership pairs by (leader, member)
    let (sorted, _) = sort_distributed(comm, items, 2 * v_bits, 1)?;

    // run starts across node boundaries
    let seg_vals: Vec<Seg> = (1..=n)
        .map(|v| {
            let slab = &sorted.items[v as usize];
            if slab.is_empty() {
                return Seg::Empty;
            }
            let leader_at = |i: usize| (slab[i].key >> v_bits) as u32;
            let mut last_start = None;
            for i in 1..slab.len() {
                if leader_at(i) != leader_at(i - 1) {
                    last_start = Some(i);
                }
            }
            match last_start {
                Some(i) => Seg::Mixed {
                    leader: leader_at(i),
                    start: sorted.start_rank[v as usize] + i as u64,
                },
                None => Seg::Uniform {
                    leader: leader_at(0),
                    first: sorted.start_rank[v as usize],
                },
            }
        })
        .collect();
    let seg_w = 2 + v_bits + r_bits;
    let enc_seg = |s: &Seg, w: &mut BitWriter| match s {
        Seg::Empty => w.push(0, seg_w as usize),
        Seg::Uniform { leader, first } => {
            w.push(1, 2);
            w.push(*leader as u64, v_bits as usize);
            w.push(*first, r_bits as usize);
        }
        Seg::Mixed { leader, start } => {
            w.push(2, 2);
            w.push(*leader as u64, v_bits as usize);
            w.push(*start, r_bits as usize);
        }
    };
    let dec_seg = |r: &mut BitReader| {
        let tag = r.pull(2);
        let leader = r.pull(v_bits as usize) as u32;
        let rank = r.pull(r_bits as usize);
        match tag {
            0 => Seg::Empty,
            1 => Seg::Uniform { leader, first: rank },
            _ => Seg::Mixed { leader, start: rank },
        }
    };
    let units = comm.units_for(2 * seg_w);
    let sbeta = (comm.alpha() / units).clamp(2, beta);
    let (prefixes, _) =
        prefix_scan(comm, 1, n, &seg_vals, Seg::Empty, seg_combine, seg_w, enc_seg, dec_seg, sbeta)?;

    // control records: FIRST/END to leaders, leaf index to members
    const K_FIRST: u64 = 0;
    const K_END: u64 = 1;
    const K_IDX: u64 = 2;
    let ctl = |kind: u64, value: u64| {
        let mut w = BitWriter::new();
        w.push(kind, 2);
        w.push(value, r_bits as usize);
        w.into_payload()
    };
    let mut outbox: Vec<Vec<RouteRecord>> = vec![Vec::new(); n as usize + 1];
    for v in 1..=n {
        let mut cur: Option<(u32, u64)> = match prefixes[(v - 1) as usize] {
            Seg::Empty => None,
            Seg::Mixed { leader, start } => Some((leader, start)),
            Seg::Uniform { .. } => unreachable!("prefix is grounded at Empty"),
        };
        let slab = &sorted.items[v as usize];
        for (i, it) in slab.iter().enumerate() {
            let r = sorted.start_rank[v as usize] + i as u64;
            let leader = (it.key >> v_bits) as u32;
            let member = (it.key as u64 & ((1 << v_bits) - 1)) as u32;
            if cur.map_or(true, |(l, _)| l != leader) {
                if let Some((prev, _)) = cur {
                    let (payload, bits) = ctl(K_END, r);
                    outbox[v as usize].push(RouteRecord { dst: prev, payload, bits: bits as u32 });
                }
                let (payload, bits) = ctl(K_FIRST, r);
                outbox[v as usize].push(RouteRecord { dst: leader, payload, bits: bits as u32 });
                cur = Some((leader, r));
            }
            let (payload, bits) = ctl(K_IDX, r - cur.unwrap().1);
            outbox[v as usize].push(RouteRecord { dst: member, payload, bits: bits as u32 });
        }
        if !slab.is_empty()
            && sorted.start_rank[v as usize] + slab.len() as u64 == sorted.total
        {
            let (payload, bits) = ctl(K_END, sorted.total);
            outbox[v as usize]
                .push(RouteRecord { dst: cur.unwrap().0, payload, bits: bits as u32 });
        }
    }
    let a = route_width(&outbox, comm)?;
    let (delivered, _) = route(comm, outbox, a)?;
    let mut leaf_idx = vec![u64::MAX; n as usize + 1];
    for v in 1..=n {
        let (mut first, mut end) = (None, None);
        for dl in &delivered[v as usize] {
            let mut r = BitReader::new(&dl.payload, dl.bits as usize);
            let kind = r.pull(2);
            let value = r.pull(r_bits as usize);
            match kind {
                K_FIRST => first = Some(value),
                K_END => end = Some(value),
                _ => leaf_idx[v as usize] = value,
            }
        }
        if let Some(f) = first {
            let e = end.expect("run end for leader");
            views[v as usize].leader = Some(LeaderRole {
                set_idx: set_of_leader[&v],
                s: e - f,
                base: 0,
                leaf_children: Vec::new(),
            });
        }
    }

    // virtual pool offsets, in leader-id order
    let pools: Vec<u64> = (1..=n)
        .map(|v| match &views[v as usize].leader {
            Some(lr) if depth_for(lr.s, d) >= 2 => level_widths(lr.s, d)[depth_for(lr.s, d) as usize - 1],
            _ => 0,
        })
        .collect();
    let p_w = width_for(n as u64) as u32;
    let punits = comm.units_for(2 * p_w);
    let pbeta = (comm.alpha() / punits).clamp(2, beta);
    let (offsets, total_pool) = prefix_scan(
        comm,
        1,
        n,
        &pools,
        0u64,
        |a, b| a + b,
        p_w,
        |v, w| w.push(*v, p_w as usize),
        |r| r.pull(p_w as usize),
        pbeta,
    )?;
    debug_assert!(total_pool <= n as u64, "virtual pool exhausted");
    for v in 1..=n {
        if let Some(lr) = views[v as usize].leader.as_mut() {
            lr.base = n + 1 + offsets[(v - 1) as usize] as u32;
        }
    }

    // every member fetches (s, base) from its leader
    let s_bits = width_for(n as u64) as u32;
    let o_bits = width_for(n as u64) as u32;
    let table: Vec<Vec<(u64, u64)>> = (0..=n)
        .map(|v| match v {
            0 => Vec::new(),
            v => views[v as usize]
                .leader
                .as_ref()
                .map(|lr| vec![(v as u64, (lr.s << o_bits) | (lr.base - n - 1) as u64)])
                .unwrap_or_default(),
        })
        .collect();
    let queries: Vec<Vec<(u64, u64)>> = (0..=n)
        .map(|v| {
            if v >= 1 && leader_of[v as usize] != 0 {
                vec![(leader_of[v as usize] as u64, 0)]
            } else {
                Vec::new()
            }
        })
        .collect();
    let answers = sort_join(comm, &table, &queries, v_bits, s_bits + o_bits, 1)?;
    for v in 1..=n {
        for &(_, value) in &answers[v as usize] {
            let s = value >> o_bits;
            let base = n + 1 + (value & ((1 << o_bits) - 1)) as u32;
            debug_assert!(leaf_idx[v as usize] < s);
            views[v as usize].member = Some(MemberRole {
                leader: leader_of[v as usize],
                leaf_index: leaf_idx[v as usize],
                s,
                base,
            });
        }
    }

    // members inform their leaf parents; the record also seeds host roles
    let b_bits = width_for(n as u64) as u32;
    let mut outbox: Vec<Vec<RouteRecord>> = vec![Vec::new(); n as usize + 1];
    let trees_probe = CommTrees {
        c_bits,
        d,
        n,
        views: Vec::new(),
        leaders: Vec::new(),
        lvl_bits: 1,
        max_depth,
    };
    for v in 1..=n {
        let Some(mr) = views[v as usize].member.clone() else { continue };
        if depth_for(mr.s, d) == 0 {
            continue;
        }
        let parent = trees_probe.parent_of_leaf(&mr);
        let mut w = BitWriter::new();
        w.push(v as u64, v_bits as usize);
        w.push(mr.leaf_index, r_bits as usize);
        w.push(mr.s, s_bits as usize);
        w.push((mr.base - n - 1) as u64, b_bits as usize);
        w.push(mr.leader as u64, v_bits as usize);
        let (payload, bits) = w.into_payload();
        outbox[v as usize].push(RouteRecord {
            dst: trees_probe.host_of(parent),
            payload,
            bits: bits as u32,
        });
    }
    let a = route_width(&outbox, comm)?;
    let (delivered, _) = route(comm, outbox, a)?;
    for v in 1..=n {
        for dl in &delivered[v as usize] {
            let mut r = BitReader::new(&dl.payload, dl.bits as usize);
            let member = r.pull(v_bits as usize) as u32;
            let li = r.pull(r_bits as usize);
            let s = r.pull(s_bits as usize);
            let base = n + 1 + r.pull(b_bits as usize) as u32;
            let leader = r.pull(v_bits as usize) as u32;
            if depth_for(s, d) == 1 {
                debug_assert_eq!(leader, v);
                let lr = views[v as usize].leader.as_mut().expect("leader role");
                lr.leaf_children.push((li, member));
            } else {
                let k = (v + n - base) as u64;
                debug_assert_eq!(li / d as u64, k);
                let hr = views[v as usize].host.get_or_insert_with(|| HostRole {
                    leader,
                    s,
                    base,
                    k,
                    leaf_children: Vec::new(),
                });
                debug_assert_eq!((hr.leader, hr.base), (leader, base));
                hr.leaf_children.push((li, member));
            }
        }
        if let Some(hr) = views[v as usize].host.as_mut() {
            hr.leaf_children.sort_unstable();
        }
        if let Some(lr) = views[v as usize].leader.as_mut() {
            lr.leaf_children.sort_unstable();
        }
    }

    let trees = CommTrees {
        c_bits,
        d,
        n,
        views,
        leaders: part.leaders.clone(),
        lvl_bits: width_for(max_depth.max(1) as u64) as u32,
        max_depth,
    };
    #[cfg(debug_assertions)]
    trees.audit(part);
    Ok(trees)
}

/// Tree-edge record: kind 0 targets the receiver's member/leader role at
/// `level`, kind 1 its virtual-host role.
fn tree_record(
    trees: &CommTrees,
    dst_id: u32,
    level: u32,
    payload: &[u8],
    bits: u32,
) -> RouteRecord {
    let kind = u64::from(dst_id > trees.n);
    let mut w = BitWriter::new();
    w.push(kind, 1);
    w.push(level as u64, trees.lvl_bits as usize);
    let (mut buf, hdr) = w.into_payload();
    let mut total = hdr as u32;
    append_bits(&mut buf, &mut total, payload, bits);
    RouteRecord { dst: trees.host_of(dst_id), payload: buf, bits: total }
}

fn parse_tree_record(trees: &CommTrees, payload: &[u8], bits: u32) -> (bool, u32, Vec<u8>, u32) {
    let mut r = BitReader::new(payload, bits as usize);
    let virt = r.pull(1) == 1;
    let level = r.pull(trees.lvl_bits as usize) as u32;
    let hdr = 1 + trees.lvl_bits;
    let body = slice_bits(payload, hdr, bits - hdr);
    (virt, level, body.to_vec(), bits - hdr)
}

/// Children ids of the level-`j` node with index `k` in a tree of `s`
/// leaves; leaf children come from the supplied list.
fn children_of(
    trees: &CommTrees,
    s: u64,
    base: u32,
    j: u32,
    k: u64,
    leaf_children: &[(u64, u32)],
) -> Vec<(u32, u32)> {
    let widths = level_widths(s, trees.d);
    let depth = widths.len() as u32 - 1;
    debug_assert!(j < depth);
    if j + 1 == depth {
        leaf_children.iter().map(|&(_, x)| (x, depth)).collect()
    } else {
        let w_next = widths[j as usize + 1];
        let lo = k * trees.d as u64;
        let hi = (lo + trees.d as u64).min(w_next);
        (lo..hi).map(|c| (base + c as u32, j + 1)).collect()
    }
}

/// Stream `waves[i]` (payloads of at most c bits each) from leader i down
/// its tree; every member receives its set's waves in order.
pub fn multicast_pipelined(
    comm: &mut impl Comm,
    trees: &CommTrees,
    waves: &[Vec<(Vec<u8>, u32)>],
) -> Result<Vec<Vec<(Vec<u8>, u32)>>, SimError> {
    multicast_pipelined_via(comm, trees, waves, Transport::Messages)
}

/// `multicast_pipelined` under an explicit transport (identical outputs and
/// round accounting either way).
pub fn multicast_pipelined_via(
    comm: &mut impl Comm,
    trees: &CommTrees,
    waves: &[Vec<(Vec<u8>, u32)>],
    transport: Transport,
) -> Result<Vec<Vec<(Vec<u8>, u32)>>, SimError> {
    let n = trees.n;
    assert_eq!(waves.len(), trees.leaders.len());
    for ws in waves {
        for &(_, bits) in ws {
            if bits > trees.c_bits {
                return Err(SimError::MessageSizeTooLarge { bits, limit: trees.c_bits });
            }
        }
    }
    let mut out: Vec<Vec<(Vec<u8>, u32)>> = vec![Vec::new(); n as usize + 1];
    // waves move in blocks of g: a relay forwards up to g*d records per
    // step, which keeps each route call within a small multiple of alpha
    let g = (comm.alpha() / (trees.d + 1)).max(1) as usize;
    let mut steps = 0u32;
    for (i, &leader) in trees.leaders.iter().enumerate() {
        let depth = trees.depth_of_set(i);
        if depth == 0 {
            out[leader as usize].extend(waves[i].iter().cloned());
        } else if !waves[i].is_empty() {
            steps = steps.max(depth + waves[i].len().div_ceil(g) as u32 - 1);
        }
    }

    // (node, level) -> wave block waiting to go one level further down
    let mut pending: BTreeMap<(u32, u32), Vec<(Vec<u8>, u32)>> = BTreeMap::new();
    let cnt_bits = width_for(n as u64) as usize;

    for t in 0..steps {
        let mut outbox: Vec<Vec<RouteRecord>> = vec![Vec::new(); n as usize + 1];
        for (i, &leader) in trees.leaders.iter().enumerate() {
            let lr = trees.views[leader as usize].leader.as_ref().unwrap();
            let depth = depth_for(lr.s, trees.d);
            if depth >= 1 && (t as usize) * g < waves[i].len() {
                let block = &waves[i][t as usize * g..waves[i].len().min((t as usize + 1) * g)];
                for (payload, bits) in block {
                    for (child, lvl) in
                        children_of(trees, lr.s, lr.base, 0, 0, &lr.leaf_children)
                    {
                        outbox[leader as usize]
                            .push(tree_record(trees, child, lvl, payload, *bits));
                    }
                }
            }
        }
        for ((node, level), block) in std::mem::take(&mut pending) {
            let hr = trees.views[node as usize].host.as_ref().unwrap();
            for (payload, bits) in block {
                for (child, lvl) in
                    children_of(trees, hr.s, hr.base, level, hr.k, &hr.leaf_children)
                {
                    outbox[node as usize].push(tree_record(trees, child, lvl, &payload, bits));
                }
            }
        }
        let a = route_width(&outbox, comm)?;
        let (delivered, _) = route_via(comm, outbox, a, transport)?;
        for v in 1..=n {
            for dl in &delivered[v as usize] {
                let (virt, level, body, bits) = parse_tree_record(trees, &dl.payload, dl.bits);
                if virt {
                    // per-(src, dst) delivery order is outbox order, so a
                    // block arrives in wave order
                    pending.entry((v, level)).or_default().push((body, bits));
                } else {
                    debug_assert_eq!(
                        level,
                        depth_for(trees.views[v as usize].member.as_ref().unwrap().s, trees.d)
                    );
                    out[v as usize].push((body, bits));
                }
            }
        }
    }
    debug_assert!(pending.is_empty());

    // convergecast ack: leaf counts climb the same trees
    let mut acks: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let mut leader_acks: BTreeMap<u32, u64> = BTreeMap::new();
    for u in 0..trees.max_depth {
        let mut outbox: Vec<Vec<RouteRecord>> = vec![Vec::new(); n as usize + 1];
        if u == 0 {
            for v in 1..=n {
                let Some(mr) = &trees.views[v as usize].member else { continue };
                let depth = depth_for(mr.s, trees.d);
                if depth == 0 {
                    continue;
                }
                let mut w = BitWriter::new();
                w.push(1, cnt_bits);
                let (payload, bits) = w.into_payload();
                outbox[v as usize].push(tree_record(
                    trees,
                    trees.parent_of_leaf(mr),
                    depth - 1,
                    &payload,
                    bits as u32,
                ));
            }
        }
        for ((node, level), count) in std::mem::take(&mut acks) {
            let hr = trees.views[node as usize].host.as_ref().unwrap();
            let parent = if level == 1 {
                hr.leader
            } else {
                hr.base + (hr.k / trees.d as u64) as u32
            };
            let mut w = BitWriter::new();
            w.push(count, cnt_bits);
            let (payload, bits) = w.into_payload();
            outbox[node as usize].push(tree_record(trees, parent, level - 1, &payload, bits as u32));
        }
        let a = route_width(&outbox, comm)?;
        let (delivered, _) = route_via(comm, outbox, a, transport)?;
        for v in 1..=n {
            for dl in &delivered[v as usize] {
                let (virt, level, body, bits) = parse_tree_record(trees, &dl.payload, dl.bits);
                let count = BitReader::new(&body, bits as usize).pull(cnt_bits);
                if virt {
                    *acks.entry((v, level)).or_default() += count;
                } else {
                    debug_assert_eq!(level, 0);
                    *leader_acks.entry(v).or_default() += count;
                }
            }
        }
    }
    for (i, &leader) in trees.leaders.iter().enumerate() {
        let lr = trees.views[leader as usize].leader.as_ref().unwrap();
        if depth_for(lr.s, trees.d) >= 1 {
            assert_eq!(leader_acks.get(&leader).copied().unwrap_or(0), lr.s, "ack mismatch set {i}");
        }
    }
    Ok(out)
}

/// Single payload per set.
pub fn multicast(
    comm: &mut impl Comm,
    trees: &CommTrees,
    payloads: &[(Vec<u8>, u32)],
) -> Result<Vec<Option<(Vec<u8>, u32)>>, SimError> {
    let waves: Vec<Vec<(Vec<u8>, u32)>> = payloads.iter().map(|p| vec![p.clone()]).collect();
    let out = multicast_pipelined(comm, trees, &waves)?;
    Ok(out.into_iter().map(|mut v| if v.is_empty() { None } else { Some(v.remove(0)) }).collect())
}

/// Wide payloads, chunked into c-bit waves and reassembled at the members.
/// The per-set bit lengths are protocol constants known to every node.
pub fn multicast_bits(
    comm: &mut impl Comm,
    trees: &CommTrees,
    payloads: &[(Vec<u8>, u32)],
) -> Result<Vec<Option<(Vec<u8>, u32)>>, SimError> {
    multicast_bits_via(comm, trees, payloads, Transport::Messages)
}

/// `multicast_bits` under an explicit transport (identical outputs and round
/// accounting either way).
pub fn multicast_bits_via(
    comm: &mut impl Comm,
    trees: &CommTrees,
    payloads: &[(Vec<u8>, u32)],
    transport: Transport,
) -> Result<Vec<Option<(Vec<u8>, u32)>>, SimError> {
    let c = trees.c_bits;
    let waves: Vec<Vec<(Vec<u8>, u32)>> = payloads
        .iter()
        .map(|(payload, bits)| {
            (0..bits.div_ceil(c).max(1))
                .map(|w| {
                    let len = c.min(bits - (w * c).min(*bits));
                    (slice_bits(payload, w * c, len).to_vec(), len)
                })
                .collect()
        })
        .collect();
    let chunks = multicast_pipelined_via(comm, trees, &waves, transport)?;
    Ok(chunks
        .into_iter()
        .map(|ws| {
            if ws.is_empty() {
                return None;
            }
            let mut buf = Vec::new();
            let mut bits = 0u32;
            for (p, b) in ws {
                append_bits(&mut buf, &mut bits, &p, b);
            }
            Some((buf, bits))
        })
        .collect())
}

/// A distributive aggregative function: `combine` folds two partial values
/// (each `width` bits, little-endian bytes) into one.
pub struct AggregateFn<'a> {
    pub width: u32,
    pub combine: &'a dyn Fn(&[u8], &[u8]) -> Vec<u8>,
}

#[cfg(debug_assertions)]
fn audit_combiner(f: &AggregateFn, seed: u64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xa66);
    let vals: Vec<Vec<u8>> = (0..6)
        .map(|_| {
            let mut v = vec![0u8; (f.width as usize).div_ceil(8)];
            rng.fill_bytes(&mut v);
            if f.width % 8 != 0 {
                *v.last_mut().unwrap() &= (1u8 << (f.width % 8)) - 1;
            }
            v
        })
        .collect();
    let fold = |vs: &[Vec<u8>]| -> Vec<u8> {
        let mut acc = vs[0].clone();
        for v in &vs[1..] {
            acc = (f.combine)(&acc, v);
        }
        acc
    };
    let direct = fold(&vals);
    for cut in [1, 3, 5] {
        let parts = [fold(&vals[..cut]), fold(&vals[cut..])];
        assert_eq!(
            fold(&parts),
            direct,
            "combiner is not distributive aggregative (cut {cut})"
        );
    }
    let mut rev = vals.clone();
    rev.reverse();
    assert_eq!(fold(&rev), direct, "combiner is order-sensitive");
}

/// Pipelined aggregation of x functions: inputs[w][v] is node v's value for
/// function w (members only). Returns per-set, per-function leader values.
pub fn aggregate_pipelined(
    comm: &mut impl Comm,
    trees: &CommTrees,
    funcs: &[AggregateFn],
    inputs: &[Vec<Option<Vec<u8>>>],
) -> Result<Vec<Vec<Vec<u8>>>, SimError> {
    let n = trees.n;
    let x = funcs.len();
    assert_eq!(inputs.len(), x);
    for f in funcs {
        if f.width > trees.c_bits || f.width == 0 {
            return Err(SimError::MessageSizeTooLarge { bits: f.width, limit: trees.c_bits });
        }
        #[cfg(debug_assertions)]
        audit_combiner(f, f.width as u64);
    }

    let mut results: Vec<Vec<Vec<u8>>> = vec![vec![Vec::new(); x]; trees.leaders.len()];
    let mut phases = 0u32;
    for (i, &leader) in trees.leaders.iter().enumerate() {
        let depth = trees.depth_of_set(i);
        if depth == 0 {
            for w in 0..x {
                results[i][w] = inputs[w][leader as usize].clone().expect("singleton input");
            }
        } else {
            phases = phases.max(depth + x as u32 - 1);
        }
    }

    // (node, level) -> (wave, folded value) ready to climb next phase
    let mut pending: BTreeMap<(u32, u32), (usize, Vec<u8>)> = BTreeMap::new();
    let mut waves_seen: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    let mut leader_seen: BTreeMap<u32, usize> = BTreeMap::new();

    for t in 0..phases {
        let mut outbox: Vec<Vec<RouteRecord>> = vec![Vec::new(); n as usize + 1];
        if (t as usize) < x {
            for v in 1..=n {
                let Some(mr) = &trees.views[v as usize].member else { continue };
                let depth = depth_for(mr.s, trees.d);
                if depth == 0 {
                    continue;
                }
                let value = inputs[t as usize][v as usize].as_ref().expect("member input");
                outbox[v as usize].push(tree_record(
                    trees,
                    trees.parent_of_leaf(mr),
                    depth - 1,
                    value,
                    funcs[t as usize].width,
                ));
            }
        }
        for ((node, level), (wave, value)) in std::mem::take(&mut pending) {
            let hr = trees.views[node as usize].host.as_ref().unwrap();
            let parent = if level == 1 {
                hr.leader
            } else {
                hr.base + (hr.k / trees.d as u64) as u32
            };
            outbox[node as usize].push(tree_record(
                trees,
                parent,
                level - 1,
                &value,
                funcs[wave].width,
            ));
        }
        let a = route_width(&outbox, comm)?;
        let (delivered, _) = route(comm, outbox, a)?;
        // fold in (src, payload) order for bit determinism
        let mut folds: BTreeMap<(u32, u32, bool), Vec<(u32, Vec<u8>)>> = BTreeMap::new();
        for v in 1..=n {
            for dl in &delivered[v as usize] {
                let (virt, level, body, _) = parse_tree_record(trees, &dl.payload, dl.bits);
                folds.entry((v, level, virt)).or_default().push((dl.src, body));
            }
        }
        for ((v, level, virt), mut parts) in folds {
            parts.sort_unstable();
            let wave = if virt {
                let ctr = waves_seen.entry((v, level)).or_insert(0);
                let w = *ctr;
                *ctr += 1;
                w
            } else {
                debug_assert_eq!(level, 0);
                let ctr = leader_seen.entry(v).or_insert(0);
                let w = *ctr;
                *ctr += 1;
                w
            };
            let mut acc = parts[0].1.clone();
            for (_, p) in &parts[1..] {
                acc = (funcs[wave].combine)(&acc, p);
            }
            debug_assert!(acc.len() <= (funcs[wave].width as usize).div_ceil(8));
            if virt {
                pending.insert((v, level), (wave, acc));
            } else {
                let set_idx = trees.views[v as usize].leader.as_ref().unwrap().set_idx;
                results[set_idx][wave] = acc;
            }
        }
    }
    debug_assert!(pending.is_empty());
    Ok(results)
}

/// Single function per set.
pub fn aggregate(
    comm: &mut impl Comm,
    trees: &CommTrees,
    f: &AggregateFn,
    inputs: &[Option<Vec<u8>>],
) -> Result<Vec<Vec<u8>>, SimError> {
    let funcs = [AggregateFn { width: f.width, combine: f.combine }];
    let mut out = aggregate_pipelined(comm, trees, &funcs, std::slice::from_ref(&inputs.to_vec()))?;
    Ok(out.iter_mut().map(|v| v.remove(0)).collect())
}

/// A wide value whose fixed-width slices are independently aggregative;
/// slice i of the combined value must equal the combination of slice i's.
pub struct WideAggregate<'a> {
    pub total_bits: u32,
    pub slice_bits: u32,
    pub combine_full: &'a dyn Fn(&[u8], &[u8]) -> Vec<u8>,
    pub combine_slice: &'a dyn Fn(usize, &[u8], &[u8]) -> Vec<u8>,
}

impl WideAggregate<'_> {
    fn slice(&self, value: &[u8], i: usize) -> (Vec<u8>, u32) {
        let off = i as u32 * self.slice_bits;
        let len = self.slice_bits.min(self.total_bits - off);
        (slice_bits(value, off, len).to_vec(), len)
    }

    fn slices(&self) -> usize {
        self.total_bits.div_ceil(self.slice_bits) as usize
    }

    /// Random-value audit that slicing commutes with combining.
    fn splittable(&self) -> bool {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x511c3);
        let bytes = (self.total_bits as usize).div_ceil(8);
        for _ in 0..4 {
            let mut a = vec![0u8; bytes];
            let mut b = vec![0u8; bytes];
            rng.fill_bytes(&mut a);
            rng.fill_bytes(&mut b);
            if self.total_bits % 8 != 0 {
                let m = (1u8 << (self.total_bits % 8)) - 1;
                *a.last_mut().unwrap() &= m;
                *b.last_mut().unwrap() &= m;
            }
            let full = (self.combine_full)(&a, &b);
            for i in 0..self.slices() {
                let (sa, _) = self.slice(&a, i);
                let (sb, _) = self.slice(&b, i);
                let (sf, len) = self.slice(&full, i);
                let mut got = (self.combine_slice)(i, &sa, &sb);
                got.resize((len as usize).div_ceil(8), 0);
                if got != sf {
                    return false;
                }
            }
        }
        true
    }
}

/// Aggregate a wide splittable value by pipelining its slices.
pub fn aggregate_wide(
    comm: &mut impl Comm,
    trees: &CommTrees,
    wf: &WideAggregate,
    inputs: &[Option<Vec<u8>>],
) -> Result<Vec<Vec<u8>>, SimError> {
    assert!(wf.slice_bits >= 1 && wf.slice_bits <= trees.c_bits);
    #[cfg(debug_assertions)]
    if !wf.splittable() {
        return Err(SimError::NotSplittable);
    }
    let x = wf.slices();
    let combines: Vec<Box<dyn Fn(&[u8], &[u8]) -> Vec<u8> + '_>> = (0..x)
        .map(|i| {
            Box::new(move |a: &[u8], b: &[u8]| (wf.combine_slice)(i, a, b))
                as Box<dyn Fn(&[u8], &[u8]) -> Vec<u8>>
        })
        .collect();
    let funcs: Vec<AggregateFn> = (0..x)
        .map(|i| AggregateFn {
            width: wf.slice_bits.min(wf.total_bits - i as u32 * wf.slice_bits),
            combine: &combines[i],
        })
        .collect();
    let slice_inputs: Vec<Vec<Option<Vec<u8>>>> = (0..x)
        .map(|i| {
            inputs
                .iter()
                .map(|v| v.as_ref().map(|value| wf.slice(value, i).0))
                .collect()
        })
        .collect();
    let sliced = aggregate_pipelined(comm, trees, &funcs, &slice_inputs)?;
    Ok(sliced
        .into_iter()
        .map(|parts| {
            let mut buf = Vec::new();
            let mut bits = 0u32;
            for (i, p) in parts.iter().enumerate() {
                append_bits(&mut buf, &mut bits, p, funcs[i].width);
            }
            buf
        })
        .collect())
}

/// Node 1 draws k fresh bits and pipelines them down a whole-clique tree;
/// every node ends with an identical copy.
pub fn broadcast_shared_randomness(comm: &mut impl Comm, k: u32) -> Result<Vec<u8>, SimError> {
    broadcast_shared_randomness_via(comm, k, Transport::Messages)
}

/// `broadcast_shared_randomness` under an explicit transport (identical
/// output and round accounting either way).
pub fn broadcast_shared_randomness_via(
    comm: &mut impl Comm,
    k: u32,
    transport: Transport,
) -> Result<Vec<u8>, SimError> {
    assert!(k >= 1);
    let n = comm.size();
    let c = max_payload_bits(comm);
    let trees = build_comm_trees(comm, &Partition::whole(n), c)?;
    let mut payload = vec![0u8; (k as usize).div_ceil(8)];
    comm.node_rng(1).fill_bytes(&mut payload);
    if k % 8 != 0 {
        *payload.last_mut().unwrap() &= (1u8 << (k % 8)) - 1;
    }
    let out = multicast_bits_via(comm, &trees, &[(payload, k)], transport)?;
    let (copy, bits) = out[1].clone().expect("node 1 holds a copy");
    debug_assert_eq!(bits, k);
    debug_assert!(out[1..=n as usize].iter().all(|o| o.as_ref() == Some(&(copy.clone(), k))));
    Ok(copy)
}
