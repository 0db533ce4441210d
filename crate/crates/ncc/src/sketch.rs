//! Linear sketches over F_p: 1-sparse cells, L0 samplers, k-sparse recovery
//! with sampler subtraction, the signed graph-neighbourhood encoding, and the
//! distributed k-edge-recovery protocol built on the communication trees.
//!
//! Every structure here is a linear function of its input vector. Two copies
//! built from the same seed material are bit-identical, so componentwise
//! field addition of two sketches equals the sketch of the summed vectors,
//! exactly. That is what lets per-node sketches travel through the
//! aggregation trees as plain sums.

use std::collections::{BTreeMap, BTreeSet};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bits::{BitReader, BitWriter};
use crate::comm::Comm;
use crate::engine::{ceil_log2, SimError};
use crate::field;
use crate::group::{
    broadcast_shared_randomness_via, build_comm_trees, level_widths, max_payload_bits,
    Partition,
};
use crate::hash::KWiseHash;

/// Samplers per recovery structure: t = C_SAMPLERS * (k + ceil(log2 N)).
pub const C_SAMPLERS: u32 = 4;
/// Decode gives up once more than C_DENSE * k coordinates have surfaced.
pub const C_DENSE: u32 = 2;
/// Collision buckets per sparse unit (2s for s = 2).
const BUCKETS: usize = 4;
/// Hash degree used by the standalone L0 sampler. Supports up to this size
/// see jointly uniform hash values, which keeps the conditional sampling
/// distribution exactly symmetric across the support.
const L0_DEGREE: usize = 12;
/// Hash degree inside k-sparse recovery, where only constant success
/// probability per sampler is needed.
const KS_DEGREE: usize = 2;

/// ceil(log2 d) for a vector dimension d >= 2.
fn dim_bits(d: u64) -> u32 {
    assert!(d >= 2);
    64 - (d - 1).leading_zeros()
}

// ---------------------------------------------------------------------------
// seed material

/// Shared seed material. Everything a sketch draws (hash coefficients and
/// fingerprint bases) comes from one of these in a fixed order, so two sites
/// holding the same seed build interchangeable structures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SketchSeed([u8; 32]);

impl SketchSeed {
    pub fn from_u64(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7_c4b1_d00d_feed);
        let mut s = [0u8; 32];
        rng.fill_bytes(&mut s);
        Self(s)
    }

    /// Fold a broadcast random pool into a seed. The pool is already PRG
    /// output, so xor-folding loses nothing.
    pub fn from_pool(pool: &[u8]) -> Self {
        let mut s = [0u8; 32];
        s[0] = 1; // distinguish the empty pool from from_u64(...) zeros
        for (i, &b) in pool.iter().enumerate() {
            s[i % 32] ^= b.rotate_left((i / 32) as u32 % 8);
        }
        Self(s)
    }

    fn stream(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.0)
    }
}

// ---------------------------------------------------------------------------
// 1-sparse cells

/// A cell tracking (phi, iota, tau) = (sum v_i, sum i*v_i, sum v_i*z^i) over
/// F_p. If the accumulated vector is exactly 1-sparse the triple recovers it;
/// the fingerprint tau rejects anything else except with probability O(d/p).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneSparseCell {
    pub phi: u64,
    pub iota: u64,
    pub tau: u64,
    z: u64,
}

impl OneSparseCell {
    pub fn new(z: u64) -> Self {
        debug_assert!((2..field::P).contains(&z));
        Self { phi: 0, iota: 0, tau: 0, z }
    }

    pub fn update(&mut self, index: u64, delta: i64) {
        let zi = field::pow(self.z, index);
        self.apply(index, delta, zi);
    }

    /// Update with z^index precomputed (shared across the cells of a sampler).
    fn apply(&mut self, index: u64, delta: i64, zi: u64) {
        debug_assert!(index < field::P);
        let d = field::from_signed(delta);
        self.phi = field::add(self.phi, d);
        self.iota = field::add(self.iota, field::mul(field::reduce64(index), d));
        self.tau = field::add(self.tau, field::mul(d, zi));
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.z, other.z, "cells from different seed material");
        Self {
            phi: field::add(self.phi, other.phi),
            iota: field::add(self.iota, other.iota),
            tau: field::add(self.tau, other.tau),
            z: self.z,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.z, other.z, "cells from different seed material");
        Self {
            phi: field::sub(self.phi, other.phi),
            iota: field::sub(self.iota, other.iota),
            tau: field::sub(self.tau, other.tau),
            z: self.z,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.phi == 0 && self.iota == 0 && self.tau == 0
    }
}

/// Recover (index, value) from a cell holding an exactly 1-sparse vector.
/// The zero vector and (up to fingerprint collisions) everything with two or
/// more nonzero coordinates come back as None.
pub fn one_sparse_decide(cell: &OneSparseCell) -> Option<(u64, i64)> {
    if cell.phi == 0 {
        return None;
    }
    let index = field::mul(cell.iota, field::inv(cell.phi));
    if field::mul(cell.phi, field::pow(cell.z, index)) != cell.tau {
        return None;
    }
    Some((index, field::to_signed(cell.phi)))
}

// ---------------------------------------------------------------------------
// sparse units and sampler cores

/// One s-sparse recovery unit (s = 2): coordinates scatter into BUCKETS
/// cells under a collision hash; a bucket holding a single survivor decodes.
#[derive(Debug, Clone, PartialEq, Eq)]
struct SparseUnit {
    bucket: KWiseHash,
    cells: Vec<OneSparseCell>,
}

impl SparseUnit {
    fn new(bucket: KWiseHash, z: u64) -> Self {
        Self { bucket, cells: (0..BUCKETS).map(|_| OneSparseCell::new(z)).collect() }
    }

    fn apply(&mut self, index: u64, delta: i64, zi: u64) {
        let b = self.bucket.eval_range(index, BUCKETS as u64) as usize;
        self.cells[b].apply(index, delta, zi);
    }

    fn is_zero(&self) -> bool {
        self.cells.iter().all(OneSparseCell::is_zero)
    }
}

/// The level stack shared by L0 samplers and the k-bounded samplers inside
/// recovery structures: level l keeps the coordinates whose level hash has
/// at least l trailing zero bits, i.e. a 2^-l subsample, and feeds them to a
/// sparse unit. Level 0 always sees the whole vector.
#[derive(Debug, Clone, PartialEq, Eq)]
struct SamplerCore {
    level_hash: KWiseHash,
    z: u64,
    n_dim: u64,
    units: Vec<SparseUnit>,
}

impl SamplerCore {
    /// Draw order is fixed: level hash, fingerprint base, then one bucket
    /// hash per level. Identical material yields identical cores.
    fn build(n_dim: u64, levels: u32, degree: usize, material: &mut impl FnMut() -> u64) -> Self {
        let level_hash = KWiseHash::from_material(material, degree);
        let mut z = field::reduce64(material());
        if z < 2 {
            z += 2;
        }
        let units = (0..levels)
            .map(|_| SparseUnit::new(KWiseHash::from_material(material, degree), z))
            .collect();
        Self { level_hash, z, n_dim, units }
    }

    /// Deepest level the coordinate reaches (uncapped trailing-zero count).
    fn level_of(&self, index: u64) -> u32 {
        self.level_hash.eval(index).trailing_zeros()
    }

    fn apply(&mut self, index: u64, delta: i64) {
        debug_assert!(index < self.n_dim);
        let zi = field::pow(self.z, index);
        let top = self.level_of(index).min(self.units.len() as u32 - 1);
        for l in 0..=top {
            self.units[l as usize].apply(index, delta, zi);
        }
    }

    fn same_family(&self, other: &Self) -> bool {
        self.level_hash == other.level_hash
            && self.z == other.z
            && self.n_dim == other.n_dim
            && self.units.len() == other.units.len()
            && self.units.iter().zip(&other.units).all(|(a, b)| a.bucket == b.bucket)
    }

    fn combine(&self, other: &Self, f: impl Fn(&OneSparseCell, &OneSparseCell) -> OneSparseCell) -> Self {
        let units = self
            .units
            .iter()
            .zip(&other.units)
            .map(|(a, b)| SparseUnit {
                bucket: a.bucket.clone(),
                cells: a.cells.iter().zip(&b.cells).map(|(x, y)| f(x, y)).collect(),
            })
            .collect();
        Self { level_hash: self.level_hash.clone(), z: self.z, n_dim: self.n_dim, units }
    }

    /// Verified decodes at one level: the claimed coordinate must lie in the
    /// dimension, belong to this level, and hash to the bucket it came from.
    /// That re-derivation squeezes fingerprint false accepts well below the
    /// raw collision bound.
    fn recover_level(&self, level: usize) -> Vec<(u64, i64)> {
        let mut out = Vec::new();
        for (b, cell) in self.units[level].cells.iter().enumerate() {
            if let Some((i, v)) = one_sparse_decide(cell) {
                if i < self.n_dim
                    && self.level_of(i) >= level as u32
                    && self.units[level].bucket.eval_range(i, BUCKETS as u64) as usize == b
                {
                    out.push((i, v));
                }
            }
        }
        out
    }

    /// Every coordinate this core can currently prove, deduplicated.
    fn recover_all(&self) -> BTreeMap<u64, i64> {
        let mut out = BTreeMap::new();
        for l in 0..self.units.len() {
            for (i, v) in self.recover_level(l) {
                let prev = out.insert(i, v);
                debug_assert!(prev.is_none() || prev == Some(v));
            }
        }
        out
    }

    /// One draw: scan levels shallow to deep, return the verified survivor
    /// with the smallest level-hash value at the first productive level.
    /// With the hash values jointly uniform over the support, every support
    /// coordinate is equally likely to win.
    fn sample(&self) -> Option<(u64, i64)> {
        for l in 0..self.units.len() {
            let found = self.recover_level(l);
            if let Some(&(i, v)) =
                found.iter().min_by_key(|&&(i, _)| (self.level_hash.eval(i), i))
            {
                return Some((i, v));
            }
        }
        None
    }
}

// ---------------------------------------------------------------------------
// L0 sampler

/// Linear sampler returning a near-uniform nonzero coordinate of an
/// n_dim-dimensional vector with constant probability. ceil(log2 n_dim) + 1
/// levels, degree-12 hashes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct L0Sampler {
    core: SamplerCore,
}

impl L0Sampler {
    pub fn new(n_dim: u64, seed: &SketchSeed) -> Self {
        let mut rng = seed.stream();
        let mut material = || rng.next_u64();
        Self { core: SamplerCore::build(n_dim, dim_bits(n_dim) + 1, L0_DEGREE, &mut material) }
    }

    pub fn update(&mut self, index: u64, delta: i64) {
        self.core.apply(index, delta);
    }

    pub fn add(&self, other: &Self) -> Result<Self, SimError> {
        if !self.core.same_family(&other.core) {
            return Err(SimError::SeedMismatch);
        }
        Ok(Self { core: self.core.combine(&other.core, OneSparseCell::add) })
    }

    pub fn sub(&self, other: &Self) -> Result<Self, SimError> {
        if !self.core.same_family(&other.core) {
            return Err(SimError::SeedMismatch);
        }
        Ok(Self { core: self.core.combine(&other.core, OneSparseCell::sub) })
    }
}

/// Draw a nonzero coordinate, or None when the sampler cannot isolate one
/// (always for the zero vector, otherwise with constant probability).
pub fn l0_sample(s: &L0Sampler) -> Option<(u64, i64)> {
    s.core.sample()
}

// ---------------------------------------------------------------------------
// k-sparse recovery

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KSparseParams {
    pub k: u32,
    pub n_dim: u64,
    pub c_s: u32,
    pub c_dense: u32,
}

impl KSparseParams {
    pub fn new(k: u32, n_dim: u64) -> Self {
        Self::with_factors(k, n_dim, C_SAMPLERS, C_DENSE)
    }

    pub fn with_factors(k: u32, n_dim: u64, c_s: u32, c_dense: u32) -> Self {
        assert!(k >= 1 && c_s >= 1 && c_dense >= 1);
        assert!((2..field::P).contains(&n_dim), "indices must be field elements");
        Self { k, n_dim, c_s, c_dense }
    }

    /// Independent k-bounded samplers held by a structure.
    pub fn samplers(&self) -> u32 {
        self.c_s * (self.k + dim_bits(self.n_dim))
    }

    /// Levels per sampler: enough 2^-l subsampling to thin supports of up
    /// to 2k down to a recoverable unit.
    pub fn levels(&self) -> u32 {
        dim_bits(2 * self.k as u64) + 1
    }

    /// Field elements of cell payload (the aggregatable part).
    pub fn element_count(&self) -> usize {
        self.samplers() as usize * self.levels() as usize * BUCKETS * 3
    }
}

/// Linear k-sparse recovery: t independent k-bounded samplers, each with its
/// own seed material retained, so that recovered coordinates can be
/// subtracted from the samplers not yet consumed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KSparseRecovery {
    pub params: KSparseParams,
    seed: SketchSeed,
    samplers: Vec<SamplerCore>,
}

/// Outcome of a decode: the exact nonzero coordinates, or Dense when the
/// vector's support overwhelms the structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Recovery {
    Exact(Vec<(u64, i64)>),
    Dense,
}

impl KSparseRecovery {
    pub fn new(params: KSparseParams, seed: &SketchSeed) -> Self {
        let mut rng = seed.stream();
        let mut material = || rng.next_u64();
        let levels = params.levels();
        let samplers = (0..params.samplers())
            .map(|_| SamplerCore::build(params.n_dim, levels, KS_DEGREE, &mut material))
            .collect();
        Self { params, seed: seed.clone(), samplers }
    }

    pub fn update(&mut self, index: u64, delta: i64) {
        assert!(index < self.params.n_dim);
        for s in &mut self.samplers {
            s.apply(index, delta);
        }
    }

    /// Cell payload in a fixed order (sampler, level, bucket, phi/iota/tau).
    /// This is the linear part; seed material is deliberately excluded.
    pub fn elements(&self) -> Vec<u64> {
        let mut out = Vec::with_capacity(self.params.element_count());
        for s in &self.samplers {
            for u in &s.units {
                for c in &u.cells {
                    out.extend_from_slice(&[c.phi, c.iota, c.tau]);
                }
            }
        }
        out
    }

    /// Overwrite the cell payload, e.g. with an aggregated sum of the
    /// payloads of same-seed structures.
    pub fn set_elements(&mut self, elems: &[u64]) {
        assert_eq!(elems.len(), self.params.element_count());
        let mut it = elems.iter();
        for s in &mut self.samplers {
            for u in &mut s.units {
                for c in &mut u.cells {
                    c.phi = *it.next().unwrap();
                    c.iota = *it.next().unwrap();
                    c.tau = *it.next().unwrap();
                    debug_assert!(c.phi < field::P && c.iota < field::P && c.tau < field::P);
                }
            }
        }
    }

    /// Length-prefixed little-endian 64-bit words: parameters, then per
    /// sampler its seed-derived coefficients and cell payload.
    pub fn serialize(&self) -> Vec<u8> {
        let mut words: Vec<u64> =
            vec![self.params.k as u64, self.params.n_dim, self.params.c_s as u64, self.params.c_dense as u64];
        for s in &self.samplers {
            words.extend_from_slice(s.level_hash.coeffs());
            words.push(s.z);
            for u in &s.units {
                words.extend_from_slice(u.bucket.coeffs());
            }
            for u in &s.units {
                for c in &u.cells {
                    words.extend_from_slice(&[c.phi, c.iota, c.tau]);
                }
            }
        }
        let mut out = Vec::with_capacity(8 * (words.len() + 1));
        out.extend_from_slice(&(words.len() as u64).to_le_bytes());
        for w in words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn bit_len(&self) -> u64 {
        self.serialize().len() as u64 * 8
    }
}

pub fn ksparse_encode(
    params: KSparseParams,
    seed: &SketchSeed,
    updates: &[(u64, i64)],
) -> KSparseRecovery {
    let mut s = KSparseRecovery::new(params, seed);
    for &(i, d) in updates {
        s.update(i, d);
    }
    s
}

pub fn ksparse_add(a: &KSparseRecovery, b: &KSparseRecovery) -> Result<KSparseRecovery, SimError> {
    ksparse_merge(a, b, OneSparseCell::add)
}

pub fn ksparse_sub(a: &KSparseRecovery, b: &KSparseRecovery) -> Result<KSparseRecovery, SimError> {
    ksparse_merge(a, b, OneSparseCell::sub)
}

fn ksparse_merge(
    a: &KSparseRecovery,
    b: &KSparseRecovery,
    f: impl Fn(&OneSparseCell, &OneSparseCell) -> OneSparseCell + Copy,
) -> Result<KSparseRecovery, SimError> {
    if a.params != b.params || a.seed != b.seed {
        return Err(SimError::SeedMismatch);
    }
    debug_assert!(a.samplers.iter().zip(&b.samplers).all(|(x, y)| x.same_family(y)));
    let samplers = a.samplers.iter().zip(&b.samplers).map(|(x, y)| x.combine(y, f)).collect();
    Ok(KSparseRecovery { params: a.params, seed: a.seed.clone(), samplers })
}

/// Recover every nonzero coordinate. Samplers are consumed in order; each
/// one first absorbs the already-recovered coordinates as negative updates
/// (equivalent to subtracting the derived sampler of each recovery, which
/// the retained seed material makes possible), so no coordinate can be
/// sampled twice. A level-0 unit of an untouched sampler fingerprints the
/// whole residual, so an all-zero unit certifies completion. Dense comes
/// back when more than c_dense * k coordinates surface or when the sampler
/// supply runs out before the residual is certified empty.
pub fn ksparse_decode(s: &KSparseRecovery) -> Recovery {
    let dense_cap = s.params.c_dense as usize * s.params.k as usize;
    let mut recovered: BTreeMap<u64, i64> = BTreeMap::new();
    for src in &s.samplers {
        let mut local = src.clone();
        for (&i, &v) in &recovered {
            local.apply(i, -v);
        }
        if local.units[0].is_zero() {
            return Recovery::Exact(recovered.into_iter().collect());
        }
        let found = local.recover_all();
        if found.is_empty() {
            continue;
        }
        for (&i, &v) in &found {
            let prev = recovered.insert(i, v);
            debug_assert!(prev.is_none(), "coordinate {i} sampled twice");
            if recovered.len() > dense_cap {
                return Recovery::Dense;
            }
        }
        // the recovering sampler can also certify the new residual
        for (&i, &v) in &found {
            local.apply(i, -v);
        }
        if local.units[0].is_zero() {
            return Recovery::Exact(recovered.into_iter().collect());
        }
    }
    Recovery::Dense
}

// ---------------------------------------------------------------------------
// signed graph-neighbourhood encoding

/// Coordinate of the ordered pair (j, k) in the n^2-dimensional edge space.
pub fn agm_index(n: u32, j: u32, k: u32) -> u64 {
    debug_assert!(1 <= j && j <= n && 1 <= k && k <= n && j != k);
    (j as u64 - 1) * n as u64 + (k as u64 - 1)
}

/// Add node v's incident edges to a sketch of its neighbourhood vector:
/// +1 at the coordinate v owns (v first), -1 at the mirror. Summing the
/// vectors of both endpoints cancels an edge; over a node set C exactly the
/// cut edges of (C, rest) survive, one +1/-1 mirror pair per edge.
pub fn agm_update_node(sketch: &mut KSparseRecovery, n: u32, v: u32, incident: &[(u32, u32)]) {
    assert_eq!(sketch.params.n_dim, n as u64 * n as u64);
    for &(a, b) in incident {
        assert!(a != b && 1 <= a && a <= n && 1 <= b && b <= n);
        assert!(v == a || v == b, "edge ({a},{b}) not incident to {v}");
        let other = a + b - v;
        sketch.update(agm_index(n, v, other), 1);
        sketch.update(agm_index(n, other, v), -1);
    }
}

pub fn agm_encode_node(
    n: u32,
    v: u32,
    incident: &[(u32, u32)],
    params: KSparseParams,
    seed: &SketchSeed,
) -> KSparseRecovery {
    let mut s = KSparseRecovery::new(params, seed);
    agm_update_node(&mut s, n, v, incident);
    s
}

/// Decode a summed neighbourhood sketch into the cut edges it encodes.
/// Nonzero coordinates come in mirrored +1/-1 pairs and map 2-to-1 onto
/// edges; Dense surfaces as PromiseViolated.
pub fn cut_edges(n: u32, summed: &KSparseRecovery) -> Result<Vec<(u32, u32)>, SimError> {
    match ksparse_decode(summed) {
        Recovery::Dense => Err(SimError::PromiseViolated { limit: summed.params.k as u64 }),
        Recovery::Exact(coords) => {
            let by_index: BTreeMap<u64, i64> = coords.iter().copied().collect();
            let mut edges = BTreeSet::new();
            for &(idx, val) in &coords {
                let j = (idx / n as u64) as u32 + 1;
                let k = (idx % n as u64) as u32 + 1;
                debug_assert!(j != k && val.abs() == 1, "stray coordinate {idx}:{val}");
                debug_assert_eq!(
                    by_index.get(&agm_index(n, k, j)),
                    Some(&-val),
                    "unmirrored cut coordinate {idx}"
                );
                edges.insert((j.min(k), j.max(k)));
            }
            Ok(edges.into_iter().collect())
        }
    }
}

// ---------------------------------------------------------------------------
// distributed k-edge recovery

/// Limb layout for shipping field elements through the aggregation trees:
/// elements split into limb_width-bit limbs; each limb travels as a plain
/// sum with lg-bit headroom, and the leader reassembles sum(limb_i * 2^wi)
/// mod p, which equals the field sum of the members' elements exactly.
struct LimbLayout {
    limb_width: u32,
    limbs_per_elem: usize,
    /// limb sums packed per aggregation slice
    slots: usize,
    /// limb_width + headroom: width of one packed sum
    field_width: u32,
}

impl LimbLayout {
    fn new(c_bits: u32, lg: u32) -> Self {
        assert!(c_bits > lg, "payload budget too small for limb sums");
        let limb_width = (c_bits - lg).min(16);
        let field_width = limb_width + lg;
        Self {
            limb_width,
            limbs_per_elem: 61u32.div_ceil(limb_width) as usize,
            slots: (c_bits / field_width).max(1) as usize,
            field_width,
        }
    }

    fn split(&self, elems: &[u64]) -> Vec<u64> {
        let mask = (1u64 << self.limb_width) - 1;
        let mut out = Vec::with_capacity(elems.len() * self.limbs_per_elem);
        for &e in elems {
            debug_assert!(e < field::P);
            for j in 0..self.limbs_per_elem {
                out.push((e >> (j as u32 * self.limb_width)) & mask);
            }
        }
        out
    }

    fn join(&self, limb_sums: &[u64]) -> Vec<u64> {
        debug_assert_eq!(limb_sums.len() % self.limbs_per_elem, 0);
        limb_sums
            .chunks(self.limbs_per_elem)
            .map(|chunk| {
                let mut acc: u128 = 0;
                for (j, &s) in chunk.iter().enumerate() {
                    acc += (s as u128) << (j as u32 * self.limb_width);
                }
                (acc % field::P as u128) as u64
            })
            .collect()
    }

    /// Slot values of wave `w`: limbs [w*slots, (w+1)*slots), zero-padded.
    fn wave_slots(&self, limbs: &[u64], w: usize) -> Vec<u64> {
        (0..self.slots)
            .map(|i| limbs.get(w * self.slots + i).copied().unwrap_or(0))
            .collect()
    }

    fn encode_slots(&self, vals: &[u64]) -> Vec<u8> {
        debug_assert_eq!(vals.len(), self.slots);
        let mut w = BitWriter::with_capacity(self.slots * self.field_width as usize);
        for &v in vals {
            w.push(v, self.field_width as usize);
        }
        w.into_payload().0
    }

    fn decode_slots(&self, bytes: &[u8]) -> Vec<u64> {
        let mut r = BitReader::new(bytes, self.slots * self.field_width as usize);
        (0..self.slots).map(|_| r.pull(self.field_width as usize)).collect()
    }
}

// ---------------------------------------------------------------------------
// streamed aggregation of field vectors

pub use crate::comm::Transport;

/// One set's aggregation pipeline: a d-ary tree with the root on the leader,
/// leaves on the members in sorted order, and interior positions spread over
/// the members round-robin, so each member serves O(1) positions and the
/// per-wave load of any node stays constant.
struct PipeSet {
    set_idx: usize,
    d: u32,
    depth: u32,
    widths: Vec<u64>,
    /// hosts[l][k] = real node at tree position (l, k); hosts[0] is the
    /// leader, hosts[depth] the members in leaf order.
    hosts: Vec<Vec<u32>>,
}

fn build_pipes(part: &Partition, d: u32) -> Vec<PipeSet> {
    part.sets
        .iter()
        .enumerate()
        .map(|(set_idx, set)| {
            let mut members: Vec<u32> = set.clone();
            members.sort_unstable();
            let s = members.len() as u64;
            let widths = level_widths(s, d);
            let depth = widths.len() as u32 - 1;
            let mut hosts: Vec<Vec<u32>> = vec![vec![part.leaders[set_idx]]];
            let mut off = 0u64;
            for &w in widths.iter().take(depth as usize).skip(1) {
                hosts.push((0..w).map(|k| members[((off + k) % s) as usize]).collect());
                off += w;
            }
            if depth >= 1 {
                hosts.push(members);
            }
            PipeSet { set_idx, d, depth, widths, hosts }
        })
        .collect()
}

impl PipeSet {
    fn parent_host(&self, l: usize, k: usize) -> u32 {
        self.hosts[l - 1][k / self.d as usize]
    }
}

/// Per-wave unit loads (sends, receives) per real node; self-pairs are free.
fn pipe_loads(n: u32, pipes: &[PipeSet]) -> (Vec<u32>, Vec<u32>) {
    let mut send = vec![0u32; n as usize + 1];
    let mut recv = vec![0u32; n as usize + 1];
    for p in pipes {
        for l in 1..=p.depth as usize {
            for k in 0..p.widths[l] as usize {
                let src = p.hosts[l][k];
                let dst = p.parent_host(l, k);
                if src != dst {
                    send[src as usize] += 1;
                    recv[dst as usize] += 1;
                }
            }
        }
    }
    (send, recv)
}

/// Precomputed stream schedule shared by the two transports: limb layout,
/// per-set pipelines, and the wave timetable. `t_end == 0` means there is
/// nothing to stream (no payload or no multi-member set).
struct StreamPlan {
    layout: LimbLayout,
    pipes: Vec<PipeSet>,
    /// bits on the wire per unit message of the stream
    width: u32,
    total_limbs: usize,
    waves: usize,
    maxd: usize,
    /// waves per round
    wpr: usize,
    /// last wave-block index
    bmax: usize,
    /// blocks 0..bfull carry a full wpr waves
    bfull: usize,
    t_end: usize,
}

fn stream_plan(
    comm: &impl Comm,
    part: &Partition,
    d: u32,
    elem_count: usize,
) -> Result<StreamPlan, SimError> {
    let n = comm.size();
    let layout = LimbLayout::new(comm.bmsg(), ceil_log2(comm.real_n()));
    let width = layout.slots as u32 * layout.field_width;
    let total_limbs = elem_count * layout.limbs_per_elem;
    let waves = total_limbs.div_ceil(layout.slots);
    let pipes = build_pipes(part, d);
    let maxd = pipes.iter().map(|p| p.depth).max().unwrap_or(0) as usize;
    let mut plan = StreamPlan {
        layout,
        pipes,
        width,
        total_limbs,
        waves,
        maxd,
        wpr: 1,
        bmax: 0,
        bfull: 0,
        t_end: 0,
    };
    if waves == 0 || maxd == 0 {
        return Ok(plan);
    }

    let alpha = comm.alpha();
    let (send_pw, recv_pw) = pipe_loads(n, &plan.pipes);
    let per_wave = send_pw.iter().chain(recv_pw.iter()).copied().max().unwrap();
    if per_wave > alpha {
        return Err(SimError::CapacityExceeded {
            what: "aggregation pipeline per-wave load".into(),
            got: per_wave as u64,
            limit: alpha as u64,
        });
    }
    plan.wpr = (alpha / per_wave.max(1)) as usize;
    plan.bmax = (waves - 1) / plan.wpr;
    plan.bfull = waves / plan.wpr;
    plan.t_end = plan.bmax + maxd;
    Ok(plan)
}

impl StreamPlan {
    /// wave count fired by a level with root distance `gap` in round t
    fn waves_at(&self, t: usize, gap: usize) -> usize {
        if t < gap {
            return 0;
        }
        let blk = t - gap;
        if blk > self.bmax {
            return 0;
        }
        self.wpr.min(self.waves - blk * self.wpr)
    }

    /// Round t's stream traffic as per-pair ledger entries.
    fn traffic_at(&self, t: usize) -> Vec<(u32, u32, u32, u32)> {
        let mut tr = Vec::new();
        for p in &self.pipes {
            let dd = p.depth as usize;
            for l in 1..=dd {
                let cnt = self.waves_at(t, dd - l);
                if cnt == 0 {
                    continue;
                }
                for k in 0..p.widths[l] as usize {
                    let src = p.hosts[l][k];
                    let dst = p.parent_host(l, k);
                    if src != dst {
                        tr.push((src, dst, cnt as u32, self.width));
                    }
                }
            }
        }
        tr
    }

    /// Charge the whole schedule through ledger rounds. Rounds
    /// [maxd-1, min(bmax, bfull-1)] have every level of every set firing a
    /// full block: identical traffic, charged in bulk.
    fn ledger_rounds(&self, comm: &mut impl Comm) -> Result<(), SimError> {
        if self.t_end == 0 {
            return Ok(());
        }
        let lo = self.maxd - 1;
        let hi = self.bmax.min(self.bfull.wrapping_sub(1));
        if self.bfull > 0 && lo <= hi {
            for t in 0..lo {
                comm.advance_ledger(&self.traffic_at(t), 1)?;
            }
            comm.advance_ledger(&self.traffic_at(lo), (hi - lo + 1) as u64)?;
            for t in hi + 1..self.t_end {
                comm.advance_ledger(&self.traffic_at(t), 1)?;
            }
        } else {
            for t in 0..self.t_end {
                comm.advance_ledger(&self.traffic_at(t), 1)?;
            }
        }
        Ok(())
    }
}

/// Every leader learns the componentwise mod-p sum of its members' field
/// vectors. `elems[v]` is read only when v is a member, and must then hold
/// exactly `elem_count` residues. Output is indexed like `part.sets`.
///
/// Elements travel leaderwards through per-set pipelines as packed limb sums:
/// each vector splits into limbs short enough that a sum over all members
/// still fits beside ceil(log2 n) carry headroom in one message slot, and a
/// full unit message carries several slots. The pipeline keeps every level
/// busy, several waves per round up to the message budget, so x waves of
/// payload cost about x/W + depth rounds rather than x * depth.
pub fn aggregate_field_vectors(
    comm: &mut impl Comm,
    part: &Partition,
    elems: &[Vec<u64>],
    elem_count: usize,
    transport: Transport,
) -> Result<Vec<Vec<u64>>, SimError> {
    let n = comm.size();
    assert_eq!(elems.len(), n as usize + 1, "element lists are 1-based");

    // establishing the trees pins down the fanout and charges the setup
    // rounds
    let trees = build_comm_trees(comm, part, max_payload_bits(comm))?;

    for set in &part.sets {
        for &v in set {
            assert_eq!(elems[v as usize].len(), elem_count, "member {v} input size");
            debug_assert!(elems[v as usize].iter().all(|&e| e < field::P));
        }
    }

    let plan = stream_plan(comm, part, trees.d, elem_count)?;
    let StreamPlan { ref layout, ref pipes, width, total_limbs, wpr, t_end, .. } = plan;

    let mut out: Vec<Vec<u64>> = vec![Vec::new(); part.sets.len()];
    for p in pipes {
        if p.depth == 0 {
            out[p.set_idx] = elems[p.hosts[0][0] as usize].clone();
        }
    }
    if t_end == 0 {
        return Ok(out);
    }

    match transport {
        Transport::Ledger => {
            for p in pipes {
                if p.depth == 0 {
                    continue;
                }
                let mut acc = vec![0u128; elem_count];
                for &v in &p.hosts[p.depth as usize] {
                    for (i, &e) in elems[v as usize].iter().enumerate() {
                        acc[i] += e as u128;
                    }
                }
                out[p.set_idx] =
                    acc.into_iter().map(|a| (a % field::P as u128) as u64).collect();
            }
            plan.ledger_rounds(comm)?;
        }
        Transport::Messages => {
            let mask: u64 = if layout.field_width == 64 {
                u64::MAX
            } else {
                (1u64 << layout.field_width) - 1
            };
            let mut limbs: Vec<Vec<u64>> = vec![Vec::new(); n as usize + 1];
            for set in &part.sets {
                for &v in set {
                    limbs[v as usize] = layout.split(&elems[v as usize]);
                }
            }
            // hold[pi][l][k]: the block (l, k) folded last round and fires
            // this round, as per-wave slot sums
            let mut hold: Vec<Vec<Vec<Vec<Vec<u64>>>>> = pipes
                .iter()
                .map(|p| {
                    p.widths
                        .iter()
                        .map(|&w| vec![Vec::new(); w as usize])
                        .collect()
                })
                .collect();
            let mut sums: Vec<Vec<u64>> = vec![Vec::new(); part.sets.len()];
            for t in 0..t_end {
                // fire: every level sends its due block to its parents
                for (pi, p) in pipes.iter().enumerate() {
                    let dd = p.depth as usize;
                    for l in 1..=dd {
                        let cnt = plan.waves_at(t, dd - l);
                        if cnt == 0 {
                            continue;
                        }
                        let blk = t - (dd - l);
                        for k in 0..p.widths[l] as usize {
                            let src = p.hosts[l][k];
                            if src == p.parent_host(l, k) {
                                continue; // parent folds it locally
                            }
                            for wi in 0..cnt {
                                let vals = if l == dd {
                                    layout.wave_slots(&limbs[src as usize], blk * wpr + wi)
                                } else {
                                    hold[pi][l][k][wi].clone()
                                };
                                let bytes = layout.encode_slots(&vals);
                                comm.send_raw(src, p.parent_host(l, k), &bytes, width)?;
                            }
                        }
                    }
                }
                comm.advance()?;
                let mut inbox = vec![Vec::new()];
                for v in 1..=n {
                    inbox.push(comm.take_inbox(v));
                }
                let mut cur = vec![0usize; n as usize + 1];
                // fold, shallow levels first: a parent reads a self-hosted
                // child's previous block before that child refills it
                for (pi, p) in pipes.iter().enumerate() {
                    let dd = p.depth as usize;
                    for pl in 0..dd {
                        let cnt = plan.waves_at(t, dd - pl - 1);
                        if cnt == 0 {
                            continue;
                        }
                        let blk = t - (dd - pl - 1);
                        for k in 0..p.widths[pl] as usize {
                            let me = p.hosts[pl][k] as usize;
                            let lo_c = k * p.d as usize;
                            let hi_c = (lo_c + p.d as usize).min(p.widths[pl + 1] as usize);
                            let mut acc = vec![vec![0u64; layout.slots]; cnt];
                            for c in lo_c..hi_c {
                                let ch = p.hosts[pl + 1][c];
                                for (wi, a) in acc.iter_mut().enumerate() {
                                    let vals = if ch as usize == me {
                                        if pl + 1 == dd {
                                            layout.wave_slots(
                                                &limbs[ch as usize],
                                                blk * wpr + wi,
                                            )
                                        } else {
                                            hold[pi][pl + 1][c][wi].clone()
                                        }
                                    } else {
                                        let m = &inbox[me][cur[me]];
                                        cur[me] += 1;
                                        debug_assert_eq!(m.src, ch);
                                        layout.decode_slots(&m.payload)
                                    };
                                    for (ai, &v) in a.iter_mut().zip(vals.iter()) {
                                        // members fit the headroom, so the
                                        // mask never truncates
                                        *ai = (*ai + v) & mask;
                                    }
                                }
                            }
                            if pl == 0 {
                                for v in acc {
                                    sums[p.set_idx].extend(v);
                                }
                            } else {
                                hold[pi][pl][k] = acc;
                            }
                        }
                    }
                }
                debug_assert!((1..=n as usize).all(|v| cur[v] == inbox[v].len()));
            }
            for p in pipes {
                if p.depth >= 1 {
                    out[p.set_idx] = layout.join(&sums[p.set_idx][..total_limbs]);
                }
            }
        }
    }
    Ok(out)
}

/// Every set's leader learns the full set of edges leaving its set, given
/// the promise that no set has more than k outgoing edges. Node 1 broadcasts
/// a shared random pool, every node sketches its own neighbourhood with the
/// shared seeds, the sketches stream leaderwards as limb sums, and each
/// leader decodes the aggregate.
///
/// `incident[v]` lists the edges of node v as (u, w) endpoint pairs. Output
/// is indexed like `part.sets`. A leader whose cut exceeds the structure's
/// capacity surfaces as PromiseViolated.
pub fn k_edge_recovery(
    comm: &mut impl Comm,
    part: &Partition,
    k: u32,
    incident: &[Vec<(u32, u32)>],
) -> Result<Vec<Vec<(u32, u32)>>, SimError> {
    k_edge_recovery_with(comm, part, k, incident, Transport::Ledger)
}

/// `k_edge_recovery` under an explicit transport; the two transports give
/// identical results and identical round accounting.
pub fn k_edge_recovery_with(
    comm: &mut impl Comm,
    part: &Partition,
    k: u32,
    incident: &[Vec<(u32, u32)>],
    transport: Transport,
) -> Result<Vec<Vec<(u32, u32)>>, SimError> {
    let n = comm.size();
    assert_eq!(incident.len(), n as usize + 1, "incident lists are 1-based");
    assert!(k >= 1);
    let lg = ceil_log2(n);

    // shared randomness, k log n + log^2 n bits up to the word constant
    let pool_bits = 16 * (k * lg + lg * lg);
    let pool = broadcast_shared_randomness_via(comm, pool_bits, transport)?;
    let seed = SketchSeed::from_pool(&pool);
    let params = KSparseParams::new(k, n as u64 * n as u64);
    // the hash family is derived from the shared pool once; every per-node
    // or per-set structure starts as a copy of it
    let template = KSparseRecovery::new(params, &seed);
    let mut wrk = template.clone();

    let mut out = Vec::with_capacity(part.sets.len());
    match transport {
        Transport::Messages => {
            // per-member neighbourhood sketches travel as real limb streams
            let mut elems: Vec<Vec<u64>> = vec![Vec::new(); n as usize + 1];
            for set in &part.sets {
                for &v in set {
                    wrk.clone_from(&template);
                    agm_update_node(&mut wrk, n, v, &incident[v as usize]);
                    elems[v as usize] = wrk.elements();
                }
            }
            let summed = aggregate_field_vectors(
                comm,
                part,
                &elems,
                params.element_count(),
                transport,
            )?;
            // leaders rebuild the aggregated structure from the sums and
            // decode
            for sums in &summed {
                wrk.set_elements(sums);
                out.push(cut_edges(n, &wrk)?);
            }
        }
        Transport::Ledger => {
            let trees = build_comm_trees(comm, part, max_payload_bits(comm))?;
            let plan = stream_plan(comm, part, trees.d, params.element_count())?;
            plan.ledger_rounds(comm)?;
            // The sketch is linear, so the aggregate each leader decodes
            // equals one sketch of its set's net update multiset. Updates
            // from two members of the same set cancel coordinatewise, so
            // only the cut coordinates reach the field arithmetic, and the
            // work per set is O(cut size), not O(sum of member degrees).
            for set in &part.sets {
                let mut net: BTreeMap<u64, i64> = BTreeMap::new();
                for &v in set {
                    for &(a, b) in &incident[v as usize] {
                        assert!(a != b && 1 <= a && a <= n && 1 <= b && b <= n);
                        assert!(v == a || v == b, "edge ({a},{b}) not incident to {v}");
                        let other = a + b - v;
                        *net.entry(agm_index(n, v, other)).or_insert(0) += 1;
                        *net.entry(agm_index(n, other, v)).or_insert(0) -= 1;
                    }
                }
                wrk.clone_from(&template);
                for (&idx, &delta) in &net {
                    if delta != 0 {
                        wrk.update(idx, delta);
                    }
                }
                out.push(cut_edges(n, &wrk)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::RealComm;
    use crate::engine::{Engine, SimConfig};
    use crate::graph::{self, Graph, Weights};
    use crate::oracle;
    use rand::Rng;

    /// Chi-square statistic against the uniform law over `counts.len()` cells.
    fn chi_square(counts: &[u64]) -> f64 {
        let total: u64 = counts.iter().sum();
        let expect = total as f64 / counts.len() as f64;
        counts.iter().map(|&o| (o as f64 - expect).powi(2) / expect).sum()
    }

    // 0.01 critical values for the degrees of freedom used below
    const CHI2_CRIT_9: f64 = 21.666;
    const CHI2_CRIT_15: f64 = 30.578;

    #[test]
    fn kwise_eval_matches_direct_polynomial() {
        // degree 1: constant polynomial
        let c = KWiseHash::from_coeffs(vec![12345]);
        for x in [0u64, 1, 999, field::P - 1] {
            assert_eq!(c.eval(x), 12345);
            assert_eq!(c.eval_range(x, 100), 45);
        }
        // independent evaluation via u128 arithmetic, no field.rs involved
        let coeffs = [0x1234_5678_9abc_u64, 7, (1 << 60) + 3, 0x0fed_cba9];
        let h = KWiseHash::from_coeffs(coeffs.to_vec());
        let p = field::P as u128;
        for x in [0u64, 1, 2] {
            let mut direct: u128 = 0;
            for &c in &coeffs {
                direct = (direct * x as u128 + c as u128) % p;
            }
            assert_eq!(h.eval(x) as u128, direct);
        }
    }

    #[test]
    fn pairwise_pairs_are_uniform() {
        // joint distribution of (h(1) mod 4, h(2) mod 4) over fresh seeds
        let mut counts = [0u64; 16];
        for seed in 0..10_000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 2 + 1);
            let mut material = || rng.next_u64();
            let h = KWiseHash::from_material(&mut material, 2);
            let cell = (h.eval_range(1, 4) * 4 + h.eval_range(2, 4)) as usize;
            counts[cell] += 1;
        }
        let chi = chi_square(&counts);
        assert!(chi < CHI2_CRIT_15, "chi-square {chi} too large: {counts:?}");
    }

    #[test]
    fn one_sparse_exact_cases() {
        let zero = OneSparseCell::new(5);
        assert_eq!(one_sparse_decide(&zero), None);

        let mut cell = OneSparseCell::new(977);
        cell.update(17, 3);
        assert_eq!(one_sparse_decide(&cell), Some((17, 3)));

        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..100 {
            let mut c = OneSparseCell::new(field::reduce64(rng.gen()).max(2));
            let i = rng.gen_range(0..1u64 << 32);
            let v = rng.gen_range(-(1i64 << 30)..1 << 30);
            if v == 0 {
                continue;
            }
            c.update(i, v);
            assert_eq!(one_sparse_decide(&c), Some((i, v)));
        }
    }

    #[test]
    fn one_sparse_linearity_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let z = field::reduce64(rng.gen()).max(2);
            let (mut a, mut b, mut both) =
                (OneSparseCell::new(z), OneSparseCell::new(z), OneSparseCell::new(z));
            for _ in 0..30 {
                let i = rng.gen_range(0..256u64);
                let v = rng.gen_range(-1000i64..1000);
                if rng.gen() {
                    a.update(i, v);
                } else {
                    b.update(i, v);
                }
                both.update(i, v);
            }
            assert_eq!(a.add(&b), both);
            assert!(both.sub(&a).sub(&b).is_zero());
        }
    }

    #[test]
    fn one_sparse_false_accepts_are_rare() {
        // 2-sparse vectors must be rejected by the fingerprint
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut accepts = 0u32;
        for _ in 0..100_000 {
            let mut cell = OneSparseCell::new(field::reduce64(rng.gen()).max(2));
            let i = rng.gen_range(0..1u64 << 20);
            let j = (i + rng.gen_range(1..1u64 << 20)) % (1 << 20);
            let v1 = rng.gen_range(1i64..1 << 20) * if rng.gen() { 1 } else { -1 };
            let v2 = rng.gen_range(1i64..1 << 20) * if rng.gen() { 1 } else { -1 };
            cell.update(i, v1);
            cell.update(j, v2);
            if one_sparse_decide(&cell).is_some() {
                accepts += 1;
            }
        }
        assert!(accepts <= 100, "false-accept rate {accepts}/100000 above 1e-3");
    }

    #[test]
    fn l0_zero_fails_and_singleton_succeeds() {
        let zero = L0Sampler::new(1 << 12, &SketchSeed::from_u64(7));
        assert_eq!(l0_sample(&zero), None);

        let mut hits = 0u32;
        for trial in 0..10_000u64 {
            let mut s = L0Sampler::new(1 << 12, &SketchSeed::from_u64(trial));
            s.update(1234, 5);
            match l0_sample(&s) {
                Some(got) => {
                    assert_eq!(got, (1234, 5));
                    hits += 1;
                }
                None => {}
            }
        }
        // measured success probability must clear the constant floor 0.2
        assert!(hits >= 2000, "success rate {hits}/10000 below 0.2");
    }

    #[test]
    fn l0_sampling_is_uniform_over_support() {
        let support: Vec<u64> = vec![3, 77, 500, 901, 1422, 2048, 2777, 3003, 3678, 4090];
        let mut counts = vec![0u64; support.len()];
        let mut successes = 0u64;
        for trial in 0..10_000u64 {
            let mut s = L0Sampler::new(4096, &SketchSeed::from_u64(0xbeef_0000 + trial));
            for (r, &i) in support.iter().enumerate() {
                s.update(i, r as i64 + 1);
            }
            if let Some((i, v)) = l0_sample(&s) {
                let r = support.iter().position(|&x| x == i).expect("sampled off-support");
                assert_eq!(v, r as i64 + 1);
                counts[r] += 1;
                successes += 1;
            }
        }
        assert!(successes >= 2000, "success rate {successes}/10000 below 0.2");
        let chi = chi_square(&counts);
        assert!(chi < CHI2_CRIT_9, "conditional law not uniform: chi {chi}, {counts:?}");
    }

    #[test]
    fn l0_linearity_is_exact() {
        let seed = SketchSeed::from_u64(99);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..20 {
            let mut a = L0Sampler::new(1024, &seed);
            let mut b = L0Sampler::new(1024, &seed);
            let mut both = L0Sampler::new(1024, &seed);
            for _ in 0..40 {
                let i = rng.gen_range(0..1024u64);
                let v = rng.gen_range(-50i64..50);
                if rng.gen() {
                    a.update(i, v);
                } else {
                    b.update(i, v);
                }
                both.update(i, v);
            }
            assert_eq!(a.add(&b).unwrap(), both);
        }
        let other = L0Sampler::new(1024, &SketchSeed::from_u64(100));
        let a = L0Sampler::new(1024, &seed);
        assert!(matches!(a.add(&other), Err(SimError::SeedMismatch)));
    }

    #[test]
    fn ksparse_identity_and_inverse() {
        let params = KSparseParams::new(16, 1 << 12);
        let seed = SketchSeed::from_u64(4242);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let updates: Vec<(u64, i64)> =
            (0..12).map(|_| (rng.gen_range(0..1u64 << 12), rng.gen_range(1i64..100))).collect();
        let x = ksparse_encode(params, &seed, &updates);
        let zero = ksparse_encode(params, &seed, &[]);
        assert_eq!(ksparse_add(&x, &zero).unwrap().serialize(), x.serialize());

        let neg: Vec<(u64, i64)> = updates.iter().map(|&(i, v)| (i, -v)).collect();
        let y = ksparse_encode(params, &seed, &neg);
        assert_eq!(ksparse_decode(&ksparse_add(&x, &y).unwrap()), Recovery::Exact(vec![]));

        let other = KSparseRecovery::new(params, &SketchSeed::from_u64(4243));
        assert!(matches!(ksparse_add(&x, &other), Err(SimError::SeedMismatch)));
    }

    #[test]
    fn ksparse_add_matches_direct_encoding() {
        let params = KSparseParams::new(8, 1024);
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        for trial in 0..1000u64 {
            let seed = SketchSeed::from_u64(trial);
            let mut merged: BTreeMap<u64, i64> = BTreeMap::new();
            let draw = |rng: &mut ChaCha8Rng, merged: &mut BTreeMap<u64, i64>| {
                let ups: Vec<(u64, i64)> = (0..rng.gen_range(0..6))
                    .map(|_| (rng.gen_range(0..1024u64), rng.gen_range(-30i64..30)))
                    .collect();
                for &(i, v) in &ups {
                    *merged.entry(i).or_insert(0) += v;
                }
                ups
            };
            let xs = draw(&mut rng, &mut merged);
            let ys = draw(&mut rng, &mut merged);
            let sum = ksparse_add(
                &ksparse_encode(params, &seed, &xs),
                &ksparse_encode(params, &seed, &ys),
            )
            .unwrap();
            let direct: Vec<(u64, i64)> = xs.iter().chain(&ys).copied().collect();
            let direct = ksparse_encode(params, &seed, &direct);
            assert_eq!(sum.serialize(), direct.serialize(), "linearity broke at trial {trial}");

            merged.retain(|_, v| *v != 0);
            let want: Vec<(u64, i64)> = merged.into_iter().collect();
            assert_eq!(ksparse_decode(&sum), Recovery::Exact(want), "decode at trial {trial}");
        }
    }

    #[test]
    fn ksparse_recovers_k_supports() {
        let params = KSparseParams::new(32, 1 << 16);
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let mut exact = 0u32;
        for trial in 0..500u64 {
            let mut planted: BTreeMap<u64, i64> = BTreeMap::new();
            while planted.len() < 32 {
                let v = rng.gen_range(-(1i64 << 16)..1 << 16);
                if v != 0 {
                    planted.insert(rng.gen_range(0..1u64 << 16), v);
                }
            }
            let updates: Vec<(u64, i64)> = planted.iter().map(|(&i, &v)| (i, v)).collect();
            let s = ksparse_encode(params, &SketchSeed::from_u64(trial), &updates);
            if ksparse_decode(&s) == Recovery::Exact(updates.clone()) {
                exact += 1;
            }
        }
        assert!(exact >= 495, "exact recovery rate {exact}/500 below 99%");
    }

    #[test]
    fn ksparse_flags_dense_supports() {
        // support 4k must be reported Dense, not silently truncated
        let params = KSparseParams::new(32, 1 << 16);
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mut dense = 0u32;
        for trial in 0..200u64 {
            let mut planted: BTreeMap<u64, i64> = BTreeMap::new();
            while planted.len() < 128 {
                planted.insert(rng.gen_range(0..1u64 << 16), *[-2, -1, 1, 3].iter().nth(rng.gen_range(0..4)).unwrap());
            }
            let updates: Vec<(u64, i64)> = planted.into_iter().collect();
            let s = ksparse_encode(params, &SketchSeed::from_u64(9000 + trial), &updates);
            if ksparse_decode(&s) == Recovery::Dense {
                dense += 1;
            }
        }
        assert!(dense >= 190, "dense rate {dense}/200 below 95%");
    }

    #[test]
    fn ksparse_size_tracks_parameter_shape() {
        // serialized bits against (k + lg n) * lg k * lg n across the grid
        let mut ratios = Vec::new();
        for &k in &[8u32, 32, 128] {
            for &lgn in &[10u32, 16] {
                let params = KSparseParams::new(k, 1u64 << lgn);
                let s = KSparseRecovery::new(params, &SketchSeed::from_u64(1));
                let shape = (k + lgn) as f64 * (k as f64).log2() * lgn as f64;
                ratios.push(s.bit_len() as f64 / shape);
            }
        }
        let hi = ratios.iter().cloned().fold(0.0f64, f64::max);
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(hi <= 1024.0, "fitted constant {hi} out of range");
        assert!(hi / lo <= 4.0, "size does not track the shape: {ratios:?}");
    }

    fn edge_pairs(g: &Graph) -> Vec<Vec<(u32, u32)>> {
        let mut inc = vec![Vec::new(); g.n as usize + 1];
        for e in &g.edges {
            inc[e.u as usize].push((e.u, e.v));
            inc[e.v as usize].push((e.u, e.v));
        }
        inc
    }

    fn brute_cut(g: &Graph, inside: &[bool]) -> Vec<(u32, u32)> {
        let mut cut: Vec<(u32, u32)> =
            oracle::cut_edges(g, inside).iter().map(|e| (e.u, e.v)).collect();
        cut.sort_unstable();
        cut
    }

    #[test]
    fn agm_basic_cancellation() {
        let params = KSparseParams::new(4, 9);
        let seed = SketchSeed::from_u64(50);
        // isolated node: zero sketch
        let lonely = agm_encode_node(3, 1, &[], params, &seed);
        assert_eq!(ksparse_decode(&lonely), Recovery::Exact(vec![]));
        assert_eq!(cut_edges(3, &lonely).unwrap(), vec![]);

        // single edge {1,2}: the two endpoint sketches cancel
        let s1 = agm_encode_node(3, 1, &[(1, 2)], params, &seed);
        let s2 = agm_encode_node(3, 2, &[(1, 2)], params, &seed);
        let sum = ksparse_add(&s1, &s2).unwrap();
        assert_eq!(cut_edges(3, &sum).unwrap(), vec![]);

        // path 1-2-3, C = {1,2}: only edge {2,3} survives
        let t1 = agm_encode_node(3, 1, &[(1, 2)], params, &seed);
        let t2 = agm_encode_node(3, 2, &[(1, 2), (2, 3)], params, &seed);
        let sum = ksparse_add(&t1, &t2).unwrap();
        assert_eq!(cut_edges(3, &sum).unwrap(), vec![(2, 3)]);
    }

    #[test]
    fn agm_star_cut() {
        let g = graph::star(6, Weights::Unit, 0);
        let params = KSparseParams::new(10, 36);
        let seed = SketchSeed::from_u64(51);
        let inc = edge_pairs(&g);
        let center = agm_encode_node(6, 1, &inc[1], params, &seed);
        let mut want = brute_cut(&g, &[false, true, false, false, false, false, false]);
        want.sort_unstable();
        assert_eq!(cut_edges(6, &center).unwrap(), want);
        assert_eq!(want.len(), 5);
    }

    #[test]
    fn agm_exhaustive_small_graphs() {
        let graphs = vec![
            graph::path(7, Weights::Unit, 0),
            graph::cycle(8, Weights::Unit, 0),
            graph::gnm(9, 14, Weights::Unit, 5),
            graph::complete(6, Weights::Unit, 0),
        ];
        for g in graphs {
            let n = g.n;
            let k = (2 * g.m() as u32).max(4);
            let params = KSparseParams::new(k, n as u64 * n as u64);
            let seed = SketchSeed::from_u64(400 + n as u64);
            let inc = edge_pairs(&g);
            let nodes: Vec<KSparseRecovery> = (0..=n)
                .map(|v| {
                    if v == 0 {
                        KSparseRecovery::new(params, &seed)
                    } else {
                        agm_encode_node(n, v, &inc[v as usize], params, &seed)
                    }
                })
                .collect();
            for mask in 0u32..1 << n {
                let mut inside = vec![false; n as usize + 1];
                let mut sum = KSparseRecovery::new(params, &seed);
                for v in 1..=n {
                    if mask >> (v - 1) & 1 == 1 {
                        inside[v as usize] = true;
                        sum = ksparse_add(&sum, &nodes[v as usize]).unwrap();
                    }
                }
                assert_eq!(
                    cut_edges(n, &sum).unwrap(),
                    brute_cut(&g, &inside),
                    "graph n={n} subset {mask:#b}"
                );
            }
        }
    }

    #[test]
    fn agm_random_cuts_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        for trial in 0..100u64 {
            let g = graph::gnm(64, 70, Weights::Unit, trial);
            let mut inside = vec![false; 65];
            for _ in 0..rng.gen_range(4..20usize) {
                inside[rng.gen_range(1..=64usize)] = true;
            }
            let want = brute_cut(&g, &inside);
            let k = (2 * want.len() as u32).max(4);
            let params = KSparseParams::new(k, 64 * 64);
            let seed = SketchSeed::from_u64(7000 + trial);
            let inc = edge_pairs(&g);
            let mut sum = KSparseRecovery::new(params, &seed);
            for v in 1..=64u32 {
                if inside[v as usize] {
                    let s = agm_encode_node(64, v, &inc[v as usize], params, &seed);
                    sum = ksparse_add(&sum, &s).unwrap();
                }
            }
            assert_eq!(cut_edges(64, &sum).unwrap(), want, "trial {trial}");
        }
    }

    /// Split 1..=n into two halves with `cross` planted cut edges and some
    /// intra-half noise; returns (graph, partition).
    fn halved_instance(n: u32, cross: u32, seed: u64) -> (Graph, Partition) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = n / 2;
        let mut edges = BTreeSet::new();
        while (edges.len() as u32) < cross {
            let u = rng.gen_range(1..=half);
            let v = rng.gen_range(half + 1..=n);
            edges.insert((u, v));
        }
        let mut intra = 0;
        while intra < n {
            let base = if rng.gen() { 0 } else { half };
            let u = rng.gen_range(1..=half - 1) + base;
            let v = rng.gen_range(u + 1 - base..=half) + base;
            if u != v && edges.insert((u.min(v), u.max(v))) {
                intra += 1;
            }
        }
        let g = Graph::new(n, edges.iter().map(|&(u, v)| crate::graph::Edge::new(u, v, 1)).collect());
        let part = Partition::new(
            vec![(1..=half).collect(), (half + 1..=n).collect()],
            vec![1, half + 1],
        )
        .unwrap();
        (g, part)
    }

    #[test]
    fn edge_recovery_on_singletons_returns_adjacency() {
        let g = graph::gnm(32, 40, Weights::Unit, 9);
        let inc = edge_pairs(&g);
        let k = inc.iter().map(Vec::len).max().unwrap() as u32;
        let run = || {
            let mut eng = Engine::new(SimConfig::new(32, 5));
            let got = {
                let mut comm = RealComm::new(&mut eng);
                k_edge_recovery(&mut comm, &Partition::singletons(32), k, &inc).unwrap()
            };
            assert_eq!(eng.report().violations, 0);
            (got, eng.rounds())
        };
        let (got, rounds) = run();
        for v in 1..=32u32 {
            let mut want: Vec<(u32, u32)> = inc[v as usize].clone();
            want.sort_unstable();
            assert_eq!(got[v as usize - 1], want, "node {v}");
        }
        // the protocol is deterministic end to end
        let again = run();
        assert_eq!(again, (got, rounds));
    }

    #[test]
    fn edge_recovery_across_two_halves() {
        let (g, part) = halved_instance(64, 8, 77);
        let inc = edge_pairs(&g);
        let mut eng = Engine::new(SimConfig::new(64, 6));
        let got = {
            let mut comm = RealComm::new(&mut eng);
            k_edge_recovery(&mut comm, &part, 8, &inc).unwrap()
        };
        let inside: Vec<bool> = (0..=64).map(|v| v >= 1 && v <= 32).collect();
        let want = brute_cut(&g, &inside);
        assert_eq!(want.len(), 8);
        assert_eq!(got[0], want, "leader of the low half");
        assert_eq!(got[1], want, "leader of the high half");
        assert_eq!(eng.report().violations, 0);
        assert!(eng.rounds() > 0);
    }

    #[test]
    fn edge_recovery_reports_promise_violation() {
        // planted cut of 4k against a promise of k
        let (g, part) = halved_instance(64, 32, 78);
        let inc = edge_pairs(&g);
        let mut eng = Engine::new(SimConfig::new(64, 7));
        let err = {
            let mut comm = RealComm::new(&mut eng);
            k_edge_recovery(&mut comm, &part, 8, &inc).unwrap_err()
        };
        assert!(matches!(err, SimError::PromiseViolated { limit: 8 }));
    }

    /// A random covering partition of n nodes: labels drawn per node, each
    /// label's lowest node promoted to leader.
    fn random_partition(n: u32, groups: u32, rng: &mut ChaCha8Rng) -> Partition {
        let mut raw: Vec<u32> = (0..=n)
            .map(|v| if v == 0 { 0 } else { rng.next_u32() % groups })
            .collect();
        // canonical labels: lowest member of each group
        let mut first: BTreeMap<u32, u32> = BTreeMap::new();
        for v in 1..=n {
            first.entry(raw[v as usize]).or_insert(v);
        }
        for v in 1..=n {
            raw[v as usize] = first[&raw[v as usize]];
        }
        Partition::from_labels(&raw).unwrap()
    }

    /// Messages and Ledger are the same protocol: identical sums out of the
    /// leaders and identical engine reports, across shapes with deep and
    /// shallow pipelines, singletons, and a partial trailing wave block.
    #[test]
    fn stream_transports_are_equivalent() {
        for (n, groups, elem_count, seed) in
            [(10u32, 3u32, 7usize, 5u64), (33, 4, 38, 6), (33, 30, 3, 7), (16, 1, 11, 8)]
        {
            let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
            let part = random_partition(n, groups, &mut rng);
            let mut elems: Vec<Vec<u64>> = vec![Vec::new(); n as usize + 1];
            for v in 1..=n {
                elems[v as usize] =
                    (0..elem_count).map(|_| rng.next_u64() % field::P).collect();
            }

            let mut run = |tp: Transport| {
                let mut eng = Engine::new(SimConfig::new(n, 40 + seed));
                let got = {
                    let mut comm = RealComm::new(&mut eng);
                    aggregate_field_vectors(&mut comm, &part, &elems, elem_count, tp)
                        .unwrap()
                };
                (got, eng.report())
            };
            let (sums_msg, rep_msg) = run(Transport::Messages);
            let (sums_led, rep_led) = run(Transport::Ledger);
            assert_eq!(sums_msg, sums_led, "n={n} groups={groups}");
            assert_eq!(rep_msg, rep_led, "n={n} groups={groups}");
            assert_eq!(rep_msg.violations, 0);

            // both match the direct per-set field sums
            for (i, set) in part.sets.iter().enumerate() {
                for e in 0..elem_count {
                    let want = set.iter().fold(0u64, |acc, &v| {
                        field::add(acc, elems[v as usize][e])
                    });
                    assert_eq!(sums_msg[i][e], want, "set {i} elem {e}");
                }
            }
        }
    }

    /// The protocol on top agrees across transports too, end to end.
    #[test]
    fn edge_recovery_transports_are_equivalent() {
        let (g, part) = halved_instance(16, 4, 21);
        let inc = edge_pairs(&g);
        let mut run = |tp: Transport| {
            let mut eng = Engine::new(SimConfig::new(16, 9));
            let got = {
                let mut comm = RealComm::new(&mut eng);
                k_edge_recovery_with(&mut comm, &part, 4, &inc, tp).unwrap()
            };
            (got, eng.report())
        };
        let (edges_msg, rep_msg) = run(Transport::Messages);
        let (edges_led, rep_led) = run(Transport::Ledger);
        assert_eq!(edges_msg, edges_led);
        assert_eq!(rep_msg, rep_led);
        assert!(rep_msg.rounds > 0);
        assert_eq!(rep_msg.violations, 0);
    }
}
