//! The synchronous round engine.
//!
//! n nodes proceed in rounds; each round has a local phase (arbitrary local
//! computation, message staging) and a communication phase (`advance`), which
//! delivers staged messages and enforces the per-node budget: at most
//! `max_msgs` unit messages sent and received per round, each at most
//! `max_bits_per_msg` bits.
//!
//! Budgets default to strict-on-send (over-staging is an error) and
//! warn-and-count on receive. Two runs with the same `SimConfig` and inputs
//! produce identical traces and reports; all randomness is derived from the
//! config seed.

use crate::bits::BitWriter;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use smallvec::SmallVec;
use std::io::Write;

pub type NodeId = u32; // 1-based

#[derive(Debug, Clone, Serialize)]
pub struct SimConfig {
    pub n: u32,
    pub seed: u64,
    /// Message budget multiplier: max_msgs = c_msg * ceil(log2 n).
    pub c_msg: u32,
    /// Bit budget multiplier: max_bits_per_msg = c_bits * ceil(log2 n).
    pub c_bits: u32,
    pub strict_send: bool,
    pub strict_recv: bool,
}

impl SimConfig {
    pub fn new(n: u32, seed: u64) -> Self {
        Self { n, seed, c_msg: 4, c_bits: 8, strict_send: true, strict_recv: false }
    }

    pub fn log2n(&self) -> u32 {
        ceil_log2(self.n)
    }

    pub fn max_msgs(&self) -> u32 {
        self.c_msg * self.log2n()
    }

    pub fn max_bits_per_msg(&self) -> u32 {
        self.c_bits * self.log2n()
    }
}

/// ceil(log2 x) for x ≥ 1, with the convention ceil_log2(1) = 1 so budgets
/// and id widths stay positive on degenerate instances.
pub fn ceil_log2(x: u32) -> u32 {
    debug_assert!(x >= 1);
    let v = 32 - x.saturating_sub(1).leading_zeros();
    v.max(1)
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum SimError {
    #[error("message of {bits} bits from {src} to {dst} exceeds {limit}-bit limit")]
    MessageTooLarge { src: NodeId, dst: NodeId, bits: u32, limit: u32 },
    #[error("node {node} {dir} {count} unit messages in round {round}, budget {limit}")]
    BudgetViolation { node: NodeId, round: u64, dir: Direction, count: u32, limit: u32 },
    #[error("invalid node id {id} (n = {n})")]
    InvalidNode { id: NodeId, n: u32 },
    #[error("protocol made no progress at round {round}")]
    Hang { round: u64 },
    #[error("BSP superstep: machine {machine} {dir} {count} messages, h = {h}")]
    HExceeded { machine: u32, dir: Direction, count: u32, h: u32 },
    #[error("PRAM step {step}: cell {cell} touched by more than one processor")]
    ExclusivityViolation { step: u64, cell: u64 },
    #[error("PRAM address {addr} outside memory of {size} cells")]
    AddressOutOfRange { addr: u64, size: u64 },
    #[error("aggregate function is not splittable at the requested slice width")]
    NotSplittable,
    #[error("multicast payload of {bits} bits exceeds log^2(n)/2 = {limit}")]
    MessageSizeTooLarge { bits: u32, limit: u32 },
    #[error("partition sets overlap at node {node}")]
    PartitionOverlap { node: NodeId },
    #[error("recovery promise violated: support exceeds {limit}")]
    PromiseViolated { limit: u64 },
    #[error("retries exhausted after {attempts} attempts")]
    RetryExhausted { attempts: u32 },
    #[error("capacity exceeded: {what} = {got}, limit {limit}")]
    CapacityExceeded { what: String, got: u64, limit: u64 },
    #[error("sketches built from different seed material")]
    SeedMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::Sent => write!(f, "sent"),
            Direction::Received => write!(f, "received"),
        }
    }
}

/// A delivered unit message. Payload bytes hold `bits` significant bits.
#[derive(Debug, Clone)]
pub struct Message {
    pub src: NodeId,
    pub bits: u32,
    pub payload: SmallVec<[u8; 16]>,
}

/// Instrumentation accumulated over a run.
#[derive(Debug, Clone, Default, Serialize, PartialEq, Eq)]
pub struct RoundReport {
    pub rounds: u64,
    pub total_messages: u64,
    pub total_bits: u64,
    pub max_sent_per_node_round: u32,
    pub max_recv_per_node_round: u32,
    pub violations: u64,
}

struct Staged {
    src: NodeId,
    dst: NodeId,
    msg: Message,
}

pub struct Engine {
    cfg: SimConfig,
    round: u64,
    staged: Vec<Staged>,
    inboxes: Vec<Vec<Message>>,
    dirty_inboxes: Vec<u32>,
    sent_now: Vec<u32>,
    dirty_sent: Vec<u32>,
    recv_now: Vec<u32>,
    report: RoundReport,
    rngs: Vec<Option<ChaCha8Rng>>,
    trace: Option<Box<dyn Write>>,
}

impl Engine {
    pub fn new(cfg: SimConfig) -> Self {
        let n = cfg.n as usize;
        assert!(cfg.n >= 1, "need at least one node");
        Self {
            cfg,
            round: 0,
            staged: Vec::new(),
            inboxes: vec![Vec::new(); n + 1],
            dirty_inboxes: Vec::new(),
            sent_now: vec![0; n + 1],
            dirty_sent: Vec::new(),
            recv_now: vec![0; n + 1],
            report: RoundReport::default(),
            rngs: vec![None; n + 1],
            trace: None,
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn n(&self) -> u32 {
        self.cfg.n
    }

    pub fn log2n(&self) -> u32 {
        self.cfg.log2n()
    }

    pub fn max_msgs(&self) -> u32 {
        self.cfg.max_msgs()
    }

    pub fn bmsg(&self) -> u32 {
        self.cfg.max_bits_per_msg()
    }

    pub fn rounds(&self) -> u64 {
        self.round
    }

    pub fn report(&self) -> RoundReport {
        self.report.clone()
    }

    pub fn set_trace(&mut self, w: Box<dyn Write>) {
        self.trace = Some(w);
    }

    /// Deterministic per-node private random stream, derived from (seed, id).
    pub fn node_rng(&mut self, node: NodeId) -> &mut ChaCha8Rng {
        let slot = &mut self.rngs[node as usize];
        slot.get_or_insert_with(|| {
            ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, node as u64))
        })
    }

    fn check_node(&self, id: NodeId) -> Result<(), SimError> {
        if id == 0 || id > self.cfg.n {
            Err(SimError::InvalidNode { id, n: self.cfg.n })
        } else {
            Ok(())
        }
    }

    /// Stage one unit message. A send to self is local bookkeeping: delivered
    /// next round, charged nothing.
    pub fn send_raw(
        &mut self,
        src: NodeId,
        dst: NodeId,
        payload: &[u8],
        bits: u32,
    ) -> Result<(), SimError> {
        self.check_node(src)?;
        self.check_node(dst)?;
        debug_assert!(payload.len() == (bits as usize).div_ceil(8));
        if src != dst {
            let limit = self.cfg.max_bits_per_msg();
            if bits > limit {
                return Err(SimError::MessageTooLarge { src, dst, bits, limit });
            }
            let cnt = &mut self.sent_now[src as usize];
            if *cnt == 0 {
                self.dirty_sent.push(src);
            }
            *cnt += 1;
            if *cnt > self.cfg.max_msgs() {
                if self.cfg.strict_send {
                    return Err(SimError::BudgetViolation {
                        node: src,
                        round: self.round + 1,
                        dir: Direction::Sent,
                        count: *cnt,
                        limit: self.cfg.max_msgs(),
                    });
                } else if *cnt == self.cfg.max_msgs() + 1 {
                    self.report.violations += 1;
                }
            }
        }
        self.staged.push(Staged {
            src,
            dst,
            msg: Message { src, bits, payload: SmallVec::from_slice(payload) },
        });
        Ok(())
    }

    pub fn send_bits(&mut self, src: NodeId, dst: NodeId, w: &BitWriter) -> Result<(), SimError> {
        self.send_raw(src, dst, w.as_bytes(), w.bit_len() as u32)
    }

    /// Close the communication phase: deliver staged messages, enforce the
    /// receive budget, advance the round counter.
    pub fn advance(&mut self) -> Result<(), SimError> {
        self.round += 1;
        // Clear last round's inboxes.
        for &node in &self.dirty_inboxes {
            self.inboxes[node as usize].clear();
        }
        self.dirty_inboxes.clear();
        for &node in &self.dirty_sent {
            let sent = self.sent_now[node as usize];
            self.report.max_sent_per_node_round = self.report.max_sent_per_node_round.max(sent);
            self.sent_now[node as usize] = 0;
        }
        self.dirty_sent.clear();

        let mut recv_violation: Option<SimError> = None;
        for st in std::mem::take(&mut self.staged) {
            let dst = st.dst as usize;
            if st.src != st.dst {
                self.report.total_messages += 1;
                self.report.total_bits += st.msg.bits as u64;
                if let Some(t) = self.trace.as_mut() {
                    let _ = writeln!(t, "{},{},{},{}", self.round, st.src, st.dst, st.msg.bits);
                }
            }
            if self.inboxes[dst].is_empty() {
                self.dirty_inboxes.push(st.dst);
            }
            self.inboxes[dst].push(st.msg);
        }
        let max = self.cfg.max_msgs();
        for &node in &self.dirty_inboxes {
            let recv = self.inboxes[node as usize]
                .iter()
                .filter(|m| m.src != node)
                .count() as u32;
            self.report.max_recv_per_node_round = self.report.max_recv_per_node_round.max(recv);
            if recv > max {
                if self.cfg.strict_recv {
                    recv_violation.get_or_insert(SimError::BudgetViolation {
                        node,
                        round: self.round,
                        dir: Direction::Received,
                        count: recv,
                        limit: max,
                    });
                } else {
                    self.report.violations += 1;
                }
            }
        }
        self.report.rounds = self.round;
        if let Some(e) = recv_violation {
            return Err(e);
        }
        Ok(())
    }

    /// Close `times` identical rounds whose traffic is given in aggregate:
    /// each entry is (src, dst, count, bits_per_msg), meaning `count` unit
    /// messages of that size from src to dst per round. Budgets, counters,
    /// violations, and trace lines come out exactly as `advance` would
    /// produce for the same traffic, but no payload is delivered — callers
    /// use this for steps whose message contents they reproduce
    /// arithmetically. Self-pairs are free, as in `send_raw`. The staging
    /// buffer must be empty: per-message and ledger traffic cannot share a
    /// round. `times > 1` is pure batching: byte-identical accounting to
    /// calling this `times` times with the same traffic.
    pub fn advance_ledger(
        &mut self,
        traffic: &[(NodeId, NodeId, u32, u32)],
        times: u64,
    ) -> Result<(), SimError> {
        assert!(self.staged.is_empty(), "ledger round over staged messages");
        if times == 0 {
            return Ok(());
        }
        self.round += 1;
        for &node in &self.dirty_inboxes {
            self.inboxes[node as usize].clear();
        }
        self.dirty_inboxes.clear();

        let max = self.cfg.max_msgs();
        let blimit = self.cfg.max_bits_per_msg();
        let mut dirty_src: Vec<NodeId> = Vec::new();
        let mut dirty_dst: Vec<NodeId> = Vec::new();
        let mut err: Option<SimError> = None;
        let mut msgs_round: u64 = 0;
        let mut bits_round: u64 = 0;
        for &(src, dst, count, bits) in traffic {
            if let Err(e) = self.check_node(src).and_then(|_| self.check_node(dst)) {
                err.get_or_insert(e);
                continue;
            }
            if src == dst || count == 0 {
                continue;
            }
            if bits > blimit {
                err.get_or_insert(SimError::MessageTooLarge { src, dst, bits, limit: blimit });
                continue;
            }
            let c = &mut self.sent_now[src as usize];
            if *c == 0 {
                dirty_src.push(src);
            }
            *c += count;
            let r = &mut self.recv_now[dst as usize];
            if *r == 0 {
                dirty_dst.push(dst);
            }
            *r += count;
            msgs_round += count as u64;
            bits_round += count as u64 * bits as u64;
            if let Some(t) = self.trace.as_mut() {
                for _ in 0..count {
                    let _ = writeln!(t, "{},{},{},{}", self.round, src, dst, bits);
                }
            }
        }
        self.report.total_messages += msgs_round;
        self.report.total_bits += bits_round;
        let mut viol_round: u64 = 0;
        for &node in &dirty_src {
            let sent = self.sent_now[node as usize];
            self.sent_now[node as usize] = 0;
            self.report.max_sent_per_node_round = self.report.max_sent_per_node_round.max(sent);
            if sent > max {
                if self.cfg.strict_send {
                    err.get_or_insert(SimError::BudgetViolation {
                        node,
                        round: self.round,
                        dir: Direction::Sent,
                        count: sent,
                        limit: max,
                    });
                } else {
                    viol_round += 1;
                }
            }
        }
        for &node in &dirty_dst {
            let recv = self.recv_now[node as usize];
            self.recv_now[node as usize] = 0;
            self.report.max_recv_per_node_round = self.report.max_recv_per_node_round.max(recv);
            if recv > max {
                if self.cfg.strict_recv {
                    err.get_or_insert(SimError::BudgetViolation {
                        node,
                        round: self.round,
                        dir: Direction::Received,
                        count: recv,
                        limit: max,
                    });
                } else {
                    viol_round += 1;
                }
            }
        }
        self.report.violations += viol_round;
        if times > 1 && err.is_none() {
            let extra = times - 1;
            if self.trace.is_some() {
                for _ in 0..extra {
                    self.round += 1;
                    for &(src, dst, count, bits) in traffic {
                        if src == dst || count == 0 {
                            continue;
                        }
                        if let Some(t) = self.trace.as_mut() {
                            for _ in 0..count {
                                let _ = writeln!(t, "{},{},{},{}", self.round, src, dst, bits);
                            }
                        }
                    }
                }
            } else {
                self.round += extra;
            }
            self.report.total_messages += extra * msgs_round;
            self.report.total_bits += extra * bits_round;
            self.report.violations += extra * viol_round;
        }
        self.report.rounds = self.round;
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Messages delivered to `node` in the last communication phase, ordered
    /// by staging order (ascending sender id when the driver loops nodes in
    /// order, with per-sender order preserved).
    pub fn inbox(&self, node: NodeId) -> &[Message] {
        &self.inboxes[node as usize]
    }

    pub fn take_inbox(&mut self, node: NodeId) -> Vec<Message> {
        std::mem::take(&mut self.inboxes[node as usize])
    }

    /// True if any message is staged for the next communication phase.
    pub fn has_staged(&self) -> bool {
        !self.staged.is_empty()
    }
}

fn mix(seed: u64, stream: u64) -> u64 {
    // splitmix64 over seed xor a stream tag; stable across platforms.
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Node-program runner

pub enum NodeStatus<T> {
    Running,
    Halted(T),
}

/// Context handed to a node during its local phase.
pub struct NodeCtx<'e> {
    eng: &'e mut Engine,
    id: NodeId,
}

impl<'e> NodeCtx<'e> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn n(&self) -> u32 {
        self.eng.n()
    }

    pub fn round(&self) -> u64 {
        self.eng.rounds()
    }

    pub fn send(&mut self, dst: NodeId, w: &BitWriter) -> Result<(), SimError> {
        self.eng.send_bits(self.id, dst, w)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.eng.node_rng(self.id)
    }
}

pub trait NodeProgram {
    type Output;
    fn on_round(
        &mut self,
        ctx: &mut NodeCtx<'_>,
        inbox: &[Message],
    ) -> Result<NodeStatus<Self::Output>, SimError>;
}

pub struct ProtocolRun<T> {
    pub outputs: Vec<T>,
    pub report: RoundReport,
}

/// Run one program instance per node until every node halts.
///
/// The inbox a node sees in its first local phase is empty; `rounds` in the
/// report counts communication phases only, so a protocol that halts without
/// sending reports zero rounds.
pub fn run_protocol<P: NodeProgram>(
    eng: &mut Engine,
    mut programs: Vec<P>,
) -> Result<ProtocolRun<P::Output>, SimError> {
    let n = eng.n();
    assert_eq!(programs.len(), n as usize, "one program per node");
    let mut outputs: Vec<Option<P::Output>> = (0..n).map(|_| None).collect();
    let mut running = n;
    // A globally-silent round can be a legitimate schedule bubble (wave
    // pacing); many in a row is a hang.
    let silent_limit = 4 * n as u64 + 64;
    let mut silent = 0u64;
    loop {
        let mut progressed = false;
        for (i, prog) in programs.iter_mut().enumerate() {
            if outputs[i].is_some() {
                continue;
            }
            let id = (i + 1) as NodeId;
            let inbox = std::mem::take(&mut eng.inboxes[id as usize]);
            let mut ctx = NodeCtx { eng, id };
            match prog.on_round(&mut ctx, &inbox)? {
                NodeStatus::Running => {}
                NodeStatus::Halted(out) => {
                    outputs[i] = Some(out);
                    running -= 1;
                    progressed = true;
                }
            }
        }
        if running == 0 {
            break;
        }
        if eng.has_staged() || progressed {
            silent = 0;
        } else {
            silent += 1;
            if silent > silent_limit {
                return Err(SimError::Hang { round: eng.rounds() });
            }
        }
        eng.advance()?;
    }
    Ok(ProtocolRun {
        outputs: outputs.into_iter().map(Option::unwrap).collect(),
        report: eng.report(),
    })
}
