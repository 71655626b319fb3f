//! Two communication contexts: a global SPMD context for data-plane
//! collectives and point-to-point transfers, and a control context for
//! engine-to-worker commands. Every operation is counted.

mod collective;
mod control;
mod mailbox;
pub mod wire;

mod socket;

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use control::{control_channels, ControlEndpoint, ControlHub};
pub use mailbox::{expect_payload, CompletionHandle, HandleStatus, MailContent, Payload};

use collective::ReduceSlot;
use mailbox::Mailbox;
use socket::SocketLinks;

/// How activation payloads travel between ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataPlaneMode {
    /// In-process message channels (the default).
    #[default]
    Channels,
    /// Framed transfers over local Unix sockets.
    LocalSockets,
}

/// Per-rank tallies of data-plane operations.
#[derive(Default)]
pub struct Counters {
    all_reduce: AtomicU64,
    p2p_send: AtomicU64,
    p2p_recv: AtomicU64,
}

/// Plain-value snapshot of one rank's counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub all_reduce: u64,
    pub p2p_send: u64,
    pub p2p_recv: u64,
}

impl Counters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            all_reduce: self.all_reduce.load(Ordering::Relaxed),
            p2p_send: self.p2p_send.load(Ordering::Relaxed),
            p2p_recv: self.p2p_recv.load(Ordering::Relaxed),
        }
    }
}

/// Shared transport state for one world: mailbox, reduction rendezvous per
/// tensor-parallel group, and optionally the socket links.
pub struct Fabric {
    mailbox: Arc<Mailbox>,
    reduce_slots: Vec<ReduceSlot>,
    links: Mutex<Option<SocketLinks>>,
    shut: AtomicBool,
}

impl Fabric {
    /// Stop all traffic: pending receives fail, collective waiters unblock
    /// with an error, socket threads exit.
    pub fn shutdown(&self) {
        if self.shut.swap(true, Ordering::SeqCst) {
            return;
        }
        self.mailbox.shutdown();
        for slot in &self.reduce_slots {
            slot.shutdown();
        }
        if let Some(mut links) = self.links.lock().unwrap().take() {
            links.shutdown();
        }
    }
}

/// One rank's view of the world: identity, its tensor- and pipeline-parallel
/// groups, the shared fabric, and its operation counters.
pub struct GlobalContext {
    pub world_size: usize,
    pub rank: usize,
    pub tp_size: usize,
    pub pp_size: usize,
    pub tp_rank: usize,
    pub pp_stage: usize,
    pub tp_group: Vec<usize>,
    pub pp_group: Vec<usize>,
    fabric: Arc<Fabric>,
    counters: Arc<Counters>,
}

impl GlobalContext {
    pub fn counters(&self) -> &Arc<Counters> {
        &self.counters
    }

    /// Elementwise sum across the rank's tensor-parallel group. Collective:
    /// every group member must call. Accumulation is in ascending rank
    /// order, so all members receive a bit-identical result.
    pub fn all_reduce_sum(&self, x: Tensor) -> Result<Tensor> {
        self.counters.all_reduce.fetch_add(1, Ordering::Relaxed);
        self.fabric.reduce_slots[self.pp_stage].all_reduce(self.rank, self.tp_size, x)
    }

    /// Asynchronous tagged send to another rank. Returns immediately; the
    /// handle resolves when the payload is handed to the transport.
    pub fn send_async(&self, dest: usize, tag: u64, content: MailContent) -> Result<CompletionHandle> {
        if dest >= self.world_size {
            return Err(Error::Protocol(format!("send to rank {dest} outside world")));
        }
        self.counters.p2p_send.fetch_add(1, Ordering::Relaxed);
        let links = self.fabric.links.lock().unwrap();
        match links.as_ref() {
            Some(links) => links.send(self.rank, dest, tag, content),
            None => {
                self.fabric.mailbox.deposit(self.rank, dest, tag, content)?;
                Ok(CompletionHandle::done(None))
            }
        }
    }

    /// Asynchronous tagged receive; the handle resolves when the matching
    /// send arrives, or fails on fabric shutdown.
    pub fn recv_async(&self, src: usize, tag: u64) -> Result<CompletionHandle> {
        if src >= self.world_size {
            return Err(Error::Protocol(format!("recv from rank {src} outside world")));
        }
        self.counters.p2p_recv.fetch_add(1, Ordering::Relaxed);
        self.fabric.mailbox.register_recv(src, self.rank, tag)
    }
}

/// Build one context per rank. Rank r maps to tensor-parallel rank
/// `r mod tp_size` within pipeline stage `r div tp_size`; tensor-parallel
/// groups are contiguous within a stage.
pub fn init_contexts(world_size: usize, tp_size: usize, pp_size: usize) -> Result<Vec<GlobalContext>> {
    init_contexts_with(world_size, tp_size, pp_size, DataPlaneMode::Channels)
}

/// [`init_contexts`] with an explicit data-plane backend. In socket mode
/// one link per pipeline-adjacent rank pair is opened.
pub fn init_contexts_with(
    world_size: usize,
    tp_size: usize,
    pp_size: usize,
    mode: DataPlaneMode,
) -> Result<Vec<GlobalContext>> {
    if tp_size < 1 || pp_size < 1 || world_size != tp_size * pp_size {
        return Err(Error::Config(format!(
            "world size {world_size} is not tp {tp_size} x pp {pp_size}"
        )));
    }
    let mailbox = Arc::new(Mailbox::default());
    let links = match mode {
        DataPlaneMode::Channels => None,
        DataPlaneMode::LocalSockets => {
            let mut pairs = Vec::new();
            for stage in 0..pp_size.saturating_sub(1) {
                for t in 0..tp_size {
                    pairs.push((stage * tp_size + t, (stage + 1) * tp_size + t));
                }
            }
            Some(SocketLinks::new(&pairs, mailbox.clone())?)
        }
    };
    let fabric = Arc::new(Fabric {
        mailbox,
        reduce_slots: (0..pp_size).map(|_| ReduceSlot::default()).collect(),
        links: Mutex::new(links),
        shut: AtomicBool::new(false),
    });
    let mut contexts = Vec::with_capacity(world_size);
    for rank in 0..world_size {
        let tp_rank = rank % tp_size;
        let pp_stage = rank / tp_size;
        contexts.push(GlobalContext {
            world_size,
            rank,
            tp_size,
            pp_size,
            tp_rank,
            pp_stage,
            tp_group: (0..tp_size).map(|t| pp_stage * tp_size + t).collect(),
            pp_group: (0..pp_size).map(|s| s * tp_size + tp_rank).collect(),
            fabric: fabric.clone(),
            counters: Arc::new(Counters::default()),
        });
    }
    Ok(contexts)
}

/// The fabric shared by a set of contexts (for shutdown).
pub fn fabric_of(contexts: &[GlobalContext]) -> Arc<Fabric> {
    contexts[0].fabric.clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_world() {
        let ctxs = init_contexts(1, 1, 1).unwrap();
        assert_eq!(ctxs.len(), 1);
        assert_eq!(ctxs[0].tp_group, vec![0]);
        assert_eq!(ctxs[0].pp_group, vec![0]);
    }

    #[test]
    fn rank_to_group_arithmetic() {
        let ctxs = init_contexts(4, 2, 2).unwrap();
        let c3 = &ctxs[3];
        assert_eq!(c3.tp_rank, 1);
        assert_eq!(c3.pp_stage, 1);
        assert_eq!(c3.tp_group, vec![2, 3]);
        assert_eq!(c3.pp_group, vec![1, 3]);
        // groups partition the world
        let mut seen = vec![false; 4];
        for c in &ctxs {
            assert!(!seen[c.rank]);
            seen[c.rank] = true;
            assert!(c.tp_group.contains(&c.rank));
            assert!(c.pp_group.contains(&c.rank));
        }
    }

    #[test]
    fn non_factorable_world_is_rejected() {
        assert!(init_contexts(6, 4, 1).is_err());
    }

    #[test]
    fn all_reduce_counts_even_for_singleton_groups() {
        let ctxs = init_contexts(1, 1, 1).unwrap();
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let y = ctxs[0].all_reduce_sum(x.clone()).unwrap();
        assert_eq!(y.data(), x.data());
        assert_eq!(ctxs[0].counters().snapshot().all_reduce, 1);
    }

    #[test]
    fn self_send_round_trips() {
        let ctxs = init_contexts(1, 1, 1).unwrap();
        let t = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        ctxs[0]
            .send_async(0, 0, MailContent::Data(Payload { tensor: t.clone(), vt: 0.0 }))
            .unwrap()
            .wait()
            .unwrap();
        let h = ctxs[0].recv_async(0, 0).unwrap();
        let p = expect_payload(h.wait().unwrap()).unwrap();
        assert_eq!(p.tensor.data(), t.data());
        let snap = ctxs[0].counters().snapshot();
        assert_eq!(snap.p2p_send, 1);
        assert_eq!(snap.p2p_recv, 1);
    }

    #[test]
    fn recv_without_send_fails_only_at_shutdown() {
        let ctxs = init_contexts(2, 1, 2).unwrap();
        let h = ctxs[1].recv_async(0, 5).unwrap();
        assert_eq!(h.status(), HandleStatus::Pending);
        fabric_of(&ctxs).shutdown();
        assert_eq!(h.status(), HandleStatus::Failed);
    }

    #[test]
    fn data_plane_block_does_not_stall_control_plane() {
        // a rank parked inside a collective must not prevent control traffic
        let mut ctxs = init_contexts(2, 2, 1).unwrap();
        let (hub, endpoints) = control_channels::<u64>(2);
        let c1 = ctxs.pop().unwrap();
        let c0 = ctxs.pop().unwrap();
        let blocked = std::thread::spawn(move || {
            c1.all_reduce_sum(Tensor::from_vec(vec![2], vec![10.0, 20.0]).unwrap())
        });
        // control messages flow while rank 1 waits inside the collective
        hub.send(0, 7).unwrap();
        hub.send(1, 8).unwrap();
        assert_eq!(endpoints[0].recv(), Some(7));
        assert_eq!(endpoints[1].recv(), Some(8));
        // rank 0 joins, releasing the rendezvous
        let a = c0
            .all_reduce_sum(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let b = blocked.join().unwrap().unwrap();
        assert_eq!(a.data(), &[11.0, 22.0]);
        assert_eq!(b.data(), &[11.0, 22.0]);
    }
}
