//! Non-blocking pipeline parallelism. The engine dispatches every batch to
//! every worker with a unique monotone key; each worker's consistency queue
//! hands batches to its compute loop strictly in key order no matter how
//! commands were interleaved in flight; activations move between stages as
//! asynchronous tagged transfers, so no stage ever blocks another through a
//! rendezvous. Variable batch and padding sizes cannot deadlock the system
//! because receives are matched by key, with shapes known from the command.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, Weak};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::comm::{expect_payload, GlobalContext, MailContent, Payload};
use crate::error::{Error, Result};
use crate::mempool::{LayerCost, PoolLayer, PoolRuntime, PlacementPlan, Timeline};
use crate::model::{embed_tokens, transformer_layer_forward, LayerParams, LN_EPS};
use crate::packing::{pack, packed_layer_forward, packed_layer_forward_tp, unpack, PackedActivations};
use crate::tensor::{layer_norm, macs, AttentionMask, Tensor};
use crate::tensor_parallel::{tp_layer_forward, ShardedLayerParams};
use crate::trace::{TraceKind, TraceLog};

/// Unique-key source: strictly increasing by one per acquisition, never
/// reused within a run.
#[derive(Debug, Default)]
pub struct LoopCounter {
    next_value: AtomicU64,
}

impl LoopCounter {
    pub fn next_key(&self) -> u64 {
        self.next_value.fetch_add(1, Ordering::SeqCst)
    }

    pub fn issued(&self) -> u64 {
        self.next_value.load(Ordering::SeqCst)
    }
}

/// Engine-to-worker description of one inference task. Stage-0 workers get
/// the token payload; downstream stages get metadata only and receive their
/// activations from the previous stage. Sequence lengths always ride along
/// so any worker can pack or unpack locally.
#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub unique_key: u64,
    pub batch_id: u64,
    pub b: usize,
    pub s_pad: usize,
    pub seq_lens: Vec<usize>,
    pub payload: Option<Vec<u32>>,
    pub drce: bool,
}

impl Command {
    pub fn total_tokens(&self) -> usize {
        self.seq_lens.iter().sum()
    }
}

/// Control messages a worker's dispatcher consumes.
pub enum ControlMsg {
    Init(Box<WorkerInit>),
    Task(Command),
    Shutdown,
}

#[derive(Default)]
struct CqState {
    next_key: u64,
    entries: BTreeMap<u64, Command>,
    closed: bool,
}

/// Per-worker ordered queue keyed by the engine's unique keys. `pop_next`
/// always yields the lowest outstanding key and blocks until it arrives, so
/// consumers process batches in arrival order regardless of insertion
/// interleaving.
pub struct ConsistencyQueue {
    state: Mutex<CqState>,
    cv: Condvar,
    capacity: usize,
}

impl ConsistencyQueue {
    pub fn new(capacity: usize) -> Self {
        ConsistencyQueue {
            state: Mutex::new(CqState::default()),
            cv: Condvar::new(),
            capacity,
        }
    }

    /// Insert a pending task under its engine key. Duplicate or already
    /// consumed keys and capacity overflow are protocol errors (the engine's
    /// admission window keeps occupancy below capacity).
    pub fn insert(&self, key: u64, cmd: Command) -> Result<()> {
        let mut st = self.state.lock().unwrap();
        if st.closed {
            return Err(Error::ShutDown);
        }
        if key < st.next_key || st.entries.contains_key(&key) {
            return Err(Error::Protocol(format!("duplicate queue insert for key {key}")));
        }
        if st.entries.len() >= self.capacity {
            return Err(Error::Protocol(format!(
                "queue capacity {} exceeded inserting key {key}",
                self.capacity
            )));
        }
        st.entries.insert(key, cmd);
        self.cv.notify_all();
        Ok(())
    }

    /// Block until the local counter's key is present, then take it and
    /// advance the counter. `None` once closed with no next entry.
    pub fn pop_next(&self) -> Option<(u64, Command)> {
        let mut st = self.state.lock().unwrap();
        loop {
            let key = st.next_key;
            if let Some(cmd) = st.entries.remove(&key) {
                st.next_key += 1;
                return Some((key, cmd));
            }
            if st.closed {
                return None;
            }
            st = self.cv.wait(st).unwrap();
        }
    }

    pub fn close(&self) {
        let mut st = self.state.lock().unwrap();
        st.closed = true;
        self.cv.notify_all();
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Contiguous layer ranges per pipeline stage. Sizes differ by at most one
/// and earlier stages take the extras, balancing the stage-0 embedding work.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub pp_size: usize,
    pub ranges: Vec<Range<usize>>,
}

/// Split `num_layers` layers over `pp_size` stages.
pub fn partition_layers(num_layers: usize, pp_size: usize) -> Result<StagePlan> {
    if pp_size == 0 || pp_size > num_layers {
        return Err(Error::Config(format!(
            "cannot split {num_layers} layers into {pp_size} stages"
        )));
    }
    let base = num_layers / pp_size;
    let extra = num_layers % pp_size;
    let mut ranges = Vec::with_capacity(pp_size);
    let mut start = 0;
    for s in 0..pp_size {
        let size = base + usize::from(s < extra);
        ranges.push(start..start + size);
        start += size;
    }
    Ok(StagePlan { pp_size, ranges })
}

// ---- results ---------------------------------------------------------------

enum ResultState {
    Pending,
    Ready { out: Tensor, vt: f64 },
    Failed { stage: usize, msg: String },
}

struct ResultSlot {
    state: Mutex<ResultState>,
    cv: Condvar,
}

/// Future for one submitted batch. Waiting is idempotent; failures carry
/// the key and the stage that failed.
pub struct ResultHandle {
    key: u64,
    slot: Arc<ResultSlot>,
    hub: Weak<ResultsHub>,
}

impl ResultHandle {
    pub fn key(&self) -> u64 {
        self.key
    }

    /// Non-blocking readiness probe.
    pub fn is_ready(&self) -> bool {
        !matches!(*self.slot.state.lock().unwrap(), ResultState::Pending)
    }

    /// Block until the last stage delivers, yielding the output hidden
    /// states for exactly the submitted batch.
    pub fn wait(&self) -> Result<Tensor> {
        self.wait_timed().map(|(out, _)| out)
    }

    /// As [`Self::wait`], also yielding the virtual completion time.
    pub fn wait_timed(&self) -> Result<(Tensor, f64)> {
        let mut st = self.slot.state.lock().unwrap();
        loop {
            match &*st {
                ResultState::Pending => st = self.slot.cv.wait(st).unwrap(),
                ResultState::Ready { out, vt } => {
                    let result = (out.clone(), *vt);
                    drop(st);
                    if let Some(hub) = self.hub.upgrade() {
                        hub.forget(self.key);
                    }
                    return Ok(result);
                }
                ResultState::Failed { stage, msg } => {
                    let err = Error::StageFailure {
                        key: self.key,
                        stage: *stage,
                        msg: msg.clone(),
                    };
                    drop(st);
                    if let Some(hub) = self.hub.upgrade() {
                        hub.forget(self.key);
                    }
                    return Err(err);
                }
            }
        }
    }
}

struct HubState {
    slots: BTreeMap<u64, Arc<ResultSlot>>,
    inflight: usize,
    accepting: bool,
}

/// Registry of live result slots plus the engine admission window: at most
/// `capacity` keys may be in flight, which also bounds every worker queue.
pub struct ResultsHub {
    state: Mutex<HubState>,
    cv: Condvar,
    capacity: usize,
}

impl ResultsHub {
    pub fn new(capacity: usize) -> Arc<Self> {
        Arc::new(ResultsHub {
            state: Mutex::new(HubState {
                slots: BTreeMap::new(),
                inflight: 0,
                accepting: true,
            }),
            cv: Condvar::new(),
            capacity,
        })
    }

    /// Take one admission-window slot, blocking while the window is full.
    /// Key acquisition must happen only after this returns: a taken key
    /// that stalls before dispatch would wedge every queue behind it.
    pub fn admit(&self) -> Result<()> {
        let mut st = self.state.lock().unwrap();
        while st.accepting && st.inflight >= self.capacity {
            st = self.cv.wait(st).unwrap();
        }
        if !st.accepting {
            return Err(Error::ShutDown);
        }
        st.inflight += 1;
        Ok(())
    }

    /// Register the slot for an admitted key.
    pub fn register(self: &Arc<Self>, key: u64) -> ResultHandle {
        let slot = Arc::new(ResultSlot {
            state: Mutex::new(ResultState::Pending),
            cv: Condvar::new(),
        });
        self.state.lock().unwrap().slots.insert(key, slot.clone());
        ResultHandle {
            key,
            slot,
            hub: Arc::downgrade(self),
        }
    }

    fn complete(&self, key: u64, outcome: ResultState) {
        let slot = self.state.lock().unwrap().slots.get(&key).cloned();
        let Some(slot) = slot else { return };
        let transitioned = {
            let mut s = slot.state.lock().unwrap();
            if matches!(*s, ResultState::Pending) {
                *s = outcome;
                slot.cv.notify_all();
                true
            } else {
                false
            }
        };
        // first completion wins; only it releases the window slot
        if transitioned {
            let mut st = self.state.lock().unwrap();
            st.inflight -= 1;
            self.cv.notify_all();
        }
    }

    pub fn fulfill(&self, key: u64, out: Tensor, vt: f64) {
        self.complete(key, ResultState::Ready { out, vt });
    }

    pub fn fail(&self, key: u64, stage: usize, msg: &str) {
        self.complete(
            key,
            ResultState::Failed {
                stage,
                msg: msg.to_string(),
            },
        );
    }

    /// Drop a delivered key from the registry (called by handle waits).
    fn forget(&self, key: u64) {
        self.state.lock().unwrap().slots.remove(&key);
    }

    /// Registered keys not yet waited on.
    pub fn registered(&self) -> usize {
        self.state.lock().unwrap().slots.len()
    }

    pub fn inflight(&self) -> usize {
        self.state.lock().unwrap().inflight
    }

    /// Stop admissions and block until every in-flight key completed.
    pub fn drain(&self) {
        let mut st = self.state.lock().unwrap();
        st.accepting = false;
        self.cv.notify_all();
        while st.inflight > 0 {
            st = self.cv.wait(st).unwrap();
        }
    }
}

// ---- worker ----------------------------------------------------------------

/// Virtual cost model for pipeline timing: per-layer compute cost plus a
/// fixed per-transfer cost between adjacent stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirtualCost {
    pub layer: LayerCost,
    pub stage_transfer: f64,
}

/// A worker's parameter store for its layer range: all resident, or behind
/// the peer memory pool with prefetch.
pub enum PoolStore<P: PoolLayer> {
    Resident(Vec<Arc<P>>),
    Pooled(Box<PoolRuntime<P>>),
}

impl<P: PoolLayer> PoolStore<P> {
    fn run_layers<X, F>(&mut self, x: X, rows: usize, mut f: F) -> Result<X>
    where
        F: FnMut(usize, &P, X) -> Result<X>,
    {
        match self {
            PoolStore::Resident(layers) => {
                let mut x = x;
                for (i, layer) in layers.iter().enumerate() {
                    x = f(i, layer, x)?;
                }
                Ok(x)
            }
            PoolStore::Pooled(pool) => pool.run_pass(x, rows, f),
        }
    }

    fn layer_param_counts(&self) -> Vec<u64> {
        match self {
            PoolStore::Resident(layers) => layers.iter().map(|l| l.param_count()).collect(),
            PoolStore::Pooled(pool) => (0..pool.num_layers())
                .map(|i| pool.layer_bytes()[i] / 8)
                .collect(),
        }
    }

    fn pool_report(&self) -> Option<(Timeline, PlacementPlan, Vec<u64>)> {
        match self {
            PoolStore::Resident(_) => None,
            PoolStore::Pooled(pool) => Some((
                pool.timeline().clone(),
                PlacementPlan {
                    homes: pool.homes().to_vec(),
                    prefetch_depth: 1,
                },
                pool.layer_bytes().to_vec(),
            )),
        }
    }
}

/// The layer math a worker runs: full layers when the stage is not
/// tensor-parallel, shards otherwise.
pub enum StageLayers {
    Full(PoolStore<LayerParams>),
    Sharded(PoolStore<ShardedLayerParams>),
}

/// Everything a worker needs to run its stage, delegated by the engine
/// over the control channel during runtime initialization.
pub struct WorkerInit {
    pub layers: StageLayers,
    /// Token and position tables; stage 0 only.
    pub embedding: Option<(Tensor, Tensor)>,
    /// Final norm gamma/beta; last stage only.
    pub final_norm: Option<(Tensor, Tensor)>,
    pub heads: usize,
    pub causal: bool,
    pub layer_range: Range<usize>,
    pub cost: Option<VirtualCost>,
    /// Real per-batch sleep, for slow-stage tests and throttled runs.
    pub compute_delay: Option<Duration>,
}

/// Aggregated run statistics shared by workers and the engine.
#[derive(Default)]
pub struct Telemetry {
    linear_macs: AtomicU64,
    pool_reports: Mutex<Vec<PoolUsage>>,
}

/// One worker's pooled-execution record, pushed when the worker exits.
pub struct PoolUsage {
    pub rank: usize,
    pub timeline: Timeline,
    pub plan: PlacementPlan,
    pub layer_bytes: Vec<u64>,
}

impl Telemetry {
    pub fn add_macs(&self, n: u64) {
        self.linear_macs.fetch_add(n, Ordering::Relaxed);
    }

    pub fn linear_macs(&self) -> u64 {
        self.linear_macs.load(Ordering::Relaxed)
    }

    pub fn push_pool_usage(&self, usage: PoolUsage) {
        self.pool_reports.lock().unwrap().push(usage);
    }

    pub fn take_pool_usage(&self) -> Vec<PoolUsage> {
        std::mem::take(&mut *self.pool_reports.lock().unwrap())
    }

    pub fn total_stall_time(&self) -> f64 {
        self.pool_reports
            .lock()
            .unwrap()
            .iter()
            .map(|u| u.timeline.stall_time())
            .sum()
    }
}

enum Activation {
    Dense(Tensor),
    Packed(PackedActivations),
}

/// One rank's stage executor: pops the consistency queue, obtains the
/// activation (embedding at stage 0, tagged receive elsewhere), runs its
/// layers, and forwards downstream or delivers the result.
pub struct StageWorker {
    pub ctx: GlobalContext,
    pub init: WorkerInit,
    pub cq: Arc<ConsistencyQueue>,
    pub hub: Arc<ResultsHub>,
    pub trace: Arc<TraceLog>,
    pub telemetry: Arc<Telemetry>,
    lane_vt: f64,
}

impl StageWorker {
    pub fn new(
        ctx: GlobalContext,
        init: WorkerInit,
        cq: Arc<ConsistencyQueue>,
        hub: Arc<ResultsHub>,
        trace: Arc<TraceLog>,
        telemetry: Arc<Telemetry>,
    ) -> Self {
        StageWorker {
            ctx,
            init,
            cq,
            hub,
            trace,
            telemetry,
            lane_vt: 0.0,
        }
    }

    fn is_first_stage(&self) -> bool {
        self.ctx.pp_stage == 0
    }

    fn is_last_stage(&self) -> bool {
        self.ctx.pp_stage + 1 == self.ctx.pp_size
    }

    fn prev_rank(&self) -> usize {
        self.ctx.pp_group[self.ctx.pp_stage - 1]
    }

    fn next_rank(&self) -> usize {
        self.ctx.pp_group[self.ctx.pp_stage + 1]
    }

    /// Run until the queue closes. Failures mark the key's result and the
    /// loop continues with the next key.
    pub fn run(&mut self) {
        while let Some((key, cmd)) = self.cq.pop_next() {
            self.trace.record(self.ctx.rank, TraceKind::Pop, key);
            match self.process(key, &cmd) {
                Ok(()) => {}
                Err(e) => {
                    self.trace.record(self.ctx.rank, TraceKind::Fail, key);
                    self.hub.fail(key, self.ctx.pp_stage, &e.to_string());
                    if !self.is_last_stage() {
                        let _ = self.ctx.send_async(
                            self.next_rank(),
                            key,
                            MailContent::Poison(format!("stage {} failed: {e}", self.ctx.pp_stage)),
                        );
                    }
                }
            }
        }
        if let Some((timeline, plan, layer_bytes)) = match &self.init.layers {
            StageLayers::Full(store) => store.pool_report(),
            StageLayers::Sharded(store) => store.pool_report(),
        } {
            self.telemetry.push_pool_usage(PoolUsage {
                rank: self.ctx.rank,
                timeline,
                plan,
                layer_bytes,
            });
        }
    }

    fn process(&mut self, key: u64, cmd: &Command) -> Result<()> {
        let macs_before = macs::get();
        let mask = if self.init.causal {
            AttentionMask::causal_length_based(cmd.seq_lens.clone())
        } else {
            AttentionMask::length_based(cmd.seq_lens.clone())
        };

        // obtain this stage's input
        let (input, vt_in) = if self.is_first_stage() {
            let tokens = cmd
                .payload
                .as_ref()
                .ok_or_else(|| Error::Protocol(format!("stage 0 command {key} without payload")))?;
            let (emb, pos) = self
                .init
                .embedding
                .as_ref()
                .ok_or_else(|| Error::Config("stage 0 worker without embedding".into()))?;
            let x = embed_tokens(emb, pos, tokens, cmd.b, cmd.s_pad)?;
            let act = if cmd.drce {
                Activation::Packed(pack(&x, &cmd.seq_lens)?)
            } else {
                Activation::Dense(x)
            };
            (act, 0.0)
        } else {
            let handle = self.ctx.recv_async(self.prev_rank(), key)?;
            let payload = expect_payload(handle.wait()?)?;
            self.trace.record(self.ctx.rank, TraceKind::Recv, key);
            let transfer = self.init.cost.map(|c| c.stage_transfer).unwrap_or(0.0);
            let vt_in = payload.vt + transfer;
            let act = if cmd.drce {
                Activation::Packed(PackedActivations::from_tensor(
                    payload.tensor,
                    &cmd.seq_lens,
                    cmd.s_pad,
                )?)
            } else {
                let h = payload.tensor.last_dim();
                Activation::Dense(payload.tensor.reshape(vec![cmd.b, cmd.s_pad, h])?)
            };
            (act, vt_in)
        };

        self.trace.record(self.ctx.rank, TraceKind::ComputeStart, key);
        if let Some(delay) = self.init.compute_delay {
            std::thread::sleep(delay);
        }

        let rows = match &input {
            Activation::Dense(_) => cmd.b * cmd.s_pad,
            Activation::Packed(p) => p.total_tokens(),
        };
        let output = self.run_layers(input, rows, &mask)?;
        // account linear work before the result becomes observable
        self.telemetry.add_macs(macs::get() - macs_before);

        // virtual lane clock: wait for the input, then pay the stage cost
        let stage_cost = self.stage_cost(rows);
        let start_vt = self.lane_vt.max(vt_in);
        let end_vt = start_vt + stage_cost;
        self.lane_vt = end_vt;
        self.trace.record(self.ctx.rank, TraceKind::ComputeEnd, key);

        if self.is_last_stage() {
            let out = self.finalize(output)?;
            if self.ctx.tp_rank == 0 {
                self.hub.fulfill(key, out, end_vt);
                self.trace.record(self.ctx.rank, TraceKind::Deliver, key);
            }
        } else {
            let tensor = match output {
                Activation::Dense(x) => x,
                Activation::Packed(p) => p.packed,
            };
            self.ctx.send_async(
                self.next_rank(),
                key,
                MailContent::Data(Payload { tensor, vt: end_vt }),
            )?;
            self.trace.record(self.ctx.rank, TraceKind::Send, key);
        }
        Ok(())
    }

    fn run_layers(&mut self, input: Activation, rows: usize, mask: &AttentionMask) -> Result<Activation> {
        let heads = self.init.heads;
        let ctx = &self.ctx;
        match (&mut self.init.layers, input) {
            (StageLayers::Full(store), Activation::Dense(x)) => store
                .run_layers(x, rows, |_, layer, x| {
                    transformer_layer_forward(&x, layer, heads, mask)
                })
                .map(Activation::Dense),
            (StageLayers::Full(store), Activation::Packed(p)) => store
                .run_layers(p, rows, |_, layer, p| {
                    packed_layer_forward(&p, layer, heads, mask)
                })
                .map(Activation::Packed),
            (StageLayers::Sharded(store), Activation::Dense(x)) => store
                .run_layers(x, rows, |_, shard, x| tp_layer_forward(ctx, &x, shard, mask))
                .map(Activation::Dense),
            (StageLayers::Sharded(store), Activation::Packed(p)) => store
                .run_layers(p, rows, |_, shard, p| {
                    packed_layer_forward_tp(ctx, &p, shard, mask)
                })
                .map(Activation::Packed),
        }
    }

    fn stage_cost(&self, rows: usize) -> f64 {
        let Some(cost) = self.init.cost else {
            return 0.0;
        };
        let counts = match &self.init.layers {
            StageLayers::Full(store) => store.layer_param_counts(),
            StageLayers::Sharded(store) => store.layer_param_counts(),
        };
        counts.iter().map(|&p| cost.layer.cost(rows, p)).sum()
    }

    /// Last stage: final layer norm, and for packed activations the unpack
    /// that restores padding rows as exact zeros.
    fn finalize(&self, output: Activation) -> Result<Tensor> {
        let (gamma, beta) = self
            .init
            .final_norm
            .as_ref()
            .ok_or_else(|| Error::Config("last stage worker without final norm".into()))?;
        match output {
            Activation::Dense(x) => layer_norm(&x, gamma, beta, LN_EPS),
            Activation::Packed(p) => {
                let normed = layer_norm(&p.packed, gamma, beta, LN_EPS)?;
                unpack(&PackedActivations {
                    packed: normed,
                    offsets: p.offsets,
                    s_pad: p.s_pad,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::{fabric_of, init_contexts};
    use crate::model::{build_model, random_batch, serial_forward, ModelConfig};

    #[test]
    fn loop_counter_is_strictly_increasing() {
        let counter = LoopCounter::default();
        let mut keys: Vec<u64> = (0..10).map(|_| counter.next_key()).collect();
        keys.dedup();
        assert_eq!(keys, (0..10).collect::<Vec<u64>>());
    }

    #[test]
    fn concurrent_key_acquisition_has_no_gaps() {
        let counter = Arc::new(LoopCounter::default());
        let mut joins = Vec::new();
        for _ in 0..64 {
            let c = counter.clone();
            joins.push(std::thread::spawn(move || c.next_key()));
        }
        let mut keys: Vec<u64> = joins.into_iter().map(|j| j.join().unwrap()).collect();
        keys.sort_unstable();
        assert_eq!(keys, (0..64).collect::<Vec<u64>>());
    }

    fn cmd(key: u64) -> Command {
        Command {
            unique_key: key,
            batch_id: key,
            b: 1,
            s_pad: 1,
            seq_lens: vec![1],
            payload: None,
            drce: false,
        }
    }

    #[test]
    fn queue_reorders_out_of_order_inserts() {
        let q = ConsistencyQueue::new(16);
        q.insert(1, cmd(1)).unwrap();
        q.insert(0, cmd(0)).unwrap();
        assert_eq!(q.pop_next().unwrap().0, 0);
        assert_eq!(q.pop_next().unwrap().0, 1);
    }

    #[test]
    fn pop_blocks_until_the_next_key_arrives() {
        let q = Arc::new(ConsistencyQueue::new(16));
        q.insert(2, cmd(2)).unwrap();
        let q2 = q.clone();
        let popper = std::thread::spawn(move || {
            let mut got = Vec::new();
            for _ in 0..3 {
                got.push(q2.pop_next().unwrap().0);
            }
            got
        });
        // delayed inserts of the blocking keys
        std::thread::sleep(Duration::from_millis(20));
        q.insert(0, cmd(0)).unwrap();
        std::thread::sleep(Duration::from_millis(5));
        q.insert(1, cmd(1)).unwrap();
        assert_eq!(popper.join().unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn random_insert_order_pops_sequentially() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut order: Vec<u64> = (0..100).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        order.shuffle(&mut rng);
        let q = ConsistencyQueue::new(128);
        for &k in &order {
            q.insert(k, cmd(k)).unwrap();
        }
        let popped: Vec<u64> = (0..100).map(|_| q.pop_next().unwrap().0).collect();
        assert_eq!(popped, (0..100).collect::<Vec<u64>>());
    }

    #[test]
    fn duplicate_insert_is_protocol_error() {
        let q = ConsistencyQueue::new(4);
        q.insert(0, cmd(0)).unwrap();
        assert!(q.insert(0, cmd(0)).is_err());
        let _ = q.pop_next();
        // reusing a consumed key is also rejected
        assert!(q.insert(0, cmd(0)).is_err());
    }

    #[test]
    fn close_with_empty_queue_unblocks_pop() {
        let q = Arc::new(ConsistencyQueue::new(4));
        let q2 = q.clone();
        let popper = std::thread::spawn(move || q2.pop_next());
        std::thread::sleep(Duration::from_millis(10));
        q.close();
        assert!(popper.join().unwrap().is_none());
    }

    #[test]
    fn partition_examples() {
        let plan = partition_layers(12, 4).unwrap();
        assert_eq!(plan.ranges, vec![0..3, 3..6, 6..9, 9..12]);
        let plan = partition_layers(5, 2).unwrap();
        assert_eq!(plan.ranges, vec![0..3, 3..5]);
        let plan = partition_layers(7, 1).unwrap();
        assert_eq!(plan.ranges, vec![0..7]);
        assert!(partition_layers(3, 4).is_err());
    }

    #[test]
    fn hub_window_blocks_at_capacity() {
        let hub = ResultsHub::new(2);
        hub.admit().unwrap();
        let _h0 = hub.register(0);
        hub.admit().unwrap();
        let _h1 = hub.register(1);
        assert_eq!(hub.inflight(), 2);
        let hub2 = hub.clone();
        let admitter = std::thread::spawn(move || hub2.admit().map(|()| hub2.register(2).key()));
        std::thread::sleep(Duration::from_millis(20));
        // still blocked: window full
        assert_eq!(hub.inflight(), 2);
        hub.fulfill(0, Tensor::zeros(vec![1]), 0.0);
        assert_eq!(admitter.join().unwrap().unwrap(), 2);
    }

    #[test]
    fn result_wait_is_idempotent_and_forgets_registry_entry() {
        let hub = ResultsHub::new(4);
        hub.admit().unwrap();
        let h = hub.register(0);
        assert!(!h.is_ready());
        hub.fulfill(0, Tensor::from_vec(vec![1], vec![5.0]).unwrap(), 1.5);
        let (a, vt) = h.wait_timed().unwrap();
        let b = h.wait().unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(vt, 1.5);
        assert_eq!(hub.registered(), 0);
    }

    #[test]
    fn failed_key_reports_stage_and_key() {
        let hub = ResultsHub::new(4);
        hub.admit().unwrap();
        let h = hub.register(9);
        hub.fail(9, 2, "recv failed");
        let err = h.wait().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stage 2") && msg.contains("key 9"), "{msg}");
    }

    /// A hand-built two-stage pipeline worker pair driven directly, without
    /// the engine: checks the single inter-stage transfer and the serial
    /// oracle, plus poison propagation when the upstream payload never
    /// arrives.
    #[test]
    fn two_stage_workers_match_serial_and_propagate_failure() {
        let cfg = ModelConfig {
            num_layers: 2,
            num_heads: 2,
            head_dim: 4,
            vocab_size: 16,
            max_seq: 8,
            causal: true,
            seed: 77,
        };
        let params = build_model(&cfg).unwrap();
        let batch = random_batch(&cfg, 0, 2, 4, 3);
        let want = serial_forward(&cfg, &params, &batch).unwrap();

        let ctxs = init_contexts(2, 1, 2).unwrap();
        let fabric = fabric_of(&ctxs);
        let hub = ResultsHub::new(8);
        let trace = Arc::new(TraceLog::default());
        let telemetry = Arc::new(Telemetry::default());
        let queues: Vec<Arc<ConsistencyQueue>> =
            (0..2).map(|_| Arc::new(ConsistencyQueue::new(8))).collect();

        let mut joins = Vec::new();
        for (stage, ctx) in ctxs.into_iter().enumerate() {
            let layers: Vec<Arc<LayerParams>> =
                vec![Arc::new(params.layers[stage].clone())];
            let init = WorkerInit {
                layers: StageLayers::Full(PoolStore::Resident(layers)),
                embedding: (stage == 0)
                    .then(|| (params.embedding.clone(), params.pos_embedding.clone())),
                final_norm: (stage == 1)
                    .then(|| (params.final_gamma.clone(), params.final_beta.clone())),
                heads: cfg.num_heads,
                causal: cfg.causal,
                layer_range: stage..stage + 1,
                cost: None,
                compute_delay: None,
            };
            let mut worker = StageWorker::new(
                ctx,
                init,
                queues[stage].clone(),
                hub.clone(),
                trace.clone(),
                telemetry.clone(),
            );
            joins.push(std::thread::spawn(move || worker.run()));
        }

        // key 0: normal task to both stages (payload only at stage 0)
        hub.admit().unwrap();
        let h0 = hub.register(0);
        let task = Command {
            unique_key: 0,
            batch_id: 0,
            b: batch.b,
            s_pad: batch.s_pad,
            seq_lens: batch.seq_lens.clone(),
            payload: Some(batch.token_ids.clone()),
            drce: false,
        };
        queues[0].insert(0, task.clone()).unwrap();
        queues[1]
            .insert(0, Command { payload: None, ..task })
            .unwrap();
        let got = h0.wait().unwrap();
        assert_eq!(got.data(), want.data(), "pipeline must match serial bitwise");

        // key 1: stage 1 waits for a payload that never comes; fabric
        // shutdown fails the receive, the worker marks the key failed
        hub.admit().unwrap();
        let h1 = hub.register(1);
        queues[1]
            .insert(
                1,
                Command {
                    unique_key: 1,
                    batch_id: 1,
                    b: batch.b,
                    s_pad: batch.s_pad,
                    seq_lens: batch.seq_lens.clone(),
                    payload: None,
                    drce: false,
                },
            )
            .unwrap();
        std::thread::sleep(Duration::from_millis(30));
        fabric.shutdown();
        let err = h1.wait().unwrap_err();
        assert!(matches!(err, Error::StageFailure { key: 1, stage: 1, .. }), "{err}");

        for q in &queues {
            q.close();
        }
        for j in joins {
            j.join().unwrap();
        }
        // exactly one inter-stage transfer for the one successful batch
        let sends: Vec<_> = trace
            .snapshot()
            .into_iter()
            .filter(|e| e.kind == TraceKind::Send)
            .collect();
        assert_eq!(sends.len(), 1);
    }
}
