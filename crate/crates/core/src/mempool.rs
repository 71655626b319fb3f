//! Peer memory pooling: the memory of all simulated devices plus the host
//! is one pool. Layers that do not fit locally live on a peer device (or
//! the host once peers are full) and are prefetched on a transfer lane that
//! runs concurrently with compute.
//!
//! Correctness uses real execution: a transfer thread moves parameters and
//! the compute lane waits on per-layer completion signals. Timing uses a
//! virtual clock driven by a cost model, so overlap and stall claims are
//! exactly checkable regardless of host noise.

use std::collections::{HashMap, VecDeque};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    embed_batch, serial_forward, transformer_layer_forward, Batch, LayerParams, ModelConfig,
    ModelParams, LN_EPS,
};
use crate::tensor::{layer_norm, Tensor};
use crate::tensor_parallel::ShardedLayerParams;

/// What a pooled device is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    LocalAccelerator,
    PeerAccelerator,
    Host,
}

/// Capacity bookkeeping for one device in the pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryBudget {
    pub device_id: usize,
    pub capacity_bytes: u64,
    pub resident_bytes: u64,
    pub kind: DeviceKind,
}

impl MemoryBudget {
    pub fn new(device_id: usize, capacity_bytes: u64, kind: DeviceKind) -> Self {
        MemoryBudget {
            device_id,
            capacity_bytes,
            resident_bytes: 0,
            kind,
        }
    }

    pub fn free_bytes(&self) -> u64 {
        self.capacity_bytes.saturating_sub(self.resident_bytes)
    }
}

/// Where a layer's parameters live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerHome {
    Local,
    Peer(usize),
    Host,
}

/// Per-layer homes plus the prefetch depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub homes: Vec<LayerHome>,
    pub prefetch_depth: usize,
}

impl PlacementPlan {
    pub fn all_local(num_layers: usize) -> Self {
        PlacementPlan {
            homes: vec![LayerHome::Local; num_layers],
            prefetch_depth: 1,
        }
    }

    pub fn offloaded(&self) -> Vec<usize> {
        self.homes
            .iter()
            .enumerate()
            .filter(|(_, h)| !matches!(h, LayerHome::Local))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Link speeds for fetches, in GB/s (1 GB = 1e9 bytes here).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthModel {
    pub peer_link_gbps: f64,
    pub host_link_gbps: f64,
}

impl Default for BandwidthModel {
    fn default() -> Self {
        BandwidthModel {
            peer_link_gbps: 600.0,
            host_link_gbps: 32.0,
        }
    }
}

impl BandwidthModel {
    pub fn link_for(&self, home: LayerHome) -> f64 {
        match home {
            LayerHome::Local => f64::INFINITY,
            LayerHome::Peer(_) => self.peer_link_gbps,
            LayerHome::Host => self.host_link_gbps,
        }
    }

    /// Reduce the peer link by a fraction in [0,1), modelling background
    /// traffic on the peer device.
    pub fn with_peer_interference(mut self, fraction: f64) -> Self {
        self.peer_link_gbps *= 1.0 - fraction;
        self
    }
}

/// Seconds to move `bytes` over a link of `link_gbps` GB/s.
pub fn transfer_time(bytes: u64, link_gbps: f64) -> f64 {
    bytes as f64 / (link_gbps * 1e9)
}

/// Virtual compute cost of one layer applied to one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerCost {
    /// Fixed seconds per layer per batch.
    Fixed(f64),
    /// alpha * rows * param_count seconds; rows is the token rows the
    /// layer's linears actually process.
    TokenParams { alpha: f64 },
}

impl LayerCost {
    pub fn cost(&self, rows: usize, param_count: u64) -> f64 {
        match *self {
            LayerCost::Fixed(c) => c,
            LayerCost::TokenParams { alpha } => alpha * rows as f64 * param_count as f64,
        }
    }
}

/// Even-spacing offload rule: partition the layer range into `L - n`
/// contiguous groups, as even as possible with the earlier groups taking
/// the extra layer, and offload the last layer of each group.
pub fn offload_indices(num_layers: usize, local_capacity: usize) -> Result<Vec<usize>> {
    if local_capacity == 0 {
        return Err(Error::Config("local capacity must hold at least one layer".into()));
    }
    if num_layers <= local_capacity {
        return Ok(vec![]);
    }
    let groups = num_layers - local_capacity;
    let base = num_layers / groups;
    let extra = num_layers % groups;
    let mut out = Vec::with_capacity(groups);
    let mut start = 0;
    for g in 0..groups {
        let size = base + usize::from(g < extra);
        out.push(start + size - 1);
        start += size;
    }
    Ok(out)
}

/// Place offloaded layers round-robin over the peer budgets, spilling to
/// host only once every peer is full.
pub fn plan_placement(
    num_layers: usize,
    local_capacity: usize,
    prefetch_depth: usize,
    peers: &[MemoryBudget],
    layer_bytes: u64,
) -> Result<PlacementPlan> {
    if prefetch_depth == 0 {
        return Err(Error::Config("prefetch depth must be >= 1".into()));
    }
    let offloaded = offload_indices(num_layers, local_capacity)?;
    let mut homes = vec![LayerHome::Local; num_layers];
    let mut free: Vec<u64> = peers.iter().map(MemoryBudget::free_bytes).collect();
    let mut cursor = 0usize;
    for &layer in &offloaded {
        let mut placed = false;
        for probe in 0..peers.len() {
            let idx = (cursor + probe) % peers.len();
            if free[idx] >= layer_bytes {
                free[idx] -= layer_bytes;
                homes[layer] = LayerHome::Peer(peers[idx].device_id);
                cursor = (idx + 1) % peers.len();
                placed = true;
                break;
            }
        }
        if !placed {
            homes[layer] = LayerHome::Host;
        }
    }
    Ok(PlacementPlan {
        homes,
        prefetch_depth,
    })
}

// ---- timeline ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lane {
    Compute,
    Transfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    Fetch,
    Compute,
    Stall,
}

/// One virtual-time interval on one lane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lane: Lane,
    pub layer: usize,
    pub start: f64,
    pub end: f64,
    pub kind: IntervalKind,
}

/// Virtual-time record of a pooled run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub intervals: Vec<Interval>,
}

impl Timeline {
    pub fn makespan(&self) -> f64 {
        self.intervals.iter().map(|i| i.end).fold(0.0, f64::max)
    }

    pub fn stall_time(&self) -> f64 {
        self.intervals
            .iter()
            .filter(|i| i.kind == IntervalKind::Stall)
            .map(|i| i.end - i.start)
            .sum()
    }

    pub fn fetch_count(&self) -> usize {
        self.intervals
            .iter()
            .filter(|i| i.kind == IntervalKind::Fetch)
            .count()
    }

    /// `lane,layer,start,end,kind` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lane,layer,start,end,kind\n");
        for i in &self.intervals {
            let lane = match i.lane {
                Lane::Compute => "compute",
                Lane::Transfer => "transfer",
            };
            let kind = match i.kind {
                IntervalKind::Fetch => "fetch",
                IntervalKind::Compute => "compute",
                IntervalKind::Stall => "stall",
            };
            out.push_str(&format!("{lane},{},{},{},{kind}\n", i.layer, i.start, i.end));
        }
        out
    }
}

// ---- budget replay ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetEventKind {
    Load,
    Evict,
}

/// A staging load or release on the local device.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetEvent {
    pub vt: f64,
    pub layer: usize,
    pub bytes: u64,
    pub kind: BudgetEventKind,
}

/// Derive load/evict events from a timeline: a fetch interval loads its
/// layer at the interval end; the compute interval of an off-home layer
/// releases its staging copy at compute end. Ties process evictions first,
/// matching the slot hand-off.
pub fn budget_events(
    timeline: &Timeline,
    plan: &PlacementPlan,
    layer_bytes: &[u64],
) -> Vec<BudgetEvent> {
    let mut events = Vec::new();
    for i in &timeline.intervals {
        let off_home = !matches!(plan.homes.get(i.layer), Some(LayerHome::Local) | None);
        match i.kind {
            IntervalKind::Fetch => events.push(BudgetEvent {
                vt: i.end,
                layer: i.layer,
                bytes: layer_bytes[i.layer],
                kind: BudgetEventKind::Load,
            }),
            IntervalKind::Compute if off_home => events.push(BudgetEvent {
                vt: i.end,
                layer: i.layer,
                bytes: layer_bytes[i.layer],
                kind: BudgetEventKind::Evict,
            }),
            _ => {}
        }
    }
    events.sort_by(|a, b| {
        a.vt.partial_cmp(&b.vt)
            .unwrap()
            .then_with(|| match (a.kind, b.kind) {
                (BudgetEventKind::Evict, BudgetEventKind::Load) => std::cmp::Ordering::Less,
                (BudgetEventKind::Load, BudgetEventKind::Evict) => std::cmp::Ordering::Greater,
                _ => std::cmp::Ordering::Equal,
            })
    });
    events
}

/// Replay events against a budget: resident bytes must never exceed the
/// capacity at any event, and an evict without a prior load of the same
/// layer is a protocol error. Returns the (vt, resident) trajectory.
pub fn budget_track(events: &[BudgetEvent], budget: &mut MemoryBudget) -> Result<Vec<(f64, u64)>> {
    let mut loaded: HashMap<usize, u64> = HashMap::new();
    let mut trajectory = Vec::with_capacity(events.len());
    for ev in events {
        match ev.kind {
            BudgetEventKind::Load => {
                budget.resident_bytes += ev.bytes;
                loaded.insert(ev.layer, ev.bytes);
                if budget.resident_bytes > budget.capacity_bytes {
                    return Err(Error::Budget {
                        device: budget.device_id,
                        layer: ev.layer,
                        resident: budget.resident_bytes,
                        capacity: budget.capacity_bytes,
                    });
                }
            }
            BudgetEventKind::Evict => {
                let bytes = loaded.remove(&ev.layer).ok_or_else(|| {
                    Error::Protocol(format!("evict of layer {} before its load", ev.layer))
                })?;
                budget.resident_bytes -= bytes;
            }
        }
        trajectory.push((ev.vt, budget.resident_bytes));
    }
    Ok(trajectory)
}

// ---- pool runtime -----------------------------------------------------------

/// Anything the pool can hold per layer.
pub trait PoolLayer: Send + Sync + 'static {
    fn byte_len(&self) -> u64;
    fn param_count(&self) -> u64;
}

impl PoolLayer for LayerParams {
    fn byte_len(&self) -> u64 {
        LayerParams::byte_len(self)
    }
    fn param_count(&self) -> u64 {
        LayerParams::param_count(self)
    }
}

impl PoolLayer for ShardedLayerParams {
    fn byte_len(&self) -> u64 {
        ShardedLayerParams::byte_len(self)
    }
    fn param_count(&self) -> u64 {
        ShardedLayerParams::param_count(self)
    }
}

struct Staging<P> {
    slots_free: usize,
    ready: HashMap<usize, Arc<P>>,
}

struct StagingShared<P> {
    state: Mutex<Staging<P>>,
    cv: Condvar,
}

/// Two-lane pooled executor over one worker's layer range. The compute lane
/// is the caller of [`PoolRuntime::run_pass`]; the transfer lane is a
/// dedicated thread draining a FIFO fetch queue into staging slots. Compute
/// never polls: it waits on the per-layer ready signal.
pub struct PoolRuntime<P: PoolLayer> {
    homes: Vec<LayerHome>,
    resident: Vec<Option<Arc<P>>>,
    layer_bytes: Vec<u64>,
    layer_params: Vec<u64>,
    prefetch_depth: usize,
    bandwidth: BandwidthModel,
    cost: LayerCost,
    staging: Arc<StagingShared<P>>,
    fetch_tx: Option<mpsc::Sender<usize>>,
    transfer_thread: Option<JoinHandle<()>>,
    // virtual clocks
    compute_vt: f64,
    transfer_free_vt: f64,
    enqueues: VecDeque<(usize, f64)>,
    scheduled_fetches: usize,
    evict_vts: Vec<f64>,
    fetch_done_vt: HashMap<usize, f64>,
    fetch_index_of_pending: u64,
    timeline: Timeline,
}

impl<P: PoolLayer> PoolRuntime<P> {
    /// Build a pool over `layers` following `plan`. `staging_slots` defaults
    /// to the prefetch depth; fewer slots than the depth cannot keep the
    /// planned fetches in flight and is rejected.
    pub fn new(
        layers: Vec<P>,
        plan: &PlacementPlan,
        bandwidth: BandwidthModel,
        cost: LayerCost,
        staging_slots: Option<usize>,
    ) -> Result<Self> {
        if plan.homes.len() != layers.len() {
            return Err(Error::Config(format!(
                "plan covers {} layers, pool holds {}",
                plan.homes.len(),
                layers.len()
            )));
        }
        if plan.prefetch_depth == 0 {
            return Err(Error::Config("prefetch depth must be >= 1".into()));
        }
        let slots = staging_slots.unwrap_or(plan.prefetch_depth);
        if slots < plan.prefetch_depth {
            return Err(Error::Config(format!(
                "staging area of {slots} slots cannot hold {} in-flight layers",
                plan.prefetch_depth
            )));
        }
        let layer_bytes: Vec<u64> = layers.iter().map(|l| l.byte_len()).collect();
        let layer_params: Vec<u64> = layers.iter().map(|l| l.param_count()).collect();
        let mut resident = Vec::with_capacity(layers.len());
        let mut remote: Vec<Option<Arc<P>>> = Vec::with_capacity(layers.len());
        for (layer, home) in layers.into_iter().zip(&plan.homes) {
            match home {
                LayerHome::Local => {
                    resident.push(Some(Arc::new(layer)));
                    remote.push(None);
                }
                _ => {
                    resident.push(None);
                    remote.push(Some(Arc::new(layer)));
                }
            }
        }
        let staging = Arc::new(StagingShared {
            state: Mutex::new(Staging {
                slots_free: slots,
                ready: HashMap::new(),
            }),
            cv: Condvar::new(),
        });

        let (fetch_tx, fetch_rx) = mpsc::channel::<usize>();
        let thread_staging = staging.clone();
        let remote_store: Arc<Vec<Option<Arc<P>>>> = Arc::new(remote);
        let transfer_thread = std::thread::spawn(move || {
            while let Ok(layer) = fetch_rx.recv() {
                // occupy a staging slot before the copy lands
                {
                    let mut st = thread_staging.state.lock().unwrap();
                    while st.slots_free == 0 {
                        st = thread_staging.cv.wait(st).unwrap();
                    }
                    st.slots_free -= 1;
                }
                let params = remote_store[layer]
                    .as_ref()
                    .expect("fetch requested for a layer without a remote home")
                    .clone();
                let mut st = thread_staging.state.lock().unwrap();
                st.ready.insert(layer, params);
                thread_staging.cv.notify_all();
            }
        });

        Ok(PoolRuntime {
            homes: plan.homes.clone(),
            resident,
            layer_bytes,
            layer_params,
            prefetch_depth: plan.prefetch_depth,
            bandwidth,
            cost,
            staging,
            fetch_tx: Some(fetch_tx),
            transfer_thread: Some(transfer_thread),
            compute_vt: 0.0,
            transfer_free_vt: 0.0,
            enqueues: VecDeque::new(),
            scheduled_fetches: 0,
            evict_vts: Vec::new(),
            fetch_done_vt: HashMap::new(),
            fetch_index_of_pending: 0,
            timeline: Timeline::default(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.homes.len()
    }

    pub fn is_off_home(&self, layer: usize) -> bool {
        !matches!(self.homes[layer], LayerHome::Local)
    }

    pub fn timeline(&self) -> &Timeline {
        &self.timeline
    }

    pub fn layer_bytes(&self) -> &[u64] {
        &self.layer_bytes
    }

    pub fn homes(&self) -> &[LayerHome] {
        &self.homes
    }

    pub fn compute_vt(&self) -> f64 {
        self.compute_vt
    }

    fn enqueue_fetch(&mut self, layer: usize) {
        self.enqueues.push_back((layer, self.compute_vt));
        self.fetch_tx
            .as_ref()
            .expect("pool runtime already shut down")
            .send(layer)
            .expect("transfer lane exited early");
        self.fetch_index_of_pending += 1;
    }

    /// Advance the virtual transfer lane until the fetch for `layer` has a
    /// completion time. FIFO over the queue; a fetch starts once the lane is
    /// free, its request was issued, and a staging slot is (virtually) free.
    fn schedule_fetches_until(&mut self, layer: usize) {
        while !self.fetch_done_vt.contains_key(&layer) {
            let (l, enq) = self
                .enqueues
                .pop_front()
                .expect("fetch requested but never enqueued");
            let m = self.scheduled_fetches;
            let slot_free = if m >= self.prefetch_depth {
                self.evict_vts[m - self.prefetch_depth]
            } else {
                0.0
            };
            let start = self.transfer_free_vt.max(enq).max(slot_free);
            let t = transfer_time(self.layer_bytes[l], self.bandwidth.link_for(self.homes[l]));
            let done = start + t;
            self.timeline.intervals.push(Interval {
                lane: Lane::Transfer,
                layer: l,
                start,
                end: done,
                kind: IntervalKind::Fetch,
            });
            self.fetch_done_vt.insert(l, done);
            self.transfer_free_vt = done;
            self.scheduled_fetches += 1;
        }
    }

    /// Execute one ordered pass over all layers, threading the activation
    /// through `f`. `rows` is the token-row count the cost model charges
    /// for each layer.
    pub fn run_pass<X, F>(&mut self, mut x: X, rows: usize, mut f: F) -> Result<X>
    where
        F: FnMut(usize, &P, X) -> Result<X>,
    {
        let num_layers = self.num_layers();
        // prologue: fetches whose lead time starts before layer 0
        for j in 0..num_layers.min(self.prefetch_depth) {
            if self.is_off_home(j) {
                self.enqueue_fetch(j);
            }
        }
        for i in 0..num_layers {
            let ahead = i + self.prefetch_depth;
            if ahead < num_layers && self.is_off_home(ahead) {
                self.enqueue_fetch(ahead);
            }
            let params: Arc<P>;
            let start;
            if self.is_off_home(i) {
                self.schedule_fetches_until(i);
                // one fetch per (pass, layer); consume it so the next pass
                // schedules its own
                let ready_vt = self.fetch_done_vt.remove(&i).unwrap();
                if ready_vt > self.compute_vt {
                    self.timeline.intervals.push(Interval {
                        lane: Lane::Compute,
                        layer: i,
                        start: self.compute_vt,
                        end: ready_vt,
                        kind: IntervalKind::Stall,
                    });
                }
                start = self.compute_vt.max(ready_vt);
                // wait on the real per-layer signal from the transfer lane
                let mut st = self.staging.state.lock().unwrap();
                while !st.ready.contains_key(&i) {
                    st = self.staging.cv.wait(st).unwrap();
                }
                params = st.ready.remove(&i).unwrap();
                drop(st);
            } else {
                start = self.compute_vt;
                params = self.resident[i].as_ref().unwrap().clone();
            }
            x = f(i, &params, x)?;
            let end = start + self.cost.cost(rows, self.layer_params[i]);
            self.timeline.intervals.push(Interval {
                lane: Lane::Compute,
                layer: i,
                start,
                end,
                kind: IntervalKind::Compute,
            });
            self.compute_vt = end;
            if self.is_off_home(i) {
                self.evict_vts.push(end);
                drop(params);
                // release the staging slot for the next in-flight fetch
                let mut st = self.staging.state.lock().unwrap();
                st.slots_free += 1;
                self.staging.cv.notify_all();
            }
        }
        Ok(x)
    }
}

impl<P: PoolLayer> Drop for PoolRuntime<P> {
    fn drop(&mut self) {
        self.fetch_tx.take();
        if let Some(t) = self.transfer_thread.take() {
            let _ = t.join();
        }
    }
}

/// Whole-model pooled forward pass on one device. Output is bit-identical
/// to [`serial_forward`]; the returned timeline carries the virtual fetch,
/// compute, and stall intervals.
pub fn pooled_forward(
    cfg: &ModelConfig,
    params: &ModelParams,
    plan: &PlacementPlan,
    batch: &Batch,
    bandwidth: BandwidthModel,
    cost: LayerCost,
) -> Result<(Tensor, Timeline)> {
    batch.validate(cfg)?;
    let mut pool = PoolRuntime::new(params.layers.clone(), plan, bandwidth, cost, None)?;
    let mask = batch.mask(cfg.causal);
    let heads = cfg.num_heads;
    let rows = batch.b * batch.s_pad;
    let x = embed_batch(params, batch)?;
    let x = pool.run_pass(x, rows, |_, layer, x| {
        transformer_layer_forward(&x, layer, heads, &mask)
    })?;
    let out = layer_norm(&x, &params.final_gamma, &params.final_beta, LN_EPS)?;
    let timeline = pool.timeline().clone();
    Ok((out, timeline))
}

/// The oracle check used everywhere pooling claims transparency.
pub fn pooled_matches_serial(
    cfg: &ModelConfig,
    params: &ModelParams,
    plan: &PlacementPlan,
    batch: &Batch,
) -> Result<bool> {
    let (pooled, _) = pooled_forward(
        cfg,
        params,
        plan,
        batch,
        BandwidthModel::default(),
        LayerCost::Fixed(1.0),
    )?;
    let serial = serial_forward(cfg, params, batch)?;
    Ok(pooled.data() == serial.data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, random_batch};

    #[test]
    fn transfer_time_arithmetic() {
        // 3.375 GB over a 600 GB/s peer link
        let t = transfer_time(3_375_000_000, 600.0);
        assert!((t - 5.625e-3).abs() / 5.625e-3 < 1e-6, "{t}");
        assert_eq!(transfer_time(0, 600.0), 0.0);
        // 1 GB over the 32 GB/s host link
        assert!((transfer_time(1_000_000_000, 32.0) - 3.125e-2).abs() < 1e-15);
    }

    #[test]
    fn offload_pattern_24_layers_capacity_20() {
        assert_eq!(offload_indices(24, 20).unwrap(), vec![5, 11, 17, 23]);
    }

    #[test]
    fn offload_none_when_everything_fits() {
        assert_eq!(offload_indices(20, 20).unwrap(), Vec::<usize>::new());
        assert_eq!(offload_indices(3, 20).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn offload_every_second_layer_at_half_capacity() {
        let got = offload_indices(40, 20).unwrap();
        let want: Vec<usize> = (0..20).map(|g| 2 * g + 1).collect();
        assert_eq!(got, want);
        // spacing between consecutive offloads is uniform
        assert!(got.windows(2).all(|w| w[1] - w[0] == 2));
    }

    #[test]
    fn zero_capacity_is_rejected() {
        assert!(offload_indices(4, 0).is_err());
    }

    #[test]
    fn placement_uses_peers_before_host() {
        let peers = vec![
            MemoryBudget::new(1, 2 * 100, DeviceKind::PeerAccelerator),
            MemoryBudget::new(2, 100, DeviceKind::PeerAccelerator),
        ];
        // 4 offloaded layers of 100 bytes into peer space for 3
        let plan = plan_placement(24, 20, 1, &peers, 100).unwrap();
        let offloaded = plan.offloaded();
        assert_eq!(offloaded, vec![5, 11, 17, 23]);
        let homes: Vec<LayerHome> = offloaded.iter().map(|&i| plan.homes[i]).collect();
        assert_eq!(homes[0], LayerHome::Peer(1));
        assert_eq!(homes[1], LayerHome::Peer(2));
        assert_eq!(homes[2], LayerHome::Peer(1));
        assert_eq!(homes[3], LayerHome::Host);
        // no layer on host while a peer still had room
        let peer_free_after: u64 = 0;
        assert_eq!(peer_free_after, 0);
    }

    fn pool_cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 24,
            num_heads: 2,
            head_dim: 4,
            vocab_size: 16,
            max_seq: 8,
            causal: true,
            seed: 31,
        }
    }

    #[test]
    fn all_local_plan_has_no_fetches_and_matches_serial_bitwise() {
        let cfg = ModelConfig {
            num_layers: 3,
            ..pool_cfg()
        };
        let params = build_model(&cfg).unwrap();
        let batch = random_batch(&cfg, 0, 2, 4, 5);
        let plan = PlacementPlan::all_local(3);
        let (out, timeline) = pooled_forward(
            &cfg,
            &params,
            &plan,
            &batch,
            BandwidthModel::default(),
            LayerCost::Fixed(1.0),
        )
        .unwrap();
        assert_eq!(timeline.fetch_count(), 0);
        let serial = serial_forward(&cfg, &params, &batch).unwrap();
        assert_eq!(out.data(), serial.data());
    }

    #[test]
    fn prefetch_overlaps_when_compute_dominates() {
        let cfg = pool_cfg();
        let params = build_model(&cfg).unwrap();
        let batch = random_batch(&cfg, 0, 1, 4, 6);
        let peers = vec![MemoryBudget::new(1, u64::MAX, DeviceKind::PeerAccelerator)];
        let layer_bytes = params.layers[0].byte_len();
        let plan = plan_placement(24, 20, 1, &peers, layer_bytes).unwrap();
        let bw = BandwidthModel::default();
        let t = transfer_time(layer_bytes, bw.peer_link_gbps);
        let c = 2.0 * t; // compute at least the per-layer transfer time
        let (out, timeline) =
            pooled_forward(&cfg, &params, &plan, &batch, bw, LayerCost::Fixed(c)).unwrap();
        let serial = serial_forward(&cfg, &params, &batch).unwrap();
        assert_eq!(out.data(), serial.data());
        assert_eq!(timeline.fetch_count(), 4);
        // stall bounded by one fetch (pipeline fill); here the plan leaves
        // enough lead time that there is no stall at all
        assert!(timeline.stall_time() <= t + 1e-12, "stall {}", timeline.stall_time());
        let all_local = 24.0 * c;
        assert!(timeline.makespan() <= 1.05 * all_local);
    }

    #[test]
    fn host_bound_run_is_transfer_limited() {
        let cfg = pool_cfg();
        let params = build_model(&cfg).unwrap();
        let batch = random_batch(&cfg, 0, 1, 4, 7);
        let layer_bytes = params.layers[0].byte_len();
        // no peers: everything offloaded goes to host
        let plan = plan_placement(24, 20, 1, &[], layer_bytes).unwrap();
        assert!(plan
            .offloaded()
            .iter()
            .all(|&i| plan.homes[i] == LayerHome::Host));
        let bw = BandwidthModel::default();
        let t = transfer_time(layer_bytes, bw.host_link_gbps);
        let c = t / 10.0; // compute far below transfer
        let (_, timeline) =
            pooled_forward(&cfg, &params, &plan, &batch, bw, LayerCost::Fixed(c)).unwrap();
        assert!(
            timeline.makespan() >= 4.0 * t,
            "makespan {} below transfer bound {}",
            timeline.makespan(),
            4.0 * t
        );
        assert!(timeline.stall_time() > 0.0);
    }

    #[test]
    fn budget_replay_with_staging_headroom_is_clean() {
        let cfg = pool_cfg();
        let params = build_model(&cfg).unwrap();
        let batch = random_batch(&cfg, 0, 1, 4, 8);
        let peers = vec![MemoryBudget::new(1, u64::MAX, DeviceKind::PeerAccelerator)];
        let layer_bytes = params.layers[0].byte_len();
        let plan = plan_placement(24, 20, 1, &peers, layer_bytes).unwrap();
        let (_, timeline) = pooled_forward(
            &cfg,
            &params,
            &plan,
            &batch,
            BandwidthModel::default(),
            LayerCost::Fixed(1.0),
        )
        .unwrap();
        let bytes: Vec<u64> = params.layers.iter().map(|l| l.byte_len()).collect();
        let events = budget_events(&timeline, &plan, &bytes);
        // capacity for the 20 resident layers plus one staging slot
        let mut budget = MemoryBudget::new(
            0,
            20 * layer_bytes + layer_bytes,
            DeviceKind::LocalAccelerator,
        );
        budget.resident_bytes = 20 * layer_bytes;
        budget_track(&events, &mut budget).unwrap();

        // without the staging slot the first prefetch violates the budget
        let mut tight = MemoryBudget::new(0, 20 * layer_bytes, DeviceKind::LocalAccelerator);
        tight.resident_bytes = 20 * layer_bytes;
        let err = budget_track(&events, &mut tight).unwrap_err();
        assert!(matches!(err, Error::Budget { layer: 5, .. }), "{err}");
    }

    #[test]
    fn evict_before_load_is_a_protocol_error() {
        let events = vec![BudgetEvent {
            vt: 0.0,
            layer: 3,
            bytes: 10,
            kind: BudgetEventKind::Evict,
        }];
        let mut budget = MemoryBudget::new(0, 100, DeviceKind::LocalAccelerator);
        assert!(matches!(
            budget_track(&events, &mut budget),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn staging_smaller_than_prefetch_depth_is_rejected() {
        let cfg = ModelConfig {
            num_layers: 4,
            ..pool_cfg()
        };
        let params = build_model(&cfg).unwrap();
        let plan = PlacementPlan {
            homes: vec![
                LayerHome::Local,
                LayerHome::Host,
                LayerHome::Local,
                LayerHome::Host,
            ],
            prefetch_depth: 2,
        };
        let err = PoolRuntime::new(
            params.layers.clone(),
            &plan,
            BandwidthModel::default(),
            LayerCost::Fixed(1.0),
            Some(1),
        )
        .err()
        .unwrap();
        assert!(err.to_string().contains("staging"), "{err}");
    }

    #[test]
    fn pooled_output_is_bit_identical_for_every_plan_shape() {
        let cfg = ModelConfig {
            num_layers: 6,
            ..pool_cfg()
        };
        let params = build_model(&cfg).unwrap();
        let batch = random_batch(&cfg, 0, 2, 6, 9);
        let layer_bytes = params.layers[0].byte_len();
        for n in [2usize, 3, 5, 6] {
            let peers = vec![MemoryBudget::new(1, u64::MAX, DeviceKind::PeerAccelerator)];
            let plan = plan_placement(6, n, 1, &peers, layer_bytes).unwrap();
            assert!(pooled_matches_serial(&cfg, &params, &plan, &batch).unwrap());
        }
    }
}
