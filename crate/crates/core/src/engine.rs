//! The centralized engine: runtime initialization (delegate sub-models to
//! workers, load parameters) and execution launch (commands out, result
//! futures back). Callers use one API surface no matter how the model is
//! split; distributed inference behaves like the serial forward pass.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam::channel::{unbounded, Receiver, Sender};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::comm::{
    control_channels, fabric_of, init_contexts_with, ControlEndpoint, ControlHub, CounterSnapshot,
    Counters, DataPlaneMode, Fabric,
};
use crate::error::{Error, Result};
use crate::mempool::{plan_placement, BandwidthModel, DeviceKind, LayerCost, MemoryBudget, PoolLayer, PoolRuntime};
use crate::model::{build_model, load_checkpoint, serial_forward, Batch, ModelConfig, ModelParams};
use crate::pipeline::{
    partition_layers, Command, ConsistencyQueue, ControlMsg, LoopCounter, PoolStore, ResultHandle,
    ResultsHub, StageLayers, StageWorker, Telemetry, VirtualCost, WorkerInit,
};
use crate::tensor::Tensor;
use crate::tensor_parallel::shard_params;
use crate::trace::TraceLog;

/// Peer memory pool settings for a runtime. Each worker plans placement
/// over its own layer range: up to `local_capacity_layers` stay local, the
/// rest go to peers (then host) and are prefetched during execution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolConfig {
    pub local_capacity_layers: usize,
    #[serde(default = "default_prefetch")]
    pub prefetch_depth: usize,
    #[serde(default = "default_peers")]
    pub peer_devices: usize,
    /// Per-peer capacity; absent means unbounded peers.
    #[serde(default)]
    pub peer_capacity_bytes: Option<u64>,
    #[serde(default)]
    pub bandwidth: BandwidthModel,
}

fn default_prefetch() -> usize {
    1
}

fn default_peers() -> usize {
    1
}

/// Seeded random delay before each control send, for ordering stress tests.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ControlDelay {
    pub max_micros: u64,
    pub seed: u64,
}

/// Full launch configuration. On disk this is the JSON "launch file"; CLI
/// flags override individual fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub model: ModelConfig,
    pub tp_size: usize,
    pub pp_size: usize,
    #[serde(default)]
    pub drce: bool,
    #[serde(default)]
    pub pool: Option<PoolConfig>,
    /// Dispatch lanes in the engine pool; defaults to 2 * pp_size.
    #[serde(default)]
    pub dispatch_lanes: Option<usize>,
    /// Admission window = maximum in-flight keys = worker queue bound.
    #[serde(default)]
    pub queue_capacity: Option<usize>,
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
    #[serde(default)]
    pub data_plane: DataPlaneMode,
    #[serde(default)]
    pub cost: Option<VirtualCost>,
    #[serde(default)]
    pub control_delay: Option<ControlDelay>,
    /// Real per-batch sleep in every stage, for slow-stage tests.
    #[serde(default)]
    pub compute_delay_micros: Option<u64>,
}

impl RuntimeConfig {
    pub fn new(model: ModelConfig, tp_size: usize, pp_size: usize) -> Self {
        RuntimeConfig {
            model,
            tp_size,
            pp_size,
            drce: false,
            pool: None,
            dispatch_lanes: None,
            queue_capacity: None,
            checkpoint_path: None,
            data_plane: DataPlaneMode::Channels,
            cost: None,
            control_delay: None,
            compute_delay_micros: None,
        }
    }

    pub fn world_size(&self) -> usize {
        self.tp_size * self.pp_size
    }

    pub fn lanes(&self) -> usize {
        self.dispatch_lanes.unwrap_or(2 * self.pp_size).max(1)
    }

    pub fn capacity(&self) -> usize {
        self.queue_capacity.unwrap_or(64).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.tp_size < 1 || self.pp_size < 1 {
            return Err(Error::Config("tp_size and pp_size must be >= 1".into()));
        }
        if self.model.num_heads % self.tp_size != 0 {
            return Err(Error::Config(format!(
                "{} heads not divisible by tp_size {}",
                self.model.num_heads, self.tp_size
            )));
        }
        if self.pp_size > self.model.num_layers {
            return Err(Error::Config(format!(
                "pp_size {} exceeds {} layers",
                self.pp_size, self.model.num_layers
            )));
        }
        if let Some(pool) = &self.pool {
            if pool.local_capacity_layers < 1 {
                return Err(Error::Config("pool local capacity must be >= 1 layer".into()));
            }
            if pool.prefetch_depth < 1 {
                return Err(Error::Config("prefetch depth must be >= 1".into()));
            }
        }
        Ok(())
    }
}

struct DispatchJob {
    key: u64,
    batch: Batch,
}

enum LifeCycle {
    Live,
    Shut,
}

struct Teardown {
    dispatch_tx: Option<Sender<DispatchJob>>,
    lanes: Vec<JoinHandle<()>>,
    workers: Vec<JoinHandle<()>>,
}

/// A live distributed runtime: worker threads per rank, dispatch lanes, the
/// loop counter, and the registry of outstanding results.
pub struct Runtime {
    cfg: RuntimeConfig,
    params: ModelParams,
    counter: LoopCounter,
    hub: Arc<ResultsHub>,
    control: Arc<ControlHub<ControlMsg>>,
    fabric: Arc<Fabric>,
    counters: Vec<Arc<Counters>>,
    trace: Arc<TraceLog>,
    telemetry: Arc<Telemetry>,
    worker_param_bytes: Vec<u64>,
    state: Mutex<LifeCycle>,
    teardown: Mutex<Teardown>,
}

fn build_store<P>(
    layers: Vec<P>,
    pool: &Option<PoolConfig>,
    cost: Option<VirtualCost>,
) -> Result<PoolStore<P>>
where
    P: PoolLayer + Clone,
{
    match pool {
        None => Ok(PoolStore::Resident(layers.into_iter().map(Arc::new).collect())),
        Some(pc) => {
            let owned = layers.len();
            let local = pc.local_capacity_layers.min(owned).max(1);
            let peers: Vec<MemoryBudget> = (0..pc.peer_devices)
                .map(|i| {
                    MemoryBudget::new(
                        i + 1,
                        pc.peer_capacity_bytes.unwrap_or(u64::MAX),
                        DeviceKind::PeerAccelerator,
                    )
                })
                .collect();
            let layer_bytes = layers.first().map(|l| l.byte_len()).unwrap_or(0);
            let plan = plan_placement(owned, local, pc.prefetch_depth, &peers, layer_bytes)?;
            let layer_cost = cost.map(|c| c.layer).unwrap_or(LayerCost::Fixed(1.0));
            let pool = PoolRuntime::new(layers, &plan, pc.bandwidth, layer_cost, None)?;
            Ok(PoolStore::Pooled(Box::new(pool)))
        }
    }
}

/// Build contexts, delegate sliced parameters to one worker per rank over
/// the control plane, and wait for every readiness acknowledgement.
pub fn initialize(cfg: RuntimeConfig) -> Result<Runtime> {
    cfg.validate()?;

    // parameters: checkpoint when given, seeded build otherwise
    let params = match &cfg.checkpoint_path {
        Some(path) => {
            let (loaded_cfg, params) = load_checkpoint(path)?;
            if loaded_cfg != cfg.model {
                return Err(Error::Config(format!(
                    "checkpoint architecture {loaded_cfg:?} does not match configured {:?}",
                    cfg.model
                )));
            }
            params
        }
        None => build_model(&cfg.model)?,
    };

    let world = cfg.world_size();
    let contexts = init_contexts_with(world, cfg.tp_size, cfg.pp_size, cfg.data_plane)?;
    let fabric = fabric_of(&contexts);
    let counters: Vec<Arc<Counters>> = contexts.iter().map(|c| c.counters().clone()).collect();
    let plan = partition_layers(cfg.model.num_layers, cfg.pp_size)?;

    let (control, endpoints) = control_channels::<ControlMsg>(world);
    let control = Arc::new(control);
    let hub = ResultsHub::new(cfg.capacity());
    let trace = Arc::new(TraceLog::default());
    let telemetry = Arc::new(Telemetry::default());
    let (ready_tx, ready_rx) = unbounded::<(usize, Result<()>)>();

    // spawn workers; each consumes its endpoint and waits for Init
    let mut workers = Vec::with_capacity(world);
    let mut worker_param_bytes = vec![0u64; world];
    let mut inits: Vec<Option<Box<WorkerInit>>> = Vec::with_capacity(world);
    for ctx in &contexts {
        let stage = ctx.pp_stage;
        let range = plan.ranges[stage].clone();
        let full_layers = params.layers[range.clone()].to_vec();
        let mut bytes: u64;
        let layers = if cfg.tp_size == 1 {
            bytes = full_layers.iter().map(|l| l.byte_len()).sum();
            StageLayers::Full(build_store(full_layers, &cfg.pool, cfg.cost)?)
        } else {
            let mut shards = Vec::with_capacity(full_layers.len());
            for layer in &full_layers {
                let mut all = shard_params(layer, cfg.model.num_heads, cfg.tp_size)?;
                shards.push(all.swap_remove(ctx.tp_rank));
            }
            bytes = shards.iter().map(|s| s.byte_len()).sum();
            StageLayers::Sharded(build_store(shards, &cfg.pool, cfg.cost)?)
        };
        let embedding = (stage == 0).then(|| {
            bytes += params.embedding.byte_len() + params.pos_embedding.byte_len();
            (params.embedding.clone(), params.pos_embedding.clone())
        });
        let final_norm = (stage + 1 == cfg.pp_size).then(|| {
            bytes += params.final_gamma.byte_len() + params.final_beta.byte_len();
            (params.final_gamma.clone(), params.final_beta.clone())
        });
        worker_param_bytes[ctx.rank] = bytes;
        inits.push(Some(Box::new(WorkerInit {
            layers,
            embedding,
            final_norm,
            heads: cfg.model.num_heads,
            causal: cfg.model.causal,
            layer_range: range,
            cost: cfg.cost,
            compute_delay: cfg.compute_delay_micros.map(Duration::from_micros),
        })));
    }

    for (ctx, endpoint) in contexts.into_iter().zip(endpoints) {
        let rank = ctx.rank;
        let cq = Arc::new(ConsistencyQueue::new(cfg.capacity()));
        let hub = hub.clone();
        let trace = trace.clone();
        let telemetry = telemetry.clone();
        let ready = ready_tx.clone();
        workers.push(std::thread::spawn(move || {
            worker_main(rank, ctx, endpoint, cq, hub, trace, telemetry, ready)
        }));
    }
    drop(ready_tx);

    // delegate sub-models over the control plane
    for (rank, init) in inits.iter_mut().enumerate() {
        control.send(rank, ControlMsg::Init(init.take().unwrap()))?;
    }
    // readiness acknowledged by every worker before initialize returns
    for _ in 0..world {
        match ready_rx.recv() {
            Ok((_, Ok(()))) => {}
            Ok((rank, Err(e))) => {
                fabric.shutdown();
                return Err(Error::Delivery {
                    worker: rank,
                    reason: format!("worker init failed: {e}"),
                });
            }
            Err(_) => {
                fabric.shutdown();
                return Err(Error::Protocol("worker exited before readiness".into()));
            }
        }
    }

    // dispatch lanes
    let (dispatch_tx, dispatch_rx) = unbounded::<DispatchJob>();
    let mut lanes = Vec::with_capacity(cfg.lanes());
    for lane in 0..cfg.lanes() {
        let rx: Receiver<DispatchJob> = dispatch_rx.clone();
        let control = control.clone();
        let hub = hub.clone();
        let world = cfg.world_size();
        let tp = cfg.tp_size;
        let drce = cfg.drce;
        let delay = cfg.control_delay;
        lanes.push(std::thread::spawn(move || {
            dispatch_lane(lane, rx, control, hub, world, tp, drce, delay)
        }));
    }

    Ok(Runtime {
        cfg,
        params,
        counter: LoopCounter::default(),
        hub,
        control,
        fabric,
        counters,
        trace,
        telemetry,
        worker_param_bytes,
        state: Mutex::new(LifeCycle::Live),
        teardown: Mutex::new(Teardown {
            dispatch_tx: Some(dispatch_tx),
            lanes,
            workers,
        }),
    })
}

#[allow(clippy::too_many_arguments)]
fn worker_main(
    rank: usize,
    ctx: crate::comm::GlobalContext,
    endpoint: ControlEndpoint<ControlMsg>,
    cq: Arc<ConsistencyQueue>,
    hub: Arc<ResultsHub>,
    trace: Arc<TraceLog>,
    telemetry: Arc<Telemetry>,
    ready: Sender<(usize, Result<()>)>,
) {
    let init = match endpoint.recv() {
        Some(ControlMsg::Init(init)) => *init,
        _ => {
            let _ = ready.send((rank, Err(Error::Protocol("expected Init first".into()))));
            return;
        }
    };
    let mut worker = StageWorker::new(ctx, init, cq.clone(), hub.clone(), trace, telemetry);
    let compute = std::thread::spawn(move || worker.run());
    let _ = ready.send((rank, Ok(())));

    // dispatcher: feed the consistency queue until shutdown
    while let Some(msg) = endpoint.recv() {
        match msg {
            ControlMsg::Task(cmd) => {
                let key = cmd.unique_key;
                if let Err(e) = cq.insert(key, cmd) {
                    hub.fail(key, rank, &e.to_string());
                }
            }
            ControlMsg::Shutdown => break,
            ControlMsg::Init(_) => {
                // late re-init is a protocol violation; ignore
            }
        }
    }
    cq.close();
    let _ = compute.join();
}

#[allow(clippy::too_many_arguments)]
fn dispatch_lane(
    lane: usize,
    rx: Receiver<DispatchJob>,
    control: Arc<ControlHub<ControlMsg>>,
    hub: Arc<ResultsHub>,
    world: usize,
    tp_size: usize,
    drce: bool,
    delay: Option<ControlDelay>,
) {
    let mut rng = delay.map(|d| ChaCha8Rng::seed_from_u64(d.seed.wrapping_add(lane as u64)));
    while let Ok(job) = rx.recv() {
        for rank in 0..world {
            if let (Some(d), Some(rng)) = (delay, rng.as_mut()) {
                if d.max_micros > 0 {
                    std::thread::sleep(Duration::from_micros(rng.gen_range(0..=d.max_micros)));
                }
            }
            let stage = rank / tp_size;
            let cmd = Command {
                unique_key: job.key,
                batch_id: job.batch.batch_id,
                b: job.batch.b,
                s_pad: job.batch.s_pad,
                seq_lens: job.batch.seq_lens.clone(),
                payload: (stage == 0).then(|| job.batch.token_ids.clone()),
                drce,
            };
            if let Err(e) = control.send(rank, ControlMsg::Task(cmd)) {
                hub.fail(job.key, stage, &e.to_string());
            }
        }
    }
}

impl Runtime {
    pub fn config(&self) -> &RuntimeConfig {
        &self.cfg
    }

    /// The full parameter set the engine delegated from (for oracles).
    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Serial reference forward for this runtime's model.
    pub fn serial_reference(&self, batch: &Batch) -> Result<Tensor> {
        serial_forward(&self.cfg.model, &self.params, batch)
    }

    /// Validate and launch one batch; returns immediately with the handle.
    pub fn submit(&self, batch: Batch) -> Result<ResultHandle> {
        if matches!(*self.state.lock().unwrap(), LifeCycle::Shut) {
            return Err(Error::ShutDown);
        }
        batch.validate(&self.cfg.model)?;
        self.hub.admit()?;
        let key = self.counter.next_key();
        let handle = self.hub.register(key);
        let tx = self.teardown.lock().unwrap().dispatch_tx.clone();
        match tx {
            Some(tx) if tx.send(DispatchJob { key, batch }).is_ok() => Ok(handle),
            _ => {
                self.hub.fail(key, 0, "runtime shut down during submit");
                Err(Error::ShutDown)
            }
        }
    }

    /// Stop intake, wait for all in-flight keys, release workers and
    /// channels. Idempotent.
    pub fn shutdown(&self) {
        {
            let mut st = self.state.lock().unwrap();
            if matches!(*st, LifeCycle::Shut) {
                return;
            }
            *st = LifeCycle::Shut;
        }
        self.hub.drain();
        let mut parts = self.teardown.lock().unwrap();
        parts.dispatch_tx.take();
        for lane in parts.lanes.drain(..) {
            let _ = lane.join();
        }
        let _ = self.control.broadcast_shutdown();
        // unblock any worker still parked on the data plane before joining
        self.fabric.shutdown();
        for w in parts.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn world_size(&self) -> usize {
        self.cfg.world_size()
    }

    /// Per-rank communication counter snapshots.
    pub fn rank_counters(&self) -> Vec<CounterSnapshot> {
        self.counters.iter().map(|c| c.snapshot()).collect()
    }

    /// Sum of all ranks' counters.
    pub fn counter_totals(&self) -> CounterSnapshot {
        let mut total = CounterSnapshot::default();
        for c in &self.counters {
            let s = c.snapshot();
            total.all_reduce += s.all_reduce;
            total.p2p_send += s.p2p_send;
            total.p2p_recv += s.p2p_recv;
        }
        total
    }

    pub fn trace(&self) -> &Arc<TraceLog> {
        &self.trace
    }

    pub fn telemetry(&self) -> &Arc<Telemetry> {
        &self.telemetry
    }

    /// Unwaited result registrations (leak check).
    pub fn registered_results(&self) -> usize {
        self.hub.registered()
    }

    /// Parameter bytes delegated to each worker.
    pub fn worker_param_bytes(&self) -> &[u64] {
        &self.worker_param_bytes
    }

    pub fn keys_issued(&self) -> u64 {
        self.counter.issued()
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        self.shutdown();
    }
}

trait BroadcastShutdown {
    fn broadcast_shutdown(&self) -> Result<()>;
}

impl BroadcastShutdown for ControlHub<ControlMsg> {
    fn broadcast_shutdown(&self) -> Result<()> {
        for worker in 0..self.workers() {
            self.send(worker, ControlMsg::Shutdown)?;
        }
        Ok(())
    }
}
