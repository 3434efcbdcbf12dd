//! Per-micro-batch timeline of one MoE layer.
//!
//! Forward pass, per device:
//!
//! ```text
//! NIC  |== dispatch ==|                                          |== combine ==|
//! SM                  |== static GEMM ==|   |== dynamic GEMM ==|
//! CPU                 |plan|
//! CE                       |== copy ==|
//! ```
//!
//! The dynamic GEMM starts once both the static GEMM and every incoming copy
//! are done. Dispatch and combine volumes are attributed to expert homes, so
//! they do not depend on the rebalance plan. Backward mirrors the
//! communication roles and scales GEMM time by the backward multiplier.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::balancer::{
    optimize_placement, plan_rebalance, update_history, LoadHistory, RebalancePlan,
};
use crate::cost::{ce_copy_time, gemm_time, nic_dispatch_time, CommParams, GemmParams};
use crate::error::{Error, Result};
use crate::model::{ExpertPlacement, ModelConfig, RoutingBatch, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    BeforeLb,
    Feplb,
    /// Shadow-expert replication planned from the previous micro-batch.
    FasterMoe {
        pipe: u8,
    },
}

impl Method {
    pub fn uses_plan(self) -> bool {
        !matches!(self, Method::BeforeLb)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::BeforeLb => f.write_str("before_lb"),
            Method::Feplb => f.write_str("feplb"),
            Method::FasterMoe { pipe: 1 } => f.write_str("fastermoe"),
            Method::FasterMoe { pipe } => write!(f, "fastermoe_pipe{pipe}"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "before_lb" => Ok(Method::BeforeLb),
            "feplb" => Ok(Method::Feplb),
            "fastermoe" | "fastermoe_pipe1" => Ok(Method::FasterMoe { pipe: 1 }),
            "fastermoe_pipe2" => Ok(Method::FasterMoe { pipe: 2 }),
            other => Err(Error::config(
                "method",
                format!("`{other}`: expected before_lb | feplb | fastermoe | fastermoe_pipe2"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Backward,
}

/// Everything the simulator needs besides the batch and placement.
#[derive(Debug, Clone, PartialEq)]
pub struct SimContext {
    pub model: ModelConfig,
    pub topo: Topology,
    pub gemm: GemmParams,
    pub comm: CommParams,
}

impl SimContext {
    pub fn new(model: ModelConfig, topo: Topology) -> Self {
        let gemm = GemmParams::for_model(&model);
        SimContext {
            model,
            topo,
            gemm,
            comm: CommParams::default(),
        }
    }
}

/// Phase boundaries (seconds) and work of one device.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceTimeline {
    pub dispatch_start: f64,
    pub dispatch_end: f64,
    pub static_gemm_start: f64,
    pub static_gemm_end: f64,
    pub sched_done: f64,
    pub copy_done: f64,
    pub dynamic_gemm_start: f64,
    pub dynamic_gemm_end: f64,
    pub combine_end: f64,
    /// Tokens computed here (`T_d`).
    pub tokens: u64,
    /// Busy SM time (`G_d`): static plus dynamic GEMM.
    pub gemm_time: f64,
    pub static_experts: Vec<usize>,
    pub dynamic_experts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTimeline {
    pub micro_batch_id: usize,
    pub method: Method,
    pub direction: Direction,
    pub plan: RebalancePlan,
    /// Duration of the first communication phase (dispatch in forward).
    pub dispatch_time: f64,
    /// Duration of the last communication phase (combine in forward).
    pub combine_time: f64,
    pub devices: Vec<DeviceTimeline>,
}

impl LayerTimeline {
    pub fn layer_time(&self) -> f64 {
        self.devices
            .iter()
            .map(|d| d.combine_end)
            .fold(0.0, f64::max)
    }

    pub fn token_loads(&self) -> Vec<u64> {
        self.devices.iter().map(|d| d.tokens).collect()
    }

    pub fn gemm_times(&self) -> Vec<f64> {
        self.devices.iter().map(|d| d.gemm_time).collect()
    }

    /// Per-device completion time of the layer.
    pub fn device_times(&self) -> Vec<f64> {
        self.devices.iter().map(|d| d.combine_end).collect()
    }
}

/// Per-source collective time for home-attributed traffic: off-node bytes go
/// through the NIC, on-node bytes over NVLink, both in parallel. The
/// collective completes when the slowest source does.
fn bulk_exchange_time(batch: &RoutingBatch, placement: &ExpertPlacement, ctx: &SimContext) -> f64 {
    let topo = &ctx.topo;
    let mut off_node = vec![0u64; batch.num_sources()];
    let mut on_node = vec![0u64; batch.num_sources()];
    for e in 0..batch.num_experts() {
        let home = placement.home(e);
        for (src, &n) in batch.sources(e).iter().enumerate() {
            if src == home || n == 0 {
                continue;
            }
            if topo.same_domain(src, home) {
                on_node[src] += n;
            } else {
                off_node[src] += n;
            }
        }
    }
    let tb = ctx.model.token_bytes;
    off_node
        .iter()
        .zip(&on_node)
        .map(|(&off, &on)| {
            nic_dispatch_time(off * tb, topo, &ctx.comm).max(ce_copy_time(on * tb, topo, &ctx.comm))
        })
        .fold(0.0, f64::max)
}

/// Plan a method would execute for `batch`. The shadow-expert baseline plans
/// from `prediction` (the previous micro-batch), or not at all without one.
pub fn method_plan(
    method: Method,
    batch: &RoutingBatch,
    prediction: Option<&RoutingBatch>,
    placement: &ExpertPlacement,
    ctx: &SimContext,
) -> RebalancePlan {
    match method {
        Method::BeforeLb => RebalancePlan::default(),
        Method::Feplb => plan_rebalance(batch, placement, &ctx.model, &ctx.topo),
        Method::FasterMoe { .. } => prediction
            .map(|p| plan_rebalance(p, placement, &ctx.model, &ctx.topo))
            .unwrap_or_default(),
    }
}

fn check_inputs(batch: &RoutingBatch, placement: &ExpertPlacement, ctx: &SimContext) -> Result<()> {
    if batch.num_experts() != placement.num_experts() {
        return Err(Error::Integrity(format!(
            "batch has {} experts, placement has {}",
            batch.num_experts(),
            placement.num_experts()
        )));
    }
    if placement.num_devices() != ctx.topo.num_devices() {
        return Err(Error::Integrity(format!(
            "placement covers {} devices, topology has {}",
            placement.num_devices(),
            ctx.topo.num_devices()
        )));
    }
    if batch.num_sources() > ctx.topo.num_devices() {
        return Err(Error::Integrity(format!(
            "batch has {} source devices, topology has {}",
            batch.num_sources(),
            ctx.topo.num_devices()
        )));
    }
    Ok(())
}

/// Simulates one micro-batch for one direction.
///
/// Fails with [`Error::Consistency`] when the plan breaks a plan invariant or
/// when some expert's tokens would not be computed exactly once on a device
/// holding its weights.
pub fn simulate_microbatch(
    batch: &RoutingBatch,
    prediction: Option<&RoutingBatch>,
    placement: &ExpertPlacement,
    method: Method,
    ctx: &SimContext,
    direction: Direction,
) -> Result<LayerTimeline> {
    check_inputs(batch, placement, ctx)?;
    let plan = method_plan(method, batch, prediction, placement, ctx);
    simulate_with_plan(batch, placement, method, plan, ctx, direction)
}

/// Same as [`simulate_microbatch`] with an explicit plan.
pub fn simulate_with_plan(
    batch: &RoutingBatch,
    placement: &ExpertPlacement,
    method: Method,
    plan: RebalancePlan,
    ctx: &SimContext,
    direction: Direction,
) -> Result<LayerTimeline> {
    check_inputs(batch, placement, ctx)?;
    plan.validate(placement, &ctx.model, &ctx.topo)
        .map_err(|e| Error::Consistency(format!("invalid rebalance plan: {e}")))?;
    if !method.uses_plan() && !plan.is_empty() {
        return Err(Error::Consistency(format!(
            "{method} cannot execute a plan"
        )));
    }

    let comm = &ctx.comm;
    let base = bulk_exchange_time(batch, placement, ctx);
    let (dispatch_factor, combine_factor) = match method {
        Method::FasterMoe { pipe: 2 } => (comm.pipe2_dispatch_factor, comm.pipe2_combine_factor),
        _ => (1.0, 1.0),
    };
    let dispatch = base * dispatch_factor;
    let combine = base * combine_factor;
    let (first, last, gemm_mult) = match direction {
        Direction::Forward => (dispatch, combine, 1.0),
        Direction::Backward => (combine, dispatch, comm.backward_gemm_multiplier),
    };

    let owners = plan.owners(placement);
    let n_dev = placement.num_devices();

    // Copy-engine pairs serialize; distinct pairs run in parallel.
    let tb = ctx.model.token_bytes;
    let mut pair_busy: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut copy_ready = vec![0.0f64; n_dev];
    let mut expert_ready: BTreeMap<usize, f64> = BTreeMap::new();
    let sched_done = first
        + if method.uses_plan() {
            ctx.topo.cpu_sched_latency
        } else {
            0.0
        };
    for a in &plan.actions {
        let bytes = ctx.model.expert_weight_bytes + batch.expert_total(a.expert) * tb;
        let busy = pair_busy.entry((a.src, a.dst)).or_insert(0.0);
        *busy += ce_copy_time(bytes, &ctx.topo, comm);
        let done = sched_done + *busy;
        expert_ready.insert(a.expert, done);
        copy_ready[a.dst] = copy_ready[a.dst].max(done);
    }

    let mut devices = Vec::with_capacity(n_dev);
    for d in 0..n_dev {
        let (static_experts, dynamic_experts): (Vec<usize>, Vec<usize>) = if method.uses_plan() {
            let retained = placement
                .dynamic_set(d)
                .iter()
                .copied()
                .filter(|&e| owners[e] == d);
            let received = plan.actions.iter().filter(|a| a.dst == d).map(|a| a.expert);
            let mut dynamic: Vec<usize> = retained.chain(received).collect();
            dynamic.sort_unstable();
            (placement.static_set(d).to_vec(), dynamic)
        } else {
            (placement.hosted(d), Vec::new())
        };
        let static_time = gemm_mult
            * gemm_time(
                static_experts.iter().map(|&e| batch.expert_total(e)),
                &ctx.gemm,
            );
        let dynamic_time = gemm_mult
            * gemm_time(
                dynamic_experts.iter().map(|&e| batch.expert_total(e)),
                &ctx.gemm,
            );
        let static_gemm_end = first + static_time;
        let (sched, copy_done) = if method.uses_plan() {
            (sched_done, sched_done.max(copy_ready[d]))
        } else {
            (first, first)
        };
        let dynamic_gemm_start = static_gemm_end.max(copy_done);
        let dynamic_gemm_end = dynamic_gemm_start + dynamic_time;
        let tokens = static_experts
            .iter()
            .chain(&dynamic_experts)
            .map(|&e| batch.expert_total(e))
            .sum();
        devices.push(DeviceTimeline {
            dispatch_start: 0.0,
            dispatch_end: first,
            static_gemm_start: first,
            static_gemm_end,
            sched_done: sched,
            copy_done,
            dynamic_gemm_start,
            dynamic_gemm_end,
            combine_end: dynamic_gemm_end + last,
            tokens,
            gemm_time: static_time + dynamic_time,
            static_experts,
            dynamic_experts,
        });
    }

    let timeline = LayerTimeline {
        micro_batch_id: batch.micro_batch_id,
        method,
        direction,
        plan,
        dispatch_time: first,
        combine_time: last,
        devices,
    };
    verify_exactly_once(batch, placement, &timeline, &expert_ready)?;
    Ok(timeline)
}

/// Every expert with tokens is computed on exactly one device, which is its
/// home or the destination of a copy that finished before the GEMM using it.
fn verify_exactly_once(
    batch: &RoutingBatch,
    placement: &ExpertPlacement,
    timeline: &LayerTimeline,
    expert_ready: &BTreeMap<usize, f64>,
) -> Result<()> {
    let mut computed_on: Vec<Option<usize>> = vec![None; placement.num_experts()];
    for (d, dev) in timeline.devices.iter().enumerate() {
        for &e in dev.static_experts.iter().chain(&dev.dynamic_experts) {
            if let Some(other) = computed_on[e].replace(d) {
                return Err(Error::Consistency(format!(
                    "expert {e} computed on both device {other} and device {d}"
                )));
            }
            if placement.home(e) != d {
                let ready = expert_ready.get(&e).ok_or_else(|| {
                    Error::Consistency(format!("expert {e} computed on {d} without its weights"))
                })?;
                if *ready > dev.dynamic_gemm_start || !dev.dynamic_experts.contains(&e) {
                    return Err(Error::Consistency(format!(
                        "expert {e} used on {d} before its copy completed"
                    )));
                }
            }
        }
    }
    for (e, slot) in computed_on.iter().enumerate() {
        if slot.is_none() && batch.expert_total(e) > 0 {
            return Err(Error::Consistency(format!(
                "expert {e} has {} tokens but is never computed",
                batch.expert_total(e)
            )));
        }
    }
    let computed: u64 = timeline.devices.iter().map(|d| d.tokens).sum();
    if computed != batch.total() {
        return Err(Error::Consistency(format!(
            "computed {computed} tokens but the batch routes {}",
            batch.total()
        )));
    }
    Ok(())
}

/// Options for [`simulate_run`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Apply the placement optimizer every this many micro-batches (0 = never).
    pub macro_period: usize,
    pub history_window: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            macro_period: 0,
            history_window: 1024,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Forward then backward timeline for each batch.
    pub timelines: Vec<LayerTimeline>,
    pub final_placement: ExpertPlacement,
    /// Batch indices after which the placement optimizer ran.
    pub macro_steps: Vec<usize>,
}

/// Runs a batch sequence. The placement optimizer only runs for `feplb`.
pub fn simulate_run(
    batches: &[RoutingBatch],
    initial: &ExpertPlacement,
    method: Method,
    ctx: &SimContext,
    opts: RunOptions,
) -> Result<RunOutput> {
    let mut placement = initial.clone();
    let mut history = LoadHistory::new(initial.num_experts(), opts.history_window);
    let mut timelines = Vec::with_capacity(batches.len() * 2);
    let mut macro_steps = Vec::new();
    let mut prev: Option<&RoutingBatch> = None;
    for (i, batch) in batches.iter().enumerate() {
        check_inputs(batch, &placement, ctx)?;
        let plan = method_plan(method, batch, prev, &placement, ctx);
        for direction in [Direction::Forward, Direction::Backward] {
            timelines.push(simulate_with_plan(
                batch,
                &placement,
                method,
                plan.clone(),
                ctx,
                direction,
            )?);
        }
        history = update_history(&history, batch);
        if method == Method::Feplb && opts.macro_period > 0 && (i + 1) % opts.macro_period == 0 {
            placement = optimize_placement(&history, &placement, &ctx.topo);
            macro_steps.push(i);
        }
        prev = Some(batch);
    }
    Ok(RunOutput {
        timelines,
        final_placement: placement,
        macro_steps,
    })
}
