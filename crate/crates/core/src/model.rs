//! Cluster topology, model shape, expert placement and routing batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::balancer::RebalancePlan;
use crate::error::{Error, Result};

pub const MIB: u64 = 1 << 20;

/// Physical cluster and parallel layout.
///
/// The simulated devices are the members of one EP group, ranks
/// `0..ep_degree`. EP is the innermost parallel dimension, so rank `r` lives on
/// node `r / gpus_per_node` and its NVLink domain is every EP rank on that
/// node.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub num_nodes: usize,
    pub gpus_per_node: usize,
    /// Bytes/s per GPU over NVLink (copy engine path).
    pub nvlink_bw: f64,
    /// Bytes/s per GPU across nodes (EP backend path).
    pub internode_bw: f64,
    pub cpu_sched_latency: f64,
    pub ep_degree: usize,
    pub pp_degree: usize,
}

impl Default for Topology {
    fn default() -> Self {
        Topology {
            num_nodes: 2,
            gpus_per_node: 8,
            nvlink_bw: 900e9,
            internode_bw: 50e9,
            cpu_sched_latency: 50e-6,
            ep_degree: 8,
            pp_degree: 2,
        }
    }
}

impl Topology {
    /// Builds a topology with default link constants, deriving the node count
    /// from `ep × pp` devices.
    pub fn new(ep_degree: usize, pp_degree: usize, gpus_per_node: usize) -> Result<Self> {
        if gpus_per_node == 0 {
            return Err(Error::config("gpus_per_node", "must be at least 1"));
        }
        let devices = ep_degree * pp_degree;
        if devices == 0 || !devices.is_multiple_of(gpus_per_node) {
            return Err(Error::config(
                "ep/pp",
                format!(
                    "ep ({ep_degree}) x pp ({pp_degree}) = {devices} devices is not a positive \
                     multiple of gpus_per_node ({gpus_per_node})"
                ),
            ));
        }
        let topo = Topology {
            num_nodes: devices / gpus_per_node,
            gpus_per_node,
            ep_degree,
            pp_degree,
            ..Topology::default()
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ep_degree == 0 {
            return Err(Error::config("ep", "must be at least 1"));
        }
        if self.pp_degree == 0 {
            return Err(Error::config("pp", "must be at least 1"));
        }
        if self.ep_degree * self.pp_degree != self.num_nodes * self.gpus_per_node {
            return Err(Error::config(
                "ep/pp",
                format!(
                    "ep ({}) x pp ({}) must equal num_nodes ({}) x gpus_per_node ({})",
                    self.ep_degree, self.pp_degree, self.num_nodes, self.gpus_per_node
                ),
            ));
        }
        for (field, v) in [
            ("nvlink_bw", self.nvlink_bw),
            ("internode_bw", self.internode_bw),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be > 0, got {v}")));
            }
        }
        if !(self.cpu_sched_latency >= 0.0 && self.cpu_sched_latency.is_finite()) {
            return Err(Error::config("cpu_sched_latency", "must be >= 0"));
        }
        Ok(())
    }

    /// Number of simulated devices (the EP group).
    pub fn num_devices(&self) -> usize {
        self.ep_degree
    }

    pub fn node_of(&self, device: usize) -> usize {
        device / self.gpus_per_node
    }

    pub fn same_domain(&self, a: usize, b: usize) -> bool {
        self.node_of(a) == self.node_of(b)
    }

    /// NVLink domains of the EP group, each a sorted list of device ids.
    pub fn domains(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = Vec::new();
        for d in 0..self.num_devices() {
            let node = self.node_of(d);
            if out.len() <= node {
                out.resize_with(node + 1, Vec::new);
            }
            out[node].push(d);
        }
        out.retain(|dom| !dom.is_empty());
        out
    }
}

/// Shape of one MoE layer plus the rebalancing knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub hidden_dim: usize,
    /// Expert FFN intermediate size; feeds the default FLOP count.
    pub ffn_dim: usize,
    pub expert_weight_bytes: u64,
    pub token_bytes: u64,
    /// Dynamic (migratable) experts per device.
    pub dyn_experts: usize,
    /// Minimum tokens an expert needs in a micro-batch to be migrated.
    pub tau: u64,
    /// Copied-weight buffer slots per device.
    pub max_num_dyn: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let hidden_dim = 6144;
        ModelConfig {
            num_experts: 128,
            top_k: 8,
            hidden_dim,
            ffn_dim: 2048,
            expert_weight_bytes: 72 * MIB,
            token_bytes: hidden_dim as u64 * 2,
            dyn_experts: 4,
            tau: 64,
            max_num_dyn: 8,
        }
    }
}

impl ModelConfig {
    pub fn experts_per_device(&self, topo: &Topology) -> usize {
        self.num_experts / topo.ep_degree
    }

    /// Bytes each device reserves for received expert copies.
    pub fn copy_buffer_bytes(&self) -> u64 {
        self.max_num_dyn as u64 * self.expert_weight_bytes
    }

    pub fn validate(&self, topo: &Topology) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::config("num_experts", "must be at least 1"));
        }
        if !self.num_experts.is_multiple_of(topo.ep_degree) {
            return Err(Error::config(
                "num_experts/ep",
                format!(
                    "num_experts ({}) is not divisible by ep ({})",
                    self.num_experts, topo.ep_degree
                ),
            ));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::config(
                "top_k",
                format!(
                    "top_k ({}) must be in 1..={} (num_experts)",
                    self.top_k, self.num_experts
                ),
            ));
        }
        let per_device = self.experts_per_device(topo);
        if self.dyn_experts > per_device {
            return Err(Error::config(
                "dyn",
                format!(
                    "dyn ({}) exceeds experts per device ({per_device})",
                    self.dyn_experts
                ),
            ));
        }
        if self.dyn_experts >= 1 && self.max_num_dyn == 0 {
            return Err(Error::config(
                "max_num_dyn",
                "must be at least 1 when dyn >= 1",
            ));
        }
        if self.token_bytes == 0 || self.expert_weight_bytes == 0 {
            return Err(Error::config(
                "token_bytes/expert_weight_bytes",
                "must be > 0",
            ));
        }
        Ok(())
    }
}

/// Expert-to-device assignment with the per-device static/dynamic split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertPlacement {
    home: Vec<usize>,
    static_set: Vec<Vec<usize>>,
    dynamic_set: Vec<Vec<usize>>,
    dynamic: Vec<bool>,
}

impl ExpertPlacement {
    /// Builds a placement from the experts hosted on each device and the
    /// dynamic subset of each device. Both inputs are validated.
    pub fn new(hosted: Vec<Vec<usize>>, dynamic: Vec<Vec<usize>>) -> Result<Self> {
        if hosted.len() != dynamic.len() {
            return Err(Error::Integrity(format!(
                "{} hosted lists but {} dynamic lists",
                hosted.len(),
                dynamic.len()
            )));
        }
        let num_experts: usize = hosted.iter().map(Vec::len).sum();
        let mut home = vec![usize::MAX; num_experts];
        for (d, experts) in hosted.iter().enumerate() {
            for &e in experts {
                if e >= num_experts {
                    return Err(Error::Integrity(format!(
                        "expert {e} out of range (num_experts = {num_experts})"
                    )));
                }
                if home[e] != usize::MAX {
                    return Err(Error::Integrity(format!(
                        "expert {e} hosted on both device {} and device {d}",
                        home[e]
                    )));
                }
                home[e] = d;
            }
        }
        let mut is_dyn = vec![false; num_experts];
        let mut static_set = Vec::with_capacity(hosted.len());
        let mut dynamic_set = Vec::with_capacity(hosted.len());
        for (d, (experts, dyns)) in hosted.into_iter().zip(dynamic).enumerate() {
            let mut dyns = dyns;
            dyns.sort_unstable();
            for &e in &dyns {
                if e >= num_experts || home[e] != d {
                    return Err(Error::Integrity(format!(
                        "dynamic expert {e} is not hosted on device {d}"
                    )));
                }
                if is_dyn[e] {
                    return Err(Error::Integrity(format!("expert {e} listed dynamic twice")));
                }
                is_dyn[e] = true;
            }
            let mut statics: Vec<usize> = experts.into_iter().filter(|&e| !is_dyn[e]).collect();
            statics.sort_unstable();
            static_set.push(statics);
            dynamic_set.push(dyns);
        }
        Ok(ExpertPlacement {
            home,
            static_set,
            dynamic_set,
            dynamic: is_dyn,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.home.len()
    }

    pub fn num_devices(&self) -> usize {
        self.static_set.len()
    }

    pub fn home(&self, expert: usize) -> usize {
        self.home[expert]
    }

    pub fn homes(&self) -> &[usize] {
        &self.home
    }

    pub fn is_dynamic(&self, expert: usize) -> bool {
        self.dynamic[expert]
    }

    pub fn static_set(&self, device: usize) -> &[usize] {
        &self.static_set[device]
    }

    pub fn dynamic_set(&self, device: usize) -> &[usize] {
        &self.dynamic_set[device]
    }

    /// All experts hosted on `device`, sorted.
    pub fn hosted(&self, device: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.static_set[device]
            .iter()
            .chain(&self.dynamic_set[device])
            .copied()
            .collect();
        v.sort_unstable();
        v
    }
}

/// Contiguous expert assignment; seeds other than 0 shuffle expert ids first.
/// The dynamic set of each device is its `dyn` highest expert ids.
pub fn build_placement(model: &ModelConfig, topo: &Topology, seed: u64) -> Result<ExpertPlacement> {
    topo.validate()?;
    model.validate(topo)?;
    let per_device = model.experts_per_device(topo);
    let mut order: Vec<usize> = (0..model.num_experts).collect();
    if seed != 0 {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let hosted: Vec<Vec<usize>> = order
        .chunks(per_device)
        .map(|c| {
            let mut c = c.to_vec();
            c.sort_unstable();
            c
        })
        .collect();
    let dynamic = hosted
        .iter()
        .map(|c| c[c.len() - model.dyn_experts..].to_vec())
        .collect();
    ExpertPlacement::new(hosted, dynamic)
}

/// Token counts of one micro-batch for one MoE layer, indexed by
/// `(expert, source_device)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RoutingBatch {
    pub micro_batch_id: usize,
    pub layer: usize,
    num_experts: usize,
    num_sources: usize,
    counts: Vec<u64>,
}

impl RoutingBatch {
    pub fn zeros(micro_batch_id: usize, num_experts: usize, num_sources: usize) -> Self {
        RoutingBatch {
            micro_batch_id,
            layer: 0,
            num_experts,
            num_sources,
            counts: vec![0; num_experts * num_sources],
        }
    }

    /// Single-source batch from per-expert totals.
    pub fn from_expert_counts(micro_batch_id: usize, counts: &[u64]) -> Self {
        RoutingBatch {
            micro_batch_id,
            layer: 0,
            num_experts: counts.len(),
            num_sources: 1,
            counts: counts.to_vec(),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn num_sources(&self) -> usize {
        self.num_sources
    }

    pub fn count(&self, expert: usize, source: usize) -> u64 {
        self.counts[expert * self.num_sources + source]
    }

    pub fn set(&mut self, expert: usize, source: usize, n: u64) {
        self.counts[expert * self.num_sources + source] = n;
    }

    pub fn add(&mut self, expert: usize, source: usize, n: u64) {
        self.counts[expert * self.num_sources + source] += n;
    }

    /// Per-source counts for one expert.
    pub fn sources(&self, expert: usize) -> &[u64] {
        let start = expert * self.num_sources;
        &self.counts[start..start + self.num_sources]
    }

    pub fn expert_total(&self, expert: usize) -> u64 {
        self.sources(expert).iter().sum()
    }

    pub fn expert_totals(&self) -> Vec<u64> {
        (0..self.num_experts)
            .map(|e| self.expert_total(e))
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Tokens computed per device (`T_d`). Without a plan every expert counts
/// toward its home; with a plan, migrated experts count toward their
/// destination.
pub fn device_token_load(
    batch: &RoutingBatch,
    placement: &ExpertPlacement,
    plan: Option<&RebalancePlan>,
) -> Result<Vec<u64>> {
    if batch.num_experts() != placement.num_experts() {
        return Err(Error::Integrity(format!(
            "batch has {} experts, placement has {}",
            batch.num_experts(),
            placement.num_experts()
        )));
    }
    let mut owner: Vec<usize> = placement.homes().to_vec();
    if let Some(plan) = plan {
        for a in &plan.actions {
            if a.expert >= owner.len() {
                return Err(Error::Integrity(format!(
                    "plan references unknown expert {}",
                    a.expert
                )));
            }
            if a.dst >= placement.num_devices() || a.src >= placement.num_devices() {
                return Err(Error::Integrity(format!(
                    "plan action {}: {} -> {} references an unknown device",
                    a.expert, a.src, a.dst
                )));
            }
            if placement.home(a.expert) != a.src {
                return Err(Error::Integrity(format!(
                    "plan moves expert {} from device {}, but its home is {}",
                    a.expert,
                    a.src,
                    placement.home(a.expert)
                )));
            }
            owner[a.expert] = a.dst;
        }
    }
    let mut load = vec![0u64; placement.num_devices()];
    for (e, &d) in owner.iter().enumerate() {
        load[d] += batch.expert_total(e);
    }
    Ok(load)
}
