//! Analytic timing for each resource channel: Grouped GEMM on SMs (roofline),
//! bulk EP dispatch over the NIC, copy-engine transfers over NVLink.
//!
//! Copy-engine transfers never feed [`gemm_time`]; they occupy no SM time.

use std::path::Path;

use crate::error::{Error, Result};
use crate::kv;
use crate::model::{ModelConfig, Topology};

/// Roofline parameters of one expert GEMM (forward pass).
#[derive(Debug, Clone, PartialEq)]
pub struct GemmParams {
    pub flops_per_token_per_expert: f64,
    pub peak_flops: f64,
    pub mem_bw: f64,
    pub per_expert_fixed_overhead: f64,
    pub weight_bytes: f64,
    pub token_bytes: f64,
    /// Activation bytes moved per token, in units of `token_bytes`
    /// (read input, write output, epilogue read).
    pub activation_traffic: f64,
}

impl GemmParams {
    /// H100 SXM defaults for a SwiGLU expert (three `hidden x ffn` matrices).
    pub fn for_model(model: &ModelConfig) -> Self {
        GemmParams {
            flops_per_token_per_expert: 6.0 * model.hidden_dim as f64 * model.ffn_dim as f64,
            peak_flops: 989e12,
            mem_bw: 3.35e12,
            per_expert_fixed_overhead: 0.0,
            weight_bytes: model.expert_weight_bytes as f64,
            token_bytes: model.token_bytes as f64,
            activation_traffic: 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            (
                "flops_per_token_per_expert",
                self.flops_per_token_per_expert,
            ),
            ("peak_flops", self.peak_flops),
            ("mem_bw", self.mem_bw),
            ("weight_bytes", self.weight_bytes),
            ("token_bytes", self.token_bytes),
            ("activation_traffic", self.activation_traffic),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be > 0, got {v}")));
            }
        }
        if self.per_expert_fixed_overhead.is_nan() || self.per_expert_fixed_overhead < 0.0 {
            return Err(Error::config("per_expert_fixed_overhead", "must be >= 0"));
        }
        Ok(())
    }

    pub fn compute_time(&self, tokens: u64) -> f64 {
        tokens as f64 * self.flops_per_token_per_expert / self.peak_flops
    }

    pub fn memory_time(&self, tokens: u64) -> f64 {
        (self.weight_bytes + tokens as f64 * self.token_bytes * self.activation_traffic)
            / self.mem_bw
    }

    /// Batch size at which the compute and memory terms meet, or `None` when
    /// the kernel stays memory-bound at every size.
    pub fn crossover_tokens(&self) -> Option<f64> {
        let per_token_gap = self.flops_per_token_per_expert / self.peak_flops
            - self.token_bytes * self.activation_traffic / self.mem_bw;
        (per_token_gap > 0.0).then(|| self.weight_bytes / self.mem_bw / per_token_gap)
    }
}

/// Fixed latencies and multipliers for communication and backward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct CommParams {
    pub nic_base_latency: f64,
    pub ce_base_latency: f64,
    /// Staged (pipe = 2) dispatch time relative to bulk dispatch.
    pub pipe2_dispatch_factor: f64,
    pub pipe2_combine_factor: f64,
    pub backward_gemm_multiplier: f64,
}

impl Default for CommParams {
    fn default() -> Self {
        CommParams {
            nic_base_latency: 10e-6,
            ce_base_latency: 5e-6,
            pipe2_dispatch_factor: 1.468,
            pipe2_combine_factor: 1.402,
            backward_gemm_multiplier: 2.0,
        }
    }
}

/// Grouped GEMM time of one device; experts with zero tokens cost nothing.
pub fn gemm_time<I>(per_expert_tokens: I, p: &GemmParams) -> f64
where
    I: IntoIterator<Item = u64>,
{
    per_expert_tokens
        .into_iter()
        .filter(|&n| n > 0)
        .map(|n| p.per_expert_fixed_overhead + p.compute_time(n).max(p.memory_time(n)))
        .sum()
}

/// Bulk single-stage transfer over the inter-node NIC.
pub fn nic_dispatch_time(bytes: u64, topo: &Topology, comm: &CommParams) -> f64 {
    bytes as f64 / topo.internode_bw + comm.nic_base_latency
}

/// Copy-engine transfer over NVLink.
pub fn ce_copy_time(bytes: u64, topo: &Topology, comm: &CommParams) -> f64 {
    bytes as f64 / topo.nvlink_bw + comm.ce_base_latency
}

/// Overrides GEMM/communication constants from a `key = value` calibration
/// file. Unknown keys are rejected.
pub fn apply_calibration(text: &str, gemm: &mut GemmParams, comm: &mut CommParams) -> Result<()> {
    for entry in kv::parse(text)? {
        if entry.section.is_some() {
            return Err(Error::Parse {
                line: entry.line,
                message: "calibration files have no sections".into(),
            });
        }
        let v = kv::parse_f64(&entry)?;
        let slot = match entry.key.as_str() {
            "flops_per_token_per_expert" => &mut gemm.flops_per_token_per_expert,
            "peak_flops" => &mut gemm.peak_flops,
            "mem_bw" => &mut gemm.mem_bw,
            "per_expert_fixed_overhead" => &mut gemm.per_expert_fixed_overhead,
            "weight_bytes" => &mut gemm.weight_bytes,
            "activation_traffic" => &mut gemm.activation_traffic,
            "nic_base_latency" => &mut comm.nic_base_latency,
            "ce_base_latency" => &mut comm.ce_base_latency,
            "pipe2_dispatch_factor" => &mut comm.pipe2_dispatch_factor,
            "pipe2_combine_factor" => &mut comm.pipe2_combine_factor,
            "backward_gemm_multiplier" => &mut comm.backward_gemm_multiplier,
            other => {
                return Err(Error::config(
                    other,
                    format!("unknown calibration key (line {})", entry.line),
                ))
            }
        };
        *slot = v;
    }
    gemm.validate()
}

pub fn load_calibration(path: &Path, gemm: &mut GemmParams, comm: &mut CommParams) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    apply_calibration(&text, gemm, comm)
}
