//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each exported function takes plain numbers and strings and returns a JSON
//! document, so the page needs no generated TypeScript types. The `*_json`
//! functions hold the logic and are what the host-side tests call.

use epsim::sim::RunOptions;
use epsim::{
    aggregate, build_placement, device_token_load, generate, plan_rebalance, simulate_microbatch,
    simulate_run, token_straggler, Direction, Method, ModelConfig, SimContext, Skew, Topology,
    WorkloadSpec,
};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn context(ep: usize, dyn_experts: usize, tau: u64) -> Result<SimContext, String> {
    let topo = Topology::new(ep, 1, ep).map_err(|e| e.to_string())?;
    let model = ModelConfig {
        dyn_experts,
        tau,
        ..ModelConfig::default()
    };
    model.validate(&topo).map_err(|e| e.to_string())?;
    Ok(SimContext::new(model, topo))
}

fn workload(
    skew: &str,
    drift: f64,
    tokens_per_device: u64,
    seed: u64,
    ep: usize,
) -> Result<WorkloadSpec, String> {
    let skew: Skew = skew.parse().map_err(|e: epsim::Error| e.to_string())?;
    Ok(WorkloadSpec {
        tokens_per_microbatch: tokens_per_device * ep as u64,
        top_k: ModelConfig::default().top_k,
        skew,
        drift,
        seed,
    })
}

/// Loads before and after one greedy plan on a generated micro-batch.
pub fn plan_json(
    ep: usize,
    dyn_experts: usize,
    tau: u64,
    skew: &str,
    tokens_per_device: u64,
    seed: u64,
) -> Result<Value, String> {
    let ctx = context(ep, dyn_experts, tau)?;
    let spec = workload(skew, 0.0, tokens_per_device, seed, ep)?;
    let batch = generate(&spec, &ctx.model, &ctx.topo, 1)
        .map_err(|e| e.to_string())?
        .remove(0);
    let placement = build_placement(&ctx.model, &ctx.topo, 0).map_err(|e| e.to_string())?;
    let plan = plan_rebalance(&batch, &placement, &ctx.model, &ctx.topo);
    let before = device_token_load(&batch, &placement, None).map_err(|e| e.to_string())?;
    let after = device_token_load(&batch, &placement, Some(&plan)).map_err(|e| e.to_string())?;
    let actions: Vec<Value> = plan
        .actions
        .iter()
        .map(|a| json!({"expert": a.expert, "src": a.src, "dst": a.dst, "tokens": batch.expert_total(a.expert)}))
        .collect();
    Ok(json!({
        "before": before,
        "after": after,
        "straggler_before": token_straggler(&before).map_err(|e| e.to_string())?,
        "straggler_after": token_straggler(&after).map_err(|e| e.to_string())?,
        "actions": actions,
    }))
}

/// Per-device phase boundaries of one forward layer for every method. The
/// shadow-expert baseline predicts from the preceding micro-batch.
pub fn timeline_json(
    ep: usize,
    dyn_experts: usize,
    skew: &str,
    drift: f64,
    tokens_per_device: u64,
    seed: u64,
) -> Result<Value, String> {
    let ctx = context(ep, dyn_experts, ModelConfig::default().tau)?;
    let spec = workload(skew, drift, tokens_per_device, seed, ep)?;
    let batches = generate(&spec, &ctx.model, &ctx.topo, 2).map_err(|e| e.to_string())?;
    let placement = build_placement(&ctx.model, &ctx.topo, 0).map_err(|e| e.to_string())?;
    let mut methods = Vec::new();
    for method in [
        Method::BeforeLb,
        Method::Feplb,
        Method::FasterMoe { pipe: 1 },
        Method::FasterMoe { pipe: 2 },
    ] {
        let t = simulate_microbatch(
            &batches[1],
            Some(&batches[0]),
            &placement,
            method,
            &ctx,
            Direction::Forward,
        )
        .map_err(|e| e.to_string())?;
        let devices: Vec<Value> = t
            .devices
            .iter()
            .map(|d| {
                json!({
                    "dispatch_end": d.dispatch_end,
                    "static_gemm_end": d.static_gemm_end,
                    "sched_done": d.sched_done,
                    "copy_done": d.copy_done,
                    "dynamic_gemm_start": d.dynamic_gemm_start,
                    "dynamic_gemm_end": d.dynamic_gemm_end,
                    "combine_end": d.combine_end,
                    "tokens": d.tokens,
                })
            })
            .collect();
        methods.push(json!({
            "method": method.to_string(),
            "layer_time": t.layer_time(),
            "copies": t.plan.len(),
            "devices": devices,
        }));
    }
    Ok(json!({ "methods": methods }))
}

/// Mean token straggler of before_lb, feplb and fastermoe over EP 2/4/8 and
/// dyn 2/4/8.
pub fn sweep_json(
    skew: &str,
    drift: f64,
    tokens_per_device: u64,
    iterations: usize,
    seed: u64,
) -> Result<Value, String> {
    let mut rows = Vec::new();
    for ep in [2usize, 4, 8] {
        for dyn_experts in [2usize, 4, 8] {
            let ctx = context(ep, dyn_experts, ModelConfig::default().tau)?;
            let spec = workload(skew, drift, tokens_per_device, seed, ep)?;
            let batches =
                generate(&spec, &ctx.model, &ctx.topo, iterations).map_err(|e| e.to_string())?;
            let placement = build_placement(&ctx.model, &ctx.topo, 0).map_err(|e| e.to_string())?;
            let mut row = json!({"ep": ep, "dyn": dyn_experts});
            for method in [
                Method::BeforeLb,
                Method::Feplb,
                Method::FasterMoe { pipe: 1 },
            ] {
                let out = simulate_run(&batches, &placement, method, &ctx, RunOptions::default())
                    .map_err(|e| e.to_string())?;
                let m = aggregate(&out.timelines, &batches).map_err(|e| e.to_string())?;
                row[method.to_string()] = json!(m.token_straggler_mean);
            }
            rows.push(row);
        }
    }
    Ok(json!({ "rows": rows }))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn plan_demo(
    ep: usize,
    dyn_experts: usize,
    tau: u32,
    skew: &str,
    tokens_per_device: u32,
    seed: u32,
) -> Result<String, JsValue> {
    to_js(plan_json(
        ep,
        dyn_experts,
        tau.into(),
        skew,
        tokens_per_device.into(),
        seed.into(),
    ))
}

#[wasm_bindgen]
pub fn timeline_demo(
    ep: usize,
    dyn_experts: usize,
    skew: &str,
    drift: f64,
    tokens_per_device: u32,
    seed: u32,
) -> Result<String, JsValue> {
    to_js(timeline_json(
        ep,
        dyn_experts,
        skew,
        drift,
        tokens_per_device.into(),
        seed.into(),
    ))
}

#[wasm_bindgen]
pub fn sweep_demo(
    skew: &str,
    drift: f64,
    tokens_per_device: u32,
    iterations: usize,
    seed: u32,
) -> Result<String, JsValue> {
    to_js(sweep_json(
        skew,
        drift,
        tokens_per_device.into(),
        iterations,
        seed.into(),
    ))
}
