//! Simulation and scheduling library for per-micro-batch expert rebalancing in
//! Mixture-of-Experts expert parallelism.
//!
//! Tokens are first dispatched across nodes by the regular EP backend. Dynamic
//! experts are then rebalanced inside each NVLink domain by copying whole
//! expert weights (plus their tokens) over the copy engine, while a CPU
//! planner runs concurrently with static-expert GEMMs. The crate models the SM,
//! NIC, copy-engine and CPU channels separately so balance quality, overlap and
//! straggler metrics can be compared against no balancing and a
//! prediction-based shadow-expert baseline.
//!
//! ```text
//!  workload ──▶ RoutingBatch ──▶ balancer ──▶ RebalancePlan
//!                   │                              │
//!                   └──────────▶ sim ◀── cost ─────┘
//!                                 │
//!                                 ▼
//!                       LayerTimeline ──▶ metrics ──▶ experiment (CSV)
//! ```

pub mod balancer;
pub mod cost;
pub mod error;
pub mod experiment;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod sim;
pub mod workload;

pub use balancer::{
    optimize_placement, plan_rebalance, update_history, LoadHistory, MigrateAction, RebalancePlan,
};
pub use cost::{ce_copy_time, gemm_time, nic_dispatch_time, CommParams, GemmParams};
pub use error::{Error, Result};
pub use metrics::{aggregate, gemm_straggler, token_straggler, wasted_ratio, RunMetrics};
pub use model::{
    build_placement, device_token_load, ExpertPlacement, ModelConfig, RoutingBatch, Topology,
};
pub use sim::{simulate_microbatch, simulate_run, Direction, LayerTimeline, Method, SimContext};
pub use workload::{export_trace, generate, ingest_trace, Skew, WorkloadSpec};
