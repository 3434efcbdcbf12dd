//! Config-driven experiment grid: parsing, grid expansion, execution and
//! result files.
//!
//! A config is `key = value` text. Keys before the first `[section]` are
//! defaults; every section is one group of cells that overrides them. Any
//! value may list alternatives as `a|b|c`, and each group expands to the
//! cartesian product of its alternatives, first key outermost.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::cost::{apply_calibration, load_calibration, CommParams, GemmParams};
use crate::error::{Error, Result};
use crate::kv;
use crate::metrics::{aggregate, RunMetrics};
use crate::model::{build_placement, ModelConfig, RoutingBatch, Topology};
use crate::sim::{simulate_run, Direction, Method, RunOptions, SimContext};
use crate::workload::{generate, ingest_trace, Skew, WorkloadSpec};

/// Environment variable naming a default calibration file.
pub const CALIBRATION_ENV: &str = "EPSIM_CALIBRATION";

pub const METRICS_HEADER: &str =
    "cell_id,method,pp,ep,dyn,tau,seed,token_straggler,gemm_straggler_s,layer_fwd_s,layer_bwd_s,wasted_ratio";
pub const SERIES_HEADER: &str =
    "cell_id,iteration,token_straggler,gemm_straggler_s,layer_fwd_s,layer_bwd_s,wasted_ratio";
const COMPARED_METRICS: [&str; 5] = [
    "token_straggler",
    "gemm_straggler_s",
    "layer_fwd_s",
    "layer_bwd_s",
    "wasted_ratio",
];

/// Fully resolved parameters of one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellConfig {
    pub method: Method,
    pub pp: usize,
    pub ep: usize,
    pub gpus_per_node: usize,
    pub model: ModelConfig,
    /// Tokens each EP rank routes per micro-batch.
    pub tokens_per_device: u64,
    pub skew: Skew,
    pub drift: f64,
    pub seed: u64,
    pub iterations: usize,
    pub placement_seed: u64,
    pub macro_period: usize,
    pub history_window: usize,
    pub nvlink_bw: f64,
    pub internode_bw: f64,
    pub cpu_sched_latency: f64,
    pub calibration: Option<PathBuf>,
    /// Replay this routing trace instead of generating a workload.
    pub trace: Option<PathBuf>,
    /// Calibration keys set inline, applied after any calibration file.
    pub calibration_overrides: Vec<(String, String)>,
}

impl Default for CellConfig {
    fn default() -> Self {
        let topo = Topology::default();
        CellConfig {
            method: Method::Feplb,
            pp: 2,
            ep: 8,
            gpus_per_node: 8,
            model: ModelConfig::default(),
            tokens_per_device: 4096,
            skew: Skew::Zipf { s: 1.0 },
            drift: 0.1,
            seed: 0,
            iterations: 64,
            placement_seed: 0,
            macro_period: 0,
            history_window: 1024,
            nvlink_bw: topo.nvlink_bw,
            internode_bw: topo.internode_bw,
            cpu_sched_latency: topo.cpu_sched_latency,
            calibration: None,
            trace: None,
            calibration_overrides: Vec::new(),
        }
    }
}

const CALIBRATION_KEYS: [&str; 11] = [
    "flops_per_token_per_expert",
    "peak_flops",
    "mem_bw",
    "per_expert_fixed_overhead",
    "weight_bytes",
    "activation_traffic",
    "nic_base_latency",
    "ce_base_latency",
    "pipe2_dispatch_factor",
    "pipe2_combine_factor",
    "backward_gemm_multiplier",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("`{value}` is not a valid value")))
}

fn parse_float(key: &str, value: &str) -> Result<f64> {
    let v: f64 = parse_num(key, value)?;
    if !v.is_finite() {
        return Err(Error::config(key, format!("`{value}` is not finite")));
    }
    Ok(v)
}

impl CellConfig {
    /// Builds a cell from resolved `key = value` pairs. Unknown keys and bad
    /// values are reported by field name.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut c = CellConfig::default();
        let mut token_bytes_set = false;
        for (key, value) in pairs {
            let v = value.as_str();
            match key.as_str() {
                "method" => c.method = v.parse()?,
                "pp" => c.pp = parse_num(key, v)?,
                "ep" => c.ep = parse_num(key, v)?,
                "gpus_per_node" => c.gpus_per_node = parse_num(key, v)?,
                "num_experts" => c.model.num_experts = parse_num(key, v)?,
                "top_k" => c.model.top_k = parse_num(key, v)?,
                "hidden_dim" => c.model.hidden_dim = parse_num(key, v)?,
                "ffn_dim" => c.model.ffn_dim = parse_num(key, v)?,
                "expert_weight_bytes" => c.model.expert_weight_bytes = parse_num(key, v)?,
                "token_bytes" => {
                    c.model.token_bytes = parse_num(key, v)?;
                    token_bytes_set = true;
                }
                "dyn" => c.model.dyn_experts = parse_num(key, v)?,
                "tau" => c.model.tau = parse_num(key, v)?,
                "max_num_dyn" => c.model.max_num_dyn = parse_num(key, v)?,
                "tokens_per_device" => c.tokens_per_device = parse_num(key, v)?,
                "skew" => c.skew = v.parse()?,
                "drift" => c.drift = parse_float(key, v)?,
                "seed" => c.seed = parse_num(key, v)?,
                "iterations" => c.iterations = parse_num(key, v)?,
                "placement_seed" => c.placement_seed = parse_num(key, v)?,
                "macro_period" => c.macro_period = parse_num(key, v)?,
                "history_window" => c.history_window = parse_num(key, v)?,
                "nvlink_bw" => c.nvlink_bw = parse_float(key, v)?,
                "internode_bw" => c.internode_bw = parse_float(key, v)?,
                "cpu_sched_latency" => c.cpu_sched_latency = parse_float(key, v)?,
                "calibration" => c.calibration = Some(PathBuf::from(v)),
                "trace" => c.trace = Some(PathBuf::from(v)),
                k if CALIBRATION_KEYS.contains(&k) => {
                    parse_float(key, v)?;
                    c.calibration_overrides.push((key.clone(), value.clone()));
                }
                other => return Err(Error::config(other, "unknown configuration key")),
            }
        }
        if !token_bytes_set {
            c.model.token_bytes = c.model.hidden_dim as u64 * 2;
        }
        if c.history_window == 0 {
            return Err(Error::config("history_window", "must be at least 1"));
        }
        c.topology()?;
        c.model.validate(&c.topology()?)?;
        c.workload_spec().validate(c.model.num_experts)?;
        Ok(c)
    }

    pub fn topology(&self) -> Result<Topology> {
        let mut topo = Topology::new(self.ep, self.pp, self.gpus_per_node)?;
        topo.nvlink_bw = self.nvlink_bw;
        topo.internode_bw = self.internode_bw;
        topo.cpu_sched_latency = self.cpu_sched_latency;
        topo.validate()?;
        Ok(topo)
    }

    pub fn workload_spec(&self) -> WorkloadSpec {
        WorkloadSpec {
            tokens_per_microbatch: self.tokens_per_device * self.ep as u64,
            top_k: self.model.top_k,
            skew: self.skew,
            drift: self.drift,
            seed: self.seed,
        }
    }

    /// Simulation context with calibration applied: defaults, then the file
    /// from `calibration` (or the environment), then inline overrides.
    pub fn context(&self) -> Result<SimContext> {
        let topo = self.topology()?;
        let mut gemm = GemmParams::for_model(&self.model);
        let mut comm = CommParams::default();
        let file = self
            .calibration
            .clone()
            .or_else(|| std::env::var_os(CALIBRATION_ENV).map(PathBuf::from));
        if let Some(path) = file {
            load_calibration(&path, &mut gemm, &mut comm)?;
        }
        if !self.calibration_overrides.is_empty() {
            let text: String = self
                .calibration_overrides
                .iter()
                .map(|(k, v)| format!("{k} = {v}\n"))
                .collect();
            apply_calibration(&text, &mut gemm, &mut comm)?;
        }
        Ok(SimContext {
            model: self.model.clone(),
            topo,
            gemm,
            comm,
        })
    }

    pub fn batches(&self) -> Result<Vec<RoutingBatch>> {
        match &self.trace {
            Some(path) => ingest_trace(path),
            None => generate(
                &self.workload_spec(),
                &self.model,
                &self.topology()?,
                self.iterations,
            ),
        }
    }
}

/// One expanded cell with its id and the raw pairs it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: String,
    pub pairs: Vec<(String, String)>,
    pub config: CellConfig,
}

fn expand(groups: Vec<Vec<(String, String)>>) -> Vec<Vec<(String, String)>> {
    let mut out = Vec::new();
    for group in groups {
        let axes: Vec<(String, Vec<String>)> = group
            .into_iter()
            .map(|(k, v)| {
                let choices = v.split('|').map(|s| s.trim().to_string()).collect();
                (k, choices)
            })
            .collect();
        let mut acc: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (key, choices) in &axes {
            acc = acc
                .into_iter()
                .flat_map(|prefix| {
                    choices.iter().map(move |c| {
                        let mut next = prefix.clone();
                        next.push((key.clone(), c.clone()));
                        next
                    })
                })
                .collect();
        }
        out.extend(acc);
    }
    out
}

/// Parses and expands an experiment config into validated cells.
pub fn parse_config(text: &str) -> Result<Vec<Cell>> {
    let entries = kv::parse(text)?;
    let mut globals: Vec<(String, String)> = Vec::new();
    let mut sections: Vec<(String, Vec<(String, String)>)> = Vec::new();
    for e in entries {
        let target = match &e.section {
            None => &mut globals,
            Some(name) => {
                if sections.last().map(|(n, _)| n != name).unwrap_or(true) {
                    sections.push((name.clone(), Vec::new()));
                }
                &mut sections.last_mut().unwrap().1
            }
        };
        if target.iter().any(|(k, _)| *k == e.key) {
            return Err(Error::config(
                &e.key,
                format!("set twice in the same section (line {})", e.line),
            ));
        }
        target.push((e.key, e.value));
    }
    let groups: Vec<Vec<(String, String)>> = if sections.is_empty() {
        vec![globals]
    } else {
        sections
            .into_iter()
            .map(|(_, local)| {
                let mut merged: Vec<(String, String)> = globals
                    .iter()
                    .map(|(k, v)| {
                        let v = local.iter().find(|(lk, _)| lk == k).map_or(v, |(_, lv)| lv);
                        (k.clone(), v.clone())
                    })
                    .collect();
                for (k, v) in local {
                    if !merged.iter().any(|(mk, _)| *mk == k) {
                        merged.push((k, v));
                    }
                }
                merged
            })
            .collect()
    };
    expand(groups)
        .into_iter()
        .enumerate()
        .map(|(i, pairs)| {
            let config = CellConfig::from_pairs(&pairs)?;
            Ok(Cell {
                id: format!("c{i:03}"),
                pairs,
                config,
            })
        })
        .collect()
}

/// Output of one simulated cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub metrics: RunMetrics,
    /// Plan dump: a `# micro_batch N` line followed by `expert,src,dst` lines.
    pub plans: String,
}

pub fn run_cell(cell: &Cell) -> Result<CellResult> {
    let cfg = &cell.config;
    let ctx = cfg.context()?;
    let placement = build_placement(&cfg.model, &ctx.topo, cfg.placement_seed)?;
    let batches = cfg.batches()?;
    let opts = RunOptions {
        macro_period: cfg.macro_period,
        history_window: cfg.history_window,
    };
    let out = simulate_run(&batches, &placement, cfg.method, &ctx, opts)?;
    let metrics = aggregate(&out.timelines, &batches)?;
    let mut plans = String::new();
    for t in out
        .timelines
        .iter()
        .filter(|t| t.direction == Direction::Forward)
    {
        let _ = writeln!(plans, "# micro_batch {}", t.micro_batch_id);
        plans.push_str(&t.plan.to_lines());
    }
    Ok(CellResult {
        cell: cell.clone(),
        metrics,
        plans,
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunRequest {
    pub out: PathBuf,
    pub overwrite: bool,
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
}

fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents.as_bytes())
        .map_err(|e| Error::io(tmp.path(), e))?;
    let target = dir.join(name);
    tmp.persist(&target)
        .map_err(|e| Error::io(&target, e.error))?;
    Ok(())
}

pub fn metrics_row(r: &CellResult) -> String {
    let c = &r.cell.config;
    let m = &r.metrics;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        r.cell.id,
        c.method,
        c.pp,
        c.ep,
        c.model.dyn_experts,
        c.model.tau,
        c.seed,
        m.token_straggler_mean,
        m.gemm_straggler_mean,
        m.layer_time_fwd_mean,
        m.layer_time_bwd_mean,
        m.wasted_ratio_mean
    )
}

/// Runs every cell of `config_text` and writes `metrics.csv`, `series.csv`,
/// `plans/<cell>.txt` and `manifest.txt` under `req.out`.
pub fn run_experiment(config_text: &str, req: &RunRequest) -> Result<Vec<CellResult>> {
    let mut cells = parse_config(config_text)?;
    if let Some(seed) = req.seed {
        for cell in &mut cells {
            cell.config.seed = seed;
        }
    }
    if req.out.exists() {
        if !req.overwrite {
            return Err(Error::Argument(format!(
                "results directory {} already exists (pass --overwrite to replace it)",
                req.out.display()
            )));
        }
        std::fs::remove_dir_all(&req.out).map_err(|e| Error::io(&req.out, e))?;
    }
    let plans_dir = req.out.join("plans");
    std::fs::create_dir_all(&plans_dir).map_err(|e| Error::io(&plans_dir, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(req.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let r = run_cell(cell)?;
                write_atomic(&plans_dir, &format!("{}.txt", cell.id), &r.plans)?;
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut metrics = format!("{METRICS_HEADER}\n");
    let mut series = format!("{SERIES_HEADER}\n");
    for r in &results {
        metrics.push_str(&metrics_row(r));
        metrics.push('\n');
        for it in &r.metrics.series {
            let _ = writeln!(
                series,
                "{},{},{},{},{},{},{}",
                r.cell.id,
                it.micro_batch_id,
                it.token_straggler,
                it.gemm_straggler,
                it.layer_fwd,
                it.layer_bwd,
                it.wasted_ratio
            );
        }
    }
    write_atomic(&req.out, "metrics.csv", &metrics)?;
    write_atomic(&req.out, "series.csv", &series)?;

    let mut manifest = String::new();
    let _ = writeln!(
        manifest,
        "tool = {} {}",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION")
    );
    let _ = writeln!(
        manifest,
        "seed_override = {}",
        req.seed.map_or("none".to_string(), |s| s.to_string())
    );
    let _ = writeln!(manifest, "cells = {}", results.len());
    for r in &results {
        let pairs: Vec<String> = r
            .cell
            .pairs
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        let _ = writeln!(
            manifest,
            "cell {} seed={} copy_buffer_bytes={} {}",
            r.cell.id,
            r.cell.config.seed,
            r.cell.config.model.copy_buffer_bytes(),
            pairs.join(" ")
        );
    }
    manifest.push_str("--- config ---\n");
    manifest.push_str(config_text);
    write_atomic(&req.out, "manifest.txt", &manifest)?;
    Ok(results)
}

/// Minimal CSV table (no quoting; the files this crate writes never need it).
#[derive(Debug, Clone)]
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_metrics(dir: &Path) -> Result<Table> {
    let path = dir.join("metrics.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Schema {
            path: path.clone(),
            message: "empty file".into(),
        })?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    for required in std::iter::once("cell_id").chain(COMPARED_METRICS) {
        if !header.iter().any(|h| h == required) {
            return Err(Error::Schema {
                path: path.clone(),
                message: format!("missing column `{required}`"),
            });
        }
    }
    let rows = lines
        .enumerate()
        .map(|(i, l)| {
            let row: Vec<String> = l.split(',').map(|s| s.trim().to_string()).collect();
            if row.len() != header.len() {
                return Err(Error::Schema {
                    path: path.clone(),
                    message: format!(
                        "row {} has {} fields, header has {}",
                        i + 2,
                        row.len(),
                        header.len()
                    ),
                });
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Table { header, rows })
}

/// One compared value.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub cell_id: String,
    pub metric: String,
    pub run: String,
    pub method: String,
    pub value: f64,
    /// `(base - value) / base` in percent; 0 when both are zero.
    pub reduction_pct: f64,
    pub best: bool,
}

pub const COMPARISON_HEADER: &str = "cell_id,metric,run,method,value,reduction_pct,best";

fn reduction_pct(base: f64, value: f64) -> f64 {
    if base == 0.0 {
        if value == 0.0 {
            0.0
        } else {
            f64::NAN
        }
    } else {
        (base - value) / base * 100.0
    }
}

/// Compares result directories cell by cell against the first one.
pub fn compare(dirs: &[PathBuf]) -> Result<Vec<ComparisonRow>> {
    if dirs.len() < 2 {
        return Err(Error::Argument(
            "compare needs at least two result directories".into(),
        ));
    }
    let tables = dirs
        .iter()
        .map(|d| read_metrics(d))
        .collect::<Result<Vec<_>>>()?;
    let index: Vec<HashMap<String, &Vec<String>>> = tables
        .iter()
        .map(|t| {
            let id = t.header.iter().position(|h| h == "cell_id").unwrap();
            t.rows.iter().map(|r| (r[id].clone(), r)).collect()
        })
        .collect();
    let col = |t: &Table, name: &str| t.header.iter().position(|h| h == name);
    let base = &tables[0];
    let base_id = col(base, "cell_id").unwrap();
    let mut out = Vec::new();
    for base_row in &base.rows {
        let cell_id = &base_row[base_id];
        for metric in COMPARED_METRICS {
            let mut group = Vec::new();
            for (i, t) in tables.iter().enumerate() {
                let Some(row) = index[i].get(cell_id) else {
                    return Err(Error::Schema {
                        path: dirs[i].join("metrics.csv"),
                        message: format!("missing cell `{cell_id}`"),
                    });
                };
                let raw = &row[col(t, metric).unwrap()];
                let value: f64 = raw.parse().map_err(|_| Error::Schema {
                    path: dirs[i].join("metrics.csv"),
                    message: format!("`{raw}` in column {metric} is not a number"),
                })?;
                let method = col(t, "method").map_or(String::new(), |c| row[c].clone());
                group.push((i, value, method));
            }
            let base_value = group[0].1;
            let best = group.iter().map(|g| g.1).fold(f64::INFINITY, f64::min);
            for (i, value, method) in group {
                out.push(ComparisonRow {
                    cell_id: cell_id.clone(),
                    metric: metric.to_string(),
                    run: dirs[i].display().to_string(),
                    method,
                    value,
                    reduction_pct: reduction_pct(base_value, value),
                    best: value == best,
                });
            }
        }
    }
    Ok(out)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = format!("{COMPARISON_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.cell_id,
            r.metric,
            r.run,
            r.method,
            r.value,
            r.reduction_pct,
            if r.best { "*" } else { "" }
        );
    }
    s
}

/// Console rendering: one line per (cell, metric), base value first.
pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let mut grouped: BTreeMap<(String, usize), Vec<&ComparisonRow>> = BTreeMap::new();
    for r in rows {
        let m = COMPARED_METRICS
            .iter()
            .position(|&x| x == r.metric)
            .unwrap_or(0);
        grouped.entry((r.cell_id.clone(), m)).or_default().push(r);
    }
    let mut s = String::new();
    for ((cell, _), group) in grouped {
        let _ = write!(s, "{cell:<6} {:<18}", group[0].metric);
        for (i, r) in group.iter().enumerate() {
            let mark = if r.best { "*" } else { " " };
            if i == 0 {
                let _ = write!(s, " {:>14.6}{mark}", r.value);
            } else {
                let _ = write!(s, " {:>14.6}{mark} ({:+.1}%)", r.value, -r.reduction_pct);
            }
        }
        s.push('\n');
    }
    s
}
