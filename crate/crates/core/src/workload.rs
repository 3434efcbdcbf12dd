//! Synthetic skewed routing and text trace ingestion.
//!
//! A generated run keeps one expert-popularity vector and redraws it with
//! probability `drift` before each micro-batch after the first. Every token
//! picks `top_k` distinct experts from the current popularity (sampling
//! without replacement). Tokens are assigned to source devices round-robin.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, RoutingBatch, Topology};

pub const TRACE_HEADER: &str = "iter,layer,expert_id,source_device,token_count";

/// Shape of the expert popularity distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Skew {
    Uniform,
    /// Weights `1 / rank^s` over a random permutation of experts.
    Zipf {
        s: f64,
    },
    /// Popularity drawn from a symmetric Dirichlet.
    Dirichlet {
        alpha: f64,
    },
    /// `h` random experts share probability mass `p`; the rest share `1 - p`.
    HotSet {
        h: usize,
        p: f64,
    },
}

impl fmt::Display for Skew {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Skew::Uniform => write!(f, "uniform"),
            Skew::Zipf { s } => write!(f, "zipf:{s}"),
            Skew::Dirichlet { alpha } => write!(f, "dirichlet:{alpha}"),
            Skew::HotSet { h, p } => write!(f, "hot_set:{h}:{p}"),
        }
    }
}

impl FromStr for Skew {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').map(str::trim).collect();
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| Error::config("skew", format!("`{v}` is not a number in `{s}`")))
        };
        match parts.as_slice() {
            ["uniform"] => Ok(Skew::Uniform),
            ["zipf", v] => Ok(Skew::Zipf { s: num(v)? }),
            ["dirichlet", v] => Ok(Skew::Dirichlet { alpha: num(v)? }),
            ["hot_set", h, p] => Ok(Skew::HotSet {
                h: h.parse()
                    .map_err(|_| Error::config("skew", format!("bad hot-set size `{h}`")))?,
                p: num(p)?,
            }),
            _ => Err(Error::config(
                "skew",
                format!("`{s}`: expected uniform | zipf:S | dirichlet:A | hot_set:H:P"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    /// Tokens routed by the whole EP group per micro-batch.
    pub tokens_per_microbatch: u64,
    pub top_k: usize,
    pub skew: Skew,
    /// Probability of redrawing expert popularity before each micro-batch.
    pub drift: f64,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self, num_experts: usize) -> Result<()> {
        match self.skew {
            Skew::Zipf { s } if !(s > 0.0 && s.is_finite()) => {
                return Err(Error::config(
                    "skew",
                    format!("zipf exponent must be > 0, got {s}"),
                ))
            }
            Skew::Dirichlet { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                return Err(Error::config(
                    "skew",
                    format!("dirichlet alpha must be > 0, got {alpha}"),
                ))
            }
            Skew::HotSet { h, p } => {
                if h == 0 || h > num_experts {
                    return Err(Error::config(
                        "skew",
                        format!("hot-set size {h} must be in 1..={num_experts}"),
                    ));
                }
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::config(
                        "skew",
                        format!("hot-set mass {p} not in [0, 1]"),
                    ));
                }
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.drift) {
            return Err(Error::config(
                "drift",
                format!("{} not in [0, 1]", self.drift),
            ));
        }
        if self.top_k == 0 || self.top_k > num_experts {
            return Err(Error::config(
                "top_k",
                format!("top_k ({}) must be in 1..={num_experts}", self.top_k),
            ));
        }
        Ok(())
    }
}

fn draw_popularity(skew: Skew, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match skew {
        Skew::Uniform => vec![1.0; n],
        Skew::Zipf { s } => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            let mut w = vec![0.0; n];
            for (rank, e) in perm.into_iter().enumerate() {
                w[e] = 1.0 / ((rank + 1) as f64).powf(s);
            }
            w
        }
        Skew::Dirichlet { alpha } => {
            let gamma = Gamma::new(alpha, 1.0).expect("alpha validated > 0");
            let w: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
            if w.iter().all(|&x| x <= 0.0) {
                vec![1.0; n]
            } else {
                w
            }
        }
        Skew::HotSet { h, p } => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            let cold = n - h;
            let mut w = vec![0.0; n];
            for (i, e) in perm.into_iter().enumerate() {
                w[e] = if i < h {
                    p / h as f64
                } else {
                    (1.0 - p) / cold as f64
                };
            }
            w
        }
    }
}

/// Picks `k` distinct indices with sequential renormalization.
///
/// Rejecting already-chosen experts while sampling from the full weights
/// yields the renormalized distribution; after repeated rejections a direct
/// scan over the remaining weights takes over.
fn sample_distinct(
    weights: &[f64],
    index: &WeightedIndex<f64>,
    k: usize,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<usize>,
) {
    out.clear();
    while out.len() < k {
        let mut picked = None;
        for _ in 0..32 {
            let e = index.sample(rng);
            if !out.contains(&e) {
                picked = Some(e);
                break;
            }
        }
        let e = picked.unwrap_or_else(|| {
            let remaining: f64 = weights
                .iter()
                .enumerate()
                .filter(|(i, _)| !out.contains(i))
                .map(|(_, w)| w)
                .sum();
            let mut x = rng.gen::<f64>() * remaining;
            let mut last = None;
            for (i, &w) in weights.iter().enumerate() {
                if out.contains(&i) || w <= 0.0 {
                    continue;
                }
                last = Some(i);
                if x < w {
                    break;
                }
                x -= w;
            }
            last.expect("enough positive-weight experts")
        });
        out.push(e);
    }
}

/// Generates `num_iters` routing batches; deterministic for a given seed.
pub fn generate(
    spec: &WorkloadSpec,
    model: &ModelConfig,
    topo: &Topology,
    num_iters: usize,
) -> Result<Vec<RoutingBatch>> {
    let n = model.num_experts;
    spec.validate(n)?;
    let sources = topo.num_devices();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut popularity = draw_popularity(spec.skew, n, &mut rng);
    let mut batches = Vec::with_capacity(num_iters);
    let mut picks = Vec::with_capacity(spec.top_k);

    for iter in 0..num_iters {
        if iter > 0 && spec.drift > 0.0 && rng.gen::<f64>() < spec.drift {
            popularity = draw_popularity(spec.skew, n, &mut rng);
        }
        let positive = popularity.iter().filter(|&&w| w > 0.0).count();
        if positive < spec.top_k {
            return Err(Error::config(
                "skew",
                format!(
                    "only {positive} experts have nonzero popularity but top_k = {}",
                    spec.top_k
                ),
            ));
        }
        let index = WeightedIndex::new(&popularity)
            .map_err(|e| Error::config("skew", format!("degenerate popularity: {e}")))?;
        let mut batch = RoutingBatch::zeros(iter, n, sources);
        for token in 0..spec.tokens_per_microbatch {
            let src = (token % sources as u64) as usize;
            sample_distinct(&popularity, &index, spec.top_k, &mut rng, &mut picks);
            for &e in &picks {
                batch.add(e, src, 1);
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Writes batches in the text trace format, one line per
/// `(iteration, layer, expert, source)` including zero counts.
pub fn export_trace<W: Write>(batches: &[RoutingBatch], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for b in batches {
        for e in 0..b.num_experts() {
            for s in 0..b.num_sources() {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    b.micro_batch_id,
                    b.layer,
                    e,
                    s,
                    b.count(e, s)
                )?;
            }
        }
    }
    Ok(())
}

/// Parses trace text. Batches come back ordered by `(iter, layer)`; the
/// expert and source dimensions are the largest ids seen anywhere plus one.
pub fn parse_trace(text: &str) -> Result<Vec<RoutingBatch>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((idx, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    if header.trim() != TRACE_HEADER {
        return Err(Error::Parse {
            line: idx + 1,
            message: format!("expected header `{TRACE_HEADER}`"),
        });
    }
    let mut records: BTreeMap<(usize, usize), BTreeMap<(usize, usize), u64>> = BTreeMap::new();
    let (mut experts, mut sources) = (0usize, 0usize);
    for (idx, raw) in lines {
        let line = idx + 1;
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line,
                message: format!("expected 5 comma-separated fields, got {}", fields.len()),
            });
        }
        let mut vals = [0i64; 5];
        for (slot, f) in vals.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| Error::Parse {
                line,
                message: format!("`{f}` is not an integer"),
            })?;
        }
        if let Some(pos) = vals[..4].iter().position(|&v| v < 0) {
            return Err(Error::Validation {
                line,
                message: format!("negative {}", TRACE_HEADER.split(',').nth(pos).unwrap()),
            });
        }
        if vals[4] < 0 {
            return Err(Error::Validation {
                line,
                message: format!("negative token count {}", vals[4]),
            });
        }
        let [iter, layer, expert, source, count] = vals.map(|v| v as u64);
        let (expert, source) = (expert as usize, source as usize);
        experts = experts.max(expert + 1);
        sources = sources.max(source + 1);
        let cell = records.entry((iter as usize, layer as usize)).or_default();
        if cell.insert((expert, source), count).is_some() {
            return Err(Error::Validation {
                line,
                message: format!(
                    "duplicate record for iter {iter}, layer {layer}, expert {expert}, source {source}"
                ),
            });
        }
    }
    Ok(records
        .into_iter()
        .map(|((iter, layer), cells)| {
            let mut b = RoutingBatch::zeros(iter, experts, sources);
            b.layer = layer;
            for ((e, s), c) in cells {
                b.set(e, s, c);
            }
            b
        })
        .collect())
}

pub fn ingest_trace(path: &Path) -> Result<Vec<RoutingBatch>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace(&text)
}
