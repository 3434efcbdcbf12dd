//! Per-micro-batch greedy rebalancing and checkpoint-time placement refinement.
//!
//! The micro-level planner runs once per micro-batch on the token counts that
//! are known after Phase 1. Inside every NVLink domain it repeatedly takes the
//! most loaded device, picks its busiest unmigrated dynamic expert that meets
//! the `tau` threshold, and moves that whole expert (weights and tokens) to
//! the least loaded device that still has a free copy-buffer slot. A move is
//! committed only when it strictly lowers the domain's maximum load; the
//! first move that would not ends planning for that domain.
//!
//! Ties are broken by the lowest device id, then the lowest expert id, so
//! every rank derives the same plan from the same counts.

use crate::error::{Error, Result};
use crate::model::{device_token_load, ExpertPlacement, ModelConfig, RoutingBatch, Topology};

/// Copy one expert's weights and tokens from its home to `dst`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MigrateAction {
    pub expert: usize,
    pub src: usize,
    pub dst: usize,
}

/// Ordered list of whole-expert migrations. Plans from all NVLink domains are
/// merged; the domain of an action is the node of its `src`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct RebalancePlan {
    pub actions: Vec<MigrateAction>,
}

impl RebalancePlan {
    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    /// Device that computes each expert once this plan is applied.
    pub fn owners(&self, placement: &ExpertPlacement) -> Vec<usize> {
        let mut owner = placement.homes().to_vec();
        for a in &self.actions {
            owner[a.expert] = a.dst;
        }
        owner
    }

    /// Checks the structural invariants: same NVLink domain, `src != dst`,
    /// `src` is the expert's home, the expert is dynamic, each expert moves at
    /// most once and no device receives more than `max_num_dyn` copies.
    pub fn validate(
        &self,
        placement: &ExpertPlacement,
        model: &ModelConfig,
        topo: &Topology,
    ) -> Result<()> {
        let mut seen = vec![false; placement.num_experts()];
        let mut incoming = vec![0usize; placement.num_devices()];
        for a in &self.actions {
            if a.expert >= placement.num_experts() {
                return Err(Error::Integrity(format!("unknown expert {}", a.expert)));
            }
            if a.src >= placement.num_devices() || a.dst >= placement.num_devices() {
                return Err(Error::Integrity(format!(
                    "expert {}: unknown device in {} -> {}",
                    a.expert, a.src, a.dst
                )));
            }
            if a.src == a.dst {
                return Err(Error::Integrity(format!(
                    "expert {} copied onto its own device {}",
                    a.expert, a.src
                )));
            }
            if !topo.same_domain(a.src, a.dst) {
                return Err(Error::Integrity(format!(
                    "expert {}: {} -> {} crosses an NVLink domain",
                    a.expert, a.src, a.dst
                )));
            }
            if placement.home(a.expert) != a.src {
                return Err(Error::Integrity(format!(
                    "expert {} is homed on {}, not {}",
                    a.expert,
                    placement.home(a.expert),
                    a.src
                )));
            }
            if !placement.is_dynamic(a.expert) {
                return Err(Error::Integrity(format!("expert {} is static", a.expert)));
            }
            if std::mem::replace(&mut seen[a.expert], true) {
                return Err(Error::Integrity(format!(
                    "expert {} migrated twice",
                    a.expert
                )));
            }
            incoming[a.dst] += 1;
            if incoming[a.dst] > model.max_num_dyn {
                return Err(Error::Integrity(format!(
                    "device {} receives more than max_num_dyn = {} copies",
                    a.dst, model.max_num_dyn
                )));
            }
        }
        Ok(())
    }

    /// One `expert,src,dst` line per action.
    pub fn to_lines(&self) -> String {
        self.actions
            .iter()
            .map(|a| format!("{},{},{}\n", a.expert, a.src, a.dst))
            .collect()
    }
}

/// Greedy per-micro-batch plan over the home-attributed (post-Phase-1) loads.
///
/// Degenerate inputs (`dyn = 0`, single-device domains, balanced loads)
/// produce an empty plan. Inconsistent batch/placement shapes also produce an
/// empty plan; the simulator rejects those before planning.
pub fn plan_rebalance(
    batch: &RoutingBatch,
    placement: &ExpertPlacement,
    model: &ModelConfig,
    topo: &Topology,
) -> RebalancePlan {
    let Ok(mut load) = device_token_load(batch, placement, None) else {
        return RebalancePlan::default();
    };
    let tokens = batch.expert_totals();
    let mut migrated = vec![false; placement.num_experts()];
    let mut received = vec![0usize; placement.num_devices()];
    let mut actions = Vec::new();

    for domain in topo.domains() {
        if domain.len() < 2 || domain.iter().any(|&d| d >= placement.num_devices()) {
            continue;
        }
        loop {
            // First index wins ties: domains are sorted by device id.
            let src =
                domain.iter().copied().fold(
                    domain[0],
                    |best, d| if load[d] > load[best] { d } else { best },
                );
            let candidate = placement
                .dynamic_set(src)
                .iter()
                .copied()
                .filter(|&e| !migrated[e] && tokens[e] >= model.tau)
                .fold(None::<usize>, |best, e| match best {
                    Some(b) if tokens[b] >= tokens[e] => Some(b),
                    _ => Some(e),
                });
            let Some(expert) = candidate else { break };
            let dst = domain
                .iter()
                .copied()
                .filter(|&d| d != src && received[d] < model.max_num_dyn)
                .fold(None::<usize>, |best, d| match best {
                    Some(b) if load[b] <= load[d] => Some(b),
                    _ => Some(d),
                });
            let Some(dst) = dst else { break };

            let old_max = load[src];
            let moved = tokens[expert];
            let new_max = domain
                .iter()
                .map(|&d| match d {
                    d if d == src => load[d] - moved,
                    d if d == dst => load[d] + moved,
                    d => load[d],
                })
                .max()
                .unwrap_or(0);
            if new_max >= old_max {
                break;
            }
            load[src] -= moved;
            load[dst] += moved;
            migrated[expert] = true;
            received[dst] += 1;
            actions.push(MigrateAction { expert, src, dst });
        }
    }
    RebalancePlan { actions }
}

/// Exponentially weighted per-expert token counts.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadHistory {
    pub ema_load: Vec<f64>,
    pub window: usize,
}

impl LoadHistory {
    pub fn new(num_experts: usize, window: usize) -> Self {
        LoadHistory {
            ema_load: vec![0.0; num_experts],
            window: window.max(1),
        }
    }
}

/// `ema' = (1 - 1/window) * ema + count / window`, per expert.
pub fn update_history(history: &LoadHistory, batch: &RoutingBatch) -> LoadHistory {
    let w = history.window.max(1) as f64;
    let keep = 1.0 - 1.0 / w;
    let ema_load = history
        .ema_load
        .iter()
        .enumerate()
        .map(|(e, &old)| {
            let count = if e < batch.num_experts() {
                batch.expert_total(e) as f64
            } else {
                0.0
            };
            (keep * old + count / w).max(0.0)
        })
        .collect();
    LoadHistory {
        ema_load,
        window: history.window,
    }
}

/// Longest-processing-time packing of experts by historical load, keeping
/// each device's expert count and dynamic count unchanged. The hottest experts
/// on each device become its dynamic set. An all-zero history leaves the
/// placement as is.
pub fn optimize_placement(
    history: &LoadHistory,
    placement: &ExpertPlacement,
    topo: &Topology,
) -> ExpertPlacement {
    let n = placement.num_experts();
    if history.ema_load.len() != n || history.ema_load.iter().all(|&x| x <= 0.0) {
        return placement.clone();
    }
    let devices = placement.num_devices().min(topo.num_devices().max(1));
    let capacity: Vec<usize> = (0..devices).map(|d| placement.hosted(d).len()).collect();
    let dyn_count: Vec<usize> = (0..devices)
        .map(|d| placement.dynamic_set(d).len())
        .collect();

    let ema = &history.ema_load;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ema[b].total_cmp(&ema[a]).then(a.cmp(&b)));

    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); devices];
    let mut bin_load = vec![0.0f64; devices];
    for e in order {
        let target = (0..devices)
            .filter(|&d| bins[d].len() < capacity[d])
            .min_by(|&a, &b| bin_load[a].total_cmp(&bin_load[b]).then(a.cmp(&b)))
            .expect("total capacity equals expert count");
        bins[target].push(e);
        bin_load[target] += ema[e];
    }
    let dynamic = bins
        .iter()
        .zip(&dyn_count)
        .map(|(experts, &k)| {
            // `experts` is already in descending-load order.
            experts[..k].to_vec()
        })
        .collect();
    ExpertPlacement::new(bins, dynamic).expect("LPT packing yields a valid placement")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_placement;

    fn four_device_case() -> (ExpertPlacement, ModelConfig, Topology) {
        // Devices 0..4 each host two experts; only the odd ids are dynamic.
        let hosted = vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]];
        let dynamic = vec![vec![0, 1], vec![3], vec![5], vec![7]];
        let p = ExpertPlacement::new(hosted, dynamic).unwrap();
        let model = ModelConfig {
            num_experts: 8,
            dyn_experts: 1,
            tau: 100,
            max_num_dyn: 8,
            ..ModelConfig::default()
        };
        (p, model, Topology::new(4, 1, 4).unwrap())
    }

    #[test]
    fn balanced_loads_give_empty_plan() {
        let model = ModelConfig::default();
        let topo = Topology::new(8, 2, 8).unwrap();
        let p = build_placement(&model, &topo, 0).unwrap();
        let b = RoutingBatch::from_expert_counts(0, &[500; 128]);
        assert!(plan_rebalance(&b, &p, &model, &topo).is_empty());
    }

    #[test]
    fn dyn_zero_gives_empty_plan() {
        let model = ModelConfig {
            dyn_experts: 0,
            ..ModelConfig::default()
        };
        let topo = Topology::new(8, 2, 8).unwrap();
        let p = build_placement(&model, &topo, 0).unwrap();
        let mut counts = vec![10; 128];
        counts[0] = 100_000;
        let b = RoutingBatch::from_expert_counts(0, &counts);
        assert!(plan_rebalance(&b, &p, &model, &topo).is_empty());
    }

    #[test]
    fn hot_device_sheds_busiest_expert_first() {
        let (p, model, topo) = four_device_case();
        // D0 = {e0: 600, e1: 500}, D1 = {}, D2 = {e5: 400}, D3 = {e7: 300}.
        let b = RoutingBatch::from_expert_counts(0, &[600, 500, 0, 0, 0, 400, 0, 300]);
        let plan = plan_rebalance(&b, &p, &model, &topo);
        assert_eq!(
            plan.actions,
            vec![MigrateAction {
                expert: 0,
                src: 0,
                dst: 1
            }]
        );
        let load = device_token_load(&b, &p, Some(&plan)).unwrap();
        assert_eq!(load, vec![500, 600, 400, 300]);
        plan.validate(&p, &model, &topo).unwrap();
    }

    #[test]
    fn tau_excludes_small_experts() {
        let (p, mut model, topo) = four_device_case();
        model.tau = 700;
        let b = RoutingBatch::from_expert_counts(0, &[600, 500, 0, 0, 0, 400, 0, 300]);
        assert!(plan_rebalance(&b, &p, &model, &topo).is_empty());
    }

    #[test]
    fn buffer_limit_redirects_to_next_lightest() {
        // Device 0 holds four hot dynamic experts; devices 1 and 2 are idle.
        let hosted = vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9, 10, 11]];
        let dynamic = vec![vec![0, 1, 2, 3], vec![], vec![]];
        let p = ExpertPlacement::new(hosted, dynamic).unwrap();
        let model = ModelConfig {
            num_experts: 12,
            tau: 0,
            max_num_dyn: 1,
            ..ModelConfig::default()
        };
        let topo = Topology::new(3, 1, 3).unwrap();
        let b = RoutingBatch::from_expert_counts(0, &[100, 100, 100, 100, 0, 0, 0, 0, 0, 0, 0, 0]);
        let plan = plan_rebalance(&b, &p, &model, &topo);
        assert_eq!(
            plan.actions,
            vec![
                MigrateAction {
                    expert: 0,
                    src: 0,
                    dst: 1
                },
                MigrateAction {
                    expert: 1,
                    src: 0,
                    dst: 2
                },
            ]
        );
        plan.validate(&p, &model, &topo).unwrap();
    }

    #[test]
    fn never_crosses_domains() {
        // Two nodes of two GPUs; all load sits on node 0.
        let hosted = vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]];
        let dynamic = vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]];
        let p = ExpertPlacement::new(hosted, dynamic).unwrap();
        let model = ModelConfig {
            num_experts: 8,
            dyn_experts: 2,
            tau: 0,
            ..ModelConfig::default()
        };
        let topo = Topology::new(4, 1, 2).unwrap();
        let b = RoutingBatch::from_expert_counts(0, &[300, 200, 0, 0, 0, 0, 0, 0]);
        let plan = plan_rebalance(&b, &p, &model, &topo);
        assert!(!plan.is_empty());
        assert!(plan.actions.iter().all(|a| a.dst == 1));
    }

    #[test]
    fn validate_rejects_static_and_duplicate_moves() {
        let (p, model, topo) = four_device_case();
        let static_move = RebalancePlan {
            actions: vec![MigrateAction {
                expert: 2,
                src: 1,
                dst: 0,
            }],
        };
        assert!(static_move.validate(&p, &model, &topo).is_err());
        let twice = RebalancePlan {
            actions: vec![
                MigrateAction {
                    expert: 0,
                    src: 0,
                    dst: 1,
                },
                MigrateAction {
                    expert: 0,
                    src: 0,
                    dst: 2,
                },
            ],
        };
        assert!(twice.validate(&p, &model, &topo).is_err());
        let self_move = RebalancePlan {
            actions: vec![MigrateAction {
                expert: 0,
                src: 0,
                dst: 0,
            }],
        };
        assert!(self_move.validate(&p, &model, &topo).is_err());
    }

    #[test]
    fn plan_lines() {
        let plan = RebalancePlan {
            actions: vec![
                MigrateAction {
                    expert: 3,
                    src: 0,
                    dst: 2,
                },
                MigrateAction {
                    expert: 9,
                    src: 1,
                    dst: 0,
                },
            ],
        };
        assert_eq!(plan.to_lines(), "3,0,2\n9,1,0\n");
    }

    #[test]
    fn history_window_one_tracks_latest() {
        let h = LoadHistory::new(3, 1);
        let h = update_history(&h, &RoutingBatch::from_expert_counts(0, &[4, 5, 6]));
        let h = update_history(&h, &RoutingBatch::from_expert_counts(1, &[7, 0, 1]));
        assert_eq!(h.ema_load, vec![7.0, 0.0, 1.0]);
    }

    #[test]
    fn history_two_step_window_two() {
        // ema1 = 0.5*0 + 0.5*8 = 4; ema2 = 0.5*4 + 0.5*2 = 3.
        let h = LoadHistory::new(1, 2);
        let h = update_history(&h, &RoutingBatch::from_expert_counts(0, &[8]));
        assert_eq!(h.ema_load, vec![4.0]);
        let h = update_history(&h, &RoutingBatch::from_expert_counts(1, &[2]));
        assert_eq!(h.ema_load, vec![3.0]);
    }

    #[test]
    fn history_converges_to_constant() {
        let mut h = LoadHistory::new(2, 16);
        let b = RoutingBatch::from_expert_counts(0, &[100, 3]);
        for _ in 0..2000 {
            h = update_history(&h, &b);
        }
        assert!((h.ema_load[0] - 100.0).abs() < 1e-9);
        assert!((h.ema_load[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn lpt_small_instance() {
        let p = ExpertPlacement::new(vec![vec![0, 1], vec![2, 3]], vec![vec![1], vec![3]]).unwrap();
        let topo = Topology::new(2, 1, 2).unwrap();
        let h = LoadHistory {
            ema_load: vec![10.0, 1.0, 1.0, 1.0],
            window: 8,
        };
        let q = optimize_placement(&h, &p, &topo);
        let loads: Vec<f64> = (0..2)
            .map(|d| q.hosted(d).iter().map(|&e| h.ema_load[e]).sum())
            .collect();
        assert_eq!(loads.iter().cloned().fold(0.0, f64::max), 11.0);
        assert_eq!(q.dynamic_set(q.home(0)), &[0]);
    }

    #[test]
    fn lpt_uniform_is_perfectly_balanced() {
        let model = ModelConfig::default();
        let topo = Topology::new(8, 2, 8).unwrap();
        let p = build_placement(&model, &topo, 0).unwrap();
        let h = LoadHistory {
            ema_load: vec![2.5; 128],
            window: 4,
        };
        let q = optimize_placement(&h, &p, &topo);
        for d in 0..8 {
            assert_eq!(q.hosted(d).len(), 16);
            assert_eq!(q.dynamic_set(d).len(), 4);
        }
    }

    #[test]
    fn zero_history_keeps_placement() {
        let model = ModelConfig::default();
        let topo = Topology::new(8, 2, 8).unwrap();
        let p = build_placement(&model, &topo, 7).unwrap();
        let q = optimize_placement(&LoadHistory::new(128, 32), &p, &topo);
        assert_eq!(p, q);
    }
}
