//! Library results checked against independent reimplementations.

mod common;

use std::collections::BTreeMap;

use common::{random_batch, random_instance};
use epsim::sim::RunOptions;
use epsim::workload::{generate, Skew, WorkloadSpec};
use epsim::{
    aggregate, build_placement, device_token_load, plan_rebalance, simulate_run, token_straggler,
    ExpertPlacement, Method, MigrateAction, ModelConfig, RoutingBatch, SimContext, Topology,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Step-by-step greedy written against plain maps. Returns the action list.
fn greedy_oracle(
    batch: &RoutingBatch,
    placement: &ExpertPlacement,
    model: &ModelConfig,
    topo: &Topology,
) -> Vec<(usize, usize, usize)> {
    let mut tokens: BTreeMap<usize, u64> = BTreeMap::new();
    let mut load: BTreeMap<usize, u64> = BTreeMap::new();
    for d in 0..placement.num_devices() {
        load.insert(d, 0);
    }
    for e in 0..batch.num_experts() {
        let n: u64 = (0..batch.num_sources()).map(|s| batch.count(e, s)).sum();
        tokens.insert(e, n);
        *load.get_mut(&placement.home(e)).unwrap() += n;
    }
    let mut actions = Vec::new();
    let mut moved: Vec<usize> = Vec::new();
    let mut received: BTreeMap<usize, usize> = BTreeMap::new();
    for node in 0..topo.num_nodes {
        let domain: Vec<usize> = (0..placement.num_devices())
            .filter(|&d| d / topo.gpus_per_node == node)
            .collect();
        if domain.len() < 2 {
            continue;
        }
        loop {
            let max_load = domain.iter().map(|d| load[d]).max().unwrap();
            let src = *domain.iter().find(|d| load[d] == max_load).unwrap();
            let mut best: Option<usize> = None;
            for &e in placement.dynamic_set(src) {
                if moved.contains(&e) || tokens[&e] < model.tau {
                    continue;
                }
                if best
                    .is_none_or(|b| tokens[&e] > tokens[&b] || (tokens[&e] == tokens[&b] && e < b))
                {
                    best = Some(e);
                }
            }
            let Some(e) = best else { break };
            let open: Vec<usize> = domain
                .iter()
                .copied()
                .filter(|&d| d != src && received.get(&d).copied().unwrap_or(0) < model.max_num_dyn)
                .collect();
            let Some(min_load) = open.iter().map(|d| load[d]).min() else {
                break;
            };
            let dst = *open.iter().find(|d| load[d] == min_load).unwrap();
            let mut trial = load.clone();
            *trial.get_mut(&src).unwrap() -= tokens[&e];
            *trial.get_mut(&dst).unwrap() += tokens[&e];
            if domain.iter().map(|d| trial[d]).max().unwrap() >= max_load {
                break;
            }
            load = trial;
            moved.push(e);
            *received.entry(dst).or_insert(0) += 1;
            actions.push((e, src, dst));
        }
    }
    actions
}

#[test]
fn four_device_trajectory() {
    // Two dynamic experts per device; D1 and the spare slots carry nothing.
    let hosted = vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]];
    let placement = ExpertPlacement::new(hosted.clone(), hosted).unwrap();
    let model = ModelConfig {
        num_experts: 8,
        top_k: 1,
        dyn_experts: 2,
        tau: 100,
        max_num_dyn: 8,
        ..ModelConfig::default()
    };
    let topo = Topology::new(4, 1, 4).unwrap();
    let batch = RoutingBatch::from_expert_counts(0, &[600, 500, 0, 0, 400, 0, 300, 0]);
    let plan = plan_rebalance(&batch, &placement, &model, &topo);
    let oracle = greedy_oracle(&batch, &placement, &model, &topo);
    assert_eq!(oracle, vec![(0, 0, 1)]);
    assert_eq!(
        plan.actions,
        vec![MigrateAction {
            expert: 0,
            src: 0,
            dst: 1
        }]
    );
    assert_eq!(
        device_token_load(&batch, &placement, Some(&plan)).unwrap(),
        vec![500, 600, 400, 300]
    );
}

#[test]
fn greedy_matches_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..3_000 {
        let inst = random_instance(&mut rng, 8);
        let (m, t) = (&inst.ctx.model, &inst.ctx.topo);
        let plan = plan_rebalance(&inst.batch, &inst.placement, m, t);
        let got: Vec<(usize, usize, usize)> = plan
            .actions
            .iter()
            .map(|a| (a.expert, a.src, a.dst))
            .collect();
        assert_eq!(got, greedy_oracle(&inst.batch, &inst.placement, m, t));
    }
}

#[test]
fn device_load_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let topo = Topology::new(4, 1, 4).unwrap();
    let model = ModelConfig {
        num_experts: 16,
        top_k: 2,
        dyn_experts: 2,
        ..ModelConfig::default()
    };
    let placement = build_placement(&model, &topo, 9).unwrap();
    for _ in 0..200 {
        let batch = random_batch(&mut rng, 0, 16, 4);
        let plan = plan_rebalance(&batch, &placement, &model, &topo);
        let mut expected = [0u64; 4];
        for e in 0..16 {
            let mut owner = (0..4).find(|&d| placement.hosted(d).contains(&e)).unwrap();
            for a in &plan.actions {
                if a.expert == e {
                    owner = a.dst;
                }
            }
            for s in 0..4 {
                expected[owner] += batch.count(e, s);
            }
        }
        assert_eq!(
            device_token_load(&batch, &placement, Some(&plan)).unwrap(),
            expected
        );
    }
}

#[test]
fn run_metrics_match_recomputation_from_raw_loads() {
    let topo = Topology::new(8, 2, 8).unwrap();
    let model = ModelConfig::default();
    let ctx = SimContext::new(model.clone(), topo.clone());
    let spec = WorkloadSpec {
        tokens_per_microbatch: 8 * 1024,
        top_k: 8,
        skew: Skew::HotSet { h: 16, p: 0.4 },
        drift: 0.3,
        seed: 4,
    };
    let batches = generate(&spec, &model, &topo, 20).unwrap();
    let placement = build_placement(&model, &topo, 0).unwrap();
    for method in [Method::BeforeLb, Method::Feplb] {
        let out = simulate_run(&batches, &placement, method, &ctx, RunOptions::default()).unwrap();
        let metrics = aggregate(&out.timelines, &batches).unwrap();
        let mut sum = 0.0;
        for (b, it) in batches.iter().zip(&metrics.series) {
            let plan = epsim::sim::method_plan(method, b, None, &placement, &ctx);
            let mut load = [0f64; 8];
            for e in 0..b.num_experts() {
                let owner = plan
                    .actions
                    .iter()
                    .find(|a| a.expert == e)
                    .map_or(e / 16, |a| a.dst);
                load[owner] += b.expert_total(e) as f64;
            }
            let max = load.iter().copied().fold(0.0, f64::max);
            let ts = max - load.iter().sum::<f64>() / 8.0;
            assert!((it.token_straggler - ts).abs() < 1e-9);
            sum += ts;
        }
        assert!((metrics.token_straggler_mean - sum / batches.len() as f64).abs() < 1e-9);
    }
}

#[test]
fn straggler_never_grows_under_a_plan() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..2_000 {
        let inst = random_instance(&mut rng, 8);
        let plan = plan_rebalance(
            &inst.batch,
            &inst.placement,
            &inst.ctx.model,
            &inst.ctx.topo,
        );
        let before = device_token_load(&inst.batch, &inst.placement, None).unwrap();
        let after = device_token_load(&inst.batch, &inst.placement, Some(&plan)).unwrap();
        assert!(token_straggler(&after).unwrap() <= token_straggler(&before).unwrap());
        assert_eq!(before.iter().sum::<u64>(), after.iter().sum::<u64>());
        assert!(plan
            .validate(&inst.placement, &inst.ctx.model, &inst.ctx.topo)
            .is_ok());
    }
}
