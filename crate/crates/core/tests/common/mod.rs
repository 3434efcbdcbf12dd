#![allow(dead_code)]

use epsim::{build_placement, ExpertPlacement, ModelConfig, RoutingBatch, SimContext, Topology};
use rand::Rng;

/// A small random layer: topology, placement and two consecutive batches.
pub struct Instance {
    pub ctx: SimContext,
    pub placement: ExpertPlacement,
    pub batch: RoutingBatch,
    pub prev: RoutingBatch,
}

/// Random per-(expert, source) counts; a cubed uniform weight gives a few
/// hot experts per batch.
pub fn random_batch<R: Rng>(
    rng: &mut R,
    id: usize,
    num_experts: usize,
    sources: usize,
) -> RoutingBatch {
    let mut b = RoutingBatch::zeros(id, num_experts, sources);
    let scale = rng.gen_range(1..=2000) as f64;
    for e in 0..num_experts {
        let w = rng.gen::<f64>().powi(3);
        for s in 0..sources {
            b.set(e, s, (w * scale * rng.gen::<f64>()).round() as u64);
        }
    }
    b
}

pub fn random_instance<R: Rng>(rng: &mut R, max_ep: usize) -> Instance {
    let eps: Vec<usize> = [1, 2, 4, 8].into_iter().filter(|&e| e <= max_ep).collect();
    let ep = eps[rng.gen_range(0..eps.len())];
    let gpns: Vec<usize> = [1, 2, 4, 8].into_iter().filter(|&g| g <= ep).collect();
    let gpn = gpns[rng.gen_range(0..gpns.len())];
    let topo = Topology::new(ep, 1, gpn).unwrap();
    let per = rng.gen_range(1..=8);
    let num_experts = ep * per;
    let model = ModelConfig {
        num_experts,
        top_k: rng.gen_range(1..=num_experts.min(8)),
        dyn_experts: rng.gen_range(0..=per),
        tau: rng.gen_range(0..=200),
        max_num_dyn: rng.gen_range(1..=4),
        ..ModelConfig::default()
    };
    model.validate(&topo).unwrap();
    let placement = build_placement(&model, &topo, rng.gen_range(0..4)).unwrap();
    let batch = random_batch(rng, 1, num_experts, ep);
    let prev = random_batch(rng, 0, num_experts, ep);
    Instance {
        ctx: SimContext::new(model, topo),
        placement,
        batch,
        prev,
    }
}
