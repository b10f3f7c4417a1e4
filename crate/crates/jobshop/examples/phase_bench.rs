//! Times the individual training phases on FT06.
use jobshop::graph::build_graph;
use jobshop::instance::JsspInstance;
use jobshop::nn::{Arch, GraphBatch, ModelConfig, PolicyModel, PreparedGraph};
use jobshop::ppo::{collect_rollout, ppo_update, TrainConfig};
use jobshop::rng::SeedStreams;
use std::time::Instant;

fn main() {
    let inst = JsspInstance::ft06();
    let mut graph = build_graph(&inst);
    let prep = PreparedGraph::new(&graph);
    let streams = SeedStreams::new(0);
    let model = PolicyModel::new(ModelConfig::new(Arch::Hgt), &mut streams.stream("init"));
    let config = TrainConfig::default();

    let mut actions = streams.stream("actions");
    let mut dropout = streams.stream("dropout");
    let mut shuffle = streams.stream("shuffle");

    // rollout timing
    let t = Instant::now();
    let mut buffer = collect_rollout(&inst, &mut graph, &prep, &model, 4, &mut actions, &mut dropout);
    let rollout_s = t.elapsed().as_secs_f64();
    buffer.compute_gae(config.gamma, config.gae_lambda);
    buffer.normalize_advantages();

    // single B=1 forward timing
    let t = Instant::now();
    let reps = 200;
    for _ in 0..reps {
        let masks = model.sample_dropout_masks(graph.node_count, &mut dropout);
        let fwd = model.forward_taped(&prep, &graph.features, &buffer.transitions[0].mask, Some(&masks));
        std::hint::black_box(fwd.value_estimate());
    }
    let fwd1_ms = t.elapsed().as_secs_f64() / reps as f64 * 1e3;

    // batched fwd only timing (32 graphs)
    let parts: Vec<(&[f64], &[bool])> = buffer.transitions[..32]
        .iter()
        .map(|t| (t.features.as_slice(), t.mask.as_slice()))
        .collect();
    let batch = GraphBatch::stacked(&prep, &parts);
    let t = Instant::now();
    let reps = 50;
    for _ in 0..reps {
        let fwd = model.forward_batch(&batch, None);
        std::hint::black_box(fwd.tape.value(fwd.values).data()[0]);
    }
    let fwdb_ms = t.elapsed().as_secs_f64() / reps as f64 * 1e3;

    // batched fwd+bwd timing
    let t = Instant::now();
    for _ in 0..reps {
        let mut fwd = model.forward_batch(&batch, None);
        let loss = fwd.tape.mean_all(fwd.values);
        fwd.tape.backward(loss);
        std::hint::black_box(fwd.tape.value(fwd.values).data()[0]);
    }
    let fwdbwd_ms = t.elapsed().as_secs_f64() / reps as f64 * 1e3;

    // full ppo update timing
    let mut model2 = PolicyModel::new(ModelConfig::new(Arch::Hgt), &mut streams.stream("init"));
    let t = Instant::now();
    ppo_update(&mut model2, &prep, &buffer, &config, &mut shuffle);
    let update_s = t.elapsed().as_secs_f64();

    println!("rollout (144 steps):      {rollout_s:.3} s  ({:.2} ms/step)", rollout_s / 144.0 * 1e3);
    println!("B=1 forward:              {fwd1_ms:.2} ms");
    println!("B=32 forward:             {fwdb_ms:.2} ms  ({:.3} ms/graph)", fwdb_ms / 32.0);
    println!("B=32 forward+backward:    {fwdbwd_ms:.2} ms ({:.3} ms/graph)", fwdbwd_ms / 32.0);
    println!("ppo_update (4x144):       {update_s:.3} s");
    println!("projected cycle: rollout + update = {:.2} s -> 50k steps ~ {:.0} s", rollout_s + update_s, (rollout_s + update_s) * (50000.0/144.0));
}
