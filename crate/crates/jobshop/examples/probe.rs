//! Quick training probe: a few thousand steps on FT06, printing the curve.
use jobshop::instance::JsspInstance;
use jobshop::nn::{Arch, ModelConfig};
use jobshop::ppo::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let arch = args
        .get(2)
        .and_then(|s| Arch::parse(s))
        .unwrap_or(Arch::Hgt);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let inst = JsspInstance::ft06();
    let config = TrainConfig {
        total_steps: steps,
        eval_interval: 1000,
        seed,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let result = train(&inst, ModelConfig::new(arch), &config);
    let elapsed = t.elapsed().as_secs_f64();
    for p in &result.curve {
        println!("steps {:>6}  eval_mean {:>7.2}  std {:>6.2}", p.env_steps, p.eval_mean, p.eval_std);
    }
    println!(
        "arch {} seed {}: {} steps, {} cycles in {:.1}s ({:.0} steps/s)",
        arch, seed, result.env_steps, result.update_cycles, elapsed,
        result.env_steps as f64 / elapsed
    );
}
