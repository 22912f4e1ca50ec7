//! Runs the three-way ablation for one seed and prints the result as JSON.
//!
//! `cargo run --release --example ablation -- 0`

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use starnet::pipeline::ablation::{ablation_setup, run_ablation};
use starnet::synthdata::{generate_split, PhaseGrammar};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let seed: u64 = std::env::args().nth(1).map_or(Ok(0), |s| s.parse())?;
    let (train, test) = generate_split(&PhaseGrammar::default(), 100, seed, 0.7)?;
    let (cfg, tc) = ablation_setup(seed);
    let result = run_ablation(&train, &test, &cfg, &tc)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}
