//! Quick TTFT comparison on a random model: `cargo run --example ttft_probe -- 4096`

use std::time::Instant;

use lazyprune::engine::Session;
use lazyprune::{generate_random_model, ModelConfig, Policy};

fn main() -> lazyprune::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1024);
    let model = generate_random_model(ModelConfig::default(), 0)?;
    let prompt: Vec<u32> = (0..n).map(|i| ((i * 131 + 7) % 256) as u32).collect();
    for policy in [Policy::Baseline, Policy::lazy("2:0.6,6:0.35".parse()?)] {
        let mut session = Session::new(&model, policy.clone())?;
        let start = Instant::now();
        session.prefill(&prompt)?;
        println!("{:>8} N={n}: {:.3}s", policy.tag(), start.elapsed().as_secs_f64());
    }
    Ok(())
}
