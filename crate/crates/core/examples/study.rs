//! Full comparison and ablation study on the default synthetic dataset.
//!
//! cargo run --release --example study [seed ...]

use std::time::Instant;

use shockcal::harness::{format_table, run_study, StudyConfig, Variant};

fn main() -> shockcal::Result<()> {
    let mut cfg = StudyConfig::default();
    let seeds: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if !seeds.is_empty() {
        cfg.seeds = seeds;
    }
    let start = Instant::now();
    let result = run_study(&cfg, |msg| eprintln!("[{:>7.1}s] {msg}", start.elapsed().as_secs_f64()))?;
    print!("{}", format_table(&result.table));
    println!();
    for run in &result.runs {
        let cells: Vec<String> = run
            .variants
            .iter()
            .map(|(v, r)| format!("{} {:.2}%", v.as_str(), 100.0 * r.eps_p))
            .chain(std::iter::once(format!("ae {:.2}%", 100.0 * run.ae.eps_p)))
            .collect();
        println!("seed {}: {}", run.seed, cells.join(", "));
    }
    for v in Variant::ALL {
        println!("mean eps_p {:<12} {:.3}%", v.as_str(), 100.0 * result.mean_eps_p(v));
    }
    Ok(())
}
