//! Runs a miniature version of the four-policy benchmark: each exploration
//! policy collects data, a depth completor is fitted on that data, and all
//! fitted completors are scored on the same held-out test set. The run is
//! deterministic for any `jobs` value.

use deux::config::RunConfig;
use deux::pipeline::{run_benchmark, write_report};
use deux::policies::{EpisodeBudget, PolicyKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = RunConfig {
        seeds: vec![0],
        policies: PolicyKind::all().to_vec(),
        budget: EpisodeBudget { max_steps: 80 },
        train_scenes: 2,
        test_scenes: 2,
        test_triplets_per_scene: 3,
        frame_size: 48,
        sparse_count: 120,
        fit_stride: 15,
        fit_samples_max: 6,
        jobs: 2,
        out_dir: "target/example_out/bench".into(),
        ..RunConfig::default()
    };
    let report = run_benchmark(&config, None)?;
    println!("policy     mae(mm)  rmse(mm)  imae(/km)  irmse(/km)");
    for agg in &report.aggregates {
        println!(
            "{:<9} {:>8.1} {:>9.1} {:>10.2} {:>11.2}",
            agg.policy.label(),
            agg.mean.mae_mm,
            agg.mean.rmse_mm,
            agg.mean.imae_per_km,
            agg.mean.irmse_per_km
        );
    }
    for imp in &report.improvements {
        println!(
            "uncertainty-guided vs {}: {:+.1}% mae",
            imp.baseline.label(),
            imp.mae_improvement_pct
        );
    }
    let dir = std::path::PathBuf::from(&config.out_dir);
    write_report(&report, &dir)?;
    println!("report: {}", dir.join("report.csv").display());
    Ok(())
}
