//! Collects a short random-walk episode, fits the classical depth completor
//! on its frame triplets via the self-supervised objective (no ground-truth
//! depth is used for fitting), then scores the fitted parameters against
//! ground truth on a held-out scripted test set.

use deux::completion::{fit_completor, CompletorParams};
use deux::config::RunConfig;
use deux::geometry::Intrinsics;
use deux::pipeline::{
    build_test_set, collect_episode, evaluate_on_test_set, fit_samples_of, CollectOptions,
    FrameRetention,
};
use deux::policies::{EpisodeBudget, PolicyKind};
use deux::world::generate_scene;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = RunConfig { frame_size: 48, sparse_count: 120, ..RunConfig::default() };
    let k = Intrinsics::default_square(config.frame_size);
    let scene = generate_scene(2, &config.world)?;

    let rec = collect_episode(
        &scene,
        PolicyKind::Random,
        None,
        &EpisodeBudget { max_steps: 60 },
        5,
        &CollectOptions {
            intrinsics: k,
            sparse_count: config.sparse_count,
            retention: FrameRetention::TripletStride(10),
        },
    )?;
    let samples = fit_samples_of(std::slice::from_ref(&rec), 6);
    println!("fitting on {} frame triplets", samples.len());

    let init = CompletorParams::default();
    let fitted = fit_completor(&samples, &init)?;
    println!(
        "fitted: neighbors={} power={} refine={} edge={}",
        fitted.idw_neighbors, fitted.idw_power, fitted.refine_iters, fitted.edge_weight
    );

    let test = build_test_set(&config.world, 2, 4, 999, &k)?;
    let before = evaluate_on_test_set(&init, &test, config.sparse_count, 7)?;
    let after = evaluate_on_test_set(&fitted, &test, config.sparse_count, 7)?;
    println!("            initial     fitted");
    println!("mae  (mm)  {:>8.1}  {:>8.1}", before.mae_mm, after.mae_mm);
    println!("rmse (mm)  {:>8.1}  {:>8.1}", before.rmse_mm, after.rmse_mm);
    println!("imae (/km) {:>8.2}  {:>8.2}", before.imae_per_km, after.imae_per_km);
    println!("irmse(/km) {:>8.2}  {:>8.2}", before.irmse_per_km, after.irmse_per_km);
    Ok(())
}
