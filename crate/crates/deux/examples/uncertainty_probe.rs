//! Shows that the photometric uncertainty residual rises monotonically with
//! depth error: a frame's predicted depth is corrupted with growing
//! multiplicative noise and the residual is printed for each level.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use deux::geometry::Intrinsics;
use deux::losses::{uncertainty_residual, LossContext};
use deux::policies::reward;
use deux::world::{generate_scene, render, step, Action, WorldParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = generate_scene(21, &WorldParams::default())?;
    let k = Intrinsics::default_square(96);

    // Target frame plus the two previous views along a short walk.
    let s0 = scene.spawn;
    let s1 = step(&scene, &s0, Action::Forward);
    let s2 = step(&scene, &s1, Action::TurnLeft);
    let f0 = render(&scene, &scene.camera_pose(&s0), &k, 0)?;
    let f1 = render(&scene, &scene.camera_pose(&s1), &k, 1)?;
    let f2 = render(&scene, &scene.camera_pose(&s2), &k, 2)?;
    let ctx = LossContext {
        target: &f2.rgb,
        target_pose: &f2.pose,
        sources: vec![(&f1.rgb, &f1.pose), (&f0.rgb, &f0.pose)],
        intrinsics: &k,
    };

    println!("noise   residual   reward");
    let mut prev = -1.0;
    for level in 0..8 {
        let sigma = level as f64 * 0.05;
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut depth = f2.depth_gt.clone();
        for d in &mut depth.data {
            *d = (*d * (1.0 + sigma * rng.gen_range(-1.0..1.0f64))).clamp(0.1, 10.0);
        }
        let delta = uncertainty_residual(&ctx, &depth)?;
        assert!((0.0..1.0).contains(&delta), "residual stays in [0, 1)");
        println!("{sigma:>5.2}  {delta:>9.5}  {:>7.5}", reward(delta));
        assert!(delta > prev, "residual must grow with noise");
        prev = delta;
    }
    Ok(())
}
