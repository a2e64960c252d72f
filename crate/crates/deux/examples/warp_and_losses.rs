//! Warps a neighboring view into the current frame through a depth map and
//! prints the self-supervised loss breakdown — once with ground-truth depth,
//! once with a corrupted depth map. Correct geometry should score clearly
//! lower on every photometric term.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use deux::geometry::{warp_reconstruct, DepthMap, Intrinsics};
use deux::losses::{total_loss, LossContext, LossWeights, SparseDepth};
use deux::world::{generate_scene, render, step, Action, WorldParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = generate_scene(11, &WorldParams::default())?;
    let k = Intrinsics::default_square(96);

    // Two frames one forward step apart.
    let s0 = scene.spawn;
    let s1 = step(&scene, &s0, Action::Forward);
    let target = render(&scene, &scene.camera_pose(&s1), &k, 1)?;
    let source = render(&scene, &scene.camera_pose(&s0), &k, 0)?;

    // Transform from the target camera into the source camera.
    let rel = deux::geometry::Pose::relative(&source.pose, &target.pose);
    let (_, mask) = warp_reconstruct(&source.rgb, &target.depth_gt, &rel, &k)?;
    let valid = mask.iter().filter(|&&m| m).count();
    println!(
        "warp validity: {valid}/{} pixels land inside the source view",
        mask.len()
    );

    // Sparse depth: a handful of ground-truth pixels, as a range sensor
    // would provide.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut points = Vec::new();
    let mut seen = std::collections::HashSet::new();
    while points.len() < 150 {
        let r = rng.gen_range(0..k.height);
        let c = rng.gen_range(0..k.width);
        if seen.insert((r, c)) {
            points.push((r, c, target.depth_gt.get(r, c)));
        }
    }
    let sparse = SparseDepth::new(points, k.width, k.height)?;

    let ctx = LossContext {
        target: &target.rgb,
        target_pose: &target.pose,
        sources: vec![(&source.rgb, &source.pose)],
        intrinsics: &k,
    };
    let w = LossWeights::default();

    let good = total_loss(&ctx, &target.depth_gt, &sparse, &w)?;
    let mut bad_depth = target.depth_gt.clone();
    for d in &mut bad_depth.data {
        *d = (*d * rng.gen_range(0.6..1.4)).clamp(0.1, 10.0);
    }
    let bad = total_loss(&ctx, &bad_depth, &sparse, &w)?;

    println!("term        true depth   corrupted");
    for (name, a, b) in [
        ("color", good.l_co, bad.l_co),
        ("structural", good.l_st, bad.l_st),
        ("photometric", good.l_ph, bad.l_ph),
        ("sparse", good.l_sz, bad.l_sz),
        ("smoothness", good.l_sm, bad.l_sm),
        ("total", good.l_d, bad.l_d),
    ] {
        println!("{name:<11} {a:>10.5} {b:>10.5}");
    }
    assert!(good.l_d < bad.l_d, "true depth must score lower");

    // Identity sanity check: warping a frame into itself reproduces it.
    let ident = deux::geometry::Pose::identity();
    let flat = DepthMap::new(k.width, k.height, 2.0);
    let (self_recon, self_mask) = warp_reconstruct(&target.rgb, &flat, &ident, &k)?;
    let max_err = target
        .rgb
        .data
        .iter()
        .zip(&self_recon.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!(
        "identity warp: max pixel error {max_err:.2e} over {} valid pixels",
        self_mask.iter().filter(|&&m| m).count()
    );
    Ok(())
}
