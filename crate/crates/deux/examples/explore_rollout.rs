//! Runs a frontier-exploration rollout step by step — render, integrate into
//! the occupancy map, act — printing map coverage as it grows, then writes a
//! trajectory plot to `target/example_out/`.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use deux::completion::sample_sparse_depth;
use deux::geometry::Intrinsics;
use deux::mapping::{integrate, CellState, OccupancyGrid};
use deux::pipeline::{collect_episode, render_trajectory_plot, CollectOptions, FrameRetention};
use deux::policies::{EpisodeBudget, Policy, PolicyKind, StepInput};
use deux::world::{generate_scene, render, step, Action, WorldParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::path::Path::new("target/example_out");
    std::fs::create_dir_all(out)?;

    let scene = generate_scene(3, &WorldParams::default())?;
    let k = Intrinsics::default_square(64);
    let reachable = scene.navigable_cells().len();

    let mut policy = Policy::new(PolicyKind::Frontier, &scene, None, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut sparse_rng = ChaCha8Rng::seed_from_u64(1);
    let mut state = scene.spawn;
    let mut grid = OccupancyGrid::unknown(scene.nx, scene.ny, (0.0, 0.0), scene.cell_size_m);

    println!("step  free cells  coverage");
    for t in 0..150usize {
        let frame = render(&scene, &scene.camera_pose(&state), &k, t)?;
        integrate(&mut grid, &frame.pose, &frame.depth_gt, &k, scene.floor_z_m());
        let sparse = sample_sparse_depth(&frame, 120, &mut sparse_rng)?;
        let input = StepInput { state: &state, grid: &grid, frame: &frame, sparse: &sparse };
        let action = policy.step(&input, &mut rng)?;
        if t % 25 == 0 || t == 149 {
            let free = grid.cells.iter().filter(|&&c| c == CellState::Free).count();
            println!("{t:>4}  {free:>10}  {:>7.1}%", 100.0 * free as f64 / reachable as f64);
        }
        if action == Action::Stop {
            break;
        }
        state = step(&scene, &state, action);
        if state.collided_last {
            // Bumper feedback: obstacles below the camera's view only show
            // up as collisions.
            deux::mapping::mark_collision(&mut grid, &state);
        }
    }

    // The same rollout as a one-call episode, for the plot.
    let rec = collect_episode(
        &scene,
        PolicyKind::Frontier,
        None,
        &EpisodeBudget { max_steps: 150 },
        0,
        &CollectOptions {
            intrinsics: k,
            sparse_count: 120,
            retention: FrameRetention::All,
        },
    )?;
    let plot = render_trajectory_plot(&rec, &rec.final_grid, &out.join("trajectory.ppm"))?;
    println!("trajectory plot: {}", plot.display());
    Ok(())
}
