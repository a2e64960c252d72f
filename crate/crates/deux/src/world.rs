//! Procedural voxel indoor environments, a raycasting RGB-D renderer, and an
//! embodied agent with a discrete action space.
//!
//! World frame: +x east, +y north, +z up. Voxel (0,0,0) has its corner at the
//! world origin. The boundary shell of the grid is always occupied (closed
//! world); layer z = 0 is the floor, so the walkable surface sits at
//! `cell_size_m` and the camera at `cell_size_m + CAMERA_HEIGHT_M`.

use crate::geometry::{DepthMap, Image, Intrinsics, Pose, DEPTH_MAX_M, DEPTH_MIN_M};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const FORWARD_STEP_M: f64 = 0.25;
pub const TURN_STEP_DEG: f64 = 10.0;
pub const TURN_STEPS: i32 = 36;
pub const CAMERA_HEIGHT_M: f64 = 1.25;
pub const DEFAULT_CELL_SIZE_M: f64 = 0.25;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("camera pose is inside an occupied cell")]
    PoseInOccupied,
    #[error("world file format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Scene generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldParams {
    /// Voxel grid dimensions (east, north, up).
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub cell_size_m: f64,
    /// Inclusive range for the number of interior dividing walls.
    pub walls_min: usize,
    pub walls_max: usize,
    /// Probability that an interior floor cell carries a clutter pillar.
    pub clutter_density: f64,
    /// Amplitude of per-voxel albedo noise (keeps photometric losses and
    /// corner detection non-degenerate on flat surfaces).
    pub texture_noise: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            nx: 48,
            ny: 48,
            nz: 14,
            cell_size_m: DEFAULT_CELL_SIZE_M,
            walls_min: 2,
            walls_max: 4,
            clutter_density: 0.03,
            texture_noise: 0.15,
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<(), WorldError> {
        if self.nx < 8 || self.ny < 8 || self.nz < 9 {
            return Err(WorldError::Generation(format!(
                "grid {}x{}x{} too small",
                self.nx, self.ny, self.nz
            )));
        }
        if !(self.cell_size_m > 0.0) {
            return Err(WorldError::Generation("cell_size_m must be positive".into()));
        }
        if self.walls_min > self.walls_max {
            return Err(WorldError::Generation("walls_min > walls_max".into()));
        }
        if !(0.0..=1.0).contains(&self.clutter_density) {
            return Err(WorldError::Generation("clutter_density outside [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.texture_noise) {
            return Err(WorldError::Generation("texture_noise outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Discrete agent actions. Forward moves 0.25 m; turns are ±10°.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Forward,
    TurnLeft,
    TurnRight,
    Stop,
}

impl Action {
    pub fn label(&self) -> &'static str {
        match self {
            Action::Forward => "forward",
            Action::TurnLeft => "turn_left",
            Action::TurnRight => "turn_right",
            Action::Stop => "stop",
        }
    }
}

/// Agent position and heading. Heading is quantized to 10° increments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    /// Heading in units of 10°, in [0, 36).
    pub heading_steps: i32,
    pub collided_last: bool,
}

impl AgentState {
    pub fn heading_rad(&self) -> f64 {
        (self.heading_steps as f64) * TURN_STEP_DEG.to_radians()
    }
}

/// One RGB-D observation with pose and intrinsics.
#[derive(Debug, Clone)]
pub struct Frame {
    pub rgb: Image,
    pub depth_gt: DepthMap,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub timestep: usize,
}

/// Procedural voxel scene. Immutable after generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub cell_size_m: f64,
    /// Occupancy flags, index `(z * ny + y) * nx + x`.
    pub occupied: Vec<bool>,
    /// Per-voxel albedo, same indexing.
    pub albedo: Vec<[u8; 3]>,
    pub spawn: AgentState,
    pub seed: u64,
}

const WORLD_MAGIC: &[u8; 8] = b"DEUXWRLD";
const WORLD_VERSION: u32 = 1;

impl Scene {
    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    #[inline]
    pub fn is_occupied(&self, x: usize, y: usize, z: usize) -> bool {
        self.occupied[self.idx(x, y, z)]
    }

    /// Top of the floor layer in meters.
    pub fn floor_z_m(&self) -> f64 {
        self.cell_size_m
    }

    pub fn camera_z_m(&self) -> f64 {
        self.floor_z_m() + CAMERA_HEIGHT_M
    }

    /// Number of vertical cells an agent needs clear above the floor.
    fn body_top_z(&self) -> usize {
        let top = ((CAMERA_HEIGHT_M + 0.5) / self.cell_size_m).ceil() as usize;
        top.min(self.nz - 2)
    }

    /// True if the (x, y) column is clear over the agent's body height.
    pub fn is_navigable_cell(&self, x: usize, y: usize) -> bool {
        if x == 0 || y == 0 || x >= self.nx - 1 || y >= self.ny - 1 {
            return false;
        }
        for z in 1..=self.body_top_z() {
            if self.is_occupied(x, y, z) {
                return false;
            }
        }
        true
    }

    pub fn world_to_cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if x < 0.0 || y < 0.0 {
            return None;
        }
        let cx = (x / self.cell_size_m) as usize;
        let cy = (y / self.cell_size_m) as usize;
        if cx >= self.nx || cy >= self.ny {
            return None;
        }
        Some((cx, cy))
    }

    pub fn cell_center(&self, cx: usize, cy: usize) -> (f64, f64) {
        (
            (cx as f64 + 0.5) * self.cell_size_m,
            (cy as f64 + 0.5) * self.cell_size_m,
        )
    }

    pub fn is_navigable_world(&self, x: f64, y: f64) -> bool {
        match self.world_to_cell(x, y) {
            Some((cx, cy)) => self.is_navigable_cell(cx, cy),
            None => false,
        }
    }

    /// All navigable cells, row-major order.
    pub fn navigable_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for cy in 0..self.ny {
            for cx in 0..self.nx {
                if self.is_navigable_cell(cx, cy) {
                    out.push((cx, cy));
                }
            }
        }
        out
    }

    /// World-from-camera pose for an agent state in this scene.
    pub fn camera_pose(&self, state: &AgentState) -> Pose {
        let h = state.heading_rad();
        let (s, c) = h.sin_cos();
        // Columns: camera x (right), y (down), z (forward) in world coords.
        Pose {
            rotation: [[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]],
            translation: [state.x, state.y, self.camera_z_m()],
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), WorldError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(WORLD_MAGIC)?;
        f.write_all(&WORLD_VERSION.to_le_bytes())?;
        for v in [self.nx as u32, self.ny as u32, self.nz as u32] {
            f.write_all(&v.to_le_bytes())?;
        }
        f.write_all(&self.cell_size_m.to_le_bytes())?;
        f.write_all(&self.spawn.x.to_le_bytes())?;
        f.write_all(&self.spawn.y.to_le_bytes())?;
        f.write_all(&(self.spawn.heading_steps as u32).to_le_bytes())?;
        f.write_all(&self.seed.to_le_bytes())?;
        for i in 0..self.occupied.len() {
            f.write_all(&[
                self.occupied[i] as u8,
                self.albedo[i][0],
                self.albedo[i][1],
                self.albedo[i][2],
            ])?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != WORLD_MAGIC {
            return Err(WorldError::Format("bad magic bytes".into()));
        }
        let mut u32buf = [0u8; 4];
        f.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != WORLD_VERSION {
            return Err(WorldError::Format(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            f.read_exact(&mut u32buf)?;
            *d = u32::from_le_bytes(u32buf) as usize;
        }
        let mut f64buf = [0u8; 8];
        f.read_exact(&mut f64buf)?;
        let cell_size_m = f64::from_le_bytes(f64buf);
        f.read_exact(&mut f64buf)?;
        let sx = f64::from_le_bytes(f64buf);
        f.read_exact(&mut f64buf)?;
        let sy = f64::from_le_bytes(f64buf);
        f.read_exact(&mut u32buf)?;
        let heading = u32::from_le_bytes(u32buf) as i32;
        f.read_exact(&mut f64buf)?;
        let seed = u64::from_le_bytes(f64buf);
        let n = dims[0] * dims[1] * dims[2];
        let mut occupied = vec![false; n];
        let mut albedo = vec![[0u8; 3]; n];
        let mut rec = [0u8; 4];
        for i in 0..n {
            f.read_exact(&mut rec)?;
            occupied[i] = rec[0] != 0;
            albedo[i] = [rec[1], rec[2], rec[3]];
        }
        Ok(Scene {
            nx: dims[0],
            ny: dims[1],
            nz: dims[2],
            cell_size_m,
            occupied,
            albedo,
            spawn: AgentState { x: sx, y: sy, heading_steps: heading, collided_last: false },
            seed,
        })
    }
}

/// Generates a deterministic scene for the seed. Retries with derived seeds
/// when the layout fails the free-space invariants.
pub fn generate_scene(seed: u64, params: &WorldParams) -> Result<Scene, WorldError> {
    params.validate()?;
    for attempt in 0..20u64 {
        let sub = seed.wrapping_add(attempt.wrapping_mul(0x9E3779B97F4A7C15));
        if let Some(scene) = try_generate(seed, sub, params) {
            return Ok(scene);
        }
    }
    Err(WorldError::Generation(format!(
        "no valid layout for seed {seed} after 20 attempts"
    )))
}

fn try_generate(seed: u64, sub_seed: u64, params: &WorldParams) -> Option<Scene> {
    let (nx, ny, nz) = (params.nx, params.ny, params.nz);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed ^ 0xD0E5);
    let n = nx * ny * nz;
    let mut scene = Scene {
        nx,
        ny,
        nz,
        cell_size_m: params.cell_size_m,
        occupied: vec![false; n],
        albedo: vec![[0u8; 3]; n],
        spawn: AgentState { x: 0.0, y: 0.0, heading_steps: 0, collided_last: false },
        seed,
    };
    // Closed boundary shell.
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if x == 0 || y == 0 || z == 0 || x == nx - 1 || y == ny - 1 || z == nz - 1 {
                    let i = scene.idx(x, y, z);
                    scene.occupied[i] = true;
                }
            }
        }
    }
    // Voxel kind for albedo assignment: 0 floor, 1 ceiling, 2 boundary wall,
    // 3 interior wall, 4 clutter.
    let mut kind = vec![2u8; n];
    for y in 0..ny {
        for x in 0..nx {
            kind[scene.idx(x, y, 0)] = 0;
            kind[scene.idx(x, y, nz - 1)] = 1;
        }
    }
    // Interior dividing walls with door gaps, full height.
    let wall_count = rng.gen_range(params.walls_min..=params.walls_max);
    for _ in 0..wall_count {
        let along_x = rng.gen_bool(0.5);
        let (span, lines) = if along_x { (nx, ny) } else { (ny, nx) };
        if lines < 10 {
            continue;
        }
        let line = rng.gen_range(4..lines - 4);
        let door_w = rng.gen_range(2..=3usize);
        let door_at = rng.gen_range(1..span.saturating_sub(door_w + 1));
        for s in 1..span - 1 {
            if s >= door_at && s < door_at + door_w {
                continue;
            }
            let (x, y) = if along_x { (s, line) } else { (line, s) };
            for z in 1..nz - 1 {
                let i = scene.idx(x, y, z);
                scene.occupied[i] = true;
                kind[i] = 3;
            }
        }
    }
    // Clutter pillars.
    for y in 1..ny - 1 {
        for x in 1..nx - 1 {
            if rng.gen_bool(params.clutter_density) && !scene.is_occupied(x, y, 1) {
                let h = rng.gen_range(2..=5usize).min(nz - 2);
                for z in 1..=h {
                    let i = scene.idx(x, y, z);
                    scene.occupied[i] = true;
                    kind[i] = 4;
                }
            }
        }
    }
    // Albedo: base color by kind plus per-voxel noise.
    let clutter_palette: [[f64; 3]; 4] = [
        [0.75, 0.35, 0.30],
        [0.30, 0.55, 0.75],
        [0.80, 0.70, 0.30],
        [0.40, 0.70, 0.40],
    ];
    let mut arng = ChaCha8Rng::seed_from_u64(sub_seed ^ 0xA1BE);
    for i in 0..n {
        let base = match kind[i] {
            0 => [0.55, 0.42, 0.30],
            1 => [0.82, 0.82, 0.86],
            2 => [0.70, 0.70, 0.64],
            3 => [0.58, 0.64, 0.72],
            _ => clutter_palette[arng.gen_range(0..clutter_palette.len())],
        };
        let amp = params.texture_noise;
        let mut rgb = [0u8; 3];
        for c in 0..3 {
            let v = (base[c] + arng.gen_range(-amp..=amp.max(f64::MIN_POSITIVE))).clamp(0.0, 1.0);
            rgb[c] = (v * 255.0).round() as u8;
        }
        scene.albedo[i] = rgb;
    }
    // Spawn in the largest connected navigable region.
    let component = largest_navigable_component(&scene);
    if component.len() < 100 {
        return None;
    }
    let (sum_x, sum_y) = component
        .iter()
        .fold((0.0, 0.0), |(ax, ay), &(x, y)| (ax + x as f64, ay + y as f64));
    let (cx, cy) = (sum_x / component.len() as f64, sum_y / component.len() as f64);
    let spawn_cell = component
        .iter()
        .min_by(|a, b| {
            let da = (a.0 as f64 - cx).powi(2) + (a.1 as f64 - cy).powi(2);
            let db = (b.0 as f64 - cx).powi(2) + (b.1 as f64 - cy).powi(2);
            da.partial_cmp(&db)
                .unwrap()
                .then_with(|| (a.1, a.0).cmp(&(b.1, b.0)))
        })
        .copied()?;
    let (wx, wy) = scene.cell_center(spawn_cell.0, spawn_cell.1);
    scene.spawn = AgentState { x: wx, y: wy, heading_steps: 0, collided_last: false };
    Some(scene)
}

/// Flood fill (4-connectivity) over navigable cells; returns the largest
/// connected component, deterministically.
pub fn largest_navigable_component(scene: &Scene) -> Vec<(usize, usize)> {
    let mut visited = vec![false; scene.nx * scene.ny];
    let mut best: Vec<(usize, usize)> = Vec::new();
    for sy in 0..scene.ny {
        for sx in 0..scene.nx {
            if visited[sy * scene.nx + sx] || !scene.is_navigable_cell(sx, sy) {
                continue;
            }
            let mut comp = Vec::new();
            let mut stack = vec![(sx, sy)];
            visited[sy * scene.nx + sx] = true;
            while let Some((x, y)) = stack.pop() {
                comp.push((x, y));
                for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx < 0 || ny < 0 {
                        continue;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    if nx >= scene.nx || ny >= scene.ny || visited[ny * scene.nx + nx] {
                        continue;
                    }
                    if scene.is_navigable_cell(nx, ny) {
                        visited[ny * scene.nx + nx] = true;
                        stack.push((nx, ny));
                    }
                }
            }
            if comp.len() > best.len() {
                best = comp;
            }
        }
    }
    best
}

/// Per-pixel DDA raycast render. Depth is z-depth along the camera axis,
/// clipped to [0.1, 10.0] m.
pub fn render(scene: &Scene, pose: &Pose, k: &Intrinsics, timestep: usize) -> Result<Frame, WorldError> {
    let o = pose.translation;
    let cell = scene.cell_size_m;
    let (ox, oy, oz) = (o[0] / cell, o[1] / cell, o[2] / cell);
    let (vx, vy, vz) = (ox as i64, oy as i64, oz as i64);
    if vx < 0
        || vy < 0
        || vz < 0
        || vx >= scene.nx as i64
        || vy >= scene.ny as i64
        || vz >= scene.nz as i64
        || scene.is_occupied(vx as usize, vy as usize, vz as usize)
    {
        return Err(WorldError::PoseInOccupied);
    }
    let mut rgb = Image::new(k.width, k.height);
    let mut depth = DepthMap::new(k.width, k.height, DEPTH_MAX_M);
    let r = &pose.rotation;
    // Face shade factors indexed by (axis, positive step).
    let shade = |axis: usize, positive: bool| -> f64 {
        match (axis, positive) {
            (0, true) => 0.85,
            (0, false) => 0.70,
            (1, true) => 0.95,
            (1, false) => 0.75,
            (2, true) => 1.00,
            (2, false) => 0.60,
            _ => unreachable!(),
        }
    };
    for row in 0..k.height {
        for col in 0..k.width {
            let dir_cam = [
                (col as f64 - k.cx) / k.fx,
                (row as f64 - k.cy) / k.fy,
                1.0,
            ];
            let d = crate::geometry::mat_vec(r, &dir_cam);
            // DDA setup; the ray parameter equals z-depth because the camera
            // direction has unit z.
            let mut cx = vx;
            let mut cy = vy;
            let mut cz = vz;
            let mut tmax = [f64::INFINITY; 3];
            let mut tdelta = [f64::INFINITY; 3];
            let mut step = [0i64; 3];
            let pos = [ox, oy, oz];
            let cells = [cx, cy, cz];
            for a in 0..3 {
                if d[a] > 0.0 {
                    step[a] = 1;
                    tmax[a] = ((cells[a] + 1) as f64 - pos[a]) * cell / d[a];
                    tdelta[a] = cell / d[a];
                } else if d[a] < 0.0 {
                    step[a] = -1;
                    tmax[a] = (pos[a] - cells[a] as f64) * cell / -d[a];
                    tdelta[a] = cell / -d[a];
                }
            }
            let mut hit_t = DEPTH_MAX_M;
            let mut hit_rgb = [0.0f64; 3];
            loop {
                let axis = if tmax[0] <= tmax[1] && tmax[0] <= tmax[2] {
                    0
                } else if tmax[1] <= tmax[2] {
                    1
                } else {
                    2
                };
                let t = tmax[axis];
                match axis {
                    0 => cx += step[0],
                    1 => cy += step[1],
                    _ => cz += step[2],
                }
                tmax[axis] += tdelta[axis];
                if cx < 0
                    || cy < 0
                    || cz < 0
                    || cx >= scene.nx as i64
                    || cy >= scene.ny as i64
                    || cz >= scene.nz as i64
                {
                    break; // open ray (should not happen in a closed world)
                }
                if scene.is_occupied(cx as usize, cy as usize, cz as usize) {
                    hit_t = t;
                    let albedo = scene.albedo[scene.idx(cx as usize, cy as usize, cz as usize)];
                    let f = shade(axis, step[axis] > 0);
                    for c in 0..3 {
                        let v = (albedo[c] as f64 / 255.0 * f * 255.0).round() / 255.0;
                        hit_rgb[c] = v;
                    }
                    break;
                }
            }
            depth.set(row, col, hit_t.clamp(DEPTH_MIN_M, DEPTH_MAX_M));
            rgb.set_pixel(row, col, hit_rgb);
        }
    }
    Ok(Frame { rgb, depth_gt: depth, pose: *pose, intrinsics: *k, timestep })
}

/// Applies one discrete action. Blocked forward motion leaves the position
/// unchanged and sets `collided_last`.
pub fn step(scene: &Scene, state: &AgentState, action: Action) -> AgentState {
    match action {
        Action::Stop => *state,
        Action::TurnLeft => AgentState {
            heading_steps: (state.heading_steps + 1).rem_euclid(TURN_STEPS),
            collided_last: false,
            ..*state
        },
        Action::TurnRight => AgentState {
            heading_steps: (state.heading_steps - 1).rem_euclid(TURN_STEPS),
            collided_last: false,
            ..*state
        },
        Action::Forward => {
            let h = state.heading_rad();
            let nx = state.x + FORWARD_STEP_M * h.cos();
            let ny = state.y + FORWARD_STEP_M * h.sin();
            if scene.is_navigable_world(nx, ny) {
                AgentState { x: nx, y: ny, collided_last: false, ..*state }
            } else {
                AgentState { collided_last: true, ..*state }
            }
        }
    }
}
