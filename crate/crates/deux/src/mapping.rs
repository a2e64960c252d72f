//! Depth-to-occupancy integration, frontier extraction, and the planning-view
//! map transform.
//!
//! Grid cells are addressed as (x, y) with `cells[y * width + x]`. Occupied
//! marks are sticky: once a cell is Occupied it never reverts.

use crate::geometry::{mat_vec, DepthMap, Intrinsics, Pose, DEPTH_MAX_M, DEPTH_MIN_M};
use crate::world::Scene;
use std::io::Write;
use std::path::Path;

/// Obstacle classification height band above the floor, in meters.
pub const OBSTACLE_BAND_M: (f64, f64) = (0.1, 1.5);
/// Horizontal cap for free-space rays from clipped depth returns.
pub const MAX_RAY_M: f64 = 10.0;
/// Frontier clusters smaller than this are discarded.
pub const MIN_FRONTIER_CLUSTER: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellState {
    Unknown,
    Free,
    Occupied,
}

pub type GridCell = (usize, usize); // (x, y)

/// 2D top-down occupancy map.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<CellState>,
    /// World coordinates of the corner of cell (0, 0).
    pub origin: (f64, f64),
    pub resolution_m: f64,
}

impl OccupancyGrid {
    pub fn unknown(width: usize, height: usize, origin: (f64, f64), resolution_m: f64) -> Self {
        assert!(resolution_m > 0.0);
        Self { width, height, cells: vec![CellState::Unknown; width * height], origin, resolution_m }
    }

    /// Fully-known grid derived from the true scene (privileged access).
    pub fn from_scene(scene: &Scene) -> Self {
        let mut grid = Self::unknown(scene.nx, scene.ny, (0.0, 0.0), scene.cell_size_m);
        for y in 0..scene.ny {
            for x in 0..scene.nx {
                grid.cells[y * scene.nx + x] = if scene.is_navigable_cell(x, y) {
                    CellState::Free
                } else {
                    CellState::Occupied
                };
            }
        }
        grid
    }

    #[inline]
    pub fn get(&self, cell: GridCell) -> CellState {
        self.cells[cell.1 * self.width + cell.0]
    }

    #[inline]
    pub fn set(&mut self, cell: GridCell, state: CellState) {
        self.cells[cell.1 * self.width + cell.0] = state;
    }

    pub fn world_to_cell(&self, x: f64, y: f64) -> Option<GridCell> {
        let cx = (x - self.origin.0) / self.resolution_m;
        let cy = (y - self.origin.1) / self.resolution_m;
        if cx < 0.0 || cy < 0.0 {
            return None;
        }
        let (cx, cy) = (cx as usize, cy as usize);
        if cx >= self.width || cy >= self.height {
            return None;
        }
        Some((cx, cy))
    }

    pub fn cell_center(&self, cell: GridCell) -> (f64, f64) {
        (
            self.origin.0 + (cell.0 as f64 + 0.5) * self.resolution_m,
            self.origin.1 + (cell.1 as f64 + 0.5) * self.resolution_m,
        )
    }

    /// Dump as PGM: 0 = Unknown, 128 = Free, 255 = Occupied.
    pub fn write_pgm(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .cells
            .iter()
            .map(|c| match c {
                CellState::Unknown => 0u8,
                CellState::Free => 128,
                CellState::Occupied => 255,
            })
            .collect();
        f.write_all(&bytes)
    }

    fn mark_free(&mut self, cell: GridCell) {
        if self.get(cell) != CellState::Occupied {
            self.set(cell, CellState::Free);
        }
    }
}

/// Bumper feedback: marks the cell the agent just failed to move into as
/// Occupied. Low clutter can block motion while sitting outside the camera's
/// obstacle band, so collisions are the only evidence of it.
pub fn mark_collision(grid: &mut OccupancyGrid, state: &crate::world::AgentState) {
    let (dx, dy) = (state.heading_rad().cos(), state.heading_rad().sin());
    for reach in [
        crate::world::FORWARD_STEP_M,
        crate::world::FORWARD_STEP_M + 0.5 * grid.resolution_m,
    ] {
        let probe = grid.world_to_cell(state.x + dx * reach, state.y + dy * reach);
        if let Some(cell) = probe {
            if Some(cell) != grid.world_to_cell(state.x, state.y) {
                grid.set(cell, CellState::Occupied);
                return;
            }
        }
    }
}

/// Integer line between two cells, inclusive of both endpoints.
fn bresenham(from: GridCell, to: GridCell) -> Vec<GridCell> {
    let (mut x0, mut y0) = (from.0 as i64, from.1 as i64);
    let (x1, y1) = (to.0 as i64, to.1 as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::new();
    loop {
        out.push((x0 as usize, y0 as usize));
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
    out
}

/// Integrates one depth frame into the grid. Every pixel with a depth return
/// inside (0.1, 10.0) is backprojected; points in the obstacle height band
/// mark their cell Occupied, floor returns and clipped rays contribute free
/// evidence along the horizontal ray from the agent.
pub fn integrate(
    grid: &mut OccupancyGrid,
    frame_pose: &Pose,
    depth: &DepthMap,
    k: &Intrinsics,
    floor_z_m: f64,
) {
    let agent_xy = (frame_pose.translation[0], frame_pose.translation[1]);
    let agent_cell = match grid.world_to_cell(agent_xy.0, agent_xy.1) {
        Some(c) => c,
        None => return,
    };
    let n = grid.width * grid.height;
    let mut obstacle = vec![false; n];
    let mut free_end = vec![false; n];
    let r = &frame_pose.rotation;
    let t = &frame_pose.translation;
    for row in 0..k.height {
        for col in 0..k.width {
            let d = depth.get(row, col);
            if !(d > DEPTH_MIN_M) {
                continue;
            }
            let dir = [
                (col as f64 - k.cx) / k.fx,
                (row as f64 - k.cy) / k.fy,
                1.0,
            ];
            let rd = mat_vec(r, &dir);
            let clipped = d >= DEPTH_MAX_M;
            let p = [rd[0] * d + t[0], rd[1] * d + t[1], rd[2] * d + t[2]];
            let h = p[2] - floor_z_m;
            if !clipped && (OBSTACLE_BAND_M.0..=OBSTACLE_BAND_M.1).contains(&h) {
                // Hit points lie exactly on voxel faces; nudge forward along
                // the ray so boundary points bin into the struck cell rather
                // than the free cell in front of it.
                let eps = 1e-6;
                let p = [p[0] + rd[0] * eps, p[1] + rd[1] * eps];
                if let Some(cell) = grid.world_to_cell(p[0], p[1]) {
                    obstacle[cell.1 * grid.width + cell.0] = true;
                }
            } else if clipped || h < OBSTACLE_BAND_M.0 {
                // Free evidence toward the point, capped at MAX_RAY_M.
                let (mut ex, mut ey) = (p[0], p[1]);
                let dist = ((ex - agent_xy.0).powi(2) + (ey - agent_xy.1).powi(2)).sqrt();
                if dist > MAX_RAY_M {
                    let s = MAX_RAY_M / dist;
                    ex = agent_xy.0 + (ex - agent_xy.0) * s;
                    ey = agent_xy.1 + (ey - agent_xy.1) * s;
                }
                // Clamp the endpoint into the grid along the ray.
                let cell = clamp_into_grid(grid, agent_xy, (ex, ey));
                free_end[cell.1 * grid.width + cell.0] = true;
            }
        }
    }
    // Free rays first, then obstacle rays; Occupied wins conflicts.
    for i in 0..n {
        if free_end[i] {
            let cell = (i % grid.width, i / grid.width);
            for c in bresenham(agent_cell, cell) {
                grid.mark_free(c);
            }
        }
    }
    for i in 0..n {
        if obstacle[i] {
            let cell = (i % grid.width, i / grid.width);
            let line = bresenham(agent_cell, cell);
            for &c in &line[..line.len() - 1] {
                grid.mark_free(c);
            }
        }
    }
    for i in 0..n {
        if obstacle[i] {
            grid.cells[i] = CellState::Occupied;
        }
    }
}

/// Walks the segment endpoint back toward the agent until it lies inside the
/// grid bounds.
fn clamp_into_grid(grid: &OccupancyGrid, from: (f64, f64), to: (f64, f64)) -> GridCell {
    if let Some(c) = grid.world_to_cell(to.0, to.1) {
        return c;
    }
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let x = from.0 + (to.0 - from.0) * mid;
        let y = from.1 + (to.1 - from.1) * mid;
        if grid.world_to_cell(x, y).is_some() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let x = from.0 + (to.0 - from.0) * lo;
    let y = from.1 + (to.1 - from.1) * lo;
    grid.world_to_cell(x, y).unwrap_or((0, 0))
}

/// A frontier cell: Free and 4-adjacent to at least one Unknown cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frontier {
    pub cell: GridCell,
    pub cluster_id: usize,
    pub cluster_size: usize,
}

pub fn extract_frontiers(grid: &OccupancyGrid) -> Vec<Frontier> {
    extract_frontiers_with_min(grid, MIN_FRONTIER_CLUSTER)
}

/// Frontier cells grouped into 8-connected clusters; clusters smaller than
/// `min_cluster` are discarded. Cluster ids follow scan order.
pub fn extract_frontiers_with_min(grid: &OccupancyGrid, min_cluster: usize) -> Vec<Frontier> {
    let w = grid.width;
    let h = grid.height;
    let is_frontier = |x: usize, y: usize| -> bool {
        if grid.cells[y * w + x] != CellState::Free {
            return false;
        }
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            let nx = x as i64 + dx;
            let ny = y as i64 + dy;
            if nx >= 0
                && ny >= 0
                && (nx as usize) < w
                && (ny as usize) < h
                && grid.cells[ny as usize * w + nx as usize] == CellState::Unknown
            {
                return true;
            }
        }
        false
    };
    let mut frontier_mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            frontier_mask[y * w + x] = is_frontier(x, y);
        }
    }
    // 8-connected clustering in scan order.
    let mut cluster = vec![usize::MAX; w * h];
    let mut clusters: Vec<Vec<GridCell>> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !frontier_mask[i] || cluster[i] != usize::MAX {
                continue;
            }
            let id = clusters.len();
            let mut members = Vec::new();
            let mut stack = vec![(x, y)];
            cluster[i] = id;
            while let Some((cx, cy)) = stack.pop() {
                members.push((cx, cy));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let nx = cx as i64 + dx;
                        let ny = cy as i64 + dy;
                        if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                            continue;
                        }
                        let j = ny as usize * w + nx as usize;
                        if frontier_mask[j] && cluster[j] == usize::MAX {
                            cluster[j] = id;
                            stack.push((nx as usize, ny as usize));
                        }
                    }
                }
            }
            clusters.push(members);
        }
    }
    let mut out = Vec::new();
    let mut kept_id = 0usize;
    for members in clusters.iter() {
        if members.len() < min_cluster {
            continue;
        }
        let mut sorted = members.clone();
        sorted.sort_by_key(|&(x, y)| (y, x));
        for &cell in &sorted {
            out.push(Frontier { cell, cluster_id: kept_id, cluster_size: members.len() });
        }
        kept_id += 1;
    }
    out
}

/// One representative cell per cluster: the member nearest the cluster
/// centroid, ties broken by lowest (row, col). Ordered by cluster id.
pub fn frontier_representatives(frontiers: &[Frontier]) -> Vec<GridCell> {
    let mut by_cluster: Vec<Vec<GridCell>> = Vec::new();
    for f in frontiers {
        if f.cluster_id >= by_cluster.len() {
            by_cluster.resize(f.cluster_id + 1, Vec::new());
        }
        by_cluster[f.cluster_id].push(f.cell);
    }
    by_cluster
        .iter()
        .filter(|m| !m.is_empty())
        .map(|members| {
            let n = members.len() as f64;
            let (sx, sy) = members
                .iter()
                .fold((0.0, 0.0), |(ax, ay), &(x, y)| (ax + x as f64, ay + y as f64));
            let (cx, cy) = (sx / n, sy / n);
            *members
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 as f64 - cx).powi(2) + (a.1 as f64 - cy).powi(2);
                    let db = (b.0 as f64 - cx).powi(2) + (b.1 as f64 - cy).powi(2);
                    da.partial_cmp(&db)
                        .unwrap()
                        .then_with(|| (a.1, a.0).cmp(&(b.1, b.0)))
                })
                .unwrap()
        })
        .collect()
}

/// Planning view: Unknown is treated as Occupied, and every cell within
/// Chebyshev radius 1 of an Occupied cell becomes Occupied so A* keeps
/// clearance.
pub fn process_map(grid: &OccupancyGrid) -> OccupancyGrid {
    let w = grid.width;
    let h = grid.height;
    let mut out = grid.clone();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            out.cells[i] = match grid.cells[i] {
                CellState::Unknown => CellState::Occupied,
                other => other,
            };
        }
    }
    for y in 0..h {
        for x in 0..w {
            if grid.cells[y * w + x] != CellState::Occupied {
                continue;
            }
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        out.cells[ny as usize * w + nx as usize] = CellState::Occupied;
                    }
                }
            }
        }
    }
    out
}
