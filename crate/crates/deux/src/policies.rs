//! The four exploration policies — Random, Frontier, Oracle, and the
//! depth-uncertainty-guided policy — plus the episode reward.
//!
//! The uncertainty-guided policy scores each frame's completed depth against
//! photometric reprojection of the previous two frames, remembers where the
//! residual was high, and steers toward frontiers near those poses.

use std::collections::VecDeque;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::completion::{complete_depth, CompletionError, CompletorParams};
use crate::geometry::{DepthMap, Image, Pose};
use crate::losses::{uncertainty_residual, LossContext, LossError, SparseDepth};
use crate::mapping::{
    extract_frontiers, frontier_representatives, process_map, CellState, Frontier, GridCell,
    OccupancyGrid,
};
use crate::planning::{
    action_toward, astar, next_waypoint, next_waypoint_adjacent, unstuck_action, PlanResult,
};
use crate::world::{Action, AgentState, Frame, Scene};

/// Default exploration budget in steps per episode.
pub const DEFAULT_MAX_STEPS: usize = 500;
/// A target counts as reached within this many grid cells of the agent.
pub const TARGET_RADIUS_CELLS: f64 = 2.0;
/// Default number of pre-sampled Oracle navigation targets.
pub const DEFAULT_ORACLE_TARGET_COUNT: usize = 10;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("residual {0} outside [0, 1)")]
    InvalidDelta(f64),
    #[error("registry timestep {0} is not strictly increasing")]
    NonMonotonicTimestep(usize),
    #[error("oracle policy requires at least one target")]
    NoTargets,
    #[error("uncertainty-guided policy requires a seed model")]
    MissingSeedModel,
    #[error("agent position outside the grid")]
    OffGrid,
    #[error(transparent)]
    Completion(#[from] CompletionError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Per-episode step budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeBudget {
    pub max_steps: usize,
}

impl Default for EpisodeBudget {
    fn default() -> Self {
        Self { max_steps: DEFAULT_MAX_STEPS }
    }
}

impl EpisodeBudget {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.max_steps < 1 {
            return Err(PolicyError::NoTargets);
        }
        Ok(())
    }
}

/// The episode reward: the negative photometric-uncertainty residual.
pub fn reward(delta: f64) -> f64 {
    -delta
}

/// One recorded uncertainty observation.
#[derive(Debug, Clone)]
pub struct ResidualRecord {
    pub timestep: usize,
    pub pose: Pose,
    pub delta: f64,
}

/// Time-ordered log of (timestep, pose, residual) observations made by the
/// seed model during an episode.
#[derive(Debug, Clone, Default)]
pub struct ResidualRegistry {
    pub records: Vec<ResidualRecord>,
}

impl ResidualRegistry {
    pub fn push(&mut self, timestep: usize, pose: Pose, delta: f64) -> Result<(), PolicyError> {
        if !(0.0..1.0).contains(&delta) {
            return Err(PolicyError::InvalidDelta(delta));
        }
        if let Some(last) = self.records.last() {
            if timestep <= last.timestep {
                return Err(PolicyError::NonMonotonicTimestep(timestep));
            }
        }
        self.records.push(ResidualRecord { timestep, pose, delta });
        Ok(())
    }

    /// The records whose residual falls in the top decile so far (at least
    /// one when non-empty), strongest first with a timestep tie-break.
    pub fn top_decile(&self) -> Vec<&ResidualRecord> {
        if self.records.is_empty() {
            return Vec::new();
        }
        let mut order: Vec<&ResidualRecord> = self.records.iter().collect();
        order.sort_by(|a, b| {
            b.delta
                .partial_cmp(&a.delta)
                .unwrap()
                .then_with(|| a.timestep.cmp(&b.timestep))
        });
        let keep = self.records.len().div_ceil(10);
        order.truncate(keep);
        order
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Random,
    Frontier,
    Oracle,
    Deux,
}

impl PolicyKind {
    pub fn label(&self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::Frontier => "frontier",
            PolicyKind::Oracle => "oracle",
            PolicyKind::Deux => "deux",
        }
    }

    pub fn all() -> [PolicyKind; 4] {
        [PolicyKind::Random, PolicyKind::Frontier, PolicyKind::Oracle, PolicyKind::Deux]
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(PolicyKind::Random),
            "frontier" => Ok(PolicyKind::Frontier),
            "oracle" => Ok(PolicyKind::Oracle),
            "deux" => Ok(PolicyKind::Deux),
            other => Err(format!("unknown policy '{other}'")),
        }
    }
}

/// Depth model used online to score uncertainty during exploration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SeedModel {
    /// The classical completor with fitted hyper-parameters.
    Completor(CompletorParams),
    /// Ground-truth depth stub: zero completion error by construction.
    GroundTruth,
}

impl SeedModel {
    pub fn predict(&self, frame: &Frame, sparse: &SparseDepth) -> Result<DepthMap, PolicyError> {
        match self {
            SeedModel::Completor(params) => Ok(complete_depth(&frame.rgb, sparse, params)?),
            SeedModel::GroundTruth => Ok(frame.depth_gt.clone()),
        }
    }
}

/// Per-step observation shared by all policies.
pub struct StepInput<'a> {
    pub state: &'a AgentState,
    /// The agent-built map, integrated up to and including this step's frame.
    pub grid: &'a OccupancyGrid,
    pub frame: &'a Frame,
    pub sparse: &'a SparseDepth,
}

/// Planning view of the map with the agent's own cell kept traversable (the
/// obstacle inflation may otherwise swallow it next to walls).
fn planning_view(grid: &OccupancyGrid, start: GridCell) -> OccupancyGrid {
    let mut view = process_map(grid);
    view.set(start, CellState::Free);
    view
}

/// Optimistic planning view: unknown space is traversable, observed
/// obstacles stay inflated. Used as a fallback when the conservative view
/// disconnects the agent from every frontier (e.g. narrow doorways seen only
/// partially); per-step replanning corrects the plan as unknowns resolve.
fn optimistic_view(grid: &OccupancyGrid, start: GridCell) -> OccupancyGrid {
    let mut open = grid.clone();
    for c in open.cells.iter_mut() {
        if *c == CellState::Unknown {
            *c = CellState::Free;
        }
    }
    let mut view = process_map(&open);
    view.set(start, CellState::Free);
    view
}

/// Raw fallback view: unknowns traversable and no obstacle inflation. On
/// tightly cluttered maps the inflation can seal every 2-cell passage and
/// fragment free space; this last-resort view keeps planners from
/// deadlocking (collisions are still caught by the simulator and the
/// per-step replan).
fn raw_view(grid: &OccupancyGrid, start: GridCell) -> OccupancyGrid {
    let mut view = grid.clone();
    for c in view.cells.iter_mut() {
        if *c == CellState::Unknown {
            *c = CellState::Free;
        }
    }
    view.set(start, CellState::Free);
    view
}

/// Plans to `goal` through progressively more permissive views: inflated
/// with unknowns blocked, inflated with unknowns traversable, then the raw
/// map.
fn plan_tiered(grid: &OccupancyGrid, start: GridCell, goal: GridCell) -> Option<PlanResult> {
    for mut view in [
        planning_view(grid, start),
        optimistic_view(grid, start),
        raw_view(grid, start),
    ] {
        if let Some(plan) = plan_with_goal_carve(&mut view, start, goal) {
            return Some(plan);
        }
    }
    None
}

/// [`nearest_reachable_frontier`] across the same three planning tiers.
fn nearest_frontier_tiered(
    grid: &OccupancyGrid,
    start: GridCell,
    reps: &[GridCell],
) -> Option<(GridCell, PlanResult)> {
    for mut view in [
        planning_view(grid, start),
        optimistic_view(grid, start),
        raw_view(grid, start),
    ] {
        if let Some(found) = nearest_reachable_frontier(&mut view, start, reps) {
            return Some(found);
        }
    }
    None
}

/// Plans to `goal` with the goal cell kept traversable: frontier cells are
/// Free in the raw map but often swallowed by the obstacle inflation.
fn plan_with_goal_carve(
    view: &mut OccupancyGrid,
    start: GridCell,
    goal: GridCell,
) -> Option<PlanResult> {
    let old = view.get(goal);
    view.set(goal, CellState::Free);
    let res = astar(view, start, goal).ok().flatten();
    view.set(goal, old);
    res
}

/// The representative with the cheapest A* path from `start`, with its plan.
/// Ties resolve to the earliest representative (cluster order).
pub fn nearest_reachable_frontier(
    view: &mut OccupancyGrid,
    start: GridCell,
    reps: &[GridCell],
) -> Option<(GridCell, PlanResult)> {
    let mut best: Option<(usize, GridCell, PlanResult)> = None;
    for &rep in reps {
        if let Some(plan) = plan_with_goal_carve(view, start, rep) {
            if best.as_ref().map_or(true, |(c, _, _)| plan.cost < *c) {
                best = Some((plan.cost, rep, plan));
            }
        }
    }
    best.map(|(_, rep, plan)| (rep, plan))
}

fn cells_between(grid: &OccupancyGrid, a: GridCell, b: GridCell) -> f64 {
    let dx = a.0 as f64 - b.0 as f64;
    let dy = a.1 as f64 - b.1 as f64;
    let _ = grid;
    (dx * dx + dy * dy).sqrt()
}

/// Chooses the next exploration target among the frontier representatives by
/// proximity-weighted maximum residual: `score(f) = max_i delta_i / (1 +
/// dist_m(f, pose_i))` over the top-decile registry records. An empty
/// registry falls back to the nearest reachable frontier; no frontiers means
/// no target.
pub fn deux_sample_target(
    frontiers: &[Frontier],
    registry: &ResidualRegistry,
    grid: &OccupancyGrid,
    agent_cell: GridCell,
) -> Option<GridCell> {
    let reps = frontier_representatives(frontiers);
    if reps.is_empty() {
        return None;
    }
    let top = registry.top_decile();
    if top.is_empty() {
        return nearest_frontier_tiered(grid, agent_cell, &reps).map(|(rep, _)| rep);
    }
    let mut best: Option<(f64, GridCell)> = None;
    for &rep in &reps {
        let (cx, cy) = grid.cell_center(rep);
        let mut score = 0.0f64;
        for rec in &top {
            let dx = cx - rec.pose.translation[0];
            let dy = cy - rec.pose.translation[1];
            let dist = (dx * dx + dy * dy).sqrt();
            score = score.max(rec.delta / (1.0 + dist));
        }
        let better = match &best {
            None => true,
            Some((s, cell)) => {
                score > *s || (score == *s && (rep.1, rep.0) < (cell.1, cell.0))
            }
        };
        if better {
            best = Some((score, rep));
        }
    }
    best.map(|(_, rep)| rep)
}

/// Uniform random exploration with a persisted turn-away recovery after
/// collisions.
#[derive(Debug, Default)]
pub struct RandomPolicy {
    pending: Option<(Action, usize)>,
}

impl RandomPolicy {
    pub fn step(&mut self, state: &AgentState, rng: &mut ChaCha8Rng) -> Action {
        if state.collided_last && self.pending.is_none() {
            let dir = if rng.gen::<bool>() { Action::TurnLeft } else { Action::TurnRight };
            self.pending = Some((dir, rng.gen_range(1..=9)));
        }
        if let Some((dir, remaining)) = self.pending {
            if remaining > 0 {
                self.pending = Some((dir, remaining - 1));
                return dir;
            }
            self.pending = None;
            return Action::Forward;
        }
        match rng.gen_range(0..3u8) {
            0 => Action::Forward,
            1 => Action::TurnLeft,
            _ => Action::TurnRight,
        }
    }
}

/// Classic frontier exploration: steer toward the nearest reachable frontier
/// representative, replanning every step.
#[derive(Debug, Default)]
pub struct FrontierPolicy {
    /// The most recently chosen target, for logging and tests.
    pub last_target: Option<GridCell>,
    /// Steps left of cautious path-following after a collision.
    caution: usize,
}

/// How many steps a planner follows the path cell-by-cell after a collision
/// before resuming lookahead steering.
const CAUTION_STEPS: usize = 8;

/// Picks the steering waypoint, dropping to strict cell-by-cell following
/// while a collision cooldown is active.
fn steer_waypoint(plan: &PlanResult, caution: &mut usize) -> Result<GridCell, crate::planning::PlanningError> {
    if *caution > 0 {
        *caution -= 1;
        next_waypoint_adjacent(plan)
    } else {
        next_waypoint(plan)
    }
}

impl FrontierPolicy {
    pub fn step(&mut self, input: &StepInput<'_>, rng: &mut ChaCha8Rng) -> Action {
        let agent_cell = match input.grid.world_to_cell(input.state.x, input.state.y) {
            Some(c) => c,
            None => return unstuck_action(rng),
        };
        if input.state.collided_last {
            self.caution = CAUTION_STEPS;
        }
        let frontiers = extract_frontiers(input.grid);
        // Stay committed to the current target while it remains an
        // unreached, reachable frontier; otherwise pick the nearest one.
        let mut chosen: Option<(GridCell, PlanResult)> = None;
        if let Some(t) = self.last_target {
            let reached = cells_between(input.grid, agent_cell, t) <= TARGET_RADIUS_CELLS;
            if !reached && frontiers.iter().any(|f| f.cell == t) {
                if let Some(plan) = plan_tiered(input.grid, agent_cell, t) {
                    chosen = Some((t, plan));
                }
            }
        }
        if chosen.is_none() {
            let reps = frontier_representatives(&frontiers);
            chosen = nearest_frontier_tiered(input.grid, agent_cell, &reps);
        }
        match chosen {
            Some((rep, plan)) => {
                self.last_target = Some(rep);
                match steer_waypoint(&plan, &mut self.caution) {
                    Ok(wp) => action_toward(input.state, input.grid.cell_center(wp)),
                    Err(_) => unstuck_action(rng),
                }
            }
            None => {
                self.last_target = None;
                unstuck_action(rng)
            }
        }
    }
}

/// Navigates a fixed list of pre-sampled targets using the true scene map.
#[derive(Debug)]
pub struct OraclePolicy {
    view: OccupancyGrid,
    /// True map without inflation, the planning fallback on tight clutter.
    raw: OccupancyGrid,
    targets: Vec<GridCell>,
    next: usize,
    caution: usize,
}

impl OraclePolicy {
    pub fn new(scene: &Scene, targets: Vec<GridCell>) -> Result<Self, PolicyError> {
        if targets.is_empty() {
            return Err(PolicyError::NoTargets);
        }
        let raw = OccupancyGrid::from_scene(scene);
        let view = process_map(&raw);
        Ok(Self { view, raw, targets, next: 0, caution: 0 })
    }

    pub fn remaining_targets(&self) -> usize {
        self.targets.len() - self.next.min(self.targets.len())
    }

    pub fn step(&mut self, state: &AgentState, rng: &mut ChaCha8Rng) -> Action {
        let agent_cell = match self.view.world_to_cell(state.x, state.y) {
            Some(c) => c,
            None => return unstuck_action(rng),
        };
        if state.collided_last {
            // The true map is cell-resolution; collisions still happen when
            // lookahead steering cuts a corner.
            self.caution = CAUTION_STEPS;
            crate::mapping::mark_collision(&mut self.raw, state);
            crate::mapping::mark_collision(&mut self.view, state);
        }
        loop {
            let Some(&target) = self.targets.get(self.next) else {
                return Action::Stop;
            };
            if cells_between(&self.view, agent_cell, target) <= TARGET_RADIUS_CELLS {
                self.next += 1;
                continue;
            }
            // Targets sit on true-map navigable cells but may fall inside
            // the inflated band, so the goal cell is kept traversable and
            // the uninflated map serves as fallback.
            let mut view = self.view.clone();
            view.set(agent_cell, CellState::Free);
            let plan = plan_with_goal_carve(&mut view, agent_cell, target).or_else(|| {
                let mut raw = self.raw.clone();
                raw.set(agent_cell, CellState::Free);
                plan_with_goal_carve(&mut raw, agent_cell, target)
            });
            return match plan {
                Some(plan) => match steer_waypoint(&plan, &mut self.caution) {
                    Ok(wp) => action_toward(state, self.view.cell_center(wp)),
                    Err(_) => unstuck_action(rng),
                },
                None => {
                    // Truly unreachable; move on.
                    self.next += 1;
                    continue;
                }
            };
        }
    }
}

/// Uniform fixed-seed draw of distinct target cells reachable from the
/// spawn by 4-connected moves over navigable cells.
pub fn sample_oracle_targets(scene: &Scene, count: usize, seed: u64) -> Vec<GridCell> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = reachable_cells(scene);
    if cells.is_empty() {
        return Vec::new();
    }
    let want = count.min(cells.len());
    let mut chosen = Vec::with_capacity(want);
    let mut used = std::collections::HashSet::new();
    while chosen.len() < want {
        let c = cells[rng.gen_range(0..cells.len())];
        if used.insert(c) {
            chosen.push(c);
        }
    }
    chosen
}

/// Navigable cells in the spawn's 4-connected component.
fn reachable_cells(scene: &Scene) -> Vec<(usize, usize)> {
    let Some(start) = scene.world_to_cell(scene.spawn.x, scene.spawn.y) else {
        return Vec::new();
    };
    let mut seen = vec![false; scene.nx * scene.ny];
    let mut queue = VecDeque::from([start]);
    seen[start.1 * scene.nx + start.0] = true;
    let mut out = Vec::new();
    while let Some((cx, cy)) = queue.pop_front() {
        out.push((cx, cy));
        let (cx, cy) = (cx as isize, cy as isize);
        for (nx, ny) in [(cx - 1, cy), (cx + 1, cy), (cx, cy - 1), (cx, cy + 1)] {
            if nx < 0 || ny < 0 || nx as usize >= scene.nx || ny as usize >= scene.ny {
                continue;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            if !seen[ny * scene.nx + nx] && scene.is_navigable_cell(nx, ny) {
                seen[ny * scene.nx + nx] = true;
                queue.push_back((nx, ny));
            }
        }
    }
    out
}

/// Depth-uncertainty-guided exploration: per step, complete the current
/// frame's sparse depth with the seed model, score it photometrically against
/// the previous two frames, log the residual, and steer toward the frontier
/// with the highest proximity-weighted residual score.
#[derive(Debug)]
pub struct DeuxPolicy {
    seed_model: SeedModel,
    pub registry: ResidualRegistry,
    prev: VecDeque<(Image, Pose)>,
    pub target: Option<GridCell>,
    /// Residual recorded at the latest step, if past warm-up.
    pub last_delta: Option<f64>,
    caution: usize,
}

impl DeuxPolicy {
    pub fn new(seed_model: SeedModel) -> Self {
        Self {
            seed_model,
            registry: ResidualRegistry::default(),
            prev: VecDeque::with_capacity(2),
            target: None,
            last_delta: None,
            caution: 0,
        }
    }

    pub fn step(
        &mut self,
        input: &StepInput<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Action, PolicyError> {
        let frame = input.frame;
        let pred = self.seed_model.predict(frame, input.sparse)?;
        self.last_delta = None;
        if self.prev.len() == 2 {
            let ctx = LossContext {
                target: &frame.rgb,
                target_pose: &frame.pose,
                sources: self.prev.iter().map(|(img, pose)| (img, pose)).collect(),
                intrinsics: &frame.intrinsics,
            };
            let delta = uncertainty_residual(&ctx, &pred)?;
            self.registry.push(frame.timestep, frame.pose, delta)?;
            self.last_delta = Some(delta);
        }
        self.prev.push_back((frame.rgb.clone(), frame.pose));
        if self.prev.len() > 2 {
            self.prev.pop_front();
        }

        let agent_cell = input
            .grid
            .world_to_cell(input.state.x, input.state.y)
            .ok_or(PolicyError::OffGrid)?;
        if input.state.collided_last {
            self.caution = CAUTION_STEPS;
        }
        let frontiers = extract_frontiers(input.grid);
        let stale = match self.target {
            None => true,
            Some(t) => {
                // Reached, or explored away (no longer a frontier).
                cells_between(input.grid, agent_cell, t) <= TARGET_RADIUS_CELLS
                    || !frontiers.iter().any(|f| f.cell == t)
            }
        };
        if stale {
            self.target = deux_sample_target(&frontiers, &self.registry, input.grid, agent_cell);
        }
        let Some(target) = self.target else {
            return Ok(unstuck_action(rng));
        };
        match plan_tiered(input.grid, agent_cell, target) {
            Some(plan) => match steer_waypoint(&plan, &mut self.caution) {
                Ok(wp) => Ok(action_toward(input.state, input.grid.cell_center(wp))),
                Err(_) => Ok(unstuck_action(rng)),
            },
            None => {
                self.target = None;
                Ok(unstuck_action(rng))
            }
        }
    }
}

/// A ready-to-run policy instance for one episode.
#[derive(Debug)]
pub enum Policy {
    Random(RandomPolicy),
    Frontier(FrontierPolicy),
    Oracle(OraclePolicy),
    Deux(DeuxPolicy),
}

impl Policy {
    /// Instantiates a policy for `scene`. Oracle targets are drawn from
    /// `policy_seed`; the uncertainty-guided policy requires a seed model.
    pub fn new(
        kind: PolicyKind,
        scene: &Scene,
        seed_model: Option<SeedModel>,
        policy_seed: u64,
    ) -> Result<Self, PolicyError> {
        Ok(match kind {
            PolicyKind::Random => Policy::Random(RandomPolicy::default()),
            PolicyKind::Frontier => Policy::Frontier(FrontierPolicy::default()),
            PolicyKind::Oracle => {
                let targets =
                    sample_oracle_targets(scene, DEFAULT_ORACLE_TARGET_COUNT, policy_seed);
                Policy::Oracle(OraclePolicy::new(scene, targets)?)
            }
            PolicyKind::Deux => {
                let model = seed_model.ok_or(PolicyError::MissingSeedModel)?;
                Policy::Deux(DeuxPolicy::new(model))
            }
        })
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            Policy::Random(_) => PolicyKind::Random,
            Policy::Frontier(_) => PolicyKind::Frontier,
            Policy::Oracle(_) => PolicyKind::Oracle,
            Policy::Deux(_) => PolicyKind::Deux,
        }
    }

    pub fn step(
        &mut self,
        input: &StepInput<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Action, PolicyError> {
        match self {
            Policy::Random(p) => Ok(p.step(input.state, rng)),
            Policy::Frontier(p) => Ok(p.step(input, rng)),
            Policy::Oracle(p) => Ok(p.step(input.state, rng)),
            Policy::Deux(p) => p.step(input, rng),
        }
    }

    pub fn registry(&self) -> Option<&ResidualRegistry> {
        match self {
            Policy::Deux(p) => Some(&p.registry),
            _ => None,
        }
    }

    pub fn last_delta(&self) -> Option<f64> {
        match self {
            Policy::Deux(p) => p.last_delta,
            _ => None,
        }
    }

    pub fn last_target(&self) -> Option<GridCell> {
        match self {
            Policy::Deux(p) => p.target,
            Policy::Frontier(p) => p.last_target,
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::completion::sample_sparse_depth;
    use crate::geometry::Intrinsics;
    use crate::mapping::integrate;
    use crate::world::{generate_scene, render, step, WorldParams, TURN_STEPS};

    fn empty_params(nx: usize, ny: usize) -> WorldParams {
        WorldParams {
            nx,
            ny,
            walls_min: 0,
            walls_max: 0,
            clutter_density: 0.0,
            ..WorldParams::default()
        }
    }

    #[test]
    fn reward_is_negated_residual() {
        assert_eq!(reward(0.0), 0.0);
        assert_eq!(reward(0.5), -0.5);
    }

    #[test]
    fn registry_validates_range_and_order() {
        let mut reg = ResidualRegistry::default();
        reg.push(0, Pose::identity(), 0.3).unwrap();
        assert!(matches!(
            reg.push(1, Pose::identity(), 1.0),
            Err(PolicyError::InvalidDelta(_))
        ));
        assert!(matches!(
            reg.push(0, Pose::identity(), 0.1),
            Err(PolicyError::NonMonotonicTimestep(0))
        ));
        reg.push(5, Pose::identity(), 0.9).unwrap();
        assert_eq!(reg.records.len(), 2);
    }

    #[test]
    fn top_decile_keeps_strongest_tenth() {
        let mut reg = ResidualRegistry::default();
        for t in 0..20 {
            reg.push(t, Pose::identity(), t as f64 / 40.0).unwrap();
        }
        let top = reg.top_decile();
        assert_eq!(top.len(), 2);
        assert_eq!(top[0].timestep, 19);
        assert_eq!(top[1].timestep, 18);
    }

    /// Rolls one policy for `steps` actions, returning the visited states,
    /// emitted actions, and the final agent-built grid.
    fn rollout(
        scene: &Scene,
        mut policy: Policy,
        steps: usize,
        seed: u64,
        size: usize,
    ) -> (Vec<AgentState>, Vec<Action>, OccupancyGrid, Policy) {
        let k = Intrinsics::default_square(size);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = scene.spawn;
        let mut grid =
            OccupancyGrid::unknown(scene.nx, scene.ny, (0.0, 0.0), scene.cell_size_m);
        let mut states = Vec::new();
        let mut actions = Vec::new();
        for t in 0..steps {
            let frame = render(scene, &scene.camera_pose(&state), &k, t).unwrap();
            integrate(&mut grid, &frame.pose, &frame.depth_gt, &k, scene.floor_z_m());
            let sparse = sample_sparse_depth(&frame, 150, &mut rng).unwrap();
            let input = StepInput { state: &state, grid: &grid, frame: &frame, sparse: &sparse };
            let action = policy.step(&input, &mut rng).unwrap();
            states.push(state);
            actions.push(action);
            if action == Action::Stop {
                break;
            }
            state = step(scene, &state, action);
            if state.collided_last {
                crate::mapping::mark_collision(&mut grid, &state);
            }
        }
        (states, actions, grid, policy)
    }

    #[test]
    fn random_policy_is_reproducible_and_never_stops() {
        let scene = generate_scene(2, &WorldParams::default()).unwrap();
        let (_, a1, _, _) = rollout(&scene, Policy::Random(RandomPolicy::default()), 60, 9, 32);
        let (_, a2, _, _) = rollout(&scene, Policy::Random(RandomPolicy::default()), 60, 9, 32);
        assert_eq!(a1, a2);
        assert!(a1.iter().all(|&a| a != Action::Stop));
        assert_eq!(a1.len(), 60);
    }

    #[test]
    fn random_policy_escapes_dead_end() {
        // Empty room with a hand-built 1-cell dead-end pocket around the
        // spawn: occupied on three sides, open toward +x.
        let mut scene = generate_scene(3, &empty_params(20, 20)).unwrap();
        let (sx, sy) = scene
            .world_to_cell(scene.spawn.x, scene.spawn.y)
            .unwrap();
        for z in 1..=7usize {
            for (dx, dy) in [(-1i64, 0i64), (0, -1), (0, 1), (-1, -1), (-1, 1)] {
                let x = (sx as i64 + dx) as usize;
                let y = (sy as i64 + dy) as usize;
                let i = scene.idx(x, y, z);
                scene.occupied[i] = true;
            }
        }
        let mut escapes = 0;
        for seed in 0..20u64 {
            let (states, _, _, _) =
                rollout(&scene, Policy::Random(RandomPolicy::default()), 50, seed, 24);
            let escaped = states.iter().any(|s| {
                scene.world_to_cell(s.x, s.y).map(|c| c != (sx, sy)).unwrap_or(false)
            });
            if escaped {
                escapes += 1;
            }
        }
        assert_eq!(escapes, 20, "only {escapes}/20 seeds escaped the dead end");
    }

    /// Two connected rooms: an empty shell with one interior wall and a door.
    fn two_room_scene(seed: u64) -> Scene {
        let mut scene = generate_scene(seed, &empty_params(24, 24)).unwrap();
        let wall_x = 12usize;
        for y in 1..23usize {
            if (10..=12).contains(&y) {
                continue; // door
            }
            for z in 1..=7usize {
                let i = scene.idx(wall_x, y, z);
                scene.occupied[i] = true;
            }
        }
        scene
    }

    fn reachable_free_cells(scene: &Scene) -> usize {
        crate::world::largest_navigable_component(scene).len()
    }

    #[test]
    fn frontier_policy_covers_two_rooms() {
        let scene = two_room_scene(8);
        let total = reachable_free_cells(&scene);
        let mut passes = 0;
        for seed in 0..20u64 {
            let (_, _, grid, _) =
                rollout(&scene, Policy::Frontier(FrontierPolicy::default()), 500, seed, 40);
            let free = grid.cells.iter().filter(|&&c| c == CellState::Free).count();
            if free as f64 >= 0.9 * total as f64 {
                passes += 1;
            }
        }
        assert!(passes >= 16, "coverage reached on only {passes}/20 seeds");
    }

    #[test]
    fn frontier_target_is_always_a_current_frontier() {
        let scene = generate_scene(12, &WorldParams::default()).unwrap();
        let k = Intrinsics::default_square(40);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut state = scene.spawn;
        let mut grid =
            OccupancyGrid::unknown(scene.nx, scene.ny, (0.0, 0.0), scene.cell_size_m);
        let mut policy = FrontierPolicy::default();
        for t in 0..120 {
            let frame = render(&scene, &scene.camera_pose(&state), &k, t).unwrap();
            integrate(&mut grid, &frame.pose, &frame.depth_gt, &k, scene.floor_z_m());
            let frontier_cells: std::collections::HashSet<GridCell> =
                extract_frontiers(&grid).iter().map(|f| f.cell).collect();
            let sparse = sample_sparse_depth(&frame, 120, &mut rng).unwrap();
            let input = StepInput { state: &state, grid: &grid, frame: &frame, sparse: &sparse };
            let action = policy.step(&input, &mut rng);
            if let Some(t) = policy.last_target {
                assert!(frontier_cells.contains(&t), "target {t:?} not a frontier");
            }
            state = step(&scene, &state, action);
        }
    }

    #[test]
    fn oracle_reaches_adjacent_target_quickly() {
        let scene = generate_scene(4, &empty_params(16, 16)).unwrap();
        let (sx, sy) = scene.world_to_cell(scene.spawn.x, scene.spawn.y).unwrap();
        // Three cells ahead in +x: outside the reach radius, trivially
        // navigable in an empty room.
        let target = (sx + 3, sy);
        let policy = Policy::Oracle(OraclePolicy::new(&scene, vec![target]).unwrap());
        let (_, actions, _, _) = rollout(&scene, policy, 20, 1, 24);
        let stop_at = actions.iter().position(|&a| a == Action::Stop);
        assert!(stop_at.is_some(), "oracle never finished its target list");
        assert!(stop_at.unwrap() <= 8, "took {} actions", stop_at.unwrap());
    }

    #[test]
    fn oracle_targets_are_deterministic_and_navigable() {
        let scene = generate_scene(15, &WorldParams::default()).unwrap();
        let a = sample_oracle_targets(&scene, 10, 77);
        let b = sample_oracle_targets(&scene, 10, 77);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        for &(x, y) in &a {
            assert!(scene.is_navigable_cell(x, y));
        }
        let c = sample_oracle_targets(&scene, 10, 78);
        assert_ne!(a, c);
    }

    #[test]
    fn empty_registry_falls_back_to_nearest_frontier() {
        // Hand-built map: free plus two unknown pockets forming frontiers at
        // different distances from the agent.
        let mut grid = OccupancyGrid::unknown(16, 16, (0.0, 0.0), 0.25);
        for y in 0..16 {
            for x in 0..16 {
                grid.set((x, y), CellState::Free);
            }
        }
        for y in 0..16 {
            grid.set((15, y), CellState::Unknown);
            grid.set((0, y), CellState::Unknown);
        }
        let frontiers = extract_frontiers(&grid);
        let registry = ResidualRegistry::default();
        let target = deux_sample_target(&frontiers, &registry, &grid, (3, 8)).unwrap();
        // Nearest frontier representative is on the left edge near the agent.
        assert_eq!(target.0, 1, "expected left-edge frontier, got {target:?}");
    }

    #[test]
    fn high_residual_near_frontier_dominates() {
        let mut grid = OccupancyGrid::unknown(16, 16, (0.0, 0.0), 0.25);
        for y in 0..16 {
            for x in 0..16 {
                grid.set((x, y), CellState::Free);
            }
        }
        for y in 0..16 {
            grid.set((15, y), CellState::Unknown);
            grid.set((0, y), CellState::Unknown);
        }
        let frontiers = extract_frontiers(&grid);
        let mut registry = ResidualRegistry::default();
        // Record colocated with the right-edge frontier.
        let (wx, wy) = grid.cell_center((14, 8));
        let pose = Pose {
            rotation: Pose::identity().rotation,
            translation: [wx, wy, 1.5],
        };
        registry.push(0, pose, 0.9).unwrap();
        let target = deux_sample_target(&frontiers, &registry, &grid, (2, 8)).unwrap();
        assert_eq!(target.0, 14, "expected right-edge frontier, got {target:?}");
    }

    #[test]
    fn target_scores_match_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..20 {
            let mut grid = OccupancyGrid::unknown(20, 20, (0.0, 0.0), 0.25);
            for y in 0..20 {
                for x in 0..20 {
                    grid.set((x, y), CellState::Free);
                }
            }
            // Random unknown stripes produce frontiers.
            for _ in 0..3 {
                let x = rng.gen_range(0..20);
                for y in 0..20 {
                    grid.set((x, y), CellState::Unknown);
                }
            }
            let frontiers = extract_frontiers(&grid);
            if frontiers.is_empty() {
                continue;
            }
            let mut registry = ResidualRegistry::default();
            for t in 0..rng.gen_range(1..30usize) {
                let pose = Pose {
                    rotation: Pose::identity().rotation,
                    translation: [rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0), 1.5],
                };
                registry.push(t, pose, rng.gen_range(0.0..0.999)).unwrap();
            }
            let got = deux_sample_target(&frontiers, &registry, &grid, (1, 1)).unwrap();
            // Brute force: evaluate the documented score for every
            // representative over the top-decile records.
            let reps = frontier_representatives(&frontiers);
            let top = registry.top_decile();
            let score = |rep: GridCell| -> f64 {
                let (cx, cy) = grid.cell_center(rep);
                top.iter()
                    .map(|r| {
                        let dx = cx - r.pose.translation[0];
                        let dy = cy - r.pose.translation[1];
                        r.delta / (1.0 + (dx * dx + dy * dy).sqrt())
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            let mut best = reps[0];
            for &rep in &reps[1..] {
                if score(rep) > score(best)
                    || (score(rep) == score(best) && (rep.1, rep.0) < (best.1, best.0))
                {
                    best = rep;
                }
            }
            assert_eq!(got, best);
        }
    }

    #[test]
    fn deux_records_one_residual_per_step_after_warmup() {
        let scene = generate_scene(18, &WorldParams::default()).unwrap();
        let policy = Policy::Deux(DeuxPolicy::new(SeedModel::GroundTruth));
        let steps = 30;
        let (_, actions, _, policy) = rollout(&scene, policy, steps, 3, 32);
        assert_eq!(actions.len(), steps);
        let registry = policy.registry().unwrap();
        assert_eq!(registry.records.len(), steps - 2);
        for w in registry.records.windows(2) {
            assert!(w[1].timestep > w[0].timestep);
        }
        for r in &registry.records {
            assert!((0.0..1.0).contains(&r.delta));
        }
    }

    #[test]
    fn ground_truth_seed_model_tracks_frontier_coverage() {
        // With the ground-truth stub the residual is minimal and flat, so
        // exploration should cover roughly as much as plain frontier-seeking.
        let scene = two_room_scene(25);
        let (_, _, grid_f, _) =
            rollout(&scene, Policy::Frontier(FrontierPolicy::default()), 300, 5, 40);
        let policy = Policy::Deux(DeuxPolicy::new(SeedModel::GroundTruth));
        let (_, _, grid_d, _) = rollout(&scene, policy, 300, 5, 40);
        let free_f = grid_f.cells.iter().filter(|&&c| c == CellState::Free).count();
        let free_d = grid_d.cells.iter().filter(|&&c| c == CellState::Free).count();
        let ratio = free_d as f64 / free_f as f64;
        assert!(
            (0.7..=1.4).contains(&ratio),
            "coverage ratio {ratio} (deux {free_d} vs frontier {free_f})"
        );
    }

    #[test]
    fn deux_requires_seed_model() {
        let scene = generate_scene(1, &empty_params(16, 16)).unwrap();
        assert!(matches!(
            Policy::new(PolicyKind::Deux, &scene, None, 0),
            Err(PolicyError::MissingSeedModel)
        ));
        let _ = TURN_STEPS;
    }
}
