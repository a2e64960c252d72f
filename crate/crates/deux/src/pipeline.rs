//! Episode orchestration, dataset serialization, the four-policy benchmark
//! harness, and trajectory plot emission.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::completion::{
    complete_depth, evaluate, fit_completor, sample_sparse_depth, CompletionError, CompletorParams,
    EvalMetrics, FitSample,
};
use crate::config::RunConfig;
use crate::geometry::{DepthMap, GeometryError, Image, Intrinsics, Pose};
use crate::losses::{LossError, SparseDepth};
use crate::mapping::{integrate, GridCell, OccupancyGrid, CellState};
use crate::policies::{
    reward, EpisodeBudget, Policy, PolicyError, PolicyKind, SeedModel, StepInput,
};
use crate::world::{generate_scene, render, step, Action, Scene, WorldError, WorldParams};

/// On-disk dataset layout version.
pub const DATASET_VERSION: u32 = 1;
/// Frames with fewer sparse points than this are dropped by verification.
pub const MIN_SPARSE_PER_FRAME: usize = 100;
/// Magic bytes of the binary depth format.
pub const DEPTH_MAGIC: &[u8; 8] = b"DEUXDPTH";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("policy stopped before producing any data")]
    EmptyEpisode,
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Completion(#[from] CompletionError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("configuration error: {0}")]
    Config(String),
}

/// SplitMix64-style deterministic seed derivation.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E3779B97F4A7C15);
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

const SALT_TRAIN_SCENE: u64 = 0x7452_41494e;
const SALT_TEST_SCENE: u64 = 0x7445_5354;
const SALT_TEST_POSE: u64 = 0x7450_4f53;
const SALT_EPISODE: u64 = 0x4550;
const SALT_SPARSE: u64 = 0x5350;
const SALT_POLICY: u64 = 0x504f;

/// One logged exploration step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub timestep: usize,
    pub action: Action,
    pub x: f64,
    pub y: f64,
    pub heading_steps: i32,
    /// Uncertainty residual recorded at this step (uncertainty-guided policy
    /// only, after warm-up).
    pub delta: Option<f64>,
    pub reward: Option<f64>,
    /// Active navigation target as (x, y) grid cell, when the policy has one.
    pub target: Option<GridCell>,
}

/// Everything collected during one episode. `frames`, `sparse`, and `log`
/// share indices; verification and frame retention may leave timestep gaps.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub scene_seed: u64,
    pub policy: PolicyKind,
    pub intrinsics: Intrinsics,
    pub frames: Vec<crate::world::Frame>,
    pub sparse: Vec<SparseDepth>,
    pub log: Vec<StepLog>,
    /// Map state at episode end (not serialized with datasets).
    pub final_grid: OccupancyGrid,
}

/// Which rendered frames an episode keeps in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameRetention {
    All,
    /// Keep consecutive (t-2, t-1, t) triplets anchored every `stride` steps.
    TripletStride(usize),
}

impl FrameRetention {
    fn keeps(&self, t: usize, budget: usize) -> bool {
        match *self {
            FrameRetention::All => true,
            FrameRetention::TripletStride(stride) => {
                let stride = stride.max(1);
                let mut anchor = 2;
                while anchor < budget {
                    if t + 2 >= anchor && t <= anchor {
                        return true;
                    }
                    anchor += stride;
                }
                false
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct CollectOptions {
    pub intrinsics: Intrinsics,
    pub sparse_count: usize,
    pub retention: FrameRetention,
}

impl Default for CollectOptions {
    fn default() -> Self {
        Self {
            intrinsics: Intrinsics::default_400(),
            sparse_count: crate::completion::DEFAULT_SPARSE_COUNT,
            retention: FrameRetention::All,
        }
    }
}

/// Runs one policy on one scene for up to `budget.max_steps` steps, logging
/// frames, sparse depth, the map, and per-step diagnostics. Frames whose
/// sparse sample ends up below [`MIN_SPARSE_PER_FRAME`] points are dropped
/// (data verification), as are frames excluded by the retention policy.
pub fn collect_episode(
    scene: &Scene,
    kind: PolicyKind,
    seed_model: Option<SeedModel>,
    budget: &EpisodeBudget,
    seed: u64,
    opts: &CollectOptions,
) -> Result<EpisodeRecord, PipelineError> {
    budget.validate()?;
    let mut policy = Policy::new(kind, scene, seed_model, mix_seed(seed, SALT_POLICY))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, SALT_EPISODE));
    let mut sparse_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, SALT_SPARSE));
    let mut state = scene.spawn;
    let mut grid = OccupancyGrid::unknown(scene.nx, scene.ny, (0.0, 0.0), scene.cell_size_m);
    let mut record = EpisodeRecord {
        scene_seed: scene.seed,
        policy: kind,
        intrinsics: opts.intrinsics,
        frames: Vec::new(),
        sparse: Vec::new(),
        log: Vec::new(),
        final_grid: grid.clone(),
    };
    for t in 0..budget.max_steps {
        let frame = render(scene, &scene.camera_pose(&state), &opts.intrinsics, t)?;
        integrate(&mut grid, &frame.pose, &frame.depth_gt, &opts.intrinsics, scene.floor_z_m());
        let sparse = sample_sparse_depth(&frame, opts.sparse_count, &mut sparse_rng)?;
        let input = StepInput { state: &state, grid: &grid, frame: &frame, sparse: &sparse };
        let action = policy.step(&input, &mut rng)?;
        if action == Action::Stop && t == 0 {
            return Err(PipelineError::EmptyEpisode);
        }
        let delta = policy.last_delta();
        let keep = sparse.len() >= MIN_SPARSE_PER_FRAME
            && opts.retention.keeps(t, budget.max_steps);
        if keep {
            record.log.push(StepLog {
                timestep: t,
                action,
                x: state.x,
                y: state.y,
                heading_steps: state.heading_steps,
                delta,
                reward: delta.map(reward),
                target: policy.last_target(),
            });
            record.frames.push(frame);
            record.sparse.push(sparse);
        }
        if action == Action::Stop {
            break;
        }
        state = step(scene, &state, action);
        if state.collided_last {
            crate::mapping::mark_collision(&mut grid, &state);
        }
    }
    if record.frames.is_empty() {
        return Err(PipelineError::EmptyEpisode);
    }
    record.final_grid = grid;
    Ok(record)
}

// --- Serialization ------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EpisodeEntry {
    pub dir: String,
    pub scene_seed: u64,
    pub policy: PolicyKind,
    pub intrinsics: Intrinsics,
    pub timesteps: Vec<usize>,
}

/// Dataset manifest: the episode list plus provenance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub version: u32,
    pub config_hash: u64,
    pub episodes: Vec<EpisodeEntry>,
}

/// Writes an image as binary PPM (P6, 8-bit).
pub fn write_ppm(path: &Path, image: &Image) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", image.width, image.height)?;
    let bytes: Vec<u8> = image
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Reads a binary PPM (P6, 8-bit) image.
pub fn read_ppm(path: &Path) -> Result<Image, PipelineError> {
    let buf = fs::read(path)?;
    let bad = |m: &str| PipelineError::Format(format!("{}: {m}", path.display()));
    // Header: "P6" <ws> width <ws> height <ws> maxval <single ws> data.
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < buf.len() {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(
            std::str::from_utf8(&buf[start..pos])
                .map_err(|_| bad("non-ascii header"))?
                .to_string(),
        );
    }
    if fields.len() < 4 || fields[0] != "P6" {
        return Err(bad("not a P6 image"));
    }
    if fields[3] != "255" {
        return Err(bad("unsupported max value"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    pos += 1; // single whitespace after maxval
    let need = width * height * 3;
    if buf.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    let data = buf[pos..pos + need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image::from_data(width, height, data)?)
}

fn write_depth_bin(path: &Path, depth: &DepthMap) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(DEPTH_MAGIC)?;
    w.write_all(&(depth.height as u32).to_le_bytes())?;
    w.write_all(&(depth.width as u32).to_le_bytes())?;
    for &d in &depth.data {
        w.write_all(&(d as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_depth_bin(path: &Path) -> Result<DepthMap, PipelineError> {
    let mut f = fs::File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    let bad = |m: &str| PipelineError::Format(format!("{}: {m}", path.display()));
    if buf.len() < 16 || &buf[..8] != DEPTH_MAGIC {
        return Err(bad("bad magic"));
    }
    let h = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    if buf.len() != 16 + h * w * 4 {
        return Err(bad("size mismatch"));
    }
    let data = buf[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(DepthMap::from_data(w, h, data)?)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(s: &str) -> Result<Option<f64>, PipelineError> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse()
            .map(Some)
            .map_err(|_| PipelineError::Format(format!("bad number '{s}'")))
    }
}

fn parse_action(s: &str) -> Result<Action, PipelineError> {
    match s {
        "forward" => Ok(Action::Forward),
        "turn_left" => Ok(Action::TurnLeft),
        "turn_right" => Ok(Action::TurnRight),
        "stop" => Ok(Action::Stop),
        other => Err(PipelineError::Format(format!("unknown action '{other}'"))),
    }
}

/// Writes episodes in the documented layout and returns the manifest.
pub fn write_dataset(
    records: &[EpisodeRecord],
    dir: &Path,
    config_hash: u64,
) -> Result<Dataset, PipelineError> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(records.len());
    for (k, rec) in records.iter().enumerate() {
        let ep_name = format!("ep_{k}");
        let ep_dir = dir.join(&ep_name);
        fs::create_dir_all(&ep_dir)?;
        let mut poses = String::from("timestep,p0,p1,p2,p3,p4,p5,p6,p7,p8,p9,p10,p11\n");
        let mut log = String::from(
            "timestep,action,x,y,heading,delta,reward,target_row,target_col\n",
        );
        for (i, frame) in rec.frames.iter().enumerate() {
            let t = rec.log[i].timestep;
            write_ppm(&ep_dir.join(format!("frame_{t:05}.ppm")), &frame.rgb)?;
            write_depth_bin(&ep_dir.join(format!("depth_{t:05}.bin")), &frame.depth_gt)?;
            let mut sp = String::from("row,col,depth_m\n");
            for &(r, c, d) in &rec.sparse[i].points {
                sp.push_str(&format!("{r},{c},{d}\n"));
            }
            fs::write(ep_dir.join(format!("sparse_{t:05}.csv")), sp)?;
            let row = frame.pose.to_row();
            poses.push_str(&t.to_string());
            for v in row {
                poses.push(',');
                poses.push_str(&v.to_string());
            }
            poses.push('\n');
            let l = &rec.log[i];
            let (tr, tc) = match l.target {
                Some((x, y)) => (y.to_string(), x.to_string()),
                None => (String::new(), String::new()),
            };
            log.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                l.timestep,
                l.action.label(),
                l.x,
                l.y,
                l.heading_steps,
                fmt_opt(l.delta),
                fmt_opt(l.reward),
                tr,
                tc
            ));
        }
        fs::write(ep_dir.join("poses.csv"), poses)?;
        fs::write(ep_dir.join("log.csv"), log)?;
        entries.push(EpisodeEntry {
            dir: ep_name,
            scene_seed: rec.scene_seed,
            policy: rec.policy,
            intrinsics: rec.intrinsics,
            timesteps: rec.log.iter().map(|l| l.timestep).collect(),
        });
    }
    let dataset = Dataset { version: DATASET_VERSION, config_hash, episodes: entries };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&dataset).unwrap())?;
    Ok(dataset)
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Dataset, Vec<EpisodeRecord>), PipelineError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)?;
    let dataset: Dataset = serde_json::from_str(&text)
        .map_err(|e| PipelineError::Format(format!("manifest: {e}")))?;
    if dataset.version != DATASET_VERSION {
        return Err(PipelineError::Format(format!(
            "unsupported dataset version {}",
            dataset.version
        )));
    }
    let mut records = Vec::with_capacity(dataset.episodes.len());
    for entry in &dataset.episodes {
        let ep_dir = dir.join(&entry.dir);
        let poses_text = fs::read_to_string(ep_dir.join("poses.csv"))?;
        let log_text = fs::read_to_string(ep_dir.join("log.csv"))?;
        let parse_err = |m: String| PipelineError::Format(m);
        let mut poses = Vec::new();
        for line in poses_text.lines().skip(1) {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 13 {
                return Err(parse_err(format!("bad pose row '{line}'")));
            }
            let t: usize =
                parts[0].parse().map_err(|_| parse_err(format!("bad timestep '{line}'")))?;
            let mut row = [0.0f64; 12];
            for (slot, p) in row.iter_mut().zip(&parts[1..]) {
                *slot = p.parse().map_err(|_| parse_err(format!("bad pose value '{p}'")))?;
            }
            poses.push((t, Pose::from_row(&row)?));
        }
        let mut log = Vec::new();
        for line in log_text.lines().skip(1) {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 9 {
                return Err(parse_err(format!("bad log row '{line}'")));
            }
            let target = if parts[7].is_empty() {
                None
            } else {
                let r: usize =
                    parts[7].parse().map_err(|_| parse_err(format!("bad target '{line}'")))?;
                let c: usize =
                    parts[8].parse().map_err(|_| parse_err(format!("bad target '{line}'")))?;
                Some((c, r))
            };
            log.push(StepLog {
                timestep: parts[0]
                    .parse()
                    .map_err(|_| parse_err(format!("bad timestep '{line}'")))?,
                action: parse_action(parts[1])?,
                x: parts[2].parse().map_err(|_| parse_err(format!("bad x '{line}'")))?,
                y: parts[3].parse().map_err(|_| parse_err(format!("bad y '{line}'")))?,
                heading_steps: parts[4]
                    .parse()
                    .map_err(|_| parse_err(format!("bad heading '{line}'")))?,
                delta: parse_opt(parts[5])?,
                reward: parse_opt(parts[6])?,
                target,
            });
        }
        if log.len() != entry.timesteps.len()
            || log.iter().map(|l| l.timestep).ne(entry.timesteps.iter().copied())
        {
            return Err(parse_err(format!("log/manifest mismatch in {}", entry.dir)));
        }
        let mut frames = Vec::new();
        let mut sparse = Vec::new();
        for (&t, &(pt, pose)) in entry.timesteps.iter().zip(poses.iter()) {
            if pt != t {
                return Err(parse_err(format!("pose/manifest mismatch in {}", entry.dir)));
            }
            let rgb = read_ppm(&ep_dir.join(format!("frame_{t:05}.ppm")))?;
            let depth_gt = read_depth_bin(&ep_dir.join(format!("depth_{t:05}.bin")))?;
            let sp_text = fs::read_to_string(ep_dir.join(format!("sparse_{t:05}.csv")))?;
            let mut points = Vec::new();
            for line in sp_text.lines().skip(1) {
                let parts: Vec<&str> = line.split(',').collect();
                if parts.len() != 3 {
                    return Err(parse_err(format!("bad sparse row '{line}'")));
                }
                points.push((
                    parts[0].parse().map_err(|_| parse_err(format!("bad row '{line}'")))?,
                    parts[1].parse().map_err(|_| parse_err(format!("bad col '{line}'")))?,
                    parts[2].parse().map_err(|_| parse_err(format!("bad depth '{line}'")))?,
                ));
            }
            sparse.push(SparseDepth::new(points, rgb.width, rgb.height)?);
            frames.push(crate::world::Frame {
                rgb,
                depth_gt,
                pose,
                intrinsics: entry.intrinsics,
                timestep: t,
            });
        }
        records.push(EpisodeRecord {
            scene_seed: entry.scene_seed,
            policy: entry.policy,
            intrinsics: entry.intrinsics,
            frames,
            sparse,
            log,
            final_grid: OccupancyGrid::unknown(1, 1, (0.0, 0.0), 1.0),
        });
    }
    Ok((dataset, records))
}

// --- Test set -----------------------------------------------------------

/// Three temporally consecutive frames; the last one is the completion
/// target and carries the ground truth.
#[derive(Debug, Clone)]
pub struct TestTriplet {
    pub scene_seed: u64,
    pub frames: [crate::world::Frame; 3],
}

/// Deterministic scripted sweep action: forward bursts with periodic left
/// turns, turning away from walls on collision.
fn scripted_action(t: usize, state: &crate::world::AgentState) -> Action {
    if state.collided_last {
        Action::TurnRight
    } else if t % 7 < 4 {
        Action::Forward
    } else {
        Action::TurnLeft
    }
}

/// Derives the held-out test scene seeds for a master seed.
pub fn test_scene_seeds(seed: u64, n_scenes: usize) -> Vec<u64> {
    (0..n_scenes as u64).map(|i| mix_seed(mix_seed(seed, SALT_TEST_SCENE), i)).collect()
}

/// Derives the training scene seeds for a master seed.
pub fn train_scene_seeds(seed: u64, n_scenes: usize) -> Vec<u64> {
    (0..n_scenes as u64).map(|i| mix_seed(mix_seed(seed, SALT_TRAIN_SCENE), i)).collect()
}

/// Builds the shared evaluation set: short scripted frame triplets starting
/// from poses scattered deterministically across each held-out scene, so the
/// evaluation distribution covers the whole scene rather than the spawn area.
pub fn build_test_set(
    world: &WorldParams,
    n_scenes: usize,
    triplets_per_scene: usize,
    seed: u64,
    k: &Intrinsics,
) -> Result<Vec<TestTriplet>, PipelineError> {
    let mut out = Vec::new();
    for scene_seed in test_scene_seeds(seed, n_scenes) {
        let scene = generate_scene(scene_seed, world)?;
        let cells = scene.navigable_cells();
        if cells.is_empty() {
            return Err(PipelineError::Config(format!(
                "test scene {scene_seed} has no navigable cells"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(scene_seed, SALT_TEST_POSE));
        for ti in 0..triplets_per_scene {
            let (cx, cy) = cells[rng.gen_range(0..cells.len())];
            let (x, y) = scene.cell_center(cx, cy);
            let mut state = crate::world::AgentState {
                x,
                y,
                heading_steps: rng.gen_range(0..crate::world::TURN_STEPS),
                collided_last: false,
            };
            let mut frames = Vec::with_capacity(3);
            for t in 0..3usize {
                frames.push(render(&scene, &scene.camera_pose(&state), k, 3 * ti + t)?);
                state = step(&scene, &state, scripted_action(t, &state));
            }
            out.push(TestTriplet {
                scene_seed,
                frames: [frames[0].clone(), frames[1].clone(), frames[2].clone()],
            });
        }
    }
    Ok(out)
}

/// Evaluates fixed completor parameters on the test set: per-target sparse
/// sampling (deterministic per triplet, independent of training), completion,
/// and metric averaging over targets.
pub fn evaluate_on_test_set(
    params: &CompletorParams,
    test: &[TestTriplet],
    sparse_count: usize,
    seed: u64,
) -> Result<EvalMetrics, PipelineError> {
    if test.is_empty() {
        return Err(PipelineError::Config("empty test set".into()));
    }
    let per: Vec<EvalMetrics> = test
        .par_iter()
        .enumerate()
        .map(|(i, triplet)| -> Result<EvalMetrics, PipelineError> {
            let target = &triplet.frames[2];
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
            let sparse = sample_sparse_depth(target, sparse_count, &mut rng)?;
            let pred = complete_depth(&target.rgb, &sparse, params)?;
            Ok(evaluate(&pred, &target.depth_gt)?)
        })
        .collect::<Result<_, _>>()?;
    let n = per.len() as f64;
    Ok(EvalMetrics {
        mae_mm: per.iter().map(|m| m.mae_mm).sum::<f64>() / n,
        rmse_mm: per.iter().map(|m| m.rmse_mm).sum::<f64>() / n,
        imae_per_km: per.iter().map(|m| m.imae_per_km).sum::<f64>() / n,
        irmse_per_km: per.iter().map(|m| m.irmse_per_km).sum::<f64>() / n,
    })
}

// --- Benchmark ----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportRow {
    pub policy: PolicyKind,
    pub seed: u64,
    pub metrics: EvalMetrics,
    pub fitted: CompletorParams,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PolicyAggregate {
    pub policy: PolicyKind,
    pub mean: EvalMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Improvement {
    pub baseline: PolicyKind,
    pub mae_improvement_pct: f64,
}

/// Benchmark output: per (policy, seed) metrics on the shared test set, per
/// policy aggregates, and relative improvements of the uncertainty-guided
/// policy over each baseline.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchmarkReport {
    pub config_hash: u64,
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<PolicyAggregate>,
    pub improvements: Vec<Improvement>,
}

/// Consecutive-triplet fitting samples of an episode set, evenly subsampled
/// down to `max_samples` (0 keeps everything).
pub fn fit_samples_of<'a>(
    episodes: &'a [EpisodeRecord],
    max_samples: usize,
) -> Vec<FitSample<'a>> {
    let mut all = Vec::new();
    for ep in episodes {
        for i in 2..ep.frames.len() {
            let t = ep.log[i].timestep;
            if ep.log[i - 1].timestep + 1 == t && ep.log[i - 2].timestep + 2 == t {
                all.push(FitSample {
                    target: &ep.frames[i],
                    sources: vec![&ep.frames[i - 1], &ep.frames[i - 2]],
                    sparse: &ep.sparse[i],
                });
            }
        }
    }
    if all.len() > max_samples && max_samples > 0 {
        let step = all.len() as f64 / max_samples as f64;
        let picked: Vec<usize> = (0..max_samples).map(|i| (i as f64 * step) as usize).collect();
        let mut iter = picked.into_iter().collect::<BTreeSet<_>>().into_iter();
        let mut keep_next = iter.next();
        let mut idx = 0usize;
        all.retain(|_| {
            let keep = keep_next == Some(idx);
            if keep {
                keep_next = iter.next();
            }
            idx += 1;
            keep
        });
    }
    all
}

/// Runs the full comparison: for every master seed and policy, collect
/// episodes, fit the completor on them, and score it on the shared test set.
/// Random-policy data is processed first so its fitted completor can seed
/// the uncertainty-guided policy. Deterministic for any thread count.
pub fn run_benchmark(
    config: &RunConfig,
    external_seed_model: Option<SeedModel>,
) -> Result<BenchmarkReport, PipelineError> {
    config.validate().map_err(PipelineError::Config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs.max(1))
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    pool.install(|| run_benchmark_inner(config, external_seed_model))
}

fn run_benchmark_inner(
    config: &RunConfig,
    external_seed_model: Option<SeedModel>,
) -> Result<BenchmarkReport, PipelineError> {
    let k = Intrinsics::default_square(config.frame_size);
    let test_seed = mix_seed(config.seeds.first().copied().unwrap_or(0), SALT_TEST_SCENE);
    let test = build_test_set(
        &config.world,
        config.test_scenes,
        config.test_triplets_per_scene,
        test_seed,
        &k,
    )?;
    // Test-set isolation: no held-out scene seed may collide with training.
    let test_seeds: BTreeSet<u64> =
        test_scene_seeds(test_seed, config.test_scenes).into_iter().collect();
    for &s in &config.seeds {
        for ts in train_scene_seeds(s, config.train_scenes) {
            if test_seeds.contains(&ts) {
                return Err(PipelineError::Config(format!(
                    "training scene seed {ts} collides with the test set"
                )));
            }
        }
    }
    // Random first: its fitted completor seeds the uncertainty-guided policy.
    let mut policies: Vec<PolicyKind> = Vec::new();
    if config.policies.contains(&PolicyKind::Random) {
        policies.push(PolicyKind::Random);
    }
    for &p in &config.policies {
        if p != PolicyKind::Random && !policies.contains(&p) {
            policies.push(p);
        }
    }
    if policies.contains(&PolicyKind::Deux)
        && !policies.contains(&PolicyKind::Random)
        && external_seed_model.is_none()
    {
        return Err(PipelineError::Policy(PolicyError::MissingSeedModel));
    }
    let mut rows = Vec::new();
    for &master in &config.seeds {
        let scenes: Vec<Scene> = train_scene_seeds(master, config.train_scenes)
            .into_iter()
            .map(|s| generate_scene(s, &config.world))
            .collect::<Result<_, _>>()?;
        let mut seed_model = external_seed_model.clone();
        for &policy in &policies {
            let model_for_policy = match policy {
                PolicyKind::Deux => {
                    Some(seed_model.clone().ok_or(PolicyError::MissingSeedModel)?)
                }
                _ => None,
            };
            let opts = CollectOptions {
                intrinsics: k,
                sparse_count: config.sparse_count,
                retention: FrameRetention::TripletStride(config.fit_stride),
            };
            let policy_id = PolicyKind::all().iter().position(|&p| p == policy).unwrap();
            let episodes: Vec<EpisodeRecord> = scenes
                .par_iter()
                .enumerate()
                .map(|(i, scene)| {
                    collect_episode(
                        scene,
                        policy,
                        model_for_policy.clone(),
                        &config.budget,
                        mix_seed(master, mix_seed(SALT_EPISODE, (policy_id * 1000 + i) as u64)),
                        &opts,
                    )
                })
                .collect::<Result<_, _>>()?;
            let samples = fit_samples_of(&episodes, config.fit_samples_max);
            let mut init = config.completor_init.clone();
            init.weights = config.weights.clone();
            let fitted = fit_completor(&samples, &init)?;
            if policy == PolicyKind::Random && external_seed_model.is_none() {
                seed_model = Some(SeedModel::Completor(fitted.clone()));
            }
            let metrics = evaluate_on_test_set(
                &fitted,
                &test,
                config.sparse_count,
                mix_seed(test_seed, SALT_SPARSE),
            )?;
            rows.push(ReportRow { policy, seed: master, metrics, fitted });
        }
    }
    let mut aggregates = Vec::new();
    for &policy in &policies {
        let sel: Vec<&ReportRow> = rows.iter().filter(|r| r.policy == policy).collect();
        let n = sel.len() as f64;
        aggregates.push(PolicyAggregate {
            policy,
            mean: EvalMetrics {
                mae_mm: sel.iter().map(|r| r.metrics.mae_mm).sum::<f64>() / n,
                rmse_mm: sel.iter().map(|r| r.metrics.rmse_mm).sum::<f64>() / n,
                imae_per_km: sel.iter().map(|r| r.metrics.imae_per_km).sum::<f64>() / n,
                irmse_per_km: sel.iter().map(|r| r.metrics.irmse_per_km).sum::<f64>() / n,
            },
        });
    }
    let mut improvements = Vec::new();
    if let Some(deux) = aggregates.iter().find(|a| a.policy == PolicyKind::Deux) {
        for agg in &aggregates {
            if agg.policy == PolicyKind::Deux {
                continue;
            }
            improvements.push(Improvement {
                baseline: agg.policy,
                mae_improvement_pct: (agg.mean.mae_mm - deux.mean.mae_mm) / agg.mean.mae_mm
                    * 100.0,
            });
        }
    }
    Ok(BenchmarkReport { config_hash: config.hash(), rows, aggregates, improvements })
}

/// Writes `report.csv` (per-row metrics plus per-policy means) and
/// `report.json` (the full report) into `dir`.
pub fn write_report(report: &BenchmarkReport, dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from("policy,seed,mae_mm,rmse_mm,imae_per_km,irmse_per_km\n");
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.policy.label(),
            r.seed,
            r.metrics.mae_mm,
            r.metrics.rmse_mm,
            r.metrics.imae_per_km,
            r.metrics.irmse_per_km
        ));
    }
    for a in &report.aggregates {
        csv.push_str(&format!(
            "{},mean,{},{},{},{}\n",
            a.policy.label(),
            a.mean.mae_mm,
            a.mean.rmse_mm,
            a.mean.imae_per_km,
            a.mean.irmse_per_km
        ));
    }
    fs::write(dir.join("report.csv"), csv)?;
    fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(report).unwrap(),
    )?;
    Ok(())
}

// --- Plot ---------------------------------------------------------------

/// Renders the episode trajectory over the final map: black = unexplored,
/// green = explored free, white = occupied; the trajectory fades from blue
/// (start) to red (end). Returns the image path.
pub fn render_trajectory_plot(
    episode: &EpisodeRecord,
    grid: &OccupancyGrid,
    path: &Path,
) -> Result<PathBuf, PipelineError> {
    let (w, h) = (grid.width, grid.height);
    let mut img = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let rgb = match grid.get((x, y)) {
                CellState::Unknown => [0.0, 0.0, 0.0],
                CellState::Free => [0.0, 180.0 / 255.0, 0.0],
                CellState::Occupied => [1.0, 1.0, 1.0],
            };
            // Row 0 of the image is the top: highest y.
            img.set_pixel(h - 1 - y, x, rgb);
        }
    }
    let n = episode.log.len();
    for (i, l) in episode.log.iter().enumerate() {
        if let Some((x, y)) = grid.world_to_cell(l.x, l.y) {
            let f = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            img.set_pixel(h - 1 - y, x, [f, 0.0, 1.0 - f]);
        }
    }
    write_ppm(path, &img)?;
    Ok(path.to_path_buf())
}
