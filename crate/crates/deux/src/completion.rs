//! Sparse depth sampling, a parametric classical depth completor, and
//! depth-completion evaluation metrics.
//!
//! The completor interpolates sparse metric depth with inverse-distance
//! weighting and refines the result with edge-aware Jacobi smoothing while
//! holding the sparse points fixed. Its four hyper-parameters are fitted by
//! grid search against the unsupervised objective in [`crate::losses`].

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{DepthMap, Image, PixelCoord, DEPTH_MAX_M, DEPTH_MIN_M};
use crate::losses::{total_loss, LossContext, LossError, LossWeights, SparseDepth};
use crate::world::Frame;

/// Harris detector constant in `R = det(M) - k * trace(M)^2`.
pub const HARRIS_K: f64 = 0.04;
/// Responses at or below this threshold are not corners.
pub const HARRIS_MIN_RESPONSE: f64 = 1e-10;
/// Default number of sparse depth points sampled per frame.
pub const DEFAULT_SPARSE_COUNT: usize = 1500;

#[derive(Debug, Error)]
pub enum CompletionError {
    #[error("sparse depth set is empty")]
    EmptySparse,
    #[error("image {0}x{1} is smaller than 7x7")]
    ImageTooSmall(usize, usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-positive depth {0} in metric evaluation")]
    NonPositiveDepth(f64),
    #[error("invalid completor parameters: {0}")]
    InvalidParams(String),
    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Hyper-parameters of the classical completor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletorParams {
    /// Nearest sparse points used by the interpolation stage.
    pub idw_neighbors: usize,
    /// Inverse-distance weighting exponent.
    pub idw_power: f64,
    /// Edge-aware Jacobi refinement iterations.
    pub refine_iters: usize,
    /// Refinement step strength in `[0, 1]`.
    pub edge_weight: f64,
    pub weights: LossWeights,
}

impl Default for CompletorParams {
    fn default() -> Self {
        Self {
            idw_neighbors: 4,
            idw_power: 2.0,
            refine_iters: 50,
            edge_weight: 0.5,
            weights: LossWeights::default(),
        }
    }
}

impl CompletorParams {
    pub fn validate(&self) -> Result<(), CompletionError> {
        if self.idw_neighbors < 1 {
            return Err(CompletionError::InvalidParams("idw_neighbors must be >= 1".into()));
        }
        if !(self.idw_power > 0.0) {
            return Err(CompletionError::InvalidParams("idw_power must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.edge_weight) {
            return Err(CompletionError::InvalidParams("edge_weight must be in [0, 1]".into()));
        }
        self.weights.validate()?;
        Ok(())
    }
}

/// Depth-completion accuracy metrics: depth errors in millimetres, inverse
/// depth errors in 1/km.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mae_mm: f64,
    pub rmse_mm: f64,
    pub imae_per_km: f64,
    pub irmse_per_km: f64,
}

fn grayscale(image: &Image) -> Vec<f64> {
    let npix = image.width * image.height;
    (0..npix)
        .map(|i| (image.data[i * 3] + image.data[i * 3 + 1] + image.data[i * 3 + 2]) / 3.0)
        .collect()
}

/// Harris response map: Sobel gradients, 3x3 Gaussian-weighted structure
/// tensor, `R = det - k * trace^2`. Border pixels carry response 0.
fn harris_response(image: &Image) -> Vec<f64> {
    let (w, h) = (image.width, image.height);
    let gray = grayscale(image);
    let at = |r: usize, c: usize| gray[r * w + c];
    let mut ix = vec![0.0; w * h];
    let mut iy = vec![0.0; w * h];
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            ix[r * w + c] = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            iy[r * w + c] = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
        }
    }
    const G: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];
    let mut resp = vec![0.0; w * h];
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
            for dr in 0..3 {
                for dc in 0..3 {
                    let i = (r + dr - 1) * w + (c + dc - 1);
                    let g = G[dr][dc] / 16.0;
                    sxx += g * ix[i] * ix[i];
                    sxy += g * ix[i] * iy[i];
                    syy += g * iy[i] * iy[i];
                }
            }
            let det = sxx * syy - sxy * sxy;
            let tr = sxx + syy;
            resp[r * w + c] = det - HARRIS_K * tr * tr;
        }
    }
    resp
}

/// Detects up to `target_count` corner pixels, strongest first, with a 3x3
/// non-maximum suppression and a deterministic `(row, col)` tie-break.
///
/// Returns fewer points when the image does not have enough corners; a
/// constant image yields none.
pub fn harris_corners(
    image: &Image,
    target_count: usize,
) -> Result<Vec<PixelCoord>, CompletionError> {
    let (w, h) = (image.width, image.height);
    if w < 7 || h < 7 {
        return Err(CompletionError::ImageTooSmall(w, h));
    }
    let resp = harris_response(image);
    let mut maxima: Vec<(f64, usize, usize)> = Vec::new();
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let v = resp[r * w + c];
            if v <= HARRIS_MIN_RESPONSE {
                continue;
            }
            let mut is_max = true;
            'nms: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let nr = (r as i64 + dr) as usize;
                    let nc = (c as i64 + dc) as usize;
                    if resp[nr * w + nc] > v {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if is_max {
                maxima.push((v, r, c));
            }
        }
    }
    maxima.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).unwrap().then_with(|| (a.1, a.2).cmp(&(b.1, b.2)))
    });
    maxima.truncate(target_count);
    Ok(maxima.into_iter().map(|(_, r, c)| PixelCoord::new(c as f64, r as f64)).collect())
}

/// Samples sparse metric depth at Harris corner locations of the frame's
/// image, padding with uniform-random distinct pixels from `rng` when fewer
/// corners exist.
pub fn sample_sparse_depth<R: Rng>(
    frame: &Frame,
    target_count: usize,
    rng: &mut R,
) -> Result<SparseDepth, CompletionError> {
    let (w, h) = (frame.rgb.width, frame.rgb.height);
    let corners = harris_corners(&frame.rgb, target_count)?;
    let mut seen = vec![false; w * h];
    let mut points = Vec::with_capacity(target_count.min(w * h));
    for p in corners {
        let (r, c) = (p.v as usize, p.u as usize);
        if !seen[r * w + c] {
            seen[r * w + c] = true;
            points.push((r, c, frame.depth_gt.get(r, c)));
        }
    }
    let want = target_count.min(w * h);
    while points.len() < want {
        let r = rng.gen_range(0..h);
        let c = rng.gen_range(0..w);
        if !seen[r * w + c] {
            seen[r * w + c] = true;
            points.push((r, c, frame.depth_gt.get(r, c)));
        }
    }
    Ok(SparseDepth::new(points, w, h)?)
}

/// Bucketed nearest-neighbour index over sparse points for IDW queries.
struct PointIndex {
    cell: usize,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<usize>>,
    points: Vec<(f64, f64, f64)>,
}

impl PointIndex {
    fn build(z: &SparseDepth) -> Self {
        let n = z.len().max(1);
        let area = (z.width * z.height) as f64;
        let cell = ((area / n as f64).sqrt().ceil() as usize).max(1);
        let cols = z.width.div_ceil(cell);
        let rows = z.height.div_ceil(cell);
        let mut buckets = vec![Vec::new(); cols * rows];
        let mut points = Vec::with_capacity(z.len());
        for (i, &(r, c, d)) in z.points.iter().enumerate() {
            buckets[(r / cell) * cols + c / cell].push(i);
            points.push((r as f64, c as f64, d));
        }
        Self { cell, cols, rows, buckets, points }
    }

    /// The `k` nearest points to pixel `(r, c)`, ordered by squared distance
    /// with point-index tie-break.
    fn nearest(&self, r: usize, c: usize, k: usize, out: &mut Vec<(f64, usize)>) {
        out.clear();
        let br = r / self.cell;
        let bc = c / self.cell;
        let max_ring = self.cols.max(self.rows);
        let mut ring = 0usize;
        loop {
            let mut any_cell = false;
            for gr in br.saturating_sub(ring)..=(br + ring).min(self.rows - 1) {
                for gc in bc.saturating_sub(ring)..=(bc + ring).min(self.cols - 1) {
                    let on_ring = gr + ring == br
                        || gr == br + ring
                        || gc + ring == bc
                        || gc == bc + ring;
                    if !on_ring {
                        continue;
                    }
                    any_cell = true;
                    for &i in &self.buckets[gr * self.cols + gc] {
                        let (pr, pc, _) = self.points[i];
                        let dr = pr - r as f64;
                        let dc = pc - c as f64;
                        out.push((dr * dr + dc * dc, i));
                    }
                }
            }
            // A point outside the searched rings is at least this far away.
            let lower_bound = (ring.max(1) - 1) as f64 * self.cell as f64;
            if out.len() >= k {
                out.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let kth = out[k - 1].0.sqrt();
                if kth <= lower_bound || ring > max_ring {
                    out.truncate(k);
                    return;
                }
            } else if ring > max_ring && !any_cell {
                out.sort_by(|a, b| a.partial_cmp(b).unwrap());
                return;
            }
            ring += 1;
        }
    }
}

/// Stage 1: inverse-distance-weighted interpolation from the `k` nearest
/// sparse points. A pixel that coincides with a sparse point copies it.
fn idw_interpolate(z: &SparseDepth, k: usize, power: f64) -> DepthMap {
    let index = PointIndex::build(z);
    let mut depth = DepthMap::new(z.width, z.height, DEPTH_MIN_M);
    let mut scratch = Vec::new();
    for r in 0..z.height {
        for c in 0..z.width {
            index.nearest(r, c, k, &mut scratch);
            let value = if scratch.is_empty() {
                DEPTH_MIN_M
            } else if scratch[0].0 == 0.0 {
                index.points[scratch[0].1].2
            } else {
                let mut num = 0.0;
                let mut den = 0.0;
                for &(d2, i) in &scratch {
                    let w = 1.0 / d2.sqrt().powf(power);
                    num += w * index.points[i].2;
                    den += w;
                }
                num / den
            };
            depth.set(r, c, value.clamp(DEPTH_MIN_M, DEPTH_MAX_M));
        }
    }
    depth
}

/// Edge weights between horizontal / vertical pixel neighbours:
/// `exp(-channel-mean |I(p) - I(q)|)`.
fn neighbor_weights(image: &Image) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (image.width, image.height);
    let diff = |i: usize, j: usize| -> f64 {
        let mut e = 0.0;
        for c in 0..3 {
            e += (image.data[i * 3 + c] - image.data[j * 3 + c]).abs();
        }
        (-e / 3.0).exp()
    };
    let mut horiz = vec![0.0; w * h];
    let mut vert = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                horiz[i] = diff(i, i + 1);
            }
            if r + 1 < h {
                vert[i] = diff(i, i + w);
            }
        }
    }
    (horiz, vert)
}

/// Runs stage 1 plus up to `max(snapshots)` refinement iterations, returning
/// one depth map per requested snapshot iteration count (ascending order).
pub fn complete_depth_stages(
    image: &Image,
    z: &SparseDepth,
    params: &CompletorParams,
    snapshots: &[usize],
) -> Result<Vec<DepthMap>, CompletionError> {
    params.validate()?;
    if z.is_empty() {
        return Err(CompletionError::EmptySparse);
    }
    if z.width != image.width || z.height != image.height {
        return Err(CompletionError::Shape(format!(
            "sparse {}x{} vs image {}x{}",
            z.width, z.height, image.width, image.height
        )));
    }
    let (w, h) = (image.width, image.height);
    let mut depth = idw_interpolate(z, params.idw_neighbors, params.idw_power);
    let clamp_sparse = |d: &mut DepthMap| {
        for &(r, c, v) in &z.points {
            d.set(r, c, v);
        }
    };
    clamp_sparse(&mut depth);
    let (horiz, vert) = neighbor_weights(image);
    let max_iter = snapshots.iter().copied().max().unwrap_or(0);
    let mut out = Vec::with_capacity(snapshots.len());
    let mut next = vec![0.0; w * h];
    for iter in 0..=max_iter {
        if snapshots.contains(&iter) {
            out.push(depth.clone());
        }
        if iter == max_iter {
            break;
        }
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                let mut wsum = 0.0;
                let mut dsum = 0.0;
                if c + 1 < w {
                    wsum += horiz[i];
                    dsum += horiz[i] * depth.data[i + 1];
                }
                if c > 0 {
                    wsum += horiz[i - 1];
                    dsum += horiz[i - 1] * depth.data[i - 1];
                }
                if r + 1 < h {
                    wsum += vert[i];
                    dsum += vert[i] * depth.data[i + w];
                }
                if r > 0 {
                    wsum += vert[i - w];
                    dsum += vert[i - w] * depth.data[i - w];
                }
                let d = depth.data[i];
                let target = if wsum > 0.0 { dsum / wsum } else { d };
                next[i] = (d + params.edge_weight * (target - d)).clamp(DEPTH_MIN_M, DEPTH_MAX_M);
            }
        }
        std::mem::swap(&mut depth.data, &mut next);
        clamp_sparse(&mut depth);
    }
    Ok(out)
}

/// Densifies sparse depth: IDW interpolation followed by edge-aware Jacobi
/// refinement with the sparse points held fixed. Output is clipped to the
/// valid depth range and equals `z` exactly at the sparse coordinates.
pub fn complete_depth(
    image: &Image,
    z: &SparseDepth,
    params: &CompletorParams,
) -> Result<DepthMap, CompletionError> {
    let mut stages = complete_depth_stages(image, z, params, &[params.refine_iters])?;
    Ok(stages.pop().unwrap())
}

/// One fitting sample: a target frame, its source frames for reprojection,
/// and the target's sparse depth.
pub struct FitSample<'a> {
    pub target: &'a Frame,
    pub sources: Vec<&'a Frame>,
    pub sparse: &'a SparseDepth,
}

const GRID_POWER: [f64; 3] = [1.0, 2.0, 3.0];
const GRID_REFINE: [usize; 4] = [0, 25, 50, 100];
const GRID_EDGE: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
const GRID_NEIGHBORS: [usize; 3] = [1, 4, 8];

fn grid_candidates(weights: &LossWeights) -> Vec<CompletorParams> {
    let mut grid = Vec::with_capacity(144);
    for &idw_power in &GRID_POWER {
        for &refine_iters in &GRID_REFINE {
            for &edge_weight in &GRID_EDGE {
                for &idw_neighbors in &GRID_NEIGHBORS {
                    grid.push(CompletorParams {
                        idw_neighbors,
                        idw_power,
                        refine_iters,
                        edge_weight,
                        weights: weights.clone(),
                    });
                }
            }
        }
    }
    grid
}

/// Mean objective value of fixed `params` over the samples.
pub fn fit_objective(
    samples: &[FitSample<'_>],
    params: &CompletorParams,
) -> Result<f64, CompletionError> {
    if samples.is_empty() {
        return Err(CompletionError::DatasetTooSmall("no fitting samples".into()));
    }
    let mut sum = 0.0;
    for s in samples {
        let pred = complete_depth(&s.target.rgb, s.sparse, params)?;
        let ctx = LossContext {
            target: &s.target.rgb,
            target_pose: &s.target.pose,
            sources: s.sources.iter().map(|f| (&f.rgb, &f.pose)).collect(),
            intrinsics: &s.target.intrinsics,
        };
        sum += total_loss(&ctx, &pred, s.sparse, &params.weights)?.l_d;
    }
    Ok(sum / samples.len() as f64)
}

/// Per-sample objective for every grid candidate, sharing the interpolation
/// and refinement work across candidates that only differ in iteration count.
fn sample_grid_losses(s: &FitSample<'_>, weights: &LossWeights) -> Result<Vec<f64>, CompletionError> {
    let ctx = LossContext {
        target: &s.target.rgb,
        target_pose: &s.target.pose,
        sources: s.sources.iter().map(|f| (&f.rgb, &f.pose)).collect(),
        intrinsics: &s.target.intrinsics,
    };
    let mut losses = vec![0.0; 144];
    for (pi, &power) in GRID_POWER.iter().enumerate() {
        for (ni, &neighbors) in GRID_NEIGHBORS.iter().enumerate() {
            for (ei, &edge) in GRID_EDGE.iter().enumerate() {
                let params = CompletorParams {
                    idw_neighbors: neighbors,
                    idw_power: power,
                    refine_iters: *GRID_REFINE.last().unwrap(),
                    edge_weight: edge,
                    weights: weights.clone(),
                };
                let stages = complete_depth_stages(&s.target.rgb, s.sparse, &params, &GRID_REFINE)?;
                for (ri, pred) in stages.iter().enumerate() {
                    let idx = ((pi * GRID_REFINE.len() + ri) * GRID_EDGE.len() + ei)
                        * GRID_NEIGHBORS.len()
                        + ni;
                    losses[idx] = total_loss(&ctx, pred, s.sparse, weights)?.l_d;
                }
            }
        }
    }
    Ok(losses)
}

/// Grid search over the completor hyper-parameters minimizing the mean
/// unsupervised objective. Deterministic: ties resolve to the earliest grid
/// entry; `init` is also evaluated and wins only on strict improvement.
pub fn fit_completor(
    samples: &[FitSample<'_>],
    init: &CompletorParams,
) -> Result<CompletorParams, CompletionError> {
    init.validate()?;
    if samples.is_empty() {
        return Err(CompletionError::DatasetTooSmall("no fitting samples".into()));
    }
    let per_sample: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| sample_grid_losses(s, &init.weights))
        .collect::<Result<_, _>>()?;
    let mut totals = vec![0.0; 144];
    for losses in &per_sample {
        for (t, l) in totals.iter_mut().zip(losses.iter()) {
            *t += l;
        }
    }
    let grid = grid_candidates(&init.weights);
    let mut best_idx = 0;
    for (i, &t) in totals.iter().enumerate() {
        if t < totals[best_idx] {
            best_idx = i;
        }
    }
    let best_mean = totals[best_idx] / samples.len() as f64;
    let init_mean = fit_objective(samples, init)?;
    if init_mean < best_mean {
        Ok(init.clone())
    } else {
        Ok(grid[best_idx].clone())
    }
}

/// Depth-completion metrics against dense ground truth. Depth errors are in
/// millimetres; inverse-depth errors in 1/km.
pub fn evaluate(pred: &DepthMap, gt: &DepthMap) -> Result<EvalMetrics, CompletionError> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(CompletionError::Shape(format!(
            "pred {}x{} vs gt {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let n = pred.data.len() as f64;
    let (mut ae, mut se, mut iae, mut ise) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        if p <= 0.0 {
            return Err(CompletionError::NonPositiveDepth(p));
        }
        if g <= 0.0 {
            return Err(CompletionError::NonPositiveDepth(g));
        }
        let e = p - g;
        ae += e.abs();
        se += e * e;
        let ie = 1.0 / p - 1.0 / g;
        iae += ie.abs();
        ise += ie * ie;
    }
    Ok(EvalMetrics {
        mae_mm: ae / n * 1000.0,
        rmse_mm: (se / n).sqrt() * 1000.0,
        imae_per_km: iae / n * 1000.0,
        irmse_per_km: (ise / n).sqrt() * 1000.0,
    })
}
