//! The unsupervised depth-completion objective, its analytic gradient with
//! respect to the depth map, and the photometric uncertainty residual.
//!
//! The objective combines color consistency (L1), structural consistency
//! (1 - SSIM), an edge-aware smoothness regularizer, and a sparse-depth
//! anchoring term that grounds predictions to metric scale. The uncertainty
//! residual maps mean absolute reconstruction error to a scalar in [0, 1).

use crate::geometry::{
    warp_reconstruct, warp_reconstruct_with_grad, DepthMap, GeometryError, Image, Intrinsics, Pose,
    DEPTH_MAX_M, DEPTH_MIN_M,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss undefined: no valid pixels under the mask")]
    EmptyMask,
    #[error("empty reconstruction list")]
    EmptyReconList,
    #[error("sparse depth set is empty")]
    EmptySparse,
    #[error("residual undefined: no valid reprojected pixels")]
    ResidualUndefined,
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Weights of the loss terms. All must be non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_co: f64,
    pub lambda_st: f64,
    pub lambda_sz: f64,
    pub lambda_sm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_co: 0.15, lambda_st: 0.85, lambda_sz: 1.0, lambda_sm: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("lambda_co", self.lambda_co),
            ("lambda_st", self.lambda_st),
            ("lambda_sz", self.lambda_sz),
            ("lambda_sm", self.lambda_sm),
        ] {
            if !(v >= 0.0) {
                return Err(LossError::Shape(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Sparse metric depth at a small set of pixel locations.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepth {
    /// (row, col, depth_m) records, unique coordinates.
    pub points: Vec<(usize, usize, f64)>,
    pub width: usize,
    pub height: usize,
}

impl SparseDepth {
    pub fn new(
        points: Vec<(usize, usize, f64)>,
        width: usize,
        height: usize,
    ) -> Result<Self, LossError> {
        let mut seen = std::collections::HashSet::new();
        for &(r, c, d) in &points {
            if r >= height || c >= width {
                return Err(LossError::Shape(format!(
                    "sparse point ({r}, {c}) outside {width}x{height}"
                )));
            }
            if !(DEPTH_MIN_M..=DEPTH_MAX_M).contains(&d) {
                return Err(LossError::Shape(format!("sparse depth {d} out of range")));
            }
            if !seen.insert((r, c)) {
                return Err(LossError::Shape(format!("duplicate sparse point ({r}, {c})")));
            }
        }
        Ok(Self { points, width, height })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// All loss components of one evaluation, satisfying
/// `l_d = l_ph + lambda_sz * l_sz + lambda_sm * l_sm`.
///
/// `l_co` and `l_st` are summed over the reconstructions so that
/// `l_ph = lambda_co * l_co + lambda_st * l_st` holds exactly.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub l_co: f64,
    pub l_st: f64,
    pub l_ph: f64,
    pub l_sz: f64,
    pub l_sm: f64,
    pub l_d: f64,
    /// Per-pixel mean absolute reconstruction error over valid
    /// reconstructions; diagnostic only.
    pub residual_map: Vec<f64>,
}

/// View inputs of one loss evaluation: the target frame at time t and the
/// source frames at t-1, t-2 (or a subset), with world-from-camera poses.
pub struct LossContext<'a> {
    pub target: &'a Image,
    pub target_pose: &'a Pose,
    pub sources: Vec<(&'a Image, &'a Pose)>,
    pub intrinsics: &'a Intrinsics,
}

/// Mean over masked pixels of the per-pixel channel-mean L1 difference.
pub fn color_consistency(target: &Image, recon: &Image, mask: &[bool]) -> Result<f64, LossError> {
    check_dims(target, recon, mask)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..mask.len() {
        if !mask[i] {
            continue;
        }
        let mut px = 0.0;
        for c in 0..3 {
            px += (recon.data[i * 3 + c] as f64 - target.data[i * 3 + c] as f64).abs();
        }
        sum += px / 3.0;
        count += 1;
    }
    if count == 0 {
        return Err(LossError::EmptyMask);
    }
    Ok(sum / count as f64)
}

const SSIM_WINDOW: usize = 7;
const SSIM_RAD: usize = 3;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Integral image with a zero first row/column.
struct Integral {
    w: usize,
    data: Vec<f64>,
}

impl Integral {
    fn build(values: &[f64], w: usize, h: usize) -> Self {
        let iw = w + 1;
        let mut data = vec![0.0; iw * (h + 1)];
        for r in 0..h {
            let mut rowsum = 0.0;
            for c in 0..w {
                rowsum += values[r * w + c];
                data[(r + 1) * iw + (c + 1)] = data[r * iw + (c + 1)] + rowsum;
            }
        }
        Self { w: iw, data }
    }

    /// Sum over rows [r0, r1] x cols [c0, c1], inclusive.
    #[inline]
    fn sum(&self, r0: usize, c0: usize, r1: usize, c1: usize) -> f64 {
        let iw = self.w;
        self.data[(r1 + 1) * iw + (c1 + 1)] + self.data[r0 * iw + c0]
            - self.data[r0 * iw + (c1 + 1)]
            - self.data[(r1 + 1) * iw + c0]
    }
}

/// Per-channel SSIM statistics over uniform 7x7 windows, restricted to
/// interior window centers, plus the coefficient maps needed for the
/// gradient with respect to the reconstruction.
struct SsimAnalysis {
    loss: f64,
    center_count: usize,
    /// Per channel: (a, b, e) coefficient maps over centers such that
    /// dS(p)/dx_i = a(p) + b(p)*x_i + e(p)*y_i for i in the window of p.
    coeffs: Vec<[Vec<f64>; 3]>,
}

fn ssim_analysis(
    target: &Image,
    reconp: &[f64], // recon with invalid pixels replaced by target, h*w*3
    mask: &[bool],
    with_coeffs: bool,
) -> Result<SsimAnalysis, LossError> {
    let w = target.width;
    let h = target.height;
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(LossError::Shape(format!(
            "image {w}x{h} smaller than SSIM window {SSIM_WINDOW}"
        )));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut loss_sum = 0.0;
    let mut center_count = 0usize;
    let mut coeffs: Vec<[Vec<f64>; 3]> = Vec::new();
    if with_coeffs {
        for _ in 0..3 {
            coeffs.push([vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h]]);
        }
    }
    // One pass per channel with integral images of x, y, x^2, y^2, xy.
    let mut ssim_map = vec![0.0; w * h]; // sum over channels
    for c in 0..3 {
        let mut x = vec![0.0; w * h];
        let mut y = vec![0.0; w * h];
        for i in 0..w * h {
            x[i] = reconp[i * 3 + c];
            y[i] = target.data[i * 3 + c] as f64;
        }
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y.iter()).map(|(a, b)| a * b).collect();
        let ix = Integral::build(&x, w, h);
        let iy = Integral::build(&y, w, h);
        let ixx = Integral::build(&xx, w, h);
        let iyy = Integral::build(&yy, w, h);
        let ixy = Integral::build(&xy, w, h);
        for r in SSIM_RAD..h - SSIM_RAD {
            for col in SSIM_RAD..w - SSIM_RAD {
                let i = r * w + col;
                if !mask[i] {
                    continue;
                }
                let (r0, c0, r1, c1) = (r - SSIM_RAD, col - SSIM_RAD, r + SSIM_RAD, col + SSIM_RAD);
                let mx = ix.sum(r0, c0, r1, c1) / n;
                let my = iy.sum(r0, c0, r1, c1) / n;
                let sxx = ixx.sum(r0, c0, r1, c1) / n - mx * mx;
                let syy = iyy.sum(r0, c0, r1, c1) / n - my * my;
                let sxy = ixy.sum(r0, c0, r1, c1) / n - mx * my;
                let a1 = 2.0 * mx * my + SSIM_C1;
                let a2 = 2.0 * sxy + SSIM_C2;
                let b1 = mx * mx + my * my + SSIM_C1;
                let b2 = sxx + syy + SSIM_C2;
                let s = a1 * a2 / (b1 * b2);
                ssim_map[i] += s;
                if with_coeffs {
                    let inv = 1.0 / (b1 * b2);
                    let a = (2.0 / n) * my * (a2 - a1) * inv
                        + (2.0 * s * mx / n) * (1.0 / b2 - 1.0 / b1);
                    let b = -2.0 * s / (n * b2);
                    let e = 2.0 * a1 * inv / n;
                    coeffs[c][0][i] = a;
                    coeffs[c][1][i] = b;
                    coeffs[c][2][i] = e;
                }
            }
        }
    }
    for r in SSIM_RAD..h - SSIM_RAD {
        for col in SSIM_RAD..w - SSIM_RAD {
            let i = r * w + col;
            if mask[i] {
                loss_sum += 1.0 - ssim_map[i] / 3.0;
                center_count += 1;
            }
        }
    }
    if center_count == 0 {
        return Err(LossError::EmptyMask);
    }
    Ok(SsimAnalysis { loss: loss_sum / center_count as f64, center_count, coeffs })
}

fn masked_recon(target: &Image, recon: &Image, mask: &[bool]) -> Vec<f64> {
    let mut out = vec![0.0; mask.len() * 3];
    for i in 0..mask.len() {
        for c in 0..3 {
            out[i * 3 + c] = if mask[i] {
                recon.data[i * 3 + c] as f64
            } else {
                target.data[i * 3 + c] as f64
            };
        }
    }
    out
}

/// Mean over masked interior pixels of `1 - SSIM` with per-pixel SSIM over
/// uniform 7x7 windows (channel-averaged). Invalid reconstruction pixels are
/// replaced by the target inside the windows so they contribute no error.
pub fn structural_consistency(
    target: &Image,
    recon: &Image,
    mask: &[bool],
) -> Result<f64, LossError> {
    check_dims(target, recon, mask)?;
    let reconp = masked_recon(target, recon, mask);
    Ok(ssim_analysis(target, &reconp, mask, false)?.loss)
}

/// The photometric reprojection loss: sum over reconstructions of the
/// weighted color and structural consistency terms.
pub fn photometric_loss(
    target: &Image,
    recons: &[(Image, Vec<bool>)],
    w: &LossWeights,
) -> Result<f64, LossError> {
    if recons.is_empty() {
        return Err(LossError::EmptyReconList);
    }
    let mut total = 0.0;
    for (recon, mask) in recons {
        total += w.lambda_co * color_consistency(target, recon, mask)?
            + w.lambda_st * structural_consistency(target, recon, mask)?;
    }
    Ok(total)
}

/// Channel-mean L1 image gradient magnitude with forward differences and a
/// zero-padded final row/column.
fn image_gradient_weight(image: &Image) -> Vec<f64> {
    let w = image.width;
    let h = image.height;
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let mut g = 0.0;
            for ch in 0..3 {
                let v = image.data[i * 3 + ch] as f64;
                if c + 1 < w {
                    g += (image.data[(i + 1) * 3 + ch] as f64 - v).abs();
                }
                if r + 1 < h {
                    g += (image.data[(i + w) * 3 + ch] as f64 - v).abs();
                }
            }
            out[i] = (-(g / 3.0)).exp();
        }
    }
    out
}

/// Edge-aware first-order smoothness of the depth map: depth gradients are
/// down-weighted where the image has strong gradients.
pub fn smoothness_loss(image: &Image, depth: &DepthMap) -> Result<f64, LossError> {
    if image.width != depth.width || image.height != depth.height {
        return Err(LossError::Shape(format!(
            "image {}x{} vs depth {}x{}",
            image.width, image.height, depth.width, depth.height
        )));
    }
    let w = depth.width;
    let h = depth.height;
    let weight = image_gradient_weight(image);
    let mut sum = 0.0;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let d = depth.data[i];
            let mut g = 0.0;
            if c + 1 < w {
                g += (depth.data[i + 1] - d).abs();
            }
            if r + 1 < h {
                g += (depth.data[i + w] - d).abs();
            }
            sum += weight[i] * g;
        }
    }
    Ok(sum / (w * h) as f64)
}

/// Mean L1 difference between the prediction and the sparse depth over its
/// domain; grounds the prediction to metric scale.
pub fn sparse_depth_loss(pred: &DepthMap, z: &SparseDepth) -> Result<f64, LossError> {
    if z.is_empty() {
        return Err(LossError::EmptySparse);
    }
    if pred.width != z.width || pred.height != z.height {
        return Err(LossError::Shape("sparse depth dims differ from prediction".into()));
    }
    let mut sum = 0.0;
    for &(r, c, d) in &z.points {
        sum += (pred.get(r, c) - d).abs();
    }
    Ok(sum / z.len() as f64)
}

fn check_dims(target: &Image, recon: &Image, mask: &[bool]) -> Result<(), LossError> {
    if target.width != recon.width
        || target.height != recon.height
        || mask.len() != target.width * target.height
    {
        return Err(LossError::Shape(format!(
            "target {}x{}, recon {}x{}, mask {}",
            target.width,
            target.height,
            recon.width,
            recon.height,
            mask.len()
        )));
    }
    Ok(())
}

fn relative_poses(ctx: &LossContext) -> Vec<Pose> {
    ctx.sources
        .iter()
        .map(|(_, pose)| Pose::relative(pose, ctx.target_pose))
        .collect()
}

/// Full objective evaluation, returning every component and the per-pixel
/// residual map.
pub fn total_loss(
    ctx: &LossContext,
    pred: &DepthMap,
    z: &SparseDepth,
    w: &LossWeights,
) -> Result<LossBreakdown, LossError> {
    if ctx.sources.is_empty() {
        return Err(LossError::EmptyReconList);
    }
    w.validate()?;
    let npix = ctx.target.width * ctx.target.height;
    let rel = relative_poses(ctx);
    let mut l_co = 0.0;
    let mut l_st = 0.0;
    let mut residual_map = vec![0.0; npix];
    let mut residual_count = vec![0u32; npix];
    for ((source, _), rp) in ctx.sources.iter().zip(rel.iter()) {
        let (recon, mask) = warp_reconstruct(source, pred, rp, ctx.intrinsics)?;
        l_co += color_consistency(ctx.target, &recon, &mask)?;
        l_st += structural_consistency(ctx.target, &recon, &mask)?;
        for i in 0..npix {
            if mask[i] {
                let mut e = 0.0;
                for c in 0..3 {
                    e += (recon.data[i * 3 + c] as f64 - ctx.target.data[i * 3 + c] as f64).abs();
                }
                residual_map[i] += e / 3.0;
                residual_count[i] += 1;
            }
        }
    }
    for i in 0..npix {
        if residual_count[i] > 0 {
            residual_map[i] /= residual_count[i] as f64;
        }
    }
    let l_ph = w.lambda_co * l_co + w.lambda_st * l_st;
    let l_sz = sparse_depth_loss(pred, z)?;
    let l_sm = smoothness_loss(ctx.target, pred)?;
    let l_d = l_ph + w.lambda_sz * l_sz + w.lambda_sm * l_sm;
    Ok(LossBreakdown { l_co, l_st, l_ph, l_sz, l_sm, l_d, residual_map })
}

/// Analytic gradient of the total loss with respect to the depth map.
/// L1 subgradients at ties are taken as 0.
pub fn loss_gradient(
    ctx: &LossContext,
    pred: &DepthMap,
    z: &SparseDepth,
    w: &LossWeights,
) -> Result<Vec<f64>, LossError> {
    if ctx.sources.is_empty() {
        return Err(LossError::EmptyReconList);
    }
    w.validate()?;
    let width = pred.width;
    let height = pred.height;
    let npix = width * height;
    let mut grad = vec![0.0; npix];

    // Photometric terms: each reconstruction pixel depends only on the depth
    // at that pixel through the warp.
    let rel = relative_poses(ctx);
    for ((source, _), rp) in ctx.sources.iter().zip(rel.iter()) {
        let (recon, mask, jac) =
            warp_reconstruct_with_grad(source, pred, rp, ctx.intrinsics)?;
        let valid_count = mask.iter().filter(|&&m| m).count();
        if valid_count == 0 {
            return Err(LossError::EmptyMask);
        }
        // Color consistency.
        let co_scale = w.lambda_co / (3.0 * valid_count as f64);
        for i in 0..npix {
            if !mask[i] {
                continue;
            }
            let mut g = 0.0;
            for c in 0..3 {
                let diff = recon.data[i * 3 + c] as f64 - ctx.target.data[i * 3 + c] as f64;
                g += sign0(diff) * jac[i][c];
            }
            grad[i] += co_scale * g;
        }
        // Structural consistency via the window-coefficient decomposition:
        // d(l_st)/dx(i) = -(1/(3P)) * (box(a) + x_i*box(b) + y_i*box(e)).
        let reconp = masked_recon(ctx.target, &recon, &mask);
        let analysis = ssim_analysis(ctx.target, &reconp, &mask, true)?;
        let p_count = analysis.center_count as f64;
        for c in 0..3 {
            let ba = Integral::build(&analysis.coeffs[c][0], width, height);
            let bb = Integral::build(&analysis.coeffs[c][1], width, height);
            let be = Integral::build(&analysis.coeffs[c][2], width, height);
            for r in 0..height {
                for col in 0..width {
                    let i = r * width + col;
                    if !mask[i] {
                        continue;
                    }
                    let r0 = r.saturating_sub(SSIM_RAD);
                    let c0 = col.saturating_sub(SSIM_RAD);
                    let r1 = (r + SSIM_RAD).min(height - 1);
                    let c1 = (col + SSIM_RAD).min(width - 1);
                    let xi = reconp[i * 3 + c];
                    let yi = ctx.target.data[i * 3 + c] as f64;
                    let ds = ba.sum(r0, c0, r1, c1)
                        + xi * bb.sum(r0, c0, r1, c1)
                        + yi * be.sum(r0, c0, r1, c1);
                    grad[i] += w.lambda_st * (-ds / (3.0 * p_count)) * jac[i][c];
                }
            }
        }
    }

    // Sparse depth term.
    if z.is_empty() {
        return Err(LossError::EmptySparse);
    }
    let sz_scale = w.lambda_sz / z.len() as f64;
    for &(r, c, d) in &z.points {
        grad[r * width + c] += sz_scale * sign0(pred.get(r, c) - d);
    }

    // Smoothness term.
    let weight = image_gradient_weight(ctx.target);
    let sm_scale = w.lambda_sm / npix as f64;
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            let d = pred.data[i];
            if c + 1 < width {
                let s = sign0(pred.data[i + 1] - d);
                grad[i] -= sm_scale * weight[i] * s;
                grad[i + 1] += sm_scale * weight[i] * s;
            }
            if r + 1 < height {
                let s = sign0(pred.data[i + width] - d);
                grad[i] -= sm_scale * weight[i] * s;
                grad[i + width] += sm_scale * weight[i] * s;
            }
        }
    }
    Ok(grad)
}

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scalar uncertainty residual `1 - exp(-mean |recon - target|)`, averaged
/// over the reconstructions with at least one valid pixel.
pub fn uncertainty_residual(ctx: &LossContext, pred: &DepthMap) -> Result<f64, LossError> {
    if ctx.sources.is_empty() {
        return Err(LossError::EmptyReconList);
    }
    let rel = relative_poses(ctx);
    let npix = ctx.target.width * ctx.target.height;
    let mut total = 0.0;
    let mut terms = 0usize;
    for ((source, _), rp) in ctx.sources.iter().zip(rel.iter()) {
        let (recon, mask) = warp_reconstruct(source, pred, rp, ctx.intrinsics)?;
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..npix {
            if !mask[i] {
                continue;
            }
            let mut e = 0.0;
            for c in 0..3 {
                e += (recon.data[i * 3 + c] as f64 - ctx.target.data[i * 3 + c] as f64).abs();
            }
            sum += e / 3.0;
            count += 1;
        }
        if count > 0 {
            total += 1.0 - (-(sum / count as f64)).exp();
            terms += 1;
        }
    }
    if terms == 0 {
        return Err(LossError::ResidualUndefined);
    }
    Ok(total / terms as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn const_image(w: usize, h: usize, v: f64) -> Image {
        Image::from_data(w, h, vec![v; w * h * 3]).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image::from_data(w, h, (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0f64)).collect())
            .unwrap()
    }

    #[test]
    fn color_consistency_cases() {
        let a = const_image(8, 8, 0.3);
        let b = const_image(8, 8, 0.4);
        let mask = vec![true; 64];
        assert!((color_consistency(&a, &a, &mask).unwrap()).abs() < 1e-12);
        let v = color_consistency(&a, &b, &mask).unwrap();
        assert!((v - 0.1).abs() < 1e-6);
        assert!(matches!(
            color_consistency(&a, &b, &vec![false; 64]),
            Err(LossError::EmptyMask)
        ));
    }

    #[test]
    fn color_consistency_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_image(&mut rng, 12, 9);
        let b = random_image(&mut rng, 12, 9);
        let mask: Vec<bool> = (0..12 * 9).map(|_| rng.gen_bool(0.8)).collect();
        let got = color_consistency(&a, &b, &mask).unwrap();
        let mut sum = 0.0;
        let mut n = 0usize;
        for r in 0..9 {
            for c in 0..12 {
                if mask[r * 12 + c] {
                    let pa = a.pixel(r, c);
                    let pb = b.pixel(r, c);
                    sum += (0..3)
                        .map(|ch| (pa[ch] as f64 - pb[ch] as f64).abs())
                        .sum::<f64>()
                        / 3.0;
                    n += 1;
                }
            }
        }
        assert!((got - sum / n as f64).abs() <= 1e-12);
    }

    #[test]
    fn structural_consistency_identity_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_image(&mut rng, 16, 16);
        let mask = vec![true; 256];
        let v = structural_consistency(&a, &a, &mask).unwrap();
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn structural_consistency_constant_images_closed_form() {
        // Constant images reduce SSIM to the luminance term
        // (2*m1*m2 + C1) / (m1^2 + m2^2 + C1).
        let m1 = 0.3f64;
        let m2 = 0.55f64;
        let a = const_image(16, 16, m1);
        let b = const_image(16, 16, m2);
        let mask = vec![true; 256];
        let got = structural_consistency(&a, &b, &mask).unwrap();
        
        
        let s = (2.0 * m1 * m2 + SSIM_C1) / (m1 * m1 + m2 * m2 + SSIM_C1);
        assert!((got - (1.0 - s)).abs() < 1e-9);
    }

    #[test]
    fn structural_consistency_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_image(&mut rng, 16, 16);
        let b = random_image(&mut rng, 16, 16);
        let mask = vec![true; 256];
        let v1 = structural_consistency(&a, &b, &mask).unwrap();
        let v2 = structural_consistency(&b, &a, &mask).unwrap();
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn structural_consistency_small_image_errors() {
        let a = const_image(5, 5, 0.5);
        let mask = vec![true; 25];
        assert!(structural_consistency(&a, &a, &mask).is_err());
    }

    #[test]
    fn photometric_loss_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let target = random_image(&mut rng, 16, 16);
        let r1 = random_image(&mut rng, 16, 16);
        let r2 = random_image(&mut rng, 16, 16);
        let mask = vec![true; 256];
        let w = LossWeights::default();
        // Identical reconstructions give zero.
        let zero = photometric_loss(
            &target,
            &[(target.clone(), mask.clone()), (target.clone(), mask.clone())],
            &w,
        )
        .unwrap();
        assert!(zero.abs() < 1e-9);
        // One reconstruction equals the weighted components.
        let single = photometric_loss(&target, &[(r1.clone(), mask.clone())], &w).unwrap();
        let expect = w.lambda_co * color_consistency(&target, &r1, &mask).unwrap()
            + w.lambda_st * structural_consistency(&target, &r1, &mask).unwrap();
        assert!((single - expect).abs() < 1e-12);
        // Two reconstructions equal the sum of singles.
        let both = photometric_loss(
            &target,
            &[(r1.clone(), mask.clone()), (r2.clone(), mask.clone())],
            &w,
        )
        .unwrap();
        let s2 = photometric_loss(&target, &[(r2, mask)], &w).unwrap();
        assert!((both - (single + s2)).abs() < 1e-12);
        assert!(matches!(photometric_loss(&target, &[], &w), Err(LossError::EmptyReconList)));
    }

    #[test]
    fn smoothness_loss_cases() {
        let img = const_image(10, 10, 0.5);
        let d = DepthMap::new(10, 10, 3.0);
        assert!(smoothness_loss(&img, &d).unwrap().abs() < 1e-12);
        // Ramp with slope s per pixel along x.
        let s = 0.07;
        let mut ramp = DepthMap::new(10, 10, 0.0);
        for r in 0..10 {
            for c in 0..10 {
                ramp.set(r, c, 1.0 + s * c as f64);
            }
        }
        let got = smoothness_loss(&img, &ramp).unwrap();
        // Forward differences leave the last column at zero.
        let expect = s * (9.0 * 10.0) / 100.0;
        assert!((got - expect).abs() < 1e-9);
    }

    #[test]
    fn smoothness_prefers_aligned_edges() {
        // A depth discontinuity costs less when the image has an aligned edge.
        let mut edge_img = const_image(10, 10, 0.2);
        for r in 0..10 {
            for c in 5..10 {
                edge_img.set_pixel(r, c, [0.9, 0.9, 0.9]);
            }
        }
        let flat_img = const_image(10, 10, 0.2);
        let mut step_depth = DepthMap::new(10, 10, 2.0);
        for r in 0..10 {
            for c in 5..10 {
                step_depth.set(r, c, 4.0);
            }
        }
        let with_edge = smoothness_loss(&edge_img, &step_depth).unwrap();
        let without = smoothness_loss(&flat_img, &step_depth).unwrap();
        assert!(with_edge < without);
    }

    #[test]
    fn sparse_depth_loss_cases() {
        let mut pred = DepthMap::new(10, 10, 2.0);
        let z = SparseDepth::new(vec![(1, 1, 2.0), (5, 5, 2.0)], 10, 10).unwrap();
        assert!(sparse_depth_loss(&pred, &z).unwrap().abs() < 1e-12);
        for d in &mut pred.data {
            *d += 0.3;
        }
        assert!((sparse_depth_loss(&pred, &z).unwrap() - 0.3).abs() < 1e-12);
        let empty = SparseDepth::new(vec![], 10, 10).unwrap();
        assert!(matches!(sparse_depth_loss(&pred, &empty), Err(LossError::EmptySparse)));
        // Double-loop oracle on a random instance.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut pred = DepthMap::new(10, 10, 0.0);
        for d in &mut pred.data {
            *d = rng.gen_range(0.5..5.0);
        }
        let pts: Vec<(usize, usize, f64)> = (0..10)
            .map(|i| (i, (i * 3) % 10, rng.gen_range(0.5..5.0)))
            .collect();
        let z = SparseDepth::new(pts.clone(), 10, 10).unwrap();
        let expect: f64 =
            pts.iter().map(|&(r, c, d)| (pred.get(r, c) - d).abs()).sum::<f64>() / pts.len() as f64;
        assert!((sparse_depth_loss(&pred, &z).unwrap() - expect).abs() <= 1e-12);
    }

    #[test]
    fn sparse_depth_rejects_duplicates_and_out_of_range() {
        assert!(SparseDepth::new(vec![(1, 1, 2.0), (1, 1, 3.0)], 10, 10).is_err());
        assert!(SparseDepth::new(vec![(1, 1, 0.01)], 10, 10).is_err());
        assert!(SparseDepth::new(vec![(10, 1, 2.0)], 10, 10).is_err());
    }

    /// Builds a random test instance: textured scene, a smooth-ish random
    /// depth map, small camera motion.
    fn random_instance(
        seed: u64,
        size: usize,
    ) -> (Image, Pose, Image, Pose, Image, Pose, DepthMap, SparseDepth, Intrinsics) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = Intrinsics::default_square(size);
        let target = random_image(&mut rng, size, size);
        let s1 = random_image(&mut rng, size, size);
        let s2 = random_image(&mut rng, size, size);
        let mut depth = DepthMap::new(size, size, 0.0);
        for d in &mut depth.data {
            *d = rng.gen_range(2.0..5.0);
        }
        let p_t = Pose::identity();
        let p1 = Pose {
            rotation: Pose::identity().rotation,
            translation: [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), 0.0],
        };
        let p2 = Pose {
            rotation: Pose::identity().rotation,
            translation: [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), 0.0],
        };
        let mut pts = Vec::new();
        let mut seen = std::collections::HashSet::new();
        while pts.len() < 30 {
            let r = rng.gen_range(0..size);
            let c = rng.gen_range(0..size);
            if seen.insert((r, c)) {
                pts.push((r, c, rng.gen_range(1.0..6.0)));
            }
        }
        let z = SparseDepth::new(pts, size, size).unwrap();
        (target, p_t, s1, p1, s2, p2, depth, z, k)
    }

    #[test]
    fn total_loss_static_camera() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let img = random_image(&mut rng, 16, 16);
        let pose = Pose::identity();
        let mut pred = DepthMap::new(16, 16, 0.0);
        for d in &mut pred.data {
            *d = rng.gen_range(1.0..5.0);
        }
        let pts = vec![(2, 3, pred.get(2, 3)), (10, 12, pred.get(10, 12))];
        let z = SparseDepth::new(pts, 16, 16).unwrap();
        let k = Intrinsics::default_square(16);
        let w = LossWeights::default();
        let ctx = LossContext {
            target: &img,
            target_pose: &pose,
            sources: vec![(&img, &pose), (&img, &pose)],
            intrinsics: &k,
        };
        let b = total_loss(&ctx, &pred, &z, &w).unwrap();
        assert!(b.l_ph.abs() < 1e-9);
        assert!(b.l_sz.abs() < 1e-12);
        assert!((b.l_d - w.lambda_sm * b.l_sm).abs() < 1e-9);
    }

    #[test]
    fn total_loss_sz_only_weights() {
        let (target, p_t, s1, p1, s2, p2, pred, z, k) = random_instance(16, 24);
        let w = LossWeights { lambda_co: 0.0, lambda_st: 0.0, lambda_sz: 1.0, lambda_sm: 0.0 };
        let ctx = LossContext {
            target: &target,
            target_pose: &p_t,
            sources: vec![(&s1, &p1), (&s2, &p2)],
            intrinsics: &k,
        };
        let b = total_loss(&ctx, &pred, &z, &w).unwrap();
        assert!((b.l_d - b.l_sz).abs() < 1e-12);
    }

    #[test]
    fn total_loss_matches_component_recomputation() {
        let (target, p_t, s1, p1, s2, p2, pred, z, k) = random_instance(17, 24);
        let w = LossWeights::default();
        let ctx = LossContext {
            target: &target,
            target_pose: &p_t,
            sources: vec![(&s1, &p1), (&s2, &p2)],
            intrinsics: &k,
        };
        let b = total_loss(&ctx, &pred, &z, &w).unwrap();
        // Independent recomputation from the component operations.
        let mut recons = Vec::new();
        for (src, pose) in [(&s1, &p1), (&s2, &p2)] {
            let rp = Pose::relative(pose, &p_t);
            recons.push(warp_reconstruct(src, &pred, &rp, &k).unwrap());
        }
        let l_ph = photometric_loss(&target, &recons, &w).unwrap();
        let l_sz = sparse_depth_loss(&pred, &z).unwrap();
        let l_sm = smoothness_loss(&target, &pred).unwrap();
        let expect = l_ph + w.lambda_sz * l_sz + w.lambda_sm * l_sm;
        assert!((b.l_d - expect).abs() < 1e-9);
        // Additivity identity.
        assert!((b.l_d - (b.l_ph + w.lambda_sz * b.l_sz + w.lambda_sm * b.l_sm)).abs() < 1e-9);
    }

    #[test]
    fn gradient_sz_only_single_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let img = random_image(&mut rng, 16, 16);
        let pose = Pose::identity();
        let k = Intrinsics::default_square(16);
        let mut pred = DepthMap::new(16, 16, 3.0);
        let pts = vec![(4, 5, 3.0), (9, 9, 3.0)];
        let z = SparseDepth::new(pts, 16, 16).unwrap();
        pred.set(4, 5, 3.2); // offset +c at one sparse point
        let w = LossWeights { lambda_co: 0.0, lambda_st: 0.0, lambda_sz: 1.0, lambda_sm: 0.0 };
        let ctx = LossContext {
            target: &img,
            target_pose: &pose,
            sources: vec![(&img, &pose)],
            intrinsics: &k,
        };
        let g = loss_gradient(&ctx, &pred, &z, &w).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let expect = if (r, c) == (4, 5) { 0.5 } else { 0.0 };
                assert!((g[r * 16 + c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_constant_smoothness_is_zero() {
        let img = const_image(16, 16, 0.5);
        let pose = Pose::identity();
        let k = Intrinsics::default_square(16);
        let pred = DepthMap::new(16, 16, 3.0);
        let z = SparseDepth::new(vec![(4, 4, 3.0)], 16, 16).unwrap();
        let w = LossWeights { lambda_co: 0.0, lambda_st: 0.0, lambda_sz: 0.0, lambda_sm: 1.0 };
        let ctx = LossContext {
            target: &img,
            target_pose: &pose,
            sources: vec![(&img, &pose)],
            intrinsics: &k,
        };
        let g = loss_gradient(&ctx, &pred, &z, &w).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    /// Central finite-difference oracle for the full loss gradient.
    pub(crate) fn finite_diff_check(seed: u64, size: usize, samples: usize) -> (usize, usize) {
        let (target, p_t, s1, p1, s2, p2, pred, z, k) = random_instance(seed, size);
        let w = LossWeights::default();
        let ctx = LossContext {
            target: &target,
            target_pose: &p_t,
            sources: vec![(&s1, &p1), (&s2, &p2)],
            intrinsics: &k,
        };
        let analytic = loss_gradient(&ctx, &pred, &z, &w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFD);
        let h = 1e-4;
        let mut ok = 0usize;
        let mut total = 0usize;
        for _ in 0..samples {
            let i = rng.gen_range(0..size * size);
            let mut plus = pred.clone();
            plus.data[i] += h;
            let mut minus = pred.clone();
            minus.data[i] -= h;
            let lp = total_loss(&ctx, &plus, &z, &w).unwrap().l_d;
            let lm = total_loss(&ctx, &minus, &z, &w).unwrap().l_d;
            let fd = (lp - lm) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            if ((analytic[i] - fd) / denom).abs() <= 1e-3 {
                ok += 1;
            }
            total += 1;
        }
        (ok, total)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (ok, total) = finite_diff_check(21, 32, 50);
        assert!(
            ok as f64 >= 0.95 * total as f64,
            "finite-difference agreement {ok}/{total}"
        );
    }

    #[test]
    fn scale_probe() {
        // With lambda_sz = 0, scaling depth and translations together leaves
        // the photometric loss unchanged; with lambda_sz > 0 the total loss
        // strictly increases for lambda != 1.
        let (target, p_t, s1, p1, s2, p2, pred, z, k) = random_instance(22, 24);
        let ctx = LossContext {
            target: &target,
            target_pose: &p_t,
            sources: vec![(&s1, &p1), (&s2, &p2)],
            intrinsics: &k,
        };
        let w0 = LossWeights { lambda_co: 0.15, lambda_st: 0.85, lambda_sz: 0.0, lambda_sm: 0.0 };
        let base = total_loss(&ctx, &pred, &z, &w0).unwrap().l_ph;
        let lambda = 1.7;
        let mut pred2 = pred.clone();
        for d in &mut pred2.data {
            *d *= lambda;
        }
        let scale_t = |p: &Pose| Pose {
            rotation: p.rotation,
            translation: [
                p.translation[0] * lambda,
                p.translation[1] * lambda,
                p.translation[2] * lambda,
            ],
        };
        let (p1s, p2s) = (scale_t(&p1), scale_t(&p2));
        let ctx2 = LossContext {
            target: &target,
            target_pose: &p_t,
            sources: vec![(&s1, &p1s), (&s2, &p2s)],
            intrinsics: &k,
        };
        let scaled = total_loss(&ctx2, &pred2, &z, &w0).unwrap().l_ph;
        assert!((base - scaled).abs() < 1e-6, "{base} vs {scaled}");
        // With the metric anchor on, the scaled instance costs strictly more.
        let w1 = LossWeights { lambda_sz: 1.0, ..w0 };
        let a = total_loss(&ctx, &pred, &z, &w1).unwrap().l_d;
        let b = total_loss(&ctx2, &pred2, &z, &w1).unwrap().l_d;
        assert!(b > a);
    }

    #[test]
    fn uncertainty_residual_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let img = random_image(&mut rng, 16, 16);
        let pose = Pose::identity();
        let k = Intrinsics::default_square(16);
        let mut pred = DepthMap::new(16, 16, 0.0);
        for d in &mut pred.data {
            *d = rng.gen_range(1.0..5.0);
        }
        // Perfect reconstruction: identical frames, identity motion.
        let ctx = LossContext {
            target: &img,
            target_pose: &pose,
            sources: vec![(&img, &pose), (&img, &pose)],
            intrinsics: &k,
        };
        assert!(uncertainty_residual(&ctx, &pred).unwrap().abs() < 1e-12);
        // Mean abs error ln 2 gives exactly 0.5.
        let c = 2.0f64.ln();
        let lo = const_image(16, 16, 0.0);
        let hi = const_image(16, 16, c);
        let ctx = LossContext {
            target: &lo,
            target_pose: &pose,
            sources: vec![(&hi, &pose)],
            intrinsics: &k,
        };
        let d = uncertainty_residual(&ctx, &pred).unwrap();
        let mean = c as f64; // actual stored f32 error
        assert!((d - (1.0 - (-mean).exp())).abs() <= 1e-12);
        assert!((d - 0.5).abs() < 1e-6);
    }

    #[test]
    fn uncertainty_residual_matches_direct_recomputation() {
        let (target, p_t, s1, p1, s2, p2, pred, _z, k) = random_instance(24, 24);
        let ctx = LossContext {
            target: &target,
            target_pose: &p_t,
            sources: vec![(&s1, &p1), (&s2, &p2)],
            intrinsics: &k,
        };
        let got = uncertainty_residual(&ctx, &pred).unwrap();
        let mut acc = 0.0;
        for (src, pose) in [(&s1, &p1), (&s2, &p2)] {
            let rp = Pose::relative(pose, &p_t);
            let (recon, mask) = warp_reconstruct(src, &pred, &rp, &k).unwrap();
            let mut sum = 0.0;
            let mut n = 0;
            for i in 0..24 * 24 {
                if mask[i] {
                    for c in 0..3 {
                        sum += (recon.data[i * 3 + c] as f64 - target.data[i * 3 + c] as f64).abs();
                    }
                    n += 1;
                }
            }
            acc += 1.0 - (-(sum / (3.0 * n as f64))).exp();
        }
        assert!((got - acc / 2.0).abs() < 1e-12);
    }

    #[test]
    fn residual_undefined_when_everything_invalid() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let img = random_image(&mut rng, 16, 16);
        let pose = Pose::identity();
        let behind = Pose { rotation: pose.rotation, translation: [0.0, 0.0, 100.0] };
        // Relative pose moves the scene behind the source camera.
        let k = Intrinsics::default_square(16);
        let pred = DepthMap::new(16, 16, 1.0);
        let ctx = LossContext {
            target: &img,
            target_pose: &pose,
            sources: vec![(&img, &behind)],
            intrinsics: &k,
        };
        assert!(matches!(
            uncertainty_residual(&ctx, &pred),
            Err(LossError::ResidualUndefined)
        ));
    }

    #[test]
    fn residual_monotone_in_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let img = random_image(&mut rng, 24, 24);
        let pose = Pose::identity();
        let k = Intrinsics::default_square(24);
        let pred = DepthMap::new(24, 24, 3.0);
        let mut last = -1.0;
        for level in 0..6 {
            let amp = level as f64 * 0.05;
            let mut noisy = img.clone();
            let mut nrng = ChaCha8Rng::seed_from_u64(99);
            for v in &mut noisy.data {
                *v = (*v + nrng.gen_range(-amp..=amp.max(1e-9))).clamp(0.0, 1.0);
            }
            let ctx = LossContext {
                target: &img,
                target_pose: &pose,
                sources: vec![(&noisy, &pose)],
                intrinsics: &k,
            };
            let d = uncertainty_residual(&ctx, &pred).unwrap();
            assert!(d >= 0.0 && d < 1.0);
            assert!(d > last);
            last = d;
        }
    }

    #[test]
    fn breakdown_is_nonnegative() {
        let (target, p_t, s1, p1, s2, p2, pred, z, k) = random_instance(27, 24);
        let ctx = LossContext {
            target: &target,
            target_pose: &p_t,
            sources: vec![(&s1, &p1), (&s2, &p2)],
            intrinsics: &k,
        };
        let b = total_loss(&ctx, &pred, &z, &LossWeights::default()).unwrap();
        for v in [b.l_co, b.l_st, b.l_ph, b.l_sz, b.l_sm, b.l_d] {
            assert!(v >= 0.0);
        }
    }
}
