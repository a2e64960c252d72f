//! Pinhole camera model, rigid-body poses, and the differentiable
//! image-reconstruction warp.
//!
//! Camera convention: +z forward, +x right, +y down. Poses are stored
//! world-from-camera: `rotation` columns are the camera axes expressed in
//! world coordinates and `translation` is the camera position.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Pinhole intrinsic parameters for a `width`×`height` image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0) || !(self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64)
            || !(0.0 <= self.cy && self.cy < self.height as f64)
        {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside image {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// 90° horizontal FOV at 400×400, the default frame size.
    pub fn default_400() -> Self {
        Self { fx: 200.0, fy: 200.0, cx: 200.0, cy: 200.0, width: 400, height: 400 }
    }

    /// Default intrinsics scaled to a `size`×`size` frame (same FOV).
    pub fn default_square(size: usize) -> Self {
        let f = size as f64 / 2.0;
        Self { fx: f, fy: f, cx: f, cy: f, width: size, height: size }
    }
}

/// Continuous pixel coordinate (u along columns, v along rows). May fall
/// outside the image after reprojection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Rigid transform (rotation + translation), stored world-from-camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        let p = Self { rotation, translation };
        p.validate()?;
        Ok(p)
    }

    /// Checks Rᵀ·R = I and det(R) = 1 within 1e-9.
    pub fn validate(&self) -> Result<(), GeometryError> {
        let rtr = mat_mul(&transpose(&self.rotation), &self.rotation);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (rtr[i][j] - expect).abs() > 1e-9 {
                    return Err(GeometryError::InvalidPose(format!(
                        "rotation not orthonormal: (RᵀR)[{i}][{j}] = {}",
                        rtr[i][j]
                    )));
                }
            }
        }
        let d = det3(&self.rotation);
        if (d - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidPose(format!("det(R) = {d}")));
        }
        Ok(())
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: mat_mul(&self.rotation, &other.rotation),
            translation: {
                let t = mat_vec(&self.rotation, &other.translation);
                [
                    t[0] + self.translation[0],
                    t[1] + self.translation[1],
                    t[2] + self.translation[2],
                ]
            },
        }
    }

    pub fn invert(&self) -> Pose {
        let rt = transpose(&self.rotation);
        let t = mat_vec(&rt, &self.translation);
        Pose { rotation: rt, translation: [-t[0], -t[1], -t[2]] }
    }

    /// Relative motion mapping points in `to`'s camera frame into `from`'s
    /// camera frame: `from⁻¹ ∘ to`.
    pub fn relative(from: &Pose, to: &Pose) -> Pose {
        from.invert().compose(to)
    }

    /// Flattens to the 12-value row-major `[R | t]` layout used by pose CSVs.
    pub fn to_row(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
            r[2][2], t[2],
        ]
    }

    pub fn from_row(row: &[f64; 12]) -> Result<Self, GeometryError> {
        Pose::new(
            [
                [row[0], row[1], row[2]],
                [row[4], row[5], row[6]],
                [row[8], row[9], row[10]],
            ],
            [row[3], row[7], row[11]],
        )
    }
}

/// RGB image with channel intensities in [0, 1], row-major, 3 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// `height * width * 3` values.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self, GeometryError> {
        if data.len() != width * height * 3 {
            return Err(GeometryError::ShapeMismatch(format!(
                "image data length {} != {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }
}

pub const DEPTH_MIN_M: f64 = 0.1;
pub const DEPTH_MAX_M: f64 = 10.0;

/// Dense depth map in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// `height * width` values, row-major.
    pub data: Vec<f64>,
    pub valid_range: (f64, f64),
}

impl DepthMap {
    pub fn new(width: usize, height: usize, fill: f64) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
            valid_range: (DEPTH_MIN_M, DEPTH_MAX_M),
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self, GeometryError> {
        if data.len() != width * height {
            return Err(GeometryError::ShapeMismatch(format!(
                "depth data length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data, valid_range: (DEPTH_MIN_M, DEPTH_MAX_M) })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, d: f64) {
        self.data[row * self.width + col] = d;
    }

    pub fn clip_to_range(&mut self) {
        let (lo, hi) = self.valid_range;
        for d in &mut self.data {
            if d.is_finite() {
                *d = d.clamp(lo, hi);
            }
        }
    }
}

/// Lifts a pixel with known depth to a 3D point in the camera frame.
pub fn backproject(q: PixelCoord, depth: f64, k: &Intrinsics) -> Result<Vec3, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    Ok([
        (q.u - k.cx) / k.fx * depth,
        (q.v - k.cy) / k.fy * depth,
        depth,
    ])
}

/// Perspective projection of a camera-frame point onto the image plane.
pub fn project(p: &Vec3, k: &Intrinsics) -> Result<PixelCoord, GeometryError> {
    if !(p[2] > 0.0) {
        return Err(GeometryError::BehindCamera(p[2]));
    }
    Ok(PixelCoord::new(
        k.fx * p[0] / p[2] + k.cx,
        k.fy * p[1] / p[2] + k.cy,
    ))
}

/// Bilinear sample of `img` at a continuous coordinate known to lie within
/// `[0, w-1] × [0, h-1]`.
#[inline]
fn bilinear(img: &Image, u: f64, v: f64) -> [f64; 3] {
    let w = img.width;
    let h = img.height;
    let i0 = (v.floor() as usize).min(h.saturating_sub(2));
    let j0 = (u.floor() as usize).min(w.saturating_sub(2));
    let a = v - i0 as f64;
    let b = u - j0 as f64;
    let p00 = img.pixel(i0, j0);
    let p01 = img.pixel(i0, j0 + 1);
    let p10 = img.pixel(i0 + 1, j0);
    let p11 = img.pixel(i0 + 1, j0 + 1);
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = (1.0 - a) * ((1.0 - b) * p00[c] as f64 + b * p01[c] as f64)
            + a * ((1.0 - b) * p10[c] as f64 + b * p11[c] as f64);
    }
    out
}

/// d(bilinear)/d(u, v) at the same coordinate, per channel.
#[inline]
fn bilinear_grad(img: &Image, u: f64, v: f64) -> ([f64; 3], [f64; 3]) {
    let w = img.width;
    let h = img.height;
    let i0 = (v.floor() as usize).min(h.saturating_sub(2));
    let j0 = (u.floor() as usize).min(w.saturating_sub(2));
    let a = v - i0 as f64;
    let b = u - j0 as f64;
    let p00 = img.pixel(i0, j0);
    let p01 = img.pixel(i0, j0 + 1);
    let p10 = img.pixel(i0 + 1, j0);
    let p11 = img.pixel(i0 + 1, j0 + 1);
    let mut du = [0.0; 3];
    let mut dv = [0.0; 3];
    for c in 0..3 {
        du[c] = (1.0 - a) * (p01[c] as f64 - p00[c] as f64) + a * (p11[c] as f64 - p10[c] as f64);
        dv[c] = (1.0 - b) * (p10[c] as f64 - p00[c] as f64) + b * (p11[c] as f64 - p01[c] as f64);
    }
    (du, dv)
}

/// Reconstruction of the target view from `source` pixels: every target pixel
/// is backprojected with `depth`, moved by `relative_pose`, reprojected, and
/// bilinearly sampled from `source`. The mask is false where the reprojected
/// coordinate leaves the image or the transformed depth is non-positive.
pub fn warp_reconstruct(
    source: &Image,
    depth: &DepthMap,
    relative_pose: &Pose,
    k: &Intrinsics,
) -> Result<(Image, Vec<bool>), GeometryError> {
    let (recon, mask, _) = warp_impl(source, depth, relative_pose, k, false)?;
    Ok((recon, mask))
}

/// Same warp, additionally returning the per-pixel per-channel derivative of
/// the reconstruction with respect to the depth value at that pixel.
pub fn warp_reconstruct_with_grad(
    source: &Image,
    depth: &DepthMap,
    relative_pose: &Pose,
    k: &Intrinsics,
) -> Result<(Image, Vec<bool>, Vec<[f64; 3]>), GeometryError> {
    warp_impl(source, depth, relative_pose, k, true)
}

fn warp_impl(
    source: &Image,
    depth: &DepthMap,
    relative_pose: &Pose,
    k: &Intrinsics,
    with_grad: bool,
) -> Result<(Image, Vec<bool>, Vec<[f64; 3]>), GeometryError> {
    if source.width != k.width
        || source.height != k.height
        || depth.width != k.width
        || depth.height != k.height
    {
        return Err(GeometryError::ShapeMismatch(format!(
            "source {}x{}, depth {}x{}, intrinsics {}x{}",
            source.width, source.height, depth.width, depth.height, k.width, k.height
        )));
    }
    let w = k.width;
    let h = k.height;
    let mut recon = Image::new(w, h);
    let mut mask = vec![false; w * h];
    let mut grad = if with_grad { vec![[0.0; 3]; w * h] } else { Vec::new() };
    let r = &relative_pose.rotation;
    let t = &relative_pose.translation;
    let umax = (w - 1) as f64;
    let vmax = (h - 1) as f64;
    for row in 0..h {
        for col in 0..w {
            let d = depth.get(row, col);
            if !(d > 0.0) || !d.is_finite() {
                continue;
            }
            // Ray direction with unit z; point = dir * d.
            let dir = [
                (col as f64 - k.cx) / k.fx,
                (row as f64 - k.cy) / k.fy,
                1.0,
            ];
            let rd = mat_vec(r, &dir);
            let p = [rd[0] * d + t[0], rd[1] * d + t[1], rd[2] * d + t[2]];
            if !(p[2] > 0.0) {
                continue;
            }
            let u = k.fx * p[0] / p[2] + k.cx;
            let v = k.fy * p[1] / p[2] + k.cy;
            if !(u >= 0.0 && u <= umax && v >= 0.0 && v <= vmax) {
                continue;
            }
            let rgb = bilinear(source, u, v);
            recon.set_pixel(row, col, rgb);
            mask[row * w + col] = true;
            if with_grad {
                // dp/dd = rd; du/dd, dv/dd by the quotient rule.
                let z2 = p[2] * p[2];
                let du_dd = k.fx * (rd[0] * p[2] - p[0] * rd[2]) / z2;
                let dv_dd = k.fy * (rd[1] * p[2] - p[1] * rd[2]) / z2;
                let (gu, gv) = bilinear_grad(source, u, v);
                let mut g = [0.0; 3];
                for c in 0..3 {
                    g[c] = gu[c] * du_dd + gv[c] * dv_dd;
                }
                grad[row * w + col] = g;
            }
        }
    }
    Ok((recon, mask, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn k_test() -> Intrinsics {
        Intrinsics::new(200.0, 200.0, 200.0, 200.0, 400, 400).unwrap()
    }

    #[test]
    fn backproject_principal_axis() {
        let k = k_test();
        let p = backproject(PixelCoord::new(k.cx, k.cy), 2.0, &k).unwrap();
        assert_eq!(p, [0.0, 0.0, 2.0]);
    }

    #[test]
    fn backproject_unit_offset() {
        let k = k_test();
        let p = backproject(PixelCoord::new(k.cx + k.fx, k.cy), 1.0, &k).unwrap();
        assert_eq!(p, [1.0, 0.0, 1.0]);
    }

    #[test]
    fn backproject_rejects_nonpositive_depth() {
        let k = k_test();
        assert!(backproject(PixelCoord::new(10.0, 10.0), 0.0, &k).is_err());
        assert!(backproject(PixelCoord::new(10.0, 10.0), -1.0, &k).is_err());
    }

    #[test]
    fn project_trivial_cases() {
        let k = k_test();
        let q = project(&[0.0, 0.0, 5.0], &k).unwrap();
        assert_eq!((q.u, q.v), (k.cx, k.cy));
        let q = project(&[1.0, 0.0, 1.0], &k).unwrap();
        assert_eq!((q.u, q.v), (400.0, 200.0));
        assert!(project(&[0.0, 0.0, 0.0], &k).is_err());
        assert!(project(&[0.0, 0.0, -2.0], &k).is_err());
    }

    #[test]
    fn project_backproject_round_trip() {
        let k = k_test();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let q = PixelCoord::new(
                rng.gen_range(0.0..400.0),
                rng.gen_range(0.0..400.0),
            );
            let d = rng.gen_range(0.1..=10.0);
            let p = backproject(q, d, &k).unwrap();
            let q2 = project(&p, &k).unwrap();
            assert!((q2.u - q.u).abs() < 1e-9 && (q2.v - q.v).abs() < 1e-9);
        }
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        // Rotation from three random axis rotations.
        let (a, b, c) = (
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
        );
        let rz = [[f64::cos(a), -f64::sin(a), 0.0], [f64::sin(a), f64::cos(a), 0.0], [0.0, 0.0, 1.0]];
        let ry = [[f64::cos(b), 0.0, f64::sin(b)], [0.0, 1.0, 0.0], [-f64::sin(b), 0.0, f64::cos(b)]];
        let rx = [[1.0, 0.0, 0.0], [0.0, f64::cos(c), -f64::sin(c)], [0.0, f64::sin(c), f64::cos(c)]];
        Pose {
            rotation: mat_mul(&rz, &mat_mul(&ry, &rx)),
            translation: [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ],
        }
    }

    #[test]
    fn pose_compose_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random_pose(&mut rng);
        let composed = Pose::identity().compose(&b);
        assert!(composed
            .to_row()
            .iter()
            .zip(b.to_row().iter())
            .all(|(x, y)| (x - y).abs() < 1e-12));
        let a = random_pose(&mut rng);
        let id = a.compose(&a.invert());
        let expect = Pose::identity().to_row();
        for (x, y) in id.to_row().iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
        let back = a.invert().invert();
        for (x, y) in back.to_row().iter().zip(a.to_row().iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn pose_chain_matches_homogeneous_matrix_oracle() {
        // Oracle: 4x4 homogeneous matrix multiplication.
        fn to44(p: &Pose) -> [[f64; 4]; 4] {
            let mut m = [[0.0; 4]; 4];
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] = p.rotation[i][j];
                }
                m[i][3] = p.translation[i];
            }
            m[3][3] = 1.0;
            m
        }
        fn mul44(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
            let mut out = [[0.0; 4]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    for k in 0..4 {
                        out[i][j] += a[i][k] * b[k][j];
                    }
                }
            }
            out
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let poses: Vec<Pose> = (0..4).map(|_| random_pose(&mut rng)).collect();
            let chained = poses.iter().skip(1).fold(poses[0], |acc, p| acc.compose(p));
            let m = poses.iter().skip(1).fold(to44(&poses[0]), |acc, p| mul44(&acc, &to44(p)));
            let expect = to44(&chained);
            for i in 0..4 {
                for j in 0..4 {
                    assert!((m[i][j] - expect[i][j]).abs() < 1e-9);
                }
            }
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        let data = (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0f64)).collect();
        Image::from_data(w, h, data).unwrap()
    }

    #[test]
    fn identity_warp_reproduces_source() {
        let k = Intrinsics::new(16.0, 16.0, 16.0, 16.0, 32, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 32, 32);
        let mut depth = DepthMap::new(32, 32, 0.0);
        for d in &mut depth.data {
            *d = rng.gen_range(0.5..5.0);
        }
        let (recon, mask) = warp_reconstruct(&img, &depth, &Pose::identity(), &k).unwrap();
        assert!(mask.iter().all(|&m| m));
        for (a, b) in recon.data.iter().zip(img.data.iter()) {
            assert!((*a as f64 - *b as f64).abs() <= 1e-12);
        }
    }

    #[test]
    fn translation_warp_shifts_plane() {
        // Fronto-parallel plane at depth d, camera translated by tx along +x:
        // every valid pixel samples the source shifted by fx*tx/d columns.
        let k = Intrinsics::new(16.0, 16.0, 16.0, 16.0, 32, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 32, 32);
        let d = 2.0;
        let tx = 0.5;
        let depth = DepthMap::new(32, 32, d);
        let pose = Pose { rotation: Pose::identity().rotation, translation: [tx, 0.0, 0.0] };
        let (recon, mask) = warp_reconstruct(&img, &depth, &pose, &k).unwrap();
        let shift = (k.fx * tx / d).round() as i64; // 4 columns
        // Brute-force per-pixel reprojection oracle.
        for row in 0..32usize {
            for col in 0..32usize {
                let src_col = col as i64 + shift;
                let idx = row * 32 + col;
                if src_col >= 0 && src_col < 32 {
                    assert!(mask[idx]);
                    let got = recon.pixel(row, col);
                    let expect = img.pixel(row, src_col as usize);
                    for c in 0..3 {
                        assert!((got[c] - expect[c]).abs() < 1e-6);
                    }
                } else {
                    assert!(!mask[idx]);
                }
            }
        }
    }

    #[test]
    fn behind_camera_warp_masks_everything() {
        let k = Intrinsics::new(16.0, 16.0, 16.0, 16.0, 32, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_image(&mut rng, 32, 32);
        let depth = DepthMap::new(32, 32, 1.0);
        // Move the scene far behind the camera.
        let pose = Pose { rotation: Pose::identity().rotation, translation: [0.0, 0.0, -100.0] };
        let (_, mask) = warp_reconstruct(&img, &depth, &pose, &k).unwrap();
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn warp_scale_ambiguity() {
        // Scaling depth and translation by the same factor leaves the
        // reconstruction unchanged.
        let k = Intrinsics::new(16.0, 16.0, 16.0, 16.0, 32, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = random_image(&mut rng, 32, 32);
        let mut depth = DepthMap::new(32, 32, 0.0);
        for d in &mut depth.data {
            *d = rng.gen_range(1.0..5.0);
        }
        let pose = Pose { rotation: Pose::identity().rotation, translation: [0.1, 0.05, 0.02] };
        let (r1, m1) = warp_reconstruct(&img, &depth, &pose, &k).unwrap();
        let lambda = 2.5;
        let mut depth2 = depth.clone();
        for d in &mut depth2.data {
            *d *= lambda;
        }
        let pose2 = Pose {
            rotation: pose.rotation,
            translation: [0.1 * lambda, 0.05 * lambda, 0.02 * lambda],
        };
        let (r2, m2) = warp_reconstruct(&img, &depth2, &pose2, &k).unwrap();
        assert_eq!(m1, m2);
        for i in 0..m1.len() {
            if m1[i] {
                for c in 0..3 {
                    let a = r1.data[i * 3 + c] as f64;
                    let b = r2.data[i * 3 + c] as f64;
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn warp_shape_mismatch_errors() {
        let k = Intrinsics::new(16.0, 16.0, 16.0, 16.0, 32, 32).unwrap();
        let img = Image::new(16, 16);
        let depth = DepthMap::new(32, 32, 1.0);
        assert!(warp_reconstruct(&img, &depth, &Pose::identity(), &k).is_err());
    }
}
