//! Rigid-body and pinhole projection primitives.
//!
//! Conventions used throughout the crate:
//! - camera frame is x right, y down, z forward;
//! - pixel `(u, v)` sits at integer coordinates with `u in [0, W)`, `v in [0, H)`;
//! - the principal point is the image center `(W/2, H/2)`;
//! - a [`PoseSE3`] maps camera coordinates to world coordinates.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Row-major `H x W` grid of per-pixel values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type PointMap = Grid<Vector3<f64>>;
pub type ConfMap = Grid<f64>;
pub type Mask = Grid<bool>;

impl<T> Grid<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "grid dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "grid {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds a grid by evaluating `f(u, v)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(width > 0 && height > 0, "grid dimensions must be positive");
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[v * self.width + u]
    }

    /// Pixel coordinates of flat index `idx`.
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.width, idx / self.width)
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self::from_fn(width, height, |_, _| value.clone())
    }
}

/// Re-centered pixel coordinates `(u - W/2, v - H/2)`.
pub fn centered_pixel(u: usize, v: usize, width: usize, height: usize) -> (f64, f64) {
    (u as f64 - width as f64 / 2.0, v as f64 - height as f64 / 2.0)
}

/// Rigid transform: rotation followed by translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Checked constructor; the rotation must be proper orthonormal.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !is_rotation(&rotation, ORTHONORMAL_TOL) {
            return Err(Error::InvalidInput(
                "rotation is not orthonormal with determinant +1".into(),
            ));
        }
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidInput("translation is not finite".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_axis_angle(axis_angle: &Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: so3_exp(axis_angle),
            translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Reads a homogeneous matrix, projecting the rotation block back onto SO(3)
    /// (matrices stored in single precision are only orthonormal to ~1e-7).
    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
        let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into();
        if !r.iter().chain(t.iter()).all(|x| x.is_finite()) {
            return Err(Error::InvalidInput("pose matrix is not finite".into()));
        }
        if !is_rotation(&r, 1e-4) {
            return Err(Error::InvalidInput(
                "pose matrix rotation block is not a rotation".into(),
            ));
        }
        Ok(Self {
            rotation: nearest_rotation(&r),
            translation: t,
        })
    }

    /// Left perturbation `exp(delta) * R`, translation untouched.
    pub fn perturb_rotation_left(&mut self, delta: &Vector3<f64>) {
        self.rotation = so3_exp(delta) * self.rotation;
    }
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    err <= tol && (r.determinant() - 1.0).abs() <= tol
}

/// Closest proper rotation in the Frobenius sense.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rodrigues formula with series fallbacks near zero.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(w);
    let (a, b) = if theta < 1e-4 {
        // sin(t)/t and (1-cos(t))/t^2 to fourth order
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        )
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Inverse of [`so3_exp`]. At an angle of exactly pi the axis sign is chosen so
/// that its largest-magnitude component is positive.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);

    if theta < 1e-4 {
        // theta / (2 sin theta) ~ 1/2 + theta^2/12
        return vee * (0.5 + theta * theta / 12.0);
    }
    if std::f64::consts::PI - theta > 1e-6 {
        return vee * (theta / (2.0 * theta.sin()));
    }

    // Near pi: (R + I) / 2 = a a^T + O(pi - theta).
    let b = (r + Matrix3::identity()) * 0.5;
    let k = (0..3)
        .max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)]))
        .unwrap_or(0);
    let ak = b[(k, k)].max(0.0).sqrt();
    let mut axis = Vector3::new(b[(0, k)], b[(1, k)], b[(2, k)]) / ak.max(f64::MIN_POSITIVE);
    axis.normalize_mut();

    let s = axis.dot(&vee);
    let flip = if s.abs() > 1e-12 {
        s < 0.0
    } else {
        let largest = (0..3)
            .max_by(|&i, &j| axis[i].abs().total_cmp(&axis[j].abs()))
            .unwrap_or(0);
        axis[largest] < 0.0
    };
    if flip {
        axis = -axis;
    }
    axis * theta
}

/// Focal length in pixels plus image size; principal point at the image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    focal: f64,
    width: usize,
    height: usize,
}

impl CameraIntrinsics {
    pub fn new(focal: f64, width: usize, height: usize) -> Result<Self> {
        if !(focal.is_finite() && focal > 0.0) {
            return Err(Error::InvalidInput(format!(
                "focal must be positive, got {focal}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("image size must be positive".into()));
        }
        Ok(Self {
            focal,
            width,
            height,
        })
    }

    pub fn focal(&self) -> f64 {
        self.focal
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    /// Camera-frame point at pixel `(u, v)` with depth (z) `depth`.
    pub fn unproject(&self, u: usize, v: usize, depth: f64) -> Vector3<f64> {
        let (uc, vc) = centered_pixel(u, v, self.width, self.height);
        Vector3::new(depth * uc / self.focal, depth * vc / self.focal, depth)
    }

    /// Pinhole projection of a camera-frame point to `(u, v, depth)`.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64, f64) {
        let (cx, cy) = self.principal_point();
        (
            self.focal * p.x / p.z + cx,
            self.focal * p.y / p.z + cy,
            p.z,
        )
    }
}

/// Strictly positive per-pixel depth (camera-frame z).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap(Grid<f64>);

impl DepthMap {
    pub fn new(values: Grid<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "depth values must be finite and positive, found {bad}"
            )));
        }
        Ok(Self(values))
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn into_grid(self) -> Grid<f64> {
        self.0
    }
}

/// World-frame points `T * D_p * K^-1 (u, v, 1)` for every pixel.
pub fn back_project(depth: &DepthMap, intr: &CameraIntrinsics, pose: &PoseSE3) -> Result<PointMap> {
    if depth.width() != intr.width() || depth.height() != intr.height() {
        return Err(Error::InvalidInput(format!(
            "depth map is {}x{} but intrinsics are {}x{}",
            depth.width(),
            depth.height(),
            intr.width(),
            intr.height()
        )));
    }
    let g = depth.grid();
    Ok(Grid::from_fn(g.width(), g.height(), |u, v| {
        pose.transform_point(&intr.unproject(u, v, *g.get(u, v)))
    }))
}
