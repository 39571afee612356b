//! Pinhole cameras, ego/camera transforms, BEV grid indexing and object rays.
//!
//! Conventions: the ego frame is x-forward, y-left, z-up (meters). Camera
//! frames are z-forward, x-right, y-down, and pixel coordinates follow
//! `u = fx * x / z + cx`, `v = fy * y / z + cy`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Depths at or below this are treated as behind the camera.
pub const MIN_VISIBLE_DEPTH: f64 = 1e-6;

/// Negative samples must stay at least this far (as a fraction of the
/// object distance) from the object along its ray.
pub const NEGATIVE_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EgoPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn xy(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CamPoint {
    pub u: f64,
    pub v: f64,
    pub d: f64,
}

impl CamPoint {
    pub fn new(u: f64, v: f64, d: f64) -> Self {
        Self { u, v, d }
    }
}

/// Intrinsics plus the ego-to-camera extrinsic transform of one pinhole camera.
///
/// `rotation` is row-major and maps ego coordinates into the camera frame:
/// `p_cam = rotation * p_ego + translation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCamera", into = "RawCamera")]
pub struct CameraModel {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCamera {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    width: usize,
    height: usize,
}

impl TryFrom<RawCamera> for CameraModel {
    type Error = Error;

    fn try_from(r: RawCamera) -> Result<Self> {
        CameraModel::new(r.fx, r.fy, r.cx, r.cy, r.rotation, r.translation, r.width, r.height)
    }
}

impl From<CameraModel> for RawCamera {
    fn from(c: CameraModel) -> Self {
        RawCamera {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: c.rotation,
            translation: c.translation,
            width: c.width,
            height: c.height,
        }
    }
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidCamera(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera("image dimensions must be positive".into()));
        }
        let all_finite = [fx, fy, cx, cy].iter().all(|v| v.is_finite())
            && rotation.iter().flatten().all(|v| v.is_finite())
            && translation.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidCamera("non-finite parameter".into()));
        }
        let err = orthonormality_error(&rotation);
        if err >= 1e-9 {
            return Err(Error::InvalidCamera(format!("rotation is not orthonormal (max error {err:e})")));
        }
        if determinant(&rotation) <= 0.0 {
            return Err(Error::InvalidCamera("rotation has negative determinant".into()));
        }
        Ok(Self { fx, fy, cx, cy, rotation, translation, width, height })
    }

    /// Camera with its optical center at the ego origin, looking horizontally
    /// along `yaw` (radians, counter-clockwise from the ego x axis), with the
    /// principal point at the image center.
    pub fn looking_along(yaw: f64, fx: f64, fy: f64, width: usize, height: usize) -> Result<Self> {
        let (s, c) = yaw.sin_cos();
        let rotation = [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]];
        Self::new(fx, fy, width as f64 / 2.0, height as f64 / 2.0, rotation, [0.0; 3], width, height)
    }

    /// Same orientation and intrinsics, with the optical center moved to
    /// `position` in the ego frame.
    pub fn with_position(mut self, position: EgoPoint) -> Self {
        let r = &self.rotation;
        let p = [position.x, position.y, position.z];
        for (t, row) in self.translation.iter_mut().zip(r) {
            *t = -(row[0] * p[0] + row[1] * p[1] + row[2] * p[2]);
        }
        self
    }

    /// Optical center in the ego frame: `-R^T t`.
    pub fn position(&self) -> EgoPoint {
        let r = &self.rotation;
        let t = &self.translation;
        let mut p = [0.0; 3];
        for (i, pi) in p.iter_mut().enumerate() {
            *pi = -(r[0][i] * t[0] + r[1][i] * t[1] + r[2][i] * t[2]);
        }
        EgoPoint::new(p[0], p[1], p[2])
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }
    pub fn translation(&self) -> &[f64; 3] {
        &self.translation
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
}

fn orthonormality_error(r: &[[f64; 3]; 3]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

fn determinant(r: &[[f64; 3]; 3]) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

/// Projects an ego-frame point into `cam`.
pub fn ego_to_cam(p: EgoPoint, cam: &CameraModel) -> Result<CamPoint> {
    let r = &cam.rotation;
    let t = &cam.translation;
    let q = [p.x, p.y, p.z];
    let mut pc = [0.0; 3];
    for i in 0..3 {
        pc[i] = r[i][0] * q[0] + r[i][1] * q[1] + r[i][2] * q[2] + t[i];
    }
    if !(pc[2] > MIN_VISIBLE_DEPTH) {
        return Err(Error::BehindCamera { depth: pc[2] });
    }
    Ok(CamPoint {
        u: cam.fx * pc[0] / pc[2] + cam.cx,
        v: cam.fy * pc[1] / pc[2] + cam.cy,
        d: pc[2],
    })
}

/// Back-projects a pixel at depth `d` into the ego frame.
pub fn cam_to_ego(c: CamPoint, cam: &CameraModel) -> Result<EgoPoint> {
    if !(c.d > 0.0) {
        return Err(Error::InvalidDepth(c.d));
    }
    let pc = [
        (c.u - cam.cx) * c.d / cam.fx - cam.translation[0],
        (c.v - cam.cy) * c.d / cam.fy - cam.translation[1],
        c.d - cam.translation[2],
    ];
    let r = &cam.rotation;
    let mut p = [0.0; 3];
    for (i, pi) in p.iter_mut().enumerate() {
        *pi = r[0][i] * pc[0] + r[1][i] * pc[1] + r[2][i] * pc[2];
    }
    Ok(EgoPoint::new(p[0], p[1], p[2]))
}

/// Square BEV region `[-extent, extent)^2` split into `resolution^2` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevGrid {
    pub extent: f64,
    pub resolution: usize,
    pub d_max: f64,
}

impl Default for BevGrid {
    fn default() -> Self {
        Self::new(51.2, 20).expect("default grid is valid")
    }
}

impl BevGrid {
    pub fn new(extent: f64, resolution: usize) -> Result<Self> {
        if !(extent > 0.0 && extent.is_finite()) || resolution == 0 {
            return Err(Error::InvalidConfig(format!("bad BEV grid: extent {extent}, resolution {resolution}")));
        }
        Ok(Self { extent, resolution, d_max: extent * std::f64::consts::SQRT_2 })
    }

    /// Overrides the normalizing depth (e.g. the rounded 72.4 used for a 51.2 m grid).
    pub fn with_d_max(mut self, d_max: f64) -> Result<Self> {
        if !(d_max > 0.0) || (d_max - self.extent * std::f64::consts::SQRT_2).abs() >= 0.05 * self.extent / 51.2 {
            return Err(Error::InvalidConfig(format!("d_max {d_max} inconsistent with extent {}", self.extent)));
        }
        self.d_max = d_max;
        Ok(self)
    }

    pub fn cell_size(&self) -> f64 {
        2.0 * self.extent / self.resolution as f64
    }

    pub fn num_cells(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x.abs() < self.extent && y.abs() < self.extent
    }

    /// Center of cell `(row, col)`; rows run along y, columns along x.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let cs = self.cell_size();
        (-self.extent + (col as f64 + 0.5) * cs, -self.extent + (row as f64 + 0.5) * cs)
    }

    /// Center of the cell with row-major index `index`.
    pub fn cell_center_index(&self, index: usize) -> (f64, f64) {
        self.cell_center(index / self.resolution, index % self.resolution)
    }

    pub fn cell_index(&self, row: usize, col: usize) -> usize {
        row * self.resolution + col
    }
}

/// Maps a BEV position to its `(row, col)` cell. Cells include their low
/// edge, so positions on an interior boundary go to the higher-index cell.
pub fn bev_cell_of(xy: (f64, f64), grid: &BevGrid) -> Result<(usize, usize)> {
    let (x, y) = xy;
    if !(x > -grid.extent && x < grid.extent && y > -grid.extent && y < grid.extent) {
        return Err(Error::OutOfBev { x, y, extent: grid.extent });
    }
    let cs = grid.cell_size();
    let last = grid.resolution - 1;
    let col = (((x + grid.extent) / cs).floor() as usize).min(last);
    let row = (((y + grid.extent) / cs).floor() as usize).min(last);
    Ok((row, col))
}

/// BEV ray from a camera position (the origin by default) through an object center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectRay {
    pub origin: (f64, f64),
    pub direction: (f64, f64),
}

/// Object ray from the BEV origin to `center_xy`.
pub fn object_ray(center_xy: (f64, f64)) -> Result<ObjectRay> {
    ObjectRay::new((0.0, 0.0), center_xy)
}

impl ObjectRay {
    /// Ray from `origin` through `target`; `direction` is `target - origin`,
    /// so `lambda = 1` lands on the target.
    pub fn new(origin: (f64, f64), target: (f64, f64)) -> Result<Self> {
        let direction = (target.0 - origin.0, target.1 - origin.1);
        if direction == (0.0, 0.0) {
            return Err(Error::DegenerateRay);
        }
        Ok(Self { origin, direction })
    }

    pub fn at(&self, lambda: f64) -> (f64, f64) {
        (self.origin.0 + lambda * self.direction.0, self.origin.1 + lambda * self.direction.1)
    }

    /// Exclusive upper bound on lambda that keeps `at(lambda)` inside the grid.
    /// With the origin at (0, 0) this is `extent / max(|x|, |y|)`.
    pub fn lambda_upper_bound(&self, grid: &BevGrid) -> f64 {
        let axis = |o: f64, d: f64| {
            if d > 0.0 {
                (grid.extent - o) / d
            } else if d < 0.0 {
                (grid.extent + o) / -d
            } else {
                f64::INFINITY
            }
        };
        axis(self.origin.0, self.direction.0).min(axis(self.origin.1, self.direction.1))
    }

    /// Valid range for negative samples on this ray.
    pub fn negative_range(&self, grid: &BevGrid) -> NegativeLambdaRange {
        NegativeLambdaRange { upper: self.lambda_upper_bound(grid) }
    }
}

/// The set `(0, 1 - m) u (1 + m, upper)` with `m = NEGATIVE_MARGIN`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegativeLambdaRange {
    pub upper: f64,
}

impl NegativeLambdaRange {
    pub fn contains(&self, lambda: f64) -> bool {
        let near = lambda > 0.0 && lambda < 1.0 - NEGATIVE_MARGIN;
        let far = lambda > 1.0 + NEGATIVE_MARGIN && lambda < self.upper;
        near || far
    }

    /// Uniform draw over the set by rejection from `(0, max(0.8, upper))`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let hi = self.upper.max(1.0 - NEGATIVE_MARGIN);
        loop {
            let lambda = rng.random::<f64>() * hi;
            if self.contains(lambda) {
                return lambda;
            }
        }
    }
}

/// Position at `lambda` along the ray; `lambda = 1` is the object center.
pub fn sample_ray_position(ray: &ObjectRay, lambda: f64) -> Result<(f64, f64)> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidConfig(format!("ray parameter must be positive, got {lambda}")));
    }
    Ok(ray.at(lambda))
}

/// Position of a negative sample; rejects lambdas too close to the object or
/// beyond the BEV extent.
pub fn sample_negative_position(ray: &ObjectRay, lambda: f64, grid: &BevGrid) -> Result<(f64, f64)> {
    let range = ray.negative_range(grid);
    if !range.contains(lambda) {
        return Err(Error::InvalidNegativeLambda { lambda, upper: range.upper });
    }
    Ok(ray.at(lambda))
}
