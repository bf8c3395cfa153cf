//! Coordinate conventions and 2-D affine maps.
//!
//! Positions live in normalized image coordinates: `x` runs along columns and
//! `y` along rows, both spanning `[-1, 1]`, with `(-1, -1)` at the center of
//! the top-left pixel and `(1, 1)` at the center of the bottom-right pixel.

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{DamError, Result};

/// Determinant magnitude below which a linear map is treated as singular.
pub const EPSILON_DET: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ZERO: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.x, self.y]
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(v: [f64; 2]) -> Self {
        Point2::new(v[0], v[1])
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl AddAssign for Point2 {
    fn add_assign(&mut self, rhs: Point2) {
        self.x += rhs.x;
        self.y += rhs.y;
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl SubAssign for Point2 {
    fn sub_assign(&mut self, rhs: Point2) {
        self.x -= rhs.x;
        self.y -= rhs.y;
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

impl Mul<Point2> for f64 {
    type Output = Point2;
    fn mul(self, p: Point2) -> Point2 {
        p * self
    }
}

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

/// Row-major 2x2 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat2 {
    pub m: [[f64; 2]; 2],
}

impl Default for Mat2 {
    fn default() -> Self {
        Mat2::IDENTITY
    }
}

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2 {
        m: [[1.0, 0.0], [0.0, 1.0]],
    };
    pub const ZERO: Mat2 = Mat2 {
        m: [[0.0, 0.0], [0.0, 0.0]],
    };

    pub const fn new(m00: f64, m01: f64, m10: f64, m11: f64) -> Self {
        Mat2 {
            m: [[m00, m01], [m10, m11]],
        }
    }

    pub fn diag(a: f64, b: f64) -> Self {
        Mat2::new(a, 0.0, 0.0, b)
    }

    pub fn rotation(radians: f64) -> Self {
        let (s, c) = radians.sin_cos();
        Mat2::new(c, -s, s, c)
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn transpose(&self) -> Mat2 {
        Mat2::new(self.m[0][0], self.m[1][0], self.m[0][1], self.m[1][1])
    }

    pub fn mul_point(&self, p: Point2) -> Point2 {
        Point2::new(
            self.m[0][0] * p.x + self.m[0][1] * p.y,
            self.m[1][0] * p.x + self.m[1][1] * p.y,
        )
    }

    pub fn mul_mat(&self, o: &Mat2) -> Mat2 {
        let a = &self.m;
        let b = &o.m;
        Mat2::new(
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        )
    }

    /// Outer product `u vᵀ`.
    pub fn outer(u: Point2, v: Point2) -> Mat2 {
        Mat2::new(u.x * v.x, u.x * v.y, u.y * v.x, u.y * v.y)
    }

    pub fn add_scaled(&mut self, o: &Mat2, s: f64) {
        for r in 0..2 {
            for c in 0..2 {
                self.m[r][c] += s * o.m[r][c];
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|v| v.is_finite())
    }

    pub fn inverse(&self) -> Result<Mat2> {
        let det = self.det();
        if !(det.abs() > EPSILON_DET) {
            return Err(DamError::SingularTransform { det });
        }
        Ok(Mat2::new(
            self.m[1][1] / det,
            -self.m[0][1] / det,
            -self.m[1][0] / det,
            self.m[0][0] / det,
        ))
    }

    pub fn entries(&self) -> [f64; 4] {
        [self.m[0][0], self.m[0][1], self.m[1][0], self.m[1][1]]
    }

    pub fn from_entries(e: [f64; 4]) -> Mat2 {
        Mat2::new(e[0], e[1], e[2], e[3])
    }
}

/// `p ↦ linear·p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2 {
    pub linear: Mat2,
    pub translation: Point2,
}

impl Default for Affine2 {
    fn default() -> Self {
        Affine2::IDENTITY
    }
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 {
        linear: Mat2::IDENTITY,
        translation: Point2::ZERO,
    };

    pub fn new(linear: Mat2, translation: Point2) -> Self {
        Affine2 {
            linear,
            translation,
        }
    }

    pub fn translation(t: Point2) -> Self {
        Affine2::new(Mat2::IDENTITY, t)
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        apply_affine(self, p)
    }

    pub fn det(&self) -> f64 {
        self.linear.det()
    }

    pub fn inverse(&self) -> Result<Affine2> {
        invert_affine(self)
    }

    pub fn is_finite(&self) -> bool {
        self.linear.is_finite() && self.translation.is_finite()
    }
}

pub fn apply_affine(a: &Affine2, p: Point2) -> Point2 {
    a.linear.mul_point(p) + a.translation
}

pub fn invert_affine(a: &Affine2) -> Result<Affine2> {
    let inv = a.linear.inverse()?;
    Ok(Affine2::new(inv, -inv.mul_point(a.translation)))
}

/// Raster dimensions in pixels; both sides must be at least 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
}

impl GridSpec {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(DamError::InvalidGrid(format!(
                "{height}x{width}: both sides must be at least 2"
            )));
        }
        Ok(GridSpec { height, width })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixels per normalized unit along x (columns).
    pub fn px_per_unit_x(&self) -> f64 {
        (self.width - 1) as f64 / 2.0
    }

    /// Pixels per normalized unit along y (rows).
    pub fn px_per_unit_y(&self) -> f64 {
        (self.height - 1) as f64 / 2.0
    }

    pub fn pixel_to_norm(&self, row: usize, col: usize) -> Point2 {
        pixel_to_norm(self, row, col)
    }

    pub fn norm_to_pixel(&self, p: Point2) -> (f64, f64) {
        norm_to_pixel(self, p)
    }

    /// Iterates pixel centers in row-major order.
    pub fn centers(&self) -> impl Iterator<Item = Point2> + '_ {
        (0..self.height).flat_map(move |r| (0..self.width).map(move |c| pixel_to_norm(self, r, c)))
    }
}

pub fn pixel_to_norm(spec: &GridSpec, row: usize, col: usize) -> Point2 {
    Point2::new(
        2.0 * col as f64 / (spec.width - 1) as f64 - 1.0,
        2.0 * row as f64 / (spec.height - 1) as f64 - 1.0,
    )
}

/// Continuous inverse of [`pixel_to_norm`], returned as `(row, col)`.
pub fn norm_to_pixel(spec: &GridSpec, p: Point2) -> (f64, f64) {
    (
        (p.y + 1.0) * spec.px_per_unit_y(),
        (p.x + 1.0) * spec.px_per_unit_x(),
    )
}
