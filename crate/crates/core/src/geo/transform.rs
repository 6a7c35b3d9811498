use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point2 = [f64; 2];

/// Vehicle pose in world meters. `yaw` is kept in `(−π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

pub fn normalize_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    /// Unit heading vector.
    pub fn heading(&self) -> Point2 {
        [self.yaw.cos(), self.yaw.sin()]
    }

    /// Heading rotated by +90°; tile rows advance along this axis.
    pub fn lateral(&self) -> Point2 {
        [-self.yaw.sin(), self.yaw.cos()]
    }
}

/// Which family of world→pixel maps a landmark fit searches over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformModel {
    #[default]
    Similarity,
    Affine,
}

/// World meters → raster pixels: `pixel = linear · world + offset`.
///
/// For a similarity, `linear = R(rotation) / meters_per_pixel`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub linear: [[f64; 2]; 2],
    pub offset: Point2,
}

impl GeoTransform {
    pub fn identity() -> Self {
        Self::similarity(1.0, 0.0, [0.0, 0.0]).expect("valid")
    }

    pub fn similarity(meters_per_pixel: f64, rotation: f64, translation: Point2) -> Result<Self> {
        if !(meters_per_pixel > 0.0) || !meters_per_pixel.is_finite() {
            return Err(Error::Degenerate(format!(
                "meters per pixel must be positive, got {meters_per_pixel}"
            )));
        }
        let s = 1.0 / meters_per_pixel;
        let (sin, cos) = rotation.sin_cos();
        Ok(Self {
            linear: [[s * cos, -s * sin], [s * sin, s * cos]],
            offset: translation,
        })
    }

    pub fn affine(linear: [[f64; 2]; 2], offset: Point2) -> Result<Self> {
        let t = Self { linear, offset };
        if !(t.determinant() > 0.0) {
            return Err(Error::Degenerate(format!(
                "linear part must preserve orientation (det = {})",
                t.determinant()
            )));
        }
        Ok(t)
    }

    pub fn determinant(&self) -> f64 {
        let l = &self.linear;
        l[0][0] * l[1][1] - l[0][1] * l[1][0]
    }

    /// Pixels per meter (geometric mean for a non-similarity).
    pub fn scale(&self) -> f64 {
        self.determinant().sqrt()
    }

    pub fn meters_per_pixel(&self) -> f64 {
        1.0 / self.scale()
    }

    /// Rotation angle of the linear part, in `(−π, π]`.
    pub fn rotation(&self) -> f64 {
        let l = &self.linear;
        (l[1][0] - l[0][1]).atan2(l[0][0] + l[1][1])
    }

    pub fn translation(&self) -> Point2 {
        self.offset
    }

    /// True when the linear part is a scaled rotation (within `tol`).
    pub fn is_similarity(&self, tol: f64) -> bool {
        let l = &self.linear;
        (l[0][0] - l[1][1]).abs() <= tol && (l[0][1] + l[1][0]).abs() <= tol
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let l = &self.linear;
        [
            l[0][0] * p[0] + l[0][1] * p[1] + self.offset[0],
            l[1][0] * p[0] + l[1][1] * p[1] + self.offset[1],
        ]
    }

    pub fn invert(&self, q: Point2) -> Point2 {
        let l = &self.linear;
        let det = self.determinant();
        let (dx, dy) = (q[0] - self.offset[0], q[1] - self.offset[1]);
        [
            (l[1][1] * dx - l[0][1] * dy) / det,
            (-l[1][0] * dx + l[0][0] * dy) / det,
        ]
    }
}

/// Result of a landmark fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkFit {
    pub transform: GeoTransform,
    /// `sqrt(mean ‖pixel_i − T(world_i)‖²)` in pixels.
    pub rms_residual_px: f64,
    /// The same residual expressed in meters.
    pub rms_residual_m: f64,
}

/// Least-squares similarity from landmark pairs (closed-form Procrustes with
/// scale).
pub fn solve_landmark_transform(world: &[Point2], pixel: &[Point2]) -> Result<LandmarkFit> {
    solve_landmark_transform_with(world, pixel, TransformModel::Similarity)
}

pub fn solve_landmark_transform_with(world: &[Point2], pixel: &[Point2], model: TransformModel) -> Result<LandmarkFit> {
    if world.len() != pixel.len() {
        return Err(Error::Degenerate(format!(
            "{} world points but {} pixel points",
            world.len(),
            pixel.len()
        )));
    }
    let min_pairs = match model {
        TransformModel::Similarity => 2,
        TransformModel::Affine => 3,
    };
    if world.len() < min_pairs {
        return Err(Error::Degenerate(format!(
            "need at least {min_pairs} landmark pairs, got {}",
            world.len()
        )));
    }
    let n = world.len() as f64;
    let wc = centroid(world);
    let pc = centroid(pixel);
    let wd: Vec<Point2> = world.iter().map(|p| [p[0] - wc[0], p[1] - wc[1]]).collect();
    let pd: Vec<Point2> = pixel.iter().map(|p| [p[0] - pc[0], p[1] - pc[1]]).collect();
    let spread: f64 = wd.iter().map(|d| d[0] * d[0] + d[1] * d[1]).sum();
    if spread <= f64::EPSILON * n * (1.0 + wc[0].abs() + wc[1].abs()).powi(2) {
        return Err(Error::Degenerate("world landmarks are coincident".into()));
    }

    let linear = match model {
        TransformModel::Similarity => {
            // Treating points as complex numbers, the optimal scaled rotation
            // is Σ conj(w)·p / Σ |w|².
            let (mut re, mut im) = (0.0, 0.0);
            for (w, p) in wd.iter().zip(&pd) {
                re += w[0] * p[0] + w[1] * p[1];
                im += w[0] * p[1] - w[1] * p[0];
            }
            let (a, b) = (re / spread, im / spread);
            if a * a + b * b <= 0.0 {
                return Err(Error::Degenerate("pixel landmarks are coincident".into()));
            }
            [[a, -b], [b, a]]
        }
        TransformModel::Affine => {
            let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
            let mut cross = [[0.0; 2]; 2];
            for (w, p) in wd.iter().zip(&pd) {
                sxx += w[0] * w[0];
                sxy += w[0] * w[1];
                syy += w[1] * w[1];
                for r in 0..2 {
                    cross[r][0] += p[r] * w[0];
                    cross[r][1] += p[r] * w[1];
                }
            }
            let det = sxx * syy - sxy * sxy;
            if det.abs() <= 1e-12 * (sxx * syy).max(f64::MIN_POSITIVE) {
                return Err(Error::Degenerate("world landmarks are collinear".into()));
            }
            let inv = [[syy / det, -sxy / det], [-sxy / det, sxx / det]];
            let mut l = [[0.0; 2]; 2];
            for r in 0..2 {
                for c in 0..2 {
                    l[r][c] = cross[r][0] * inv[0][c] + cross[r][1] * inv[1][c];
                }
            }
            l
        }
    };
    let offset = [
        pc[0] - (linear[0][0] * wc[0] + linear[0][1] * wc[1]),
        pc[1] - (linear[1][0] * wc[0] + linear[1][1] * wc[1]),
    ];
    let transform = GeoTransform { linear, offset };
    if !(transform.determinant() > 0.0) {
        return Err(Error::Degenerate(format!(
            "fitted map does not preserve orientation (det = {})",
            transform.determinant()
        )));
    }
    let sq: f64 = world
        .iter()
        .zip(pixel)
        .map(|(w, p)| {
            let q = transform.apply(*w);
            (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)
        })
        .sum();
    let rms_px = (sq / n).sqrt();
    Ok(LandmarkFit {
        transform,
        rms_residual_px: rms_px,
        rms_residual_m: rms_px * transform.meters_per_pixel(),
    })
}

fn centroid(pts: &[Point2]) -> Point2 {
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    [sx / n, sy / n]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_points_give_identity() {
        let pts = [[0.0, 0.0], [3.0, 1.0], [-2.0, 5.0]];
        let fit = solve_landmark_transform(&pts, &pts).unwrap();
        assert!((fit.transform.scale() - 1.0).abs() < 1e-12);
        assert!(fit.transform.rotation().abs() < 1e-12);
        assert!(fit.transform.offset[0].abs() < 1e-12 && fit.transform.offset[1].abs() < 1e-12);
        assert!(fit.rms_residual_px < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            solve_landmark_transform(&[[1.0, 1.0]], &[[2.0, 2.0]]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            solve_landmark_transform(&[[1.0, 1.0]; 4], &[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]),
            Err(Error::Degenerate(_))
        ));
        assert!(solve_landmark_transform_with(
            &[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]],
            &[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]],
            TransformModel::Affine
        )
        .is_err());
    }

    #[test]
    fn yaw_is_normalized() {
        assert!((Pose::new(0.0, 0.0, 3.0 * PI).yaw - PI).abs() < 1e-12);
        assert!((Pose::new(0.0, 0.0, -PI).yaw - PI).abs() < 1e-12);
        assert!((Pose::new(0.0, 0.0, -0.5).yaw + 0.5).abs() < 1e-12);
    }

    #[test]
    fn invert_roundtrip() {
        let t = GeoTransform::similarity(0.3, 1.1, [50.0, -20.0]).unwrap();
        let p = [12.5, -7.25];
        let q = t.invert(t.apply(p));
        assert!((q[0] - p[0]).abs() < 1e-9 && (q[1] - p[1]).abs() < 1e-9);
    }

    #[test]
    fn affine_fit_recovers_shear() {
        let t = GeoTransform::affine([[1.5, 0.3], [-0.1, 0.8]], [4.0, 9.0]).unwrap();
        let world = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [7.0, 3.0]];
        let pixel: Vec<Point2> = world.iter().map(|&w| t.apply(w)).collect();
        let fit = solve_landmark_transform_with(&world, &pixel, TransformModel::Affine).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!((fit.transform.linear[r][c] - t.linear[r][c]).abs() < 1e-9);
            }
        }
        assert!(!fit.transform.is_similarity(1e-6));
    }
}
