//! Shared 2D geometry: vectors, angle normalization, and polyline queries.

use serde::{Deserialize, Serialize};

/// A 2D point or vector in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64)", into = "(f64, f64)")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    /// Rotate by `angle` radians counter-clockwise.
    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<(f64, f64)> for Vec2 {
    fn from((x, y): (f64, f64)) -> Self {
        Vec2::new(x, y)
    }
}

impl From<Vec2> for (f64, f64) {
    fn from(v: Vec2) -> Self {
        (v.x, v.y)
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

/// Normalize an angle into (−π, π].
pub fn normalize_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Signed smallest difference `a − b`, normalized into (−π, π].
pub fn angle_diff(a: f64, b: f64) -> f64 {
    normalize_angle(a - b)
}

/// Interpolate between two angles along the shorter arc.
pub fn lerp_angle(a: f64, b: f64, t: f64) -> f64 {
    normalize_angle(a + angle_diff(b, a) * t)
}

/// Result of projecting a point onto a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arc length from the start of the polyline to the projected point.
    pub arc_length: f64,
    /// Euclidean distance from the query point to the projected point.
    pub distance: f64,
    /// Index of the segment containing the projection.
    pub segment: usize,
}

/// A polyline with precomputed cumulative arc lengths.
#[derive(Debug, Clone)]
pub struct Polyline {
    points: Vec<Vec2>,
    cumlen: Vec<f64>,
}

impl Polyline {
    /// Build from ≥ 2 points. Consecutive duplicates are kept; zero-length
    /// segments are tolerated in queries.
    pub fn new(points: Vec<Vec2>) -> Self {
        assert!(points.len() >= 2, "polyline needs at least 2 points");
        let mut cumlen = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        cumlen.push(0.0);
        for w in points.windows(2) {
            acc += w[0].distance(w[1]);
            cumlen.push(acc);
        }
        Self { points, cumlen }
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn total_length(&self) -> f64 {
        *self.cumlen.last().unwrap()
    }

    /// Point at a given arc length, clamped to the polyline extent.
    pub fn point_at(&self, s: f64) -> Vec2 {
        let s = s.clamp(0.0, self.total_length());
        // Find segment via linear scan; polylines here are short.
        for i in 0..self.points.len() - 1 {
            let (s0, s1) = (self.cumlen[i], self.cumlen[i + 1]);
            if s <= s1 || i == self.points.len() - 2 {
                let seg = s1 - s0;
                let t = if seg > 0.0 { (s - s0) / seg } else { 0.0 };
                return self.points[i] + (self.points[i + 1] - self.points[i]) * t.clamp(0.0, 1.0);
            }
        }
        *self.points.last().unwrap()
    }

    /// Tangent direction (radians) at a given arc length.
    pub fn tangent_at(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.total_length());
        let mut idx = self.points.len() - 2;
        for i in 0..self.points.len() - 1 {
            if s <= self.cumlen[i + 1] && self.cumlen[i + 1] > self.cumlen[i] {
                idx = i;
                break;
            }
        }
        let d = self.points[idx + 1] - self.points[idx];
        d.y.atan2(d.x)
    }

    /// Project a point onto the polyline, returning the nearest location.
    /// Ties across segments resolve to the lowest segment index.
    pub fn project(&self, p: Vec2) -> Projection {
        let mut best = Projection {
            arc_length: 0.0,
            distance: f64::INFINITY,
            segment: 0,
        };
        for i in 0..self.points.len() - 1 {
            let a = self.points[i];
            let b = self.points[i + 1];
            let ab = b - a;
            let len2 = ab.dot(ab);
            let t = if len2 > 0.0 {
                ((p - a).dot(ab) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = a + ab * t;
            let d = p.distance(q);
            if d < best.distance {
                best = Projection {
                    arc_length: self.cumlen[i] + (self.cumlen[i + 1] - self.cumlen[i]) * t,
                    distance: d,
                    segment: i,
                };
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_angle_range() {
        assert!((normalize_angle(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert!((normalize_angle(-std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert_eq!(normalize_angle(0.5), 0.5);
    }

    #[test]
    fn polyline_projection_and_arclength() {
        let pl = Polyline::new(vec![Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0), Vec2::new(10.0, 5.0)]);
        assert_eq!(pl.total_length(), 15.0);
        let pr = pl.project(Vec2::new(3.0, 2.0));
        assert!((pr.arc_length - 3.0).abs() < 1e-12);
        assert!((pr.distance - 2.0).abs() < 1e-12);
        let pr2 = pl.project(Vec2::new(12.0, 4.0));
        assert!((pr2.arc_length - 14.0).abs() < 1e-12);
        assert!((pr2.distance - 2.0).abs() < 1e-12);
    }

    #[test]
    fn point_at_midsegment() {
        let pl = Polyline::new(vec![Vec2::new(0.0, 0.0), Vec2::new(4.0, 0.0)]);
        let p = pl.point_at(1.0);
        assert!((p.x - 1.0).abs() < 1e-12 && p.y.abs() < 1e-12);
    }

    #[test]
    fn lerp_angle_shorter_arc() {
        let a = lerp_angle(3.0, -3.0, 0.5);
        // midpoint across the ±π seam
        assert!((a.abs() - std::f64::consts::PI).abs() < 0.15);
    }
}
