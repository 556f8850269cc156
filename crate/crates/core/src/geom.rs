//! Planar vector and oriented-rectangle primitives.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Unit vector at `angle` radians from +x.
    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self { x: c, y: s }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        Vec2::new(self.x / n, self.y / n)
    }

    /// Counter-clockwise perpendicular.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn rotated(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl SubAssign for Vec2 {
    fn sub_assign(&mut self, o: Vec2) {
        self.x -= o.x;
        self.y -= o.y;
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Mul<Vec2> for f64 {
    type Output = Vec2;
    fn mul(self, v: Vec2) -> Vec2 {
        v * self
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// A rectangle with a center, a unit axis along its length, and full extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedRect {
    pub center: Vec2,
    /// Unit vector along the length.
    pub axis: Vec2,
    pub length: f64,
    pub width: f64,
}

impl OrientedRect {
    pub fn new(center: Vec2, angle: f64, length: f64, width: f64) -> Self {
        Self {
            center,
            axis: Vec2::from_angle(angle),
            length,
            width,
        }
    }

    pub fn angle(&self) -> f64 {
        self.axis.angle()
    }

    pub fn half_extents(&self) -> (f64, f64) {
        (0.5 * self.length, 0.5 * self.width)
    }

    /// Corners in counter-clockwise order starting at (−l/2, −w/2) in the local frame.
    pub fn corners(&self) -> [Vec2; 4] {
        let (hl, hw) = self.half_extents();
        let u = self.axis * hl;
        let v = self.axis.perp() * hw;
        [
            self.center - u - v,
            self.center + u - v,
            self.center + u + v,
            self.center - u + v,
        ]
    }

    /// Point expressed in the rectangle's local (axis, perp) frame.
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        let d = p - self.center;
        Vec2::new(d.dot(self.axis), d.dot(self.axis.perp()))
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let l = self.to_local(p);
        let (hl, hw) = self.half_extents();
        l.x.abs() <= hl && l.y.abs() <= hw
    }

    /// Minimum and maximum projection of the corners on `dir`.
    pub fn project(&self, dir: Vec2) -> (f64, f64) {
        let (hl, hw) = self.half_extents();
        let c = self.center.dot(dir);
        let r = hl * self.axis.dot(dir).abs() + hw * self.axis.perp().dot(dir).abs();
        (c - r, c + r)
    }

    /// Radius of the circumscribed circle.
    pub fn bounding_radius(&self) -> f64 {
        let (hl, hw) = self.half_extents();
        (hl * hl + hw * hw).sqrt()
    }

    /// Whether the closed segment `a`–`b` touches the rectangle.
    ///
    /// Slab clipping in the local frame.
    pub fn intersects_segment(&self, a: Vec2, b: Vec2) -> bool {
        let la = self.to_local(a);
        let lb = self.to_local(b);
        let d = lb - la;
        let (hl, hw) = self.half_extents();
        let mut t0 = 0.0_f64;
        let mut t1 = 1.0_f64;
        for (p, dp, h) in [(la.x, d.x, hl), (la.y, d.y, hw)] {
            if dp == 0.0 {
                if p.abs() > h {
                    return false;
                }
                continue;
            }
            let mut ta = (-h - p) / dp;
            let mut tb = (h - p) / dp;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
        true
    }

    /// Signed distance from `p` to the boundary; negative inside.
    pub fn signed_distance(&self, p: Vec2) -> f64 {
        let l = self.to_local(p);
        let (hl, hw) = self.half_extents();
        let dx = l.x.abs() - hl;
        let dy = l.y.abs() - hw;
        let outside = Vec2::new(dx.max(0.0), dy.max(0.0)).norm();
        outside + dx.max(dy).min(0.0)
    }

    pub fn reflected_x(&self) -> OrientedRect {
        OrientedRect {
            center: Vec2::new(self.center.x, -self.center.y),
            axis: Vec2::new(self.axis.x, -self.axis.y),
            ..*self
        }
    }
}
