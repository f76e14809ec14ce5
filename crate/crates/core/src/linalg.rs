//! Fixed-size 2-D helpers used in every inner loop.

use std::ops::{Add, Mul};

pub type Vec2 = [f64; 2];

#[inline]
pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn rotate(theta: f64, v: Vec2) -> Vec2 {
    let (s, c) = theta.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Symmetric 2x2 matrix `[[xx, xy], [xy, yy]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Sym2 {
    pub const ZERO: Sym2 = Sym2 { xx: 0.0, xy: 0.0, yy: 0.0 };

    /// `R(psi) diag(a, b) R(psi)^T`.
    pub fn rotated_diag(psi: f64, a: f64, b: f64) -> Sym2 {
        let (s, c) = psi.sin_cos();
        let cs = c * s * (a - b);
        Sym2 { xx: c * c * a + s * s * b, xy: cs, yy: s * s * a + c * c * b }
    }

    #[inline]
    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    #[inline]
    pub fn trace(&self) -> f64 {
        self.xx + self.yy
    }

    /// Adjugate; `inverse = adjugate / det`.
    #[inline]
    pub fn adjugate(&self) -> Sym2 {
        Sym2 { xx: self.yy, xy: -self.xy, yy: self.xx }
    }

    #[inline]
    pub fn apply(&self, v: Vec2) -> Vec2 {
        [self.xx * v[0] + self.xy * v[1], self.xy * v[0] + self.yy * v[1]]
    }

    /// `v^T S v`.
    #[inline]
    pub fn quad(&self, v: Vec2) -> f64 {
        self.xx * v[0] * v[0] + 2.0 * self.xy * v[0] * v[1] + self.yy * v[1] * v[1]
    }

    /// Eigenvalues `(min, max)`.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let half_tr = 0.5 * self.trace();
        let diff = 0.5 * (self.xx - self.yy);
        let r = (diff * diff + self.xy * self.xy).sqrt();
        (half_tr - r, half_tr + r)
    }

    /// Ratio of extreme eigenvalues; infinite when not positive definite.
    pub fn condition(&self) -> f64 {
        let (lo, hi) = self.eigenvalues();
        if lo <= 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }

    pub fn to_array(self) -> [[f64; 2]; 2] {
        [[self.xx, self.xy], [self.xy, self.yy]]
    }
}

impl Add for Sym2 {
    type Output = Sym2;
    fn add(self, o: Sym2) -> Sym2 {
        Sym2 { xx: self.xx + o.xx, xy: self.xy + o.xy, yy: self.yy + o.yy }
    }
}

impl Mul<f64> for Sym2 {
    type Output = Sym2;
    fn mul(self, k: f64) -> Sym2 {
        Sym2 { xx: self.xx * k, xy: self.xy * k, yy: self.yy * k }
    }
}

/// Affine vector field `X -> a X + b` on the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2 {
    pub a: [[f64; 2]; 2],
    pub b: Vec2,
}

impl Affine2 {
    pub const ZERO: Affine2 = Affine2 { a: [[0.0; 2]; 2], b: [0.0; 2] };

    pub fn constant(b: Vec2) -> Affine2 {
        Affine2 { a: [[0.0; 2]; 2], b }
    }

    /// `X -> k M X` for a 2x2 matrix `M`.
    pub fn linear(m: [[f64; 2]; 2], k: f64) -> Affine2 {
        Affine2 { a: [[k * m[0][0], k * m[0][1]], [k * m[1][0], k * m[1][1]]], b: [0.0; 2] }
    }

    #[inline]
    pub fn eval(&self, x: Vec2) -> Vec2 {
        [self.a[0][0] * x[0] + self.a[0][1] * x[1] + self.b[0], self.a[1][0] * x[0] + self.a[1][1] * x[1] + self.b[1]]
    }

    /// `M v(X)` for a constant matrix `M`.
    pub fn premul(&self, m: [[f64; 2]; 2]) -> Affine2 {
        let mut out = Affine2::ZERO;
        for r in 0..2 {
            for c in 0..2 {
                out.a[r][c] = m[r][0] * self.a[0][c] + m[r][1] * self.a[1][c];
            }
            out.b[r] = m[r][0] * self.b[0] + m[r][1] * self.b[1];
        }
        out
    }
}
