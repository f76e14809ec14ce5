//! Gaussian-atom pattern model.
//!
//! An atom is `phi(X) = exp(-|sigma^-1 Psi^-1 (X - tau)|^2)` and a pattern is a
//! finite weighted sum of atoms. Smoothing, inner products and derivatives all
//! have closed forms in this representation.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sub, Sym2, Vec2};
use crate::raster::{FieldSamples, QuadratureSpec};

/// Smallest admissible atom scale.
pub const MIN_SIGMA: f64 = 1e-6;
/// Largest admissible condition number of a pairwise covariance.
pub const MAX_CONDITION: f64 = 1e12;
/// Atoms are treated as zero where the exponent exceeds this value.
pub(crate) const EXPONENT_CUTOFF: f64 = 40.0;

/// Wraps an angle into `[-pi, pi)`; values already inside are returned bit-for-bit.
pub fn normalize_angle(a: f64) -> f64 {
    if (-PI..PI).contains(&a) {
        return a;
    }
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

/// Geometric parameters `(psi, tau, sigma)` of one atom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtomParams {
    psi: f64,
    tau: Vec2,
    sigma: Vec2,
}

impl AtomParams {
    pub fn new(psi: f64, tau: Vec2, sigma: Vec2) -> Result<Self> {
        if !(psi.is_finite() && tau.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidAtom("non-finite angle or center".into()));
        }
        if !sigma.iter().all(|s| s.is_finite() && *s >= MIN_SIGMA) {
            return Err(Error::InvalidAtom(format!("scales {sigma:?} must be finite and at least {MIN_SIGMA}")));
        }
        Ok(AtomParams { psi: normalize_angle(psi), tau, sigma })
    }

    /// Unit isotropic atom centered at the origin.
    pub fn unit() -> Self {
        AtomParams { psi: 0.0, tau: [0.0, 0.0], sigma: [1.0, 1.0] }
    }

    pub fn psi(&self) -> f64 {
        self.psi
    }
    pub fn tau(&self) -> Vec2 {
        self.tau
    }
    pub fn sigma(&self) -> Vec2 {
        self.sigma
    }

    /// `|sigma| = sigma_x sigma_y`.
    pub fn det_sigma(&self) -> f64 {
        self.sigma[0] * self.sigma[1]
    }

    /// `Theta = Psi sigma^-2 Psi^T`.
    pub fn theta(&self) -> Sym2 {
        let [sx, sy] = self.sigma;
        Sym2::rotated_diag(self.psi, 1.0 / (sx * sx), 1.0 / (sy * sy))
    }

    /// `Theta^-1 = Psi sigma^2 Psi^T`.
    pub fn covariance(&self) -> Sym2 {
        let [sx, sy] = self.sigma;
        Sym2::rotated_diag(self.psi, sx * sx, sy * sy)
    }

    /// Smallest eigenvalue of `Theta`.
    pub fn iota(&self) -> f64 {
        let s = self.sigma[0].max(self.sigma[1]);
        1.0 / (s * s)
    }

    /// Largest eigenvalue of `Theta`.
    pub fn vartheta(&self) -> f64 {
        let s = self.sigma[0].min(self.sigma[1]);
        1.0 / (s * s)
    }

    pub fn eval(&self, x: Vec2) -> f64 {
        (-self.theta().quad(sub(x, self.tau))).exp()
    }

    pub(crate) fn with_parts(psi: f64, tau: Vec2, sigma: Vec2) -> Self {
        AtomParams { psi: normalize_angle(psi), tau, sigma }
    }
}

/// One weighted atom of a pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AtomRecord", into = "AtomRecord")]
pub struct Atom {
    pub c: f64,
    pub params: AtomParams,
}

#[derive(Serialize, Deserialize)]
struct AtomRecord {
    c: f64,
    psi: f64,
    tau: [f64; 2],
    sigma: [f64; 2],
}

impl TryFrom<AtomRecord> for Atom {
    type Error = Error;
    fn try_from(r: AtomRecord) -> Result<Atom> {
        Atom::new(r.c, AtomParams::new(r.psi, r.tau, r.sigma)?)
    }
}

impl From<Atom> for AtomRecord {
    fn from(a: Atom) -> AtomRecord {
        AtomRecord { c: a.c, psi: a.params.psi, tau: a.params.tau, sigma: a.params.sigma }
    }
}

impl Atom {
    pub fn new(c: f64, params: AtomParams) -> Result<Self> {
        if !c.is_finite() {
            return Err(Error::InvalidAtom("non-finite coefficient".into()));
        }
        Ok(Atom { c, params })
    }
}

/// Finite weighted sum of Gaussian atoms. The empty pattern is the zero function.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Pattern {
    pub atoms: Vec<Atom>,
}

impl Pattern {
    pub fn new(atoms: Vec<Atom>) -> Self {
        Pattern { atoms }
    }

    pub fn single(c: f64, params: AtomParams) -> Self {
        Pattern { atoms: vec![Atom { c, params }] }
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn scaled(&self, k: f64) -> Pattern {
        Pattern { atoms: self.atoms.iter().map(|a| Atom { c: a.c * k, params: a.params }).collect() }
    }

    /// Concatenation, i.e. the sum of both fields.
    pub fn plus(&self, other: &Pattern) -> Pattern {
        let mut atoms = self.atoms.clone();
        atoms.extend_from_slice(&other.atoms);
        Pattern { atoms }
    }

    /// `self - other` as a pattern.
    pub fn minus(&self, other: &Pattern) -> Pattern {
        self.plus(&other.scaled(-1.0))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("pattern serialization is infallible")
    }

    pub fn from_json(s: &str) -> Result<Pattern> {
        serde_json::from_str(s)
            .map_err(|e| Error::Parse { offset: byte_offset(s, e.line(), e.column()), message: e.to_string() })
    }

    /// Smallest atom scale, or `None` for the zero pattern.
    pub fn min_sigma(&self) -> Option<f64> {
        self.atoms.iter().map(|a| a.params.sigma[0].min(a.params.sigma[1])).reduce(f64::min)
    }

    pub(crate) fn prepared(&self) -> Vec<PreparedAtom> {
        self.atoms.iter().map(PreparedAtom::new).collect()
    }
}

fn byte_offset(s: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in s.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len();
    }
    offset
}

/// Isotropic Gaussian low-pass kernel of unit L1 norm, `(pi rho^2)^-1 exp(-|X|^2 / rho^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterKernel {
    rho: f64,
}

impl FilterKernel {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(Error::InvalidConfig(format!("filter size {rho} must be finite and >= 0")));
        }
        Ok(FilterKernel { rho })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn eval(&self, x: Vec2) -> f64 {
        let r2 = self.rho * self.rho;
        (-(x[0] * x[0] + x[1] * x[1]) / r2).exp() / (PI * r2)
    }
}

/// Atom with the matrices needed by inner loops.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PreparedAtom {
    pub c: f64,
    pub tau: Vec2,
    pub theta: Sym2,
    pub cov: Sym2,
    pub det_sigma: f64,
}

impl PreparedAtom {
    pub fn new(a: &Atom) -> Self {
        PreparedAtom {
            c: a.c,
            tau: a.params.tau,
            theta: a.params.theta(),
            cov: a.params.covariance(),
            det_sigma: a.params.det_sigma(),
        }
    }

    /// Half-widths of the box outside which the atom is below `exp(-EXPONENT_CUTOFF)`.
    pub fn half_extent(&self) -> Vec2 {
        [(EXPONENT_CUTOFF * self.cov.xx).sqrt(), (EXPONENT_CUTOFF * self.cov.yy).sqrt()]
    }
}

/// `int phi_a phi_b` for prepared atoms (coefficients ignored).
pub(crate) fn product_integral_prepared(a: &PreparedAtom, b: &PreparedAtom) -> Result<f64> {
    let sigma = (a.cov + b.cov) * 0.5;
    let cond = sigma.condition();
    if !(cond <= MAX_CONDITION) {
        return Err(Error::DegenerateGeometry { cond });
    }
    let det = sigma.det();
    let d = sub(a.tau, b.tau);
    let q = sigma.adjugate().quad(d) / det;
    Ok(0.5 * PI * a.det_sigma * b.det_sigma / det.sqrt() * (-0.5 * q).exp())
}

/// The normalized product `phi_a phi_b` as a Gaussian density.
pub(crate) struct ProductMoments {
    /// `int phi_a phi_b`.
    pub weight: f64,
    /// Mean of the product density.
    pub mean: Vec2,
    /// Covariance of the product density.
    pub cov: Sym2,
}

pub(crate) fn product_moments(a: &PreparedAtom, b: &PreparedAtom) -> Result<ProductMoments> {
    let weight = product_integral_prepared(a, b)?;
    let p = a.theta + b.theta;
    let det = p.det();
    let rhs = {
        let ta = a.theta.apply(a.tau);
        let tb = b.theta.apply(b.tau);
        [ta[0] + tb[0], ta[1] + tb[1]]
    };
    let adj = p.adjugate();
    let m = adj.apply(rhs);
    Ok(ProductMoments { weight, mean: [m[0] / det, m[1] / det], cov: adj * (0.5 / det) })
}

/// `p(X) = sum_k c_k phi_k(X)`.
pub fn eval_pattern(p: &Pattern, x: Vec2) -> f64 {
    p.atoms.iter().map(|a| a.c * a.params.eval(x)).sum()
}

/// Analytic gradient, `sum_k -2 c_k phi_k Theta_k (X - tau_k)`.
pub fn eval_gradient(p: &Pattern, x: Vec2) -> Vec2 {
    let mut g = [0.0; 2];
    for a in &p.atoms {
        let th = a.params.theta();
        let u = sub(x, a.params.tau);
        let tu = th.apply(u);
        let w = -2.0 * a.c * (-crate::linalg::dot(u, tu)).exp();
        g[0] += w * tu[0];
        g[1] += w * tu[1];
    }
    g
}

/// Analytic Hessian, `sum_k c_k phi_k (4 Theta u u^T Theta - 2 Theta)` with `u = X - tau_k`.
pub fn eval_hessian(p: &Pattern, x: Vec2) -> Sym2 {
    let mut h = Sym2::ZERO;
    for a in &p.atoms {
        let th = a.params.theta();
        let u = sub(x, a.params.tau);
        let tu = th.apply(u);
        let w = a.c * (-crate::linalg::dot(u, tu)).exp();
        h = h + Sym2 {
            xx: w * (4.0 * tu[0] * tu[0] - 2.0 * th.xx),
            xy: w * (4.0 * tu[0] * tu[1] - 2.0 * th.xy),
            yy: w * (4.0 * tu[1] * tu[1] - 2.0 * th.yy),
        };
    }
    h
}

/// Exact convolution with the kernel: scales grow to `sqrt(sigma^2 + rho^2)`, centers and
/// angles are kept, coefficients shrink so that every atom keeps its integral.
pub fn smooth_pattern(p: &Pattern, k: FilterKernel) -> Pattern {
    let rho = k.rho();
    if rho == 0.0 {
        return p.clone();
    }
    let r2 = rho * rho;
    let atoms = p
        .atoms
        .iter()
        .map(|a| {
            let [sx, sy] = a.params.sigma;
            let (vx, vy) = (sx * sx + r2, sy * sy + r2);
            Atom {
                c: a.c * sx * sy / (vx * vy).sqrt(),
                params: AtomParams::with_parts(a.params.psi, a.params.tau, [vx.sqrt(), vy.sqrt()]),
            }
        })
        .collect();
    Pattern { atoms }
}

/// Shorthand for `smooth_pattern` with a raw filter size.
pub fn smooth(p: &Pattern, rho: f64) -> Pattern {
    smooth_pattern(p, FilterKernel::new(rho).expect("filter size must be >= 0"))
}

/// `int phi_a phi_b = Q_ab / 2`.
pub fn atom_product_integral(a: &AtomParams, b: &AtomParams) -> Result<f64> {
    let pa = PreparedAtom::new(&Atom { c: 1.0, params: *a });
    let pb = PreparedAtom::new(&Atom { c: 1.0, params: *b });
    product_integral_prepared(&pa, &pb)
}

pub(crate) fn inner_product_prepared(p: &[PreparedAtom], q: &[PreparedAtom]) -> Result<f64> {
    let mut acc = 0.0;
    for a in p {
        for b in q {
            acc += a.c * b.c * product_integral_prepared(a, b)?;
        }
    }
    Ok(acc)
}

/// L2 inner product.
pub fn pattern_inner_product(p: &Pattern, q: &Pattern) -> Result<f64> {
    inner_product_prepared(&p.prepared(), &q.prepared())
}

/// L2 norm.
pub fn pattern_norm(p: &Pattern) -> Result<f64> {
    Ok(pattern_inner_product(p, p)?.max(0.0).sqrt())
}

/// `(|N_grad p|, |N_h p|)`: L2 norms of the gradient magnitude and of the vectorized Hessian.
pub fn derivative_norms(p: &Pattern, quad: &QuadratureSpec) -> Result<(f64, f64)> {
    let grid = quad.grid();
    let f = FieldSamples::sample(&p.prepared(), &grid);
    let w = grid.h * grid.h;
    let (mut g2, mut h2) = (0.0, 0.0);
    let (mut ring, mut total) = (0.0, 0.0);
    for j in 0..grid.n {
        for i in 0..grid.n {
            let k = j * grid.n + i;
            let gk = f.gx[k] * f.gx[k] + f.gy[k] * f.gy[k];
            let hk = f.hxx[k] * f.hxx[k] + 2.0 * f.hxy[k] * f.hxy[k] + f.hyy[k] * f.hyy[k];
            g2 += gk;
            h2 += hk;
            if grid.on_ring(i, j) {
                ring += gk + hk;
            }
            total += gk + hk;
        }
    }
    quad.check_ring(ring, total)?;
    Ok(((g2 * w).sqrt(), (h2 * w).sqrt()))
}

/// Closed-form terms behind the gradient and Hessian norm sums.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateTerms {
    /// `Q_jk = 2 int phi_j phi_k`.
    pub q: f64,
    pub l_bar: f64,
    pub m_bar: f64,
    pub n_bar: f64,
    pub p_bar: f64,
}

/// `int phi^2 |X - tau|^2 dX`.
fn l_single(a: &AtomParams) -> f64 {
    let [sx, sy] = a.sigma;
    PI / 8.0 * a.det_sigma() * (sx * sx + sy * sy)
}

/// `int phi^2 |X - tau|^4 dX`.
fn m_single(a: &AtomParams) -> f64 {
    let [sx, sy] = a.sigma;
    let (x2, y2) = (sx * sx, sy * sy);
    PI * a.det_sigma() * (3.0 / 32.0 * x2 * x2 + 1.0 / 16.0 * x2 * y2 + 3.0 / 32.0 * y2 * y2)
}

/// Upper bounds `L_bar`, `M_bar`, `N_bar`, `P_bar` for atom pair `(j, k) = (a, b)` and `Q_jk`.
pub fn appendix_rate_terms(a: &AtomParams, b: &AtomParams) -> Result<RateTerms> {
    let q = 2.0 * atom_product_integral(a, b)?;
    let (vj, vk) = (a.vartheta(), b.vartheta());
    let (mj, mk) = (m_single(a), m_single(b));
    Ok(RateTerms {
        q,
        l_bar: vj * vk * (l_single(a) * l_single(b)).sqrt(),
        m_bar: vj * vj * vk * vk * (mj * mk).sqrt(),
        n_bar: (PI * b.det_sigma() / 2.0).sqrt() * vj * vj * vk * mj.sqrt(),
        p_bar: vj * vk * q,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Pattern {
        Pattern::single(1.0, AtomParams::unit())
    }

    #[test]
    fn mother_function_values() {
        assert_eq!(eval_pattern(&unit(), [0.0, 0.0]), 1.0);
        assert!((eval_pattern(&unit(), [1.0, 0.0]) - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(eval_pattern(&unit().plus(&unit()), [0.0, 0.0]), 2.0);
    }

    #[test]
    fn center_derivatives() {
        assert_eq!(eval_gradient(&unit(), [0.0, 0.0]), [0.0, 0.0]);
        let h = eval_hessian(&unit(), [0.0, 0.0]);
        assert_eq!((h.xx, h.xy, h.yy), (-2.0, 0.0, -2.0));
    }

    #[test]
    fn smoothing_unit_atom() {
        let s = smooth(&unit(), 1.0);
        let a = s.atoms[0];
        assert!((a.c - 0.5).abs() < 1e-15);
        assert!((a.params.sigma()[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(smooth(&unit(), 0.0), unit());
    }

    #[test]
    fn unit_products() {
        let u = AtomParams::unit();
        assert!((atom_product_integral(&u, &u).unwrap() - PI / 2.0).abs() < 1e-15);
        let far = AtomParams::new(0.0, [20.0, 0.0], [1.0, 1.0]).unwrap();
        assert!(atom_product_integral(&u, &far).unwrap() <= 1e-20);
        let t = appendix_rate_terms(&u, &u).unwrap();
        assert!((t.l_bar - PI / 4.0).abs() < 1e-15);
        assert!((t.m_bar - PI / 4.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_pair_is_rejected() {
        let a = AtomParams::new(0.0, [0.0, 0.0], [1e-6, 1e3]).unwrap();
        assert!(matches!(atom_product_integral(&a, &a), Err(Error::DegenerateGeometry { .. })));
        assert!(AtomParams::new(0.0, [0.0, 0.0], [1e-7, 1.0]).is_err());
    }

    #[test]
    fn angle_normalization() {
        assert_eq!(normalize_angle(1.0), 1.0);
        assert_eq!(normalize_angle(-PI), -PI);
        assert!((normalize_angle(PI) + PI).abs() < 1e-15);
        assert!((normalize_angle(3.0 * PI + 0.5) - (-PI + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip_and_errors() {
        let p =
            Pattern::new(vec![Atom::new(0.1, AtomParams::new(0.3, [1.0 / 3.0, -2.5], [0.7, 1.9]).unwrap()).unwrap()]);
        let back = Pattern::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
        let bad = "{\"atoms\":[{\"c\":1,\"psi\":0,\"tau\":[0,0],\"sigma\":[0,1]}]}";
        assert!(matches!(Pattern::from_json(bad), Err(Error::Parse { .. })));
    }
}
