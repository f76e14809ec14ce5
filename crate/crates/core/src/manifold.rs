//! Geometry of the transformation manifold `M(p) = { p_lambda : lambda in Lambda }`.
//!
//! Every first and second manifold derivative is, in the pattern frame `X' = a(lambda, X)`,
//! a combination of 24 fixed fields: `{g_x, g_y} x {1, x', y'}` and
//! `{h_xx, h_xy, h_yy} x {1, x', y', x'^2, x'y', y'^2}`, where `g` and `h` are the gradient
//! and Hessian of `p`. Their Gram matrix is integrated once per pattern; metric tensors
//! and derivative norms at any `lambda` are then quadratic forms scaled by the Jacobian
//! `s^2` of the change of variables.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::atoms::{inner_product_prepared, product_moments, Pattern, PreparedAtom};
use crate::error::{Error, Result};
use crate::linalg::{sub, Affine2, Sym2, Vec2};
use crate::raster::{FieldSamples, QuadratureSpec};
use crate::transforms::{ParamVector, Similarity, TransformModel};

/// Number of basis fields.
pub const NB: usize = 24;
type Coeffs = [f64; NB];

/// Relative eigenvalue floor below which the metric counts as singular.
pub const RANK_TOL: f64 = 1e-10;

/// Number of samples per axis of the parameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub points_per_axis: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { points_per_axis: 9 }
    }
}

impl GridSpec {
    pub fn new(points_per_axis: usize) -> Result<Self> {
        if points_per_axis == 0 {
            return Err(Error::InvalidConfig("grid needs at least one point per axis".into()));
        }
        Ok(GridSpec { points_per_axis })
    }

    /// Axis samples of `[lo, hi]`, the midpoint when a single point is requested.
    pub fn axis_points(&self, [lo, hi]: [f64; 2]) -> Vec<f64> {
        let n = self.points_per_axis;
        if n == 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
    }

    /// All grid points of the domain in lexicographic order.
    pub fn points(&self, domain: &[[f64; 2]]) -> Vec<ParamVector> {
        let axes: Vec<Vec<f64>> = domain.iter().map(|r| self.axis_points(*r)).collect();
        let mut out = vec![Vec::new()];
        for ax in &axes {
            out = out
                .into_iter()
                .flat_map(|prefix: Vec<f64>| {
                    ax.iter().map(move |v| {
                        let mut p = prefix.clone();
                        p.push(*v);
                        p
                    })
                })
                .collect();
        }
        out
    }
}

/// Metric tensor at one point with the derived quantities used by the bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    pub g: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    pub min_eig: f64,
    pub trace: f64,
}

impl Metric {
    pub fn from_matrix(g: DMatrix<f64>) -> Result<Metric> {
        let trace = g.trace();
        let min_eig = SymmetricEigen::new(g.clone()).eigenvalues.min();
        if !(min_eig >= RANK_TOL * trace) || !(trace > 0.0) {
            return Err(Error::RankDeficient { min_eig, trace });
        }
        let inverse = g.clone().cholesky().ok_or(Error::RankDeficient { min_eig, trace })?.inverse();
        Ok(Metric { g, inverse, min_eig, trace })
    }
}

/// Geometric constants of the manifold estimated on a parameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryConstants {
    /// Curvature bound: largest second-derivative norm.
    pub k: f64,
    /// Largest tangent norm.
    pub t: f64,
    /// Largest `sqrt(tr G)`.
    pub c1: f64,
    /// `K` times the largest inverse smallest eigenvalue of `G`.
    pub c2: f64,
    /// Smallest eigenvalue of `G` over the grid.
    pub eta_min: f64,
}

/// Result of the brute-force projection of a target onto the manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub lambda: ParamVector,
    pub distance: f64,
    /// Minimizer lies on the domain boundary, so the residual need not be normal.
    pub on_boundary: bool,
    /// Squared distance at the best grid node and after refinement.
    pub grid_objective: f64,
    pub refined_objective: f64,
}

/// Evaluable manifold derivative field `X -> sum_m c_m B_m(a(lambda, X))`.
pub struct FieldHandle<'a> {
    geom: &'a ManifoldGeometry,
    sim: Similarity,
    coeffs: Coeffs,
}

impl FieldHandle<'_> {
    pub fn eval(&self, x: Vec2) -> f64 {
        let xp = self.sim.backward(x);
        let (g, h) = self.geom.local_derivatives(xp);
        let b = basis(xp, g, h);
        b.iter().zip(&self.coeffs).map(|(b, c)| b * c).sum()
    }

    /// L2 norm of the field over the image plane.
    pub fn norm(&self) -> f64 {
        (self.sim.s * self.sim.s * self.geom.quad_form(&self.coeffs, &self.coeffs)).max(0.0).sqrt()
    }
}

/// Transformation manifold of one pattern.
#[derive(Debug, Clone)]
pub struct ManifoldGeometry {
    model: TransformModel,
    pattern: Pattern,
    quad: QuadratureSpec,
    prepared: Vec<PreparedAtom>,
    gram: Vec<f64>,
    norm_sq: f64,
}

fn basis(x: Vec2, g: Vec2, h: Sym2) -> Coeffs {
    let m1 = [1.0, x[0], x[1]];
    let m2 = [1.0, x[0], x[1], x[0] * x[0], x[0] * x[1], x[1] * x[1]];
    let mut b = [0.0; NB];
    for l in 0..3 {
        b[l] = g[0] * m1[l];
        b[3 + l] = g[1] * m1[l];
    }
    for (c, hv) in [h.xx, h.xy, h.yy].into_iter().enumerate() {
        for m in 0..6 {
            b[6 + 6 * c + m] = hv * m2[m];
        }
    }
    b
}

/// Coefficients of `g . v` for an affine field `v`.
fn gradient_coeffs(v: &Affine2, out: &mut Coeffs) {
    for k in 0..2 {
        out[3 * k] += v.b[k];
        out[3 * k + 1] += v.a[k][0];
        out[3 * k + 2] += v.a[k][1];
    }
}

/// Monomial coefficients `[1, x, y, x^2, xy, y^2]` of the product of two affine scalars.
fn poly_product(p: (f64, f64, f64), q: (f64, f64, f64)) -> [f64; 6] {
    [p.0 * q.0, p.0 * q.1 + q.0 * p.1, p.0 * q.2 + q.0 * p.2, p.1 * q.1, p.1 * q.2 + p.2 * q.1, p.2 * q.2]
}

fn component(v: &Affine2, k: usize) -> (f64, f64, f64) {
    (v.b[k], v.a[k][0], v.a[k][1])
}

impl ManifoldGeometry {
    /// Integrates the basis Gram matrix of `pattern` on `quad`.
    pub fn new(model: TransformModel, pattern: Pattern, quad: QuadratureSpec) -> Result<Self> {
        if pattern.is_empty() {
            return Err(Error::InvalidConfig("manifold of the zero pattern".into()));
        }
        let prepared = pattern.prepared();
        let norm_sq = inner_product_prepared(&prepared, &prepared)?;
        let grid = quad.grid();
        let f = FieldSamples::sample(&prepared, &grid);
        let mut acc = vec![0.0; NB * NB];
        let (mut ring, mut total) = (0.0, 0.0);
        for j in 0..grid.n {
            let y = grid.coord(j);
            for i in 0..grid.n {
                let k = j * grid.n + i;
                let h = Sym2 { xx: f.hxx[k], xy: f.hxy[k], yy: f.hyy[k] };
                if f.gx[k] == 0.0 && f.gy[k] == 0.0 && h == Sym2::ZERO {
                    continue;
                }
                let b = basis([grid.coord(i), y], [f.gx[k], f.gy[k]], h);
                let mass: f64 = b.iter().map(|v| v * v).sum();
                total += mass;
                if grid.on_ring(i, j) {
                    ring += mass;
                }
                for m in 0..NB {
                    let bm = b[m];
                    if bm == 0.0 {
                        continue;
                    }
                    let row = &mut acc[m * NB..(m + 1) * NB];
                    for n in m..NB {
                        row[n] += bm * b[n];
                    }
                }
            }
        }
        quad.check_ring(ring, total)?;
        let w = grid.h * grid.h;
        let mut gram = vec![0.0; NB * NB];
        for m in 0..NB {
            for n in m..NB {
                gram[m * NB + n] = acc[m * NB + n] * w;
                gram[n * NB + m] = acc[m * NB + n] * w;
            }
        }
        Ok(ManifoldGeometry { model, pattern, quad, prepared, gram, norm_sq })
    }

    /// Geometry on a quadrature grid fitted to the pattern.
    pub fn fitted(model: TransformModel, pattern: Pattern) -> Result<Self> {
        let quad = QuadratureSpec::fit(&[&pattern], &QuadratureSpec::default());
        ManifoldGeometry::new(model, pattern, quad)
    }

    pub fn model(&self) -> &TransformModel {
        &self.model
    }
    pub fn pattern(&self) -> &Pattern {
        &self.pattern
    }
    pub fn quadrature(&self) -> &QuadratureSpec {
        &self.quad
    }
    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// `|p|^2`, so `|p_lambda|^2 = s^2 |p|^2`.
    pub fn pattern_norm_sq(&self) -> f64 {
        self.norm_sq
    }

    /// `(|N_grad p|, |N_h p|)` from the Gram matrix.
    pub fn derivative_norms(&self) -> (f64, f64) {
        let d = |m: usize| self.gram[m * NB + m];
        ((d(0) + d(3)).sqrt(), (d(6) + 2.0 * d(12) + d(18)).sqrt())
    }

    fn quad_form(&self, a: &Coeffs, b: &Coeffs) -> f64 {
        let mut acc = 0.0;
        for m in 0..NB {
            if a[m] == 0.0 {
                continue;
            }
            let row = &self.gram[m * NB..(m + 1) * NB];
            acc += a[m] * row.iter().zip(b).map(|(g, v)| g * v).sum::<f64>();
        }
        acc
    }

    fn local_derivatives(&self, x: Vec2) -> (Vec2, Sym2) {
        let mut g = [0.0; 2];
        let mut h = Sym2::ZERO;
        for a in &self.prepared {
            let u = sub(x, a.tau);
            let tu = a.theta.apply(u);
            let w = a.c * (-(u[0] * tu[0] + u[1] * tu[1])).exp();
            g[0] -= 2.0 * w * tu[0];
            g[1] -= 2.0 * w * tu[1];
            h = h + Sym2 {
                xx: w * (4.0 * tu[0] * tu[0] - 2.0 * a.theta.xx),
                xy: w * (4.0 * tu[0] * tu[1] - 2.0 * a.theta.xy),
                yy: w * (4.0 * tu[1] * tu[1] - 2.0 * a.theta.yy),
            };
        }
        (g, h)
    }

    fn tangent_coeffs(&self, lam: &[f64]) -> Vec<Coeffs> {
        self.model
            .coord_derivatives(lam)
            .iter()
            .map(|v| {
                let mut c = [0.0; NB];
                gradient_coeffs(v, &mut c);
                c
            })
            .collect()
    }

    fn second_coeffs_from(&self, v: &[Affine2], w: &[Vec<Affine2>], i: usize, j: usize) -> Coeffs {
        let mut c = [0.0; NB];
        gradient_coeffs(&w[i][j], &mut c);
        for k in 0..2 {
            for l in 0..2 {
                let slot = match (k, l) {
                    (0, 0) => 0,
                    (1, 1) => 2,
                    _ => 1,
                };
                let poly = poly_product(component(&v[i], k), component(&v[j], l));
                for (m, pv) in poly.iter().enumerate() {
                    c[6 + 6 * slot + m] += pv;
                }
            }
        }
        c
    }

    /// `d p_lambda / d lambda_i`.
    pub fn tangent(&self, lam: &[f64], i: usize) -> FieldHandle<'_> {
        FieldHandle { geom: self, sim: self.model.similarity(lam), coeffs: self.tangent_coeffs(lam)[i] }
    }

    /// `d^2 p_lambda / d lambda_i d lambda_j`.
    pub fn second_derivative(&self, lam: &[f64], i: usize, j: usize) -> FieldHandle<'_> {
        let v = self.model.coord_derivatives(lam);
        let w = self.model.coord_second_derivatives(lam);
        FieldHandle { geom: self, sim: self.model.similarity(lam), coeffs: self.second_coeffs_from(&v, &w, i, j) }
    }

    /// `G_ij = <d_i p_lambda, d_j p_lambda>` without the rank check.
    pub fn metric_matrix(&self, lam: &[f64]) -> DMatrix<f64> {
        let s2 = self.model.similarity(lam).s.powi(2);
        let c = self.tangent_coeffs(lam);
        let d = c.len();
        let mut g = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let v = s2 * self.quad_form(&c[i], &c[j]);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }

    /// Metric tensor with inverse, smallest eigenvalue and trace.
    pub fn metric_tensor(&self, lam: &[f64]) -> Result<Metric> {
        Metric::from_matrix(self.metric_matrix(lam))
    }

    pub fn tangent_norms(&self, lam: &[f64]) -> Vec<f64> {
        let g = self.metric_matrix(lam);
        (0..g.nrows()).map(|i| g[(i, i)].max(0.0).sqrt()).collect()
    }

    /// `|d_ij p_lambda|` for all pairs, row-major.
    pub fn second_derivative_norms(&self, lam: &[f64]) -> Vec<Vec<f64>> {
        let s2 = self.model.similarity(lam).s.powi(2);
        let v = self.model.coord_derivatives(lam);
        let w = self.model.coord_second_derivatives(lam);
        let d = v.len();
        let mut out = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in i..d {
                let c = self.second_coeffs_from(&v, &w, i, j);
                let n = (s2 * self.quad_form(&c, &c)).max(0.0).sqrt();
                out[i][j] = n;
                out[j][i] = n;
            }
        }
        out
    }

    /// Curvature bound `K`, tangent supremum `T`, `C1` and `C2` over the parameter grid.
    pub fn estimate_constants(&self, grid: &GridSpec) -> Result<GeometryConstants> {
        let (mut k, mut t, mut c1, mut inv_eta) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut eta_min = f64::INFINITY;
        for lam in grid.points(self.model.domain()) {
            let metric = self.metric_tensor(&lam)?;
            for i in 0..self.dim() {
                t = t.max(metric.g[(i, i)].max(0.0).sqrt());
            }
            c1 = c1.max(metric.trace.sqrt());
            inv_eta = inv_eta.max(1.0 / metric.min_eig);
            eta_min = eta_min.min(metric.min_eig);
            for row in self.second_derivative_norms(&lam) {
                for v in row {
                    k = k.max(v);
                }
            }
        }
        Ok(GeometryConstants { k, t, c1, c2: k * inv_eta, eta_min })
    }

    /// `<r, g_k m_l>` over the pattern frame for the six gradient basis fields.
    fn gradient_moments(&self, r: &[PreparedAtom]) -> Result<[f64; 6]> {
        let mut out = [0.0; 6];
        for a in r {
            for b in &self.prepared {
                let pm = product_moments(a, b)?;
                let wgt = -2.0 * a.c * b.c * pm.weight;
                if wgt == 0.0 {
                    continue;
                }
                let m = sub(pm.mean, b.tau);
                let tm = b.theta.apply(m);
                let s = pm.cov.to_array();
                let th = b.theta.to_array();
                for k in 0..2 {
                    out[3 * k] += wgt * tm[k];
                    for l in 0..2 {
                        let e: f64 = (0..2).map(|i| th[k][i] * (s[i][l] + m[i] * pm.mean[l])).sum();
                        out[3 * k + 1 + l] += wgt * e;
                    }
                }
            }
        }
        Ok(out)
    }

    /// `<q - p_lambda, d_j p_lambda>` for every axis, in closed form.
    pub fn residual_tangent_products(&self, q: &Pattern, lam: &[f64]) -> Result<Vec<f64>> {
        let sim = self.model.similarity(lam);
        // The target seen from the pattern frame, X' -> q(S_lambda X').
        let mut r = sim.inverse().apply(q).prepared();
        r.extend(self.prepared.iter().map(|a| PreparedAtom { c: -a.c, ..*a }));
        let mom = self.gradient_moments(&r)?;
        let s2 = sim.s * sim.s;
        Ok(self
            .tangent_coeffs(lam)
            .iter()
            .map(|c| s2 * c[..6].iter().zip(&mom).map(|(a, b)| a * b).sum::<f64>())
            .collect())
    }

    /// `|q - p_lambda|^2` given `|q|^2`.
    fn objective(&self, q: &[PreparedAtom], q_norm_sq: f64, lam: &[f64]) -> Result<f64> {
        let sim = self.model.similarity(lam);
        let p_lam = self.transformed_prepared(&sim);
        let cross = inner_product_prepared(q, &p_lam)?;
        Ok(q_norm_sq - 2.0 * cross + sim.s * sim.s * self.norm_sq)
    }

    fn transformed_prepared(&self, sim: &Similarity) -> Vec<PreparedAtom> {
        sim.apply(&self.pattern).prepared()
    }

    /// `|q - p_lambda|`.
    pub fn distance(&self, q: &Pattern, lam: &[f64]) -> Result<f64> {
        let qp = q.prepared();
        let qn = inner_product_prepared(&qp, &qp)?;
        Ok(self.objective(&qp, qn, lam)?.max(0.0).sqrt())
    }

    /// Global minimizer of `|q - p_lambda|` over the domain: grid search, cyclic coordinate
    /// descent with halving steps down to `1e-6`, then Newton steps on the stationarity
    /// condition while they reduce the gradient.
    pub fn project_bruteforce(&self, q: &Pattern, grid: &GridSpec) -> Result<Projection> {
        let qp = q.prepared();
        let qn = inner_product_prepared(&qp, &qp)?;
        let f = |lam: &[f64]| self.objective(&qp, qn, lam);
        let domain = self.model.domain().to_vec();

        let mut best = None::<(f64, ParamVector)>;
        for lam in grid.points(&domain) {
            let v = f(&lam)?;
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, lam));
            }
        }
        let (grid_objective, mut lam) = best.expect("grid has at least one point");
        let mut fval = grid_objective;

        let mut steps: Vec<f64> = domain
            .iter()
            .map(|[lo, hi]| {
                let n = grid.points_per_axis.max(2) as f64 - 1.0;
                ((hi - lo) / n * 0.5).max(STEP_FLOOR)
            })
            .collect();
        while steps.iter().any(|s| *s >= STEP_FLOOR) {
            let mut moved = false;
            for i in 0..lam.len() {
                if steps[i] < STEP_FLOOR {
                    continue;
                }
                for dir in [1.0, -1.0] {
                    loop {
                        let mut trial = lam.clone();
                        trial[i] = (trial[i] + dir * steps[i]).clamp(domain[i][0], domain[i][1]);
                        if trial[i] == lam[i] {
                            break;
                        }
                        let v = f(&trial)?;
                        if v < fval {
                            fval = v;
                            lam = trial;
                            moved = true;
                        } else {
                            break;
                        }
                    }
                }
            }
            if !moved {
                for s in steps.iter_mut() {
                    *s *= 0.5;
                }
            }
        }

        let on_edge = |lam: &[f64]| {
            lam.iter().zip(&domain).any(|(v, [lo, hi])| (v - lo).abs() < EDGE_TOL || (hi - v).abs() < EDGE_TOL)
        };
        if !on_edge(&lam) {
            self.newton_polish(q, &mut lam)?;
            fval = f(&lam)?;
        }
        Ok(Projection {
            on_boundary: on_edge(&lam),
            distance: fval.max(0.0).sqrt(),
            lambda: lam,
            grid_objective,
            refined_objective: fval,
        })
    }

    fn newton_polish(&self, q: &Pattern, lam: &mut ParamVector) -> Result<()> {
        let d = lam.len();
        let grad = |l: &[f64]| -> Result<DVector<f64>> {
            Ok(DVector::from_vec(self.residual_tangent_products(q, l)?).scale(-2.0))
        };
        let mut g = grad(lam)?;
        for _ in 0..MAX_NEWTON {
            let mut hess = DMatrix::zeros(d, d);
            for j in 0..d {
                let (mut lp, mut lm) = (lam.clone(), lam.clone());
                lp[j] += FD_STEP;
                lm[j] -= FD_STEP;
                let col = (grad(&lp)? - grad(&lm)?) / (2.0 * FD_STEP);
                hess.set_column(j, &col);
            }
            let hess = (&hess + hess.transpose()) * 0.5;
            let Some(chol) = hess.cholesky() else { break };
            let delta = chol.solve(&g);
            let trial: ParamVector = lam.iter().zip(delta.iter()).map(|(l, s)| l - s).collect();
            if !self.model.contains(&trial) {
                break;
            }
            let gt = grad(&trial)?;
            if gt.norm() >= g.norm() {
                break;
            }
            *lam = trial;
            g = gt;
            if delta.norm() < 1e-15 {
                break;
            }
        }
        Ok(())
    }
}

const STEP_FLOOR: f64 = 1e-6;
const EDGE_TOL: f64 = 1e-9;
const FD_STEP: f64 = 1e-5;
const MAX_NEWTON: usize = 12;
