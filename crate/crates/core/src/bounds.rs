//! Alignment error bounds, convergence conditions and filter-size rate probes.

use serde::{Deserialize, Serialize};

use crate::atoms::{smooth, Pattern};
use crate::error::Result;
use crate::manifold::{GeometryConstants, GridSpec, ManifoldGeometry, Metric, Projection};
use crate::raster::QuadratureSpec;

/// Inputs of the single-step alignment bound.
#[derive(Debug, Clone)]
pub struct BoundInputs {
    /// Curvature bound `K`.
    pub k: f64,
    /// Metric at `lambda_r`.
    pub metric: Metric,
    /// Noise level `nu`.
    pub nu: f64,
    /// `lambda_o - lambda_r`.
    pub delta: Vec<f64>,
}

impl BoundInputs {
    pub fn d(&self) -> usize {
        self.delta.len()
    }
}

pub fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `(E1, E2)`: the nonlinearity and noise terms of the alignment bound.
pub fn bound_terms(b: &BoundInputs) -> (f64, f64) {
    let l1 = l1_norm(&b.delta);
    let f = b.k / b.metric.min_eig;
    let e1 = 0.5 * f * b.metric.trace.sqrt() * l1 * l1;
    let e2 = f * (b.d() as f64).sqrt() * b.nu * l1;
    (e1, e2)
}

/// `E = K eta_min^-1 (1/2 sqrt(tr G) |delta|_1^2 + sqrt(d) nu |delta|_1)`.
pub fn theorem1_bound(b: &BoundInputs) -> f64 {
    let (e1, e2) = bound_terms(b);
    e1 + e2
}

/// Same formula on the smoothed manifold: `k`, `metric` from `M(p_hat)`, `nu = |n_tilde_o|`
/// and `delta = lambda_hat_o - lambda_r`.
pub fn filtered_bound(b: &BoundInputs) -> (f64, f64) {
    bound_terms(b)
}

/// The smoothed problem at one filter size.
#[derive(Debug, Clone)]
pub struct FilteredProblem {
    pub rho: f64,
    pub geometry: ManifoldGeometry,
    pub target: Pattern,
    /// Projection of `q_hat` onto `M(p_hat)`; its distance is `|n_tilde_o|`.
    pub projection: Projection,
}

/// Smooths reference and target with `rho`, rebuilds the geometry and projects.
pub fn filtered_problem(g: &ManifoldGeometry, q: &Pattern, rho: f64, grid: &GridSpec) -> Result<FilteredProblem> {
    let (geometry, target) = if rho == 0.0 {
        (g.clone(), q.clone())
    } else {
        let p_hat = smooth(g.pattern(), rho);
        let quad = QuadratureSpec::fit(&[&p_hat], g.quadrature());
        (ManifoldGeometry::new(g.model().clone(), p_hat, quad)?, smooth(q, rho))
    };
    let projection = geometry.project_bruteforce(&target, grid)?;
    Ok(FilteredProblem { rho, geometry, target, projection })
}

/// `|n_tilde_o| = dist(q_hat, M(p_hat))` by brute-force projection.
pub fn measure_filtered_noise(g: &ManifoldGeometry, q: &Pattern, rho: f64, grid: &GridSpec) -> Result<f64> {
    Ok(filtered_problem(g, q, rho, grid)?.projection.distance)
}

/// Noise level seen by the multiscale analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveNoise {
    pub nu: f64,
    /// Offset from the scale change's interaction with filtering.
    pub nu_s: f64,
    pub has_scale: bool,
}

impl EffectiveNoise {
    pub fn nu_e(&self) -> f64 {
        if self.has_scale {
            self.nu + self.nu_s
        } else {
            self.nu
        }
    }
}

/// Both sides of the convergence conditions; `ok` iff both slacks are strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceCheck {
    pub ok: bool,
    /// `1/d - nu_e C2`.
    pub noise_slack: f64,
    /// `(2/C1)(1/(d C2) - nu_e) - |lambda_o - lambda_r|`.
    pub init_slack: f64,
}

pub fn convergence_check(c: &GeometryConstants, nu_e: f64, init_err: f64, d: usize) -> ConvergenceCheck {
    let d = d as f64;
    let noise_slack = 1.0 / d - nu_e * c.c2;
    let init_slack = 2.0 / c.c1 * (1.0 / (d * c.c2) - nu_e) - init_err;
    ConvergenceCheck { ok: noise_slack > 0.0 && init_slack > 0.0, noise_slack, init_slack }
}

/// `alpha = 1/2 d C1 C2 E0 + d nu_e C2`, flagged when `alpha >= 1`.
pub fn decay_factor(c: &GeometryConstants, nu_e: f64, e0: f64, d: usize) -> (f64, bool) {
    let d = d as f64;
    let alpha = 0.5 * d * c.c1 * c.c2 * e0 + d * nu_e * c.c2;
    (alpha, alpha >= 1.0)
}

/// `T |lambda_o - lambda_e|_1`.
pub fn distance_error_bound(t: f64, lambda_o: &[f64], lambda_e: &[f64]) -> f64 {
    let diff: Vec<f64> = lambda_o.iter().zip(lambda_e).map(|(a, b)| a - b).collect();
    t * l1_norm(&diff)
}

/// Model of the per-iteration bound as a function of the filter size, with curvature and
/// filtered noise following their rates `(1 + rho^2)^(-1/2)` and `(1 + rho^2)^(1/2)`:
/// `1/4 d C1 C2 (1 + u^-1/2) D^2 + 1/2 d C2 nu_e (1 + u^-1/2) u^1/2 D`, `u = 1 + rho^2`,
/// `D = |lambda_o - lambda_e^{k-1}|`.
pub fn iteration_bound_filtered(c1: f64, c2: f64, nu_e: f64, dist: f64, d: usize, rho: f64) -> f64 {
    let d = d as f64;
    let u = 1.0 + rho * rho;
    let damp = 1.0 + u.powf(-0.5);
    0.25 * d * c1 * c2 * damp * dist * dist + 0.5 * d * c2 * nu_e * damp * u.sqrt() * dist
}

/// Least-squares line `y = slope x + intercept` with its coefficient of determination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> LineFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    LineFit { slope, intercept: my - slope * mx, r2 }
}

/// Slope of `ln y` against `ln x`.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> LineFit {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly)
}

/// Average ranks, ties sharing the mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let fit = linear_fit(&ra, &rb);
    fit.r2.sqrt() * fit.slope.signum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use std::f64::consts::PI;

    fn diag_metric(v: f64, d: usize) -> Metric {
        Metric::from_matrix(DMatrix::from_diagonal_element(d, d, v)).unwrap()
    }

    #[test]
    fn alignment_bound_worked_example() {
        let b = BoundInputs { k: 1.0, metric: diag_metric(PI / 2.0, 2), nu: 0.1, delta: vec![0.1, 0.0] };
        let expect = (2.0 / PI) * (0.5 * PI.sqrt() * 0.01 + 2f64.sqrt() * 0.1 * 0.1);
        assert!((theorem1_bound(&b) - expect).abs() < 1e-15);
        assert!((expect - 0.01464).abs() < 1e-5);
        let zero = BoundInputs { delta: vec![0.0, 0.0], ..b };
        assert_eq!(theorem1_bound(&zero), 0.0);
    }

    #[test]
    fn convergence_and_decay_examples() {
        let c = GeometryConstants { k: 1.0, t: 1.0, c1: 1.0, c2: 1.0, eta_min: 1.0 };
        let r = convergence_check(&c, 0.0, 0.5, 2);
        assert!(r.ok);
        assert!((r.noise_slack - 0.5).abs() < 1e-15 && (r.init_slack - 0.5).abs() < 1e-15);
        assert!(!convergence_check(&c, 0.5, 0.0, 2).ok);
        let (a, flag) = decay_factor(&c, 0.1, 0.5, 2);
        assert!((a - 0.7).abs() < 1e-15 && !flag);
        assert_eq!(decay_factor(&c, 0.0, 0.0, 2).0, 0.0);
    }

    #[test]
    fn effective_noise_adds_offset_only_with_scale() {
        let mut e = EffectiveNoise { nu: 0.2, nu_s: 0.05, has_scale: false };
        assert_eq!(e.nu_e(), 0.2);
        e.has_scale = true;
        assert!((e.nu_e() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn spearman_handles_ties_and_order() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        let s = spearman(&[1.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]);
        assert!(s > 0.9 && s < 1.0);
    }
}
