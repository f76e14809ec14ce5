//! Tangent-distance estimators: one linearized step, iterated single-scale refinement
//! and coarse-to-fine registration over a filter-size schedule.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::atoms::{smooth, Pattern};
use crate::error::{Error, Result};
use crate::manifold::ManifoldGeometry;
use crate::raster::RasterImage;
use crate::transforms::ParamVector;

/// Outcome of one tangent step.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentStep {
    pub lambda: ParamVector,
    /// The estimate left the domain; it is reported unclamped.
    pub out_of_domain: bool,
}

fn solve_step(g: &ManifoldGeometry, lam_r: &[f64], rhs: Vec<f64>) -> Result<TangentStep> {
    let metric = g.metric_tensor(lam_r)?;
    let delta = &metric.inverse * DVector::from_vec(rhs);
    let lambda: ParamVector = lam_r.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
    Ok(TangentStep { out_of_domain: !g.model().contains(&lambda), lambda })
}

/// `lambda_e = lambda_r + G^-1(lambda_r) <q - p_lambda_r, d p_lambda_r>`, the minimizer of the
/// distance from `q` to the tangent plane of the manifold at `lambda_r`.
pub fn tangent_step(g: &ManifoldGeometry, q: &Pattern, lam_r: &[f64]) -> Result<TangentStep> {
    solve_step(g, lam_r, g.residual_tangent_products(q, lam_r)?)
}

/// Tangent step for a sampled target; inner products are Riemann sums on the raster grid.
pub fn tangent_step_raster(g: &ManifoldGeometry, q: &RasterImage, lam_r: &[f64]) -> Result<TangentStep> {
    let model = g.model();
    let p_r = model.apply_to_pattern(lam_r, g.pattern());
    let tangents: Vec<_> = (0..g.dim()).map(|i| g.tangent(lam_r, i)).collect();
    let mut rhs = vec![0.0; g.dim()];
    for j in 0..q.height {
        for i in 0..q.width {
            let x = q.world(i, j);
            let r = q.get(i, j) - crate::atoms::eval_pattern(&p_r, x);
            for (acc, t) in rhs.iter_mut().zip(&tangents) {
                *acc += r * t.eval(x);
            }
        }
    }
    let area = q.map.pixel_area();
    solve_step(g, lam_r, rhs.into_iter().map(|v| v * area).collect())
}

/// Trace of an iterative registration.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// `lambda_e^0 = lambda_r, lambda_e^1, ...`.
    pub estimates: Vec<ParamVector>,
    /// Filter size used to produce `estimates[k + 1]`.
    pub rhos: Vec<f64>,
    /// `|q_hat - p_hat_{lambda_e^k}|` at the filter size of the step leaving `estimates[k]`,
    /// or at the last filter size for the final estimate.
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub diverged: bool,
    /// Some estimate left the domain.
    pub out_of_domain: bool,
    /// Optional per-iteration error bounds filled in by callers that know `lambda_o`.
    pub bound_trace: Option<Vec<f64>>,
}

impl RegistrationResult {
    pub fn final_estimate(&self) -> &ParamVector {
        self.estimates.last().expect("at least the initial estimate")
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Steps whose length grows this many times in a row count as divergence.
const DIVERGENCE_RUN: usize = 3;

/// Repeated tangent steps at one scale, each linearizing at the previous estimate.
pub fn iterate_single_scale(
    g: &ManifoldGeometry,
    q: &Pattern,
    lam_r: &[f64],
    max_iters: usize,
    tol: f64,
) -> Result<RegistrationResult> {
    let mut res = RegistrationResult {
        estimates: vec![lam_r.to_vec()],
        rhos: Vec::new(),
        residuals: vec![g.distance(q, lam_r)?],
        converged: false,
        diverged: false,
        out_of_domain: false,
        bound_trace: None,
    };
    let mut last_step = f64::INFINITY;
    let mut growth = 0;
    for _ in 0..max_iters {
        let prev = res.final_estimate().clone();
        let step = tangent_step(g, q, &prev)?;
        let len = l2(&step.lambda, &prev);
        res.out_of_domain |= step.out_of_domain;
        res.residuals.push(g.distance(q, &step.lambda)?);
        res.estimates.push(step.lambda);
        res.rhos.push(0.0);
        if len < tol {
            res.converged = true;
            break;
        }
        growth = if len > last_step { growth + 1 } else { 0 };
        last_step = len;
        if growth >= DIVERGENCE_RUN {
            res.diverged = true;
            break;
        }
    }
    Ok(res)
}

/// Filter sizes per iteration of hierarchical registration.
#[derive(Debug, Clone, PartialEq)]
pub enum FilterSchedule {
    /// Explicit list.
    Fixed(Vec<f64>),
    /// `rho_k = alpha^((k-1)/2) rho_1`, set to 0 once below `floor`.
    Geometric { rho1: f64, alpha: f64, floor: f64, levels: usize },
    /// Oracle choice `rho_k = sqrt(C1 |lambda_o - lambda_e^{k-1}| / (2 nu_e) - 1)`, else 0.
    OptimalOracle { lambda_o: ParamVector, c1: f64, nu_e: f64, levels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Geometric,
    OptimalOracle,
    Fixed,
}

/// Serialized schedule parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    #[serde(default)]
    pub rho1: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub floor: f64,
    pub levels: usize,
    #[serde(default)]
    pub rhos: Option<Vec<f64>>,
}

/// Oracle inputs for the optimal schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleInputs {
    pub lambda_o: ParamVector,
    pub c1: f64,
    pub nu_e: f64,
}

/// Builds and validates a schedule.
pub fn make_schedule(cfg: &ScheduleConfig, oracle: Option<&OracleInputs>) -> Result<FilterSchedule> {
    let bad = |m: String| Err(Error::InvalidSchedule(m));
    if !(cfg.floor >= 0.0) {
        return bad(format!("floor {} must be >= 0", cfg.floor));
    }
    match cfg.kind {
        ScheduleKind::Geometric => {
            let rho1 = cfg.rho1.ok_or_else(|| Error::InvalidSchedule("geometric schedule needs rho1".into()))?;
            let alpha = cfg.alpha.ok_or_else(|| Error::InvalidSchedule("geometric schedule needs alpha".into()))?;
            if !(rho1 > 0.0 && rho1.is_finite()) {
                return bad(format!("rho1 {rho1} must be > 0"));
            }
            if !(alpha > 0.0 && alpha < 1.0) {
                return bad(format!("alpha {alpha} must lie in (0, 1)"));
            }
            Ok(FilterSchedule::Geometric { rho1, alpha, floor: cfg.floor, levels: cfg.levels })
        }
        ScheduleKind::Fixed => {
            let rhos = cfg.rhos.clone().unwrap_or_else(|| vec![cfg.rho1.unwrap_or(0.0); cfg.levels]);
            if rhos.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
                return bad("filter sizes must be finite and >= 0".into());
            }
            Ok(FilterSchedule::Fixed(rhos))
        }
        ScheduleKind::OptimalOracle => {
            let o = oracle.ok_or_else(|| Error::InvalidSchedule("optimal-oracle schedule needs lambda_o".into()))?;
            if !(o.c1 > 0.0 && o.nu_e >= 0.0) {
                return bad("oracle schedule needs C1 > 0 and nu_e >= 0".into());
            }
            Ok(FilterSchedule::OptimalOracle {
                lambda_o: o.lambda_o.clone(),
                c1: o.c1,
                nu_e: o.nu_e,
                levels: cfg.levels,
            })
        }
    }
}

/// `sqrt(C1 e / (2 nu_e) - 1)` when `e >= 2 nu_e / C1`, else 0.
pub fn optimal_filter_size(c1: f64, err: f64, nu_e: f64) -> f64 {
    if nu_e <= 0.0 {
        return f64::INFINITY;
    }
    if err < 2.0 * nu_e / c1 {
        0.0
    } else {
        (c1 * err / (2.0 * nu_e) - 1.0).max(0.0).sqrt()
    }
}

impl FilterSchedule {
    pub fn levels(&self) -> usize {
        match self {
            FilterSchedule::Fixed(r) => r.len(),
            FilterSchedule::Geometric { levels, .. } | FilterSchedule::OptimalOracle { levels, .. } => *levels,
        }
    }

    /// Filter size of iteration `k >= 1` given the previous estimate.
    pub fn rho(&self, k: usize, prev: &[f64]) -> f64 {
        match self {
            FilterSchedule::Fixed(r) => r[k - 1],
            FilterSchedule::Geometric { rho1, alpha, floor, .. } => {
                let r = alpha.powf((k as f64 - 1.0) / 2.0) * rho1;
                if r < *floor {
                    0.0
                } else {
                    r
                }
            }
            FilterSchedule::OptimalOracle { lambda_o, c1, nu_e, .. } => {
                optimal_filter_size(*c1, l2(lambda_o, prev), *nu_e)
            }
        }
    }
}

/// Coarse-to-fine registration: at iteration `k` both patterns are smoothed with `rho_k`,
/// the geometry is rebuilt for the smoothed reference and `inner_iters` tangent steps are
/// taken from the previous estimate.
pub fn register_hierarchical(
    g: &ManifoldGeometry,
    q: &Pattern,
    lam_r: &[f64],
    schedule: &FilterSchedule,
) -> Result<RegistrationResult> {
    register_hierarchical_with(g, q, lam_r, schedule, 1)
}

pub fn register_hierarchical_with(
    g: &ManifoldGeometry,
    q: &Pattern,
    lam_r: &[f64],
    schedule: &FilterSchedule,
    inner_iters: usize,
) -> Result<RegistrationResult> {
    hierarchical(g, q, lam_r, schedule, inner_iters, false)
}

/// [`register_hierarchical`] that stops once a step is shorter than [`CONVERGENCE_TOL`] and
/// every remaining level would use the same filter size, so later steps repeat it.
pub fn register_until_converged(
    g: &ManifoldGeometry,
    q: &Pattern,
    lam_r: &[f64],
    schedule: &FilterSchedule,
) -> Result<RegistrationResult> {
    hierarchical(g, q, lam_r, schedule, 1, true)
}

fn hierarchical(
    g: &ManifoldGeometry,
    q: &Pattern,
    lam_r: &[f64],
    schedule: &FilterSchedule,
    inner_iters: usize,
    early_stop: bool,
) -> Result<RegistrationResult> {
    let mut cache: BTreeMap<u64, (ManifoldGeometry, Pattern)> = BTreeMap::new();
    let mut level = |rho: f64| -> Result<(ManifoldGeometry, Pattern)> {
        if rho == 0.0 {
            return Ok((g.clone(), q.clone()));
        }
        if let Some(v) = cache.get(&rho.to_bits()) {
            return Ok(v.clone());
        }
        let gs = ManifoldGeometry::new(
            g.model().clone(),
            smooth(g.pattern(), rho),
            crate::raster::QuadratureSpec::fit(&[&smooth(g.pattern(), rho)], g.quadrature()),
        )?;
        let v = (gs, smooth(q, rho));
        cache.insert(rho.to_bits(), v.clone());
        Ok(v)
    };
    let mut res = RegistrationResult {
        estimates: vec![lam_r.to_vec()],
        rhos: Vec::new(),
        residuals: Vec::new(),
        converged: false,
        diverged: false,
        out_of_domain: false,
        bound_trace: None,
    };
    let mut last = None;
    for k in 1..=schedule.levels() {
        let prev = res.final_estimate().clone();
        let rho = schedule.rho(k, &prev);
        let (gk, qk) = level(rho)?;
        res.residuals.push(gk.distance(&qk, &prev)?);
        let mut lam = prev;
        for _ in 0..inner_iters.max(1) {
            let step = tangent_step(&gk, &qk, &lam)?;
            res.out_of_domain |= step.out_of_domain;
            lam = step.lambda;
        }
        let settled = early_stop
            && l2(&lam, res.final_estimate()) < CONVERGENCE_TOL
            && (k + 1..=schedule.levels()).all(|j| schedule.rho(j, &lam) == rho);
        res.estimates.push(lam);
        res.rhos.push(rho);
        last = Some((gk, qk));
        if settled {
            break;
        }
    }
    let fin = res.final_estimate().clone();
    let final_residual = match &last {
        Some((gk, qk)) => gk.distance(qk, &fin)?,
        None => g.distance(q, &fin)?,
    };
    res.residuals.push(final_residual);
    let n = res.estimates.len();
    res.converged = n >= 2 && l2(&res.estimates[n - 1], &res.estimates[n - 2]) < CONVERGENCE_TOL;
    Ok(res)
}

/// Final step length below which a hierarchical run counts as converged.
pub const CONVERGENCE_TOL: f64 = 1e-8;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_schedule_halves_for_quarter_alpha() {
        let cfg = ScheduleConfig {
            kind: ScheduleKind::Geometric,
            rho1: Some(4.0),
            alpha: Some(0.25),
            floor: 0.3,
            levels: 6,
            rhos: None,
        };
        let s = make_schedule(&cfg, None).unwrap();
        let r: Vec<f64> = (1..=6).map(|k| s.rho(k, &[])).collect();
        assert_eq!(r, vec![4.0, 2.0, 1.0, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        let mut cfg = ScheduleConfig {
            kind: ScheduleKind::Geometric,
            rho1: Some(4.0),
            alpha: Some(1.0),
            floor: 0.0,
            levels: 3,
            rhos: None,
        };
        assert!(make_schedule(&cfg, None).is_err());
        cfg.alpha = Some(0.5);
        cfg.rho1 = Some(-1.0);
        assert!(make_schedule(&cfg, None).is_err());
        cfg.kind = ScheduleKind::OptimalOracle;
        assert!(make_schedule(&cfg, None).is_err());
    }

    #[test]
    fn optimal_size_examples() {
        assert!((optimal_filter_size(2.0, 4.0, 1.0) - 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(optimal_filter_size(2.0, 0.5, 1.0), 0.0);
    }
}
