//! Transformation-invariant classification by estimated manifold distance.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::atoms::{smooth, Pattern};
use crate::bounds::{bound_terms, l1_norm, BoundInputs};
use crate::error::{Error, Result};
use crate::manifold::{GeometryConstants, GridSpec, ManifoldGeometry};
use crate::raster::QuadratureSpec;
use crate::register::tangent_step;
use crate::transforms::{ParamVector, TransformModel};

/// One class: its representative pattern and manifold.
#[derive(Debug, Clone)]
pub struct ClassEntry {
    pub label: usize,
    pub geometry: ManifoldGeometry,
    pub constants: GeometryConstants,
}

/// Class manifolds of the smoothed representatives at one filter size.
#[derive(Debug)]
pub struct ScaleLevel {
    pub rho: f64,
    pub geometries: Vec<ManifoldGeometry>,
    constants: Vec<OnceLock<GeometryConstants>>,
}

impl ScaleLevel {
    /// Grid constants of class `m` at this filter size, computed on first use.
    pub fn constants(&self, m: usize, grid: &GridSpec) -> Result<GeometryConstants> {
        if let Some(c) = self.constants[m].get() {
            return Ok(*c);
        }
        let c = self.geometries[m].estimate_constants(grid)?;
        Ok(*self.constants[m].get_or_init(|| c))
    }
}

/// Class representatives sharing one transformation model; labels are indices.
#[derive(Debug)]
pub struct ClassBank {
    pub classes: Vec<ClassEntry>,
    k_grid: GridSpec,
    levels: Mutex<BTreeMap<u64, Arc<ScaleLevel>>>,
}

impl ClassBank {
    pub fn new(model: &TransformModel, patterns: Vec<Pattern>, k_grid: GridSpec) -> Result<Self> {
        if patterns.len() < 2 {
            return Err(Error::IllPosedBank(format!("{} classes; at least 2 required", patterns.len())));
        }
        let classes = patterns
            .into_iter()
            .enumerate()
            .map(|(label, p)| {
                let geometry = ManifoldGeometry::fitted(model.clone(), p)?;
                let constants = geometry.estimate_constants(&k_grid)?;
                Ok(ClassEntry { label, geometry, constants })
            })
            .collect::<Result<_>>()?;
        Ok(ClassBank { classes, k_grid, levels: Mutex::new(BTreeMap::new()) })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn model(&self) -> &TransformModel {
        self.classes[0].geometry.model()
    }

    pub fn k_grid(&self) -> &GridSpec {
        &self.k_grid
    }

    /// Smoothed class manifolds at `rho`, cached.
    pub fn level(&self, rho: f64) -> Result<Arc<ScaleLevel>> {
        if let Some(l) = self.levels.lock().expect("level cache").get(&rho.to_bits()) {
            return Ok(l.clone());
        }
        let geometries = self
            .classes
            .iter()
            .map(|c| {
                if rho == 0.0 {
                    return Ok(c.geometry.clone());
                }
                let p = smooth(c.geometry.pattern(), rho);
                let quad = QuadratureSpec::fit(&[&p], c.geometry.quadrature());
                ManifoldGeometry::new(c.geometry.model().clone(), p, quad)
            })
            .collect::<Result<Vec<_>>>()?;
        let constants = (0..geometries.len()).map(|_| OnceLock::new()).collect();
        let level = Arc::new(ScaleLevel { rho, geometries, constants });
        if rho == 0.0 {
            for (m, c) in self.classes.iter().enumerate() {
                let _ = level.constants[m].set(c.constants);
            }
        }
        self.levels.lock().expect("level cache").insert(rho.to_bits(), level.clone());
        Ok(level)
    }
}

/// Argmin with ties going to the lowest index; `None` entries are skipped.
fn argmin(values: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        if let Some(v) = v {
            if best.is_none_or(|(_, b)| *v < b) {
                best = Some((i, *v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Outcome of classifying one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub label: usize,
    /// Unfiltered distance `|q - p^m_{lambda_hat_e^m}|`, `None` for excluded classes.
    pub distances: Vec<Option<f64>>,
    pub estimates: Vec<Option<ParamVector>>,
    /// Reason each excluded class failed.
    pub excluded: Vec<Option<String>>,
}

/// One tangent step per class on the `rho`-smoothed pair, then comparison of unfiltered
/// distances.
pub fn classify_query(bank: &ClassBank, q: &Pattern, rho: f64, lam_r: &[ParamVector]) -> Result<Classification> {
    let level = bank.level(rho)?;
    let q_hat = if rho == 0.0 { q.clone() } else { smooth(q, rho) };
    let mut distances = Vec::with_capacity(bank.len());
    let mut estimates = Vec::with_capacity(bank.len());
    let mut excluded = Vec::with_capacity(bank.len());
    for (m, class) in bank.classes.iter().enumerate() {
        let outcome = tangent_step(&level.geometries[m], &q_hat, &lam_r[m])
            .and_then(|s| Ok((class.geometry.distance(q, &s.lambda)?, s.lambda)));
        match outcome {
            Ok((d, lam)) => {
                distances.push(Some(d));
                estimates.push(Some(lam));
                excluded.push(None);
            }
            Err(e) => {
                distances.push(None);
                estimates.push(None);
                excluded.push(Some(e.to_string()));
            }
        }
    }
    let label = argmin(&distances)
        .ok_or_else(|| Error::AllClassesExcluded(excluded.iter().flatten().cloned().collect::<Vec<_>>().join("; ")))?;
    Ok(Classification { label, distances, estimates, excluded })
}

/// Exact manifold distances of a query.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueLabel {
    pub label: usize,
    /// `nu_j = |q - p^j_{lambda_o^j}|`.
    pub distances: Vec<f64>,
    pub lambdas: Vec<ParamVector>,
    /// Some projection ended on the domain boundary.
    pub on_boundary: bool,
}

/// Label of the nearest class manifold by brute-force projection.
pub fn true_label(bank: &ClassBank, q: &Pattern, grid: &GridSpec) -> Result<TrueLabel> {
    let mut distances = Vec::new();
    let mut lambdas = Vec::new();
    let mut on_boundary = false;
    for c in &bank.classes {
        let p = c.geometry.project_bruteforce(q, grid)?;
        on_boundary |= p.on_boundary;
        distances.push(p.distance);
        lambdas.push(p.lambda);
    }
    let opt: Vec<Option<f64>> = distances.iter().map(|d| Some(*d)).collect();
    Ok(TrueLabel { label: argmin(&opt).expect("at least two classes"), distances, lambdas, on_boundary })
}

/// `T_m K_hat_m eta_min^-1(G_hat^m) (1/2 sqrt(tr G_hat^m) |lambda_hat_o - lambda_r|_1^2
/// + sqrt(d) |n_tilde_o,m| |lambda_hat_o - lambda_r|_1)` for the true class `m`.
pub fn misclassification_likeliness(
    bank: &ClassBank,
    q: &Pattern,
    rho: f64,
    lam_r: &[f64],
    m: usize,
    grid: &GridSpec,
) -> Result<f64> {
    let level = bank.level(rho)?;
    let g = &level.geometries[m];
    let q_hat = if rho == 0.0 { q.clone() } else { smooth(q, rho) };
    let proj = g.project_bruteforce(&q_hat, grid)?;
    let k_hat = level.constants(m, bank.k_grid())?.k;
    let delta: Vec<f64> = proj.lambda.iter().zip(lam_r).map(|(a, b)| a - b).collect();
    let (e1, e2) = bound_terms(&BoundInputs { k: k_hat, metric: g.metric_tensor(lam_r)?, nu: proj.distance, delta });
    Ok(bank.classes[m].constants.t * (e1 + e2))
}

/// Distance margin, own-manifold distances and parameter deviation of a query population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    /// `epsilon`: smallest gap between a sample's distance to another class and to its own.
    pub epsilon: f64,
    /// `V_m`: largest distance of class-`m` samples to their own manifold.
    pub v: Vec<f64>,
    /// `Delta`: bound on `|lambda_o^m - lambda_r^m|_1`.
    pub delta: f64,
}

/// `((M-1)/epsilon) T_m sqrt(d) K_m eta_min^-1(G^m) (1/2 sqrt(tr G^m) Delta^2 + sqrt(d) V_m Delta)`
/// at `lambda_r = identity`; the flag marks a vacuous bound (`>= 1`).
pub fn misclassification_bound(bank: &ClassBank, stats: &ClassStats, m: usize) -> Result<(f64, bool)> {
    if !(stats.epsilon > 0.0) {
        return Err(Error::IllPosedBank(format!("distance margin {} is not positive", stats.epsilon)));
    }
    let c = &bank.classes[m];
    let lam_r = c.geometry.model().identity();
    let metric = c.geometry.metric_tensor(&lam_r)?;
    let d = lam_r.len() as f64;
    let f = c.constants.k / metric.min_eig;
    let inner = 0.5 * metric.trace.sqrt() * stats.delta * stats.delta + d.sqrt() * stats.v[m] * stats.delta;
    let b = (bank.len() as f64 - 1.0) / stats.epsilon * c.constants.t * d.sqrt() * f * inner;
    Ok((b, b >= 1.0))
}

/// A sample breaking the bounded, non-intersecting support assumptions.
#[derive(Debug, Clone, PartialEq)]
pub enum AssumptionViolation {
    /// The sample is not strictly closer to its own manifold than to class `other`.
    Intersecting { sample: usize, own: usize, other: usize },
    /// `|lambda_o^m - lambda_r^m|_1` exceeds `Delta`.
    OutsideDelta { sample: usize, deviation: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStatsReport {
    pub stats: ClassStats,
    pub labels: Vec<usize>,
    pub violations: Vec<AssumptionViolation>,
}

/// Empirical `epsilon` and `V_m` over `samples` labeled by [`true_label`]; `Delta` is the
/// configured deviation bound.
pub fn estimate_class_stats(
    bank: &ClassBank,
    samples: &[Pattern],
    delta: f64,
    grid: &GridSpec,
) -> Result<ClassStatsReport> {
    let truths: Vec<TrueLabel> = samples.iter().map(|q| true_label(bank, q, grid)).collect::<Result<_>>()?;
    Ok(class_stats_from_labels(bank, &truths, delta))
}

/// Deviation `|lambda_o^m - lambda_r^m|_1` of a labeled sample from the identity.
pub fn deviation_from_identity(bank: &ClassBank, t: &TrueLabel) -> f64 {
    let lam_r = bank.model().identity();
    l1_norm(&t.lambdas[t.label].iter().zip(&lam_r).map(|(a, b)| a - b).collect::<Vec<_>>())
}

/// [`estimate_class_stats`] on samples already projected onto every class.
pub fn class_stats_from_labels(bank: &ClassBank, truths: &[TrueLabel], delta: f64) -> ClassStatsReport {
    let mut v = vec![0.0f64; bank.len()];
    let mut epsilon = if truths.is_empty() { 0.0 } else { f64::INFINITY };
    let mut labels = Vec::with_capacity(truths.len());
    let mut violations = Vec::new();
    for (s, t) in truths.iter().enumerate() {
        let m = t.label;
        v[m] = v[m].max(t.distances[m]);
        for (j, dj) in t.distances.iter().enumerate() {
            if j == m {
                continue;
            }
            epsilon = epsilon.min(dj - t.distances[m]);
            if *dj <= t.distances[m] {
                violations.push(AssumptionViolation::Intersecting { sample: s, own: m, other: j });
            }
        }
        let dev = deviation_from_identity(bank, t);
        if dev > delta {
            violations.push(AssumptionViolation::OutsideDelta { sample: s, deviation: dev });
        }
        labels.push(m);
    }
    ClassStatsReport { stats: ClassStats { epsilon, v, delta }, labels, violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::synth_random_reference;
    use crate::transforms::ModelKind;

    fn bank(same: bool) -> ClassBank {
        let model = TransformModel::standard(ModelKind::Translation2D);
        let p1 = synth_random_reference(1);
        let p2 = if same { p1.clone() } else { synth_random_reference(2) };
        ClassBank::new(&model, vec![p1, p2], GridSpec::new(5).unwrap()).unwrap()
    }

    #[test]
    fn own_pattern_is_classified_to_its_class() {
        let b = bank(false);
        let id = b.model().identity();
        let q = b.classes[1].geometry.pattern().clone();
        let c = classify_query(&b, &q, 0.0, &[id.clone(), id]).unwrap();
        assert_eq!(c.label, 1);
        assert!(c.distances[1].unwrap() < 1e-6);
    }

    #[test]
    fn identical_classes_have_zero_margin_and_tie_to_lowest_label() {
        let b = bank(true);
        let q = b.classes[0].geometry.pattern().clone();
        let grid = GridSpec::new(5).unwrap();
        let r = estimate_class_stats(&b, &[q], 0.1, &grid).unwrap();
        assert_eq!(r.labels, vec![0]);
        assert_eq!(r.stats.epsilon, 0.0);
        assert!(!r.violations.is_empty());
        assert!(misclassification_bound(&b, &r.stats, 0).is_err());
    }

    #[test]
    fn bound_vanishes_with_zero_delta() {
        let b = bank(false);
        let stats = ClassStats { epsilon: 0.5, v: vec![0.1, 0.1], delta: 0.0 };
        assert_eq!(misclassification_bound(&b, &stats, 0).unwrap().0, 0.0);
    }

    #[test]
    fn single_class_bank_is_rejected() {
        let model = TransformModel::standard(ModelKind::Translation2D);
        assert!(ClassBank::new(&model, vec![synth_random_reference(1)], GridSpec::default()).is_err());
    }
}
