//! Seeded Monte-Carlo protocols shared by the CLI and the acceptance suite.
//!
//! Every trial draws from its own ChaCha stream `(seed, trial)`, so results do not depend
//! on thread count or scheduling. Parallel loops collect in trial order.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atoms::{pattern_norm, Pattern};
use crate::bounds::{
    bound_terms, convergence_check, decay_factor, distance_error_bound, filtered_problem, l2_dist, BoundInputs,
    EffectiveNoise,
};
use crate::classify::{
    class_stats_from_labels, classify_query, deviation_from_identity, misclassification_bound,
    misclassification_likeliness, true_label, AssumptionViolation, ClassBank, ClassStats,
};
use crate::error::{Error, Result};
use crate::manifold::{GeometryConstants, GridSpec, ManifoldGeometry};
use crate::raster::{
    random_atoms, rng_stream, synth_noise_with, synth_random_reference, AtomRanges, NOISE_ATOMS, NOISE_SCALES,
};
use crate::register::{
    iterate_single_scale, make_schedule, optimal_filter_size, register_hierarchical, tangent_step, ScheduleConfig,
    ScheduleKind,
};
use crate::transforms::{ModelKind, ParamVector, TransformModel};

/// Uniform draw from the model's target ranges.
pub fn random_target(kind: ModelKind, rng: &mut impl Rng) -> ParamVector {
    kind.target_ranges().iter().map(|[lo, hi]| lo + (hi - lo) * rng.random::<f64>()).collect()
}

/// A reference pattern with its geometry and grid constants.
#[derive(Debug, Clone)]
pub struct Reference {
    pub geometry: ManifoldGeometry,
    pub constants: GeometryConstants,
    pub norm: f64,
}

impl Reference {
    pub fn new(model: TransformModel, pattern: Pattern, k_grid: &GridSpec) -> Result<Self> {
        let norm = pattern_norm(&pattern)?;
        let geometry = ManifoldGeometry::fitted(model, pattern)?;
        let constants = geometry.estimate_constants(k_grid)?;
        Ok(Reference { geometry, constants, norm })
    }

    /// Random reference pattern number `index` of a pool seeded by `seed`.
    pub fn random(kind: ModelKind, seed: u64, index: u64, k_grid: &GridSpec) -> Result<Self> {
        let pseed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index);
        Reference::new(TransformModel::standard(kind), synth_random_reference(pseed), k_grid)
    }
}

fn reference_pool(kind: ModelKind, seed: u64, count: usize, k_grid: &GridSpec) -> Result<Vec<Reference>> {
    (0..count.max(1) as u64).into_par_iter().map(|i| Reference::random(kind, seed, i, k_grid)).collect()
}

/// Single-step alignment trials from the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentProtocol {
    pub kind: ModelKind,
    pub trials: usize,
    /// Size of the reference-pattern pool cycled through by the trials.
    pub patterns: usize,
    /// Noise norm as a fraction of `|p|`, drawn uniformly.
    pub nu_range: [f64; 2],
    /// Grid for `K`, `T`, `C1`, `C2`.
    pub k_grid: usize,
    /// Grid seeding the brute-force projection.
    pub projection_grid: usize,
    pub seed: u64,
}

impl AlignmentProtocol {
    pub fn new(kind: ModelKind, trials: usize, seed: u64) -> Self {
        AlignmentProtocol { kind, trials, patterns: 10, nu_range: [0.0, 0.5], k_grid: 9, projection_grid: 9, seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTrial {
    pub trial: usize,
    pub pattern: usize,
    pub lambda_star: ParamVector,
    pub lambda_o: ParamVector,
    pub lambda_e: ParamVector,
    /// `|q - p_lambda_o|`.
    pub nu: f64,
    pub error: f64,
    pub e1: f64,
    pub e2: f64,
    pub on_boundary: bool,
    pub out_of_domain: bool,
    /// `| |q - p_lambda_o| - |q - p_lambda_e| |`.
    pub distance_error: f64,
    pub distance_bound: f64,
}

impl AlignmentTrial {
    pub fn bound(&self) -> f64 {
        self.e1 + self.e2
    }
}

pub fn run_alignment(proto: &AlignmentProtocol) -> Result<Vec<AlignmentTrial>> {
    let k_grid = GridSpec::new(proto.k_grid)?;
    let proj_grid = GridSpec::new(proto.projection_grid)?;
    let pool = reference_pool(proto.kind, proto.seed, proto.patterns, &k_grid)?;
    (0..proto.trials)
        .into_par_iter()
        .map(|trial| {
            let idx = trial % pool.len();
            alignment_trial(&pool[idx], proto, trial, idx, &proj_grid)
        })
        .collect()
}

fn alignment_trial(
    r: &Reference,
    proto: &AlignmentProtocol,
    trial: usize,
    pattern: usize,
    grid: &GridSpec,
) -> Result<AlignmentTrial> {
    let mut rng = rng_stream(proto.seed, trial as u64);
    let g = &r.geometry;
    let model = g.model();
    let lambda_star = random_target(proto.kind, &mut rng);
    let [lo, hi] = proto.nu_range;
    let nu_rel = lo + (hi - lo) * rng.random::<f64>();
    let noise = synth_noise_with(&mut rng, NOISE_ATOMS, NOISE_SCALES, nu_rel * r.norm)?;
    let q = model.apply_to_pattern(&lambda_star, g.pattern()).plus(&noise);
    let proj = g.project_bruteforce(&q, grid)?;
    let lam_r = model.identity();
    let step = tangent_step(g, &q, &lam_r)?;
    let delta: Vec<f64> = proj.lambda.iter().zip(&lam_r).map(|(a, b)| a - b).collect();
    let inputs = BoundInputs { k: r.constants.k, metric: g.metric_tensor(&lam_r)?, nu: proj.distance, delta };
    let (e1, e2) = bound_terms(&inputs);
    let d_e = g.distance(&q, &step.lambda)?;
    Ok(AlignmentTrial {
        trial,
        pattern,
        error: l2_dist(&step.lambda, &proj.lambda),
        distance_error: (proj.distance - d_e).abs(),
        distance_bound: distance_error_bound(r.constants.t, &proj.lambda, &step.lambda),
        lambda_star,
        lambda_e: step.lambda,
        lambda_o: proj.lambda,
        nu: proj.distance,
        e1,
        e2,
        on_boundary: proj.on_boundary,
        out_of_domain: step.out_of_domain,
    })
}

/// Filter-size and noise sweep of the smoothed single-step alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepProtocol {
    pub kind: ModelKind,
    /// Noise norms as fractions of `|p|`.
    pub nus: Vec<f64>,
    pub rhos: Vec<f64>,
    /// Independent (pattern, target, noise direction) draws averaged per grid point.
    pub realizations: usize,
    pub k_grid: usize,
    pub projection_grid: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub realization: usize,
    pub rho: f64,
    /// Noise norm relative to `|p|`, as configured.
    pub nu_rel: f64,
    /// Absolute noise norm.
    pub nu: f64,
    pub e1: f64,
    pub e2: f64,
    /// `|lambda_hat_e - lambda_o|`.
    pub measured_error: f64,
    /// `|n_tilde_o|`.
    pub filtered_noise: f64,
    pub k_hat: f64,
}

impl SweepRow {
    pub fn e_hat(&self) -> f64 {
        self.e1 + self.e2
    }
}

pub fn run_sweep(proto: &SweepProtocol) -> Result<Vec<SweepRow>> {
    let per = run_sweep_each(proto)?.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Rows of every realization separately, so that one failing draw does not stop the sweep.
pub fn run_sweep_each(proto: &SweepProtocol) -> Result<Vec<Result<Vec<SweepRow>>>> {
    let k_grid = GridSpec::new(proto.k_grid)?;
    let grid = GridSpec::new(proto.projection_grid)?;
    Ok((0..proto.realizations).into_par_iter().map(|real| sweep_realization(proto, real, &k_grid, &grid)).collect())
}

fn sweep_realization(proto: &SweepProtocol, real: usize, k_grid: &GridSpec, grid: &GridSpec) -> Result<Vec<SweepRow>> {
    let r = Reference::random(proto.kind, proto.seed, real as u64, k_grid)?;
    let g = &r.geometry;
    let model = g.model();
    let mut rng = rng_stream(proto.seed, real as u64);
    let lambda_star = random_target(proto.kind, &mut rng);
    let unit_noise = synth_noise_with(&mut rng, NOISE_ATOMS, NOISE_SCALES, 1.0)?;
    let on_manifold = model.apply_to_pattern(&lambda_star, g.pattern());
    let lam_r = model.identity();
    let targets: Vec<(f64, f64, Pattern, ParamVector)> = proto
        .nus
        .iter()
        .map(|&rel| {
            let nu = rel * r.norm;
            let q = on_manifold.plus(&unit_noise.scaled(nu));
            let lo = g.project_bruteforce(&q, grid)?.lambda;
            Ok((rel, nu, q, lo))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &rho in &proto.rhos {
        let mut k_hat = None;
        for (rel, nu, q, lo) in &targets {
            let fp = filtered_problem(g, q, rho, grid)?;
            let k = match k_hat {
                Some(k) => k,
                None => {
                    let k = fp.geometry.estimate_constants(k_grid)?.k;
                    k_hat = Some(k);
                    k
                }
            };
            let delta: Vec<f64> = fp.projection.lambda.iter().zip(&lam_r).map(|(a, b)| a - b).collect();
            let inputs =
                BoundInputs { k, metric: fp.geometry.metric_tensor(&lam_r)?, nu: fp.projection.distance, delta };
            let (e1, e2) = bound_terms(&inputs);
            let step = tangent_step(&fp.geometry, &fp.target, &lam_r)?;
            rows.push(SweepRow {
                realization: real,
                rho,
                nu_rel: *rel,
                nu: *nu,
                e1,
                e2,
                measured_error: l2_dist(&step.lambda, lo),
                filtered_noise: fp.projection.distance,
                k_hat: k,
            });
        }
    }
    Ok(rows)
}

/// Averages of a sweep over realizations, keyed by `(rho, nu_rel)` in sweep order.
pub fn sweep_means(rows: &[SweepRow]) -> Vec<SweepRow> {
    let mut keys: Vec<(f64, f64)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.rho, r.nu_rel)) {
            keys.push((r.rho, r.nu_rel));
        }
    }
    keys.into_iter()
        .map(|(rho, nu_rel)| {
            let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.rho == rho && r.nu_rel == nu_rel).collect();
            let n = sel.len() as f64;
            let mean = |f: fn(&SweepRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
            SweepRow {
                realization: usize::MAX,
                rho,
                nu_rel,
                nu: mean(|r| r.nu),
                e1: mean(|r| r.e1),
                e2: mean(|r| r.e2),
                measured_error: mean(|r| r.measured_error),
                filtered_noise: mean(|r| r.filtered_noise),
                k_hat: mean(|r| r.k_hat),
            }
        })
        .collect()
}

/// Iterative registration trials drawn inside the convergence region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceProtocol {
    pub kind: ModelKind,
    pub trials: usize,
    pub patterns: usize,
    /// Noise as a fraction of the admissible level `1/(d C2)`.
    pub noise_fraction: [f64; 2],
    /// Initial error as a fraction of the admissible radius.
    pub init_fraction: [f64; 2],
    /// Single-scale iterations.
    pub iterations: usize,
    /// Floor below which the geometric schedule switches to `rho = 0`.
    pub floor: f64,
    /// Extra unfiltered levels after the schedule reaches the floor.
    pub tail_levels: usize,
    pub k_grid: usize,
    pub projection_grid: usize,
    pub seed: u64,
}

impl ConvergenceProtocol {
    pub fn new(kind: ModelKind, trials: usize, seed: u64) -> Self {
        ConvergenceProtocol {
            kind,
            trials,
            patterns: 10,
            noise_fraction: [0.0, 0.5],
            init_fraction: [0.2, 0.9],
            iterations: 10,
            floor: 0.05,
            tail_levels: 8,
            k_grid: 9,
            projection_grid: 9,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTrial {
    pub trial: usize,
    pub e0: f64,
    pub nu: f64,
    pub nu_e: f64,
    pub alpha: f64,
    /// `|lambda_e^k - lambda_o|` for `k = 0..`.
    pub single_errors: Vec<f64>,
    pub single_diverged: bool,
    pub rho1: f64,
    pub rhos: Vec<f64>,
    pub hierarchical_errors: Vec<f64>,
    pub hierarchical_converged: bool,
}

/// Draws trials until `trials` of them satisfy the convergence conditions; returns those
/// and the number of rejected draws.
pub fn run_convergence(proto: &ConvergenceProtocol) -> Result<(Vec<ConvergenceTrial>, usize)> {
    let k_grid = GridSpec::new(proto.k_grid)?;
    let grid = GridSpec::new(proto.projection_grid)?;
    let pool = reference_pool(proto.kind, proto.seed, proto.patterns, &k_grid)?;
    let mut out = Vec::with_capacity(proto.trials);
    let mut rejected = 0;
    let mut next = 0usize;
    while out.len() < proto.trials {
        let batch: Vec<Option<ConvergenceTrial>> = (next..next + proto.trials - out.len())
            .into_par_iter()
            .map(|t| convergence_trial(&pool[t % pool.len()], proto, t, &grid))
            .collect::<Result<_>>()?;
        next += batch.len();
        for t in batch {
            match t {
                Some(t) => out.push(t),
                None => rejected += 1,
            }
        }
        if rejected > 20 * proto.trials {
            return Err(Error::InvalidConfig("convergence region too small to draw trials".into()));
        }
    }
    Ok((out, rejected))
}

fn convergence_trial(
    r: &Reference,
    proto: &ConvergenceProtocol,
    trial: usize,
    grid: &GridSpec,
) -> Result<Option<ConvergenceTrial>> {
    let mut rng = rng_stream(proto.seed, trial as u64);
    let g = &r.geometry;
    let model = g.model();
    let c = &r.constants;
    let d = model.dim();
    let nu_max = 1.0 / (d as f64 * c.c2);
    let frac = |rng: &mut rand_chacha::ChaCha8Rng, [lo, hi]: [f64; 2]| lo + (hi - lo) * rng.random::<f64>();
    let nu_target = frac(&mut rng, proto.noise_fraction) * nu_max;
    let lambda_star = random_target(proto.kind, &mut rng);
    let noise = synth_noise_with(&mut rng, NOISE_ATOMS, NOISE_SCALES, nu_target)?;
    let q = model.apply_to_pattern(&lambda_star, g.pattern()).plus(&noise);
    let proj = g.project_bruteforce(&q, grid)?;
    if proj.on_boundary {
        return Ok(None);
    }
    let nu = proj.distance;
    let radius = 2.0 / c.c1 * (nu_max - nu);
    let e0 = frac(&mut rng, proto.init_fraction) * radius;
    let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    let dn = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let lam_r: ParamVector = proj.lambda.iter().zip(&dir).map(|(l, u)| l + e0 * u / dn).collect();
    if !model.contains(&lam_r) {
        return Ok(None);
    }

    let rho1 = optimal_filter_size(c.c1, e0, nu.max(f64::MIN_POSITIVE));
    let nu_s = if model.kind().has_scale() && rho1 > 0.0 {
        let clean = model.apply_to_pattern(&proj.lambda, g.pattern());
        filtered_problem(g, &clean, rho1, grid)?.projection.distance
    } else {
        0.0
    };
    let noise_e = EffectiveNoise { nu, nu_s, has_scale: model.kind().has_scale() };
    let nu_e = noise_e.nu_e();
    if !convergence_check(c, nu_e, e0, d).ok {
        return Ok(None);
    }
    let (alpha, _) = decay_factor(c, nu_e, e0, d);

    let single = iterate_single_scale(g, &q, &lam_r, proto.iterations, 1e-13)?;
    let errors = |est: &[ParamVector]| est.iter().map(|l| l2_dist(l, &proj.lambda)).collect::<Vec<_>>();

    let rho1 = optimal_filter_size(c.c1, e0, nu_e.max(f64::MIN_POSITIVE));
    let (hier_errors, rhos, converged) = if rho1 > 0.0 {
        let filtered = (rho1 / proto.floor).ln() / (1.0 / alpha).sqrt().ln();
        let levels = filtered.ceil().max(0.0) as usize + 1 + proto.tail_levels;
        let cfg = ScheduleConfig {
            kind: ScheduleKind::Geometric,
            rho1: Some(rho1),
            alpha: Some(alpha),
            floor: proto.floor,
            levels,
            rhos: None,
        };
        let res = register_hierarchical(g, &q, &lam_r, &make_schedule(&cfg, None)?)?;
        let errs = errors(&res.estimates);
        let ok = !res.diverged && *errs.last().unwrap() <= HIERARCHICAL_TOL;
        (errs, res.rhos, ok)
    } else {
        let errs = errors(&single.estimates);
        let ok = *errs.last().unwrap() <= HIERARCHICAL_TOL;
        (errs, vec![0.0; single.rhos.len()], ok)
    };
    Ok(Some(ConvergenceTrial {
        trial,
        e0,
        nu,
        nu_e,
        alpha,
        single_errors: errors(&single.estimates),
        single_diverged: single.diverged,
        rho1,
        rhos,
        hierarchical_errors: hier_errors,
        hierarchical_converged: converged,
    }))
}

/// Final hierarchical error counted as convergence to `lambda_o`.
pub const HIERARCHICAL_TOL: f64 = 1e-8;

/// Two-class synthetic classification: each repetition draws a bank whose classes share
/// most atoms and differ in a few, then queries mixing the class-specific parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassificationProtocol {
    pub kind: ModelKind,
    pub repetitions: usize,
    pub queries_per_repetition: usize,
    pub shared_atoms: usize,
    pub specific_atoms: usize,
    /// Weight `w` of class 0's specific atoms in a query, drawn uniformly; class 1 gets `1 - w`.
    pub mix_range: [f64; 2],
    /// Noise norm as a fraction of the query's clean norm.
    pub noise: f64,
    pub rhos: Vec<f64>,
    /// Query transformation ranges; the model's target ranges when absent.
    #[serde(default)]
    pub target_ranges: Option<Vec<[f64; 2]>>,
    /// Parameter domain of the class manifolds; the model default when absent.
    #[serde(default)]
    pub domain: Option<Vec<[f64; 2]>>,
    /// Linearize each class at the query's exact projection instead of the identity.
    #[serde(default)]
    pub oracle_references: bool,
    pub k_grid: usize,
    pub projection_grid: usize,
    pub seed: u64,
}

impl ClassificationProtocol {
    pub fn model(&self) -> Result<TransformModel> {
        let m = TransformModel::standard(self.kind);
        match &self.domain {
            Some(d) => m.with_domain(d.clone()),
            None => Ok(m),
        }
    }

    fn draw_target(&self, rng: &mut impl Rng) -> ParamVector {
        match &self.target_ranges {
            Some(r) => r.iter().map(|[lo, hi]| lo + (hi - lo) * rng.random::<f64>()).collect(),
            None => random_target(self.kind, rng),
        }
    }

    /// Queries transformed over twice the model's target ranges, on a domain twice the
    /// default, so that the linearization error and with it the filter size matter.
    pub fn new(kind: ModelKind, repetitions: usize, seed: u64) -> Self {
        let widen = |ranges: Vec<[f64; 2]>| -> Vec<[f64; 2]> {
            ranges
                .iter()
                .zip(kind.axes())
                .map(|([lo, hi], a)| {
                    let c = a.identity_value();
                    [c + 2.0 * (lo - c), c + 2.0 * (hi - c)]
                })
                .collect()
        };
        ClassificationProtocol {
            kind,
            repetitions,
            queries_per_repetition: 5,
            shared_atoms: 16,
            specific_atoms: 4,
            mix_range: [0.4, 0.6],
            noise: 0.2,
            rhos: vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0],
            target_ranges: Some(widen(kind.target_ranges())),
            domain: Some(widen(kind.default_domain())),
            oracle_references: false,
            k_grid: 9,
            projection_grid: 9,
            seed,
        }
    }
}

/// One query classified at every filter size.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub repetition: usize,
    pub query: usize,
    pub true_label: usize,
    /// `nu_1 - nu_0` from the projections.
    pub margin: f64,
    /// Per filter size.
    pub predicted: Vec<usize>,
    pub distances: Vec<Vec<f64>>,
    pub likeliness: Vec<f64>,
}

/// Bank of two classes `shared + specific_m` for one repetition, plus the parts used to mix
/// queries.
pub fn two_class_bank(proto: &ClassificationProtocol, rep: usize) -> Result<(ClassBank, [Pattern; 3])> {
    let model = proto.model()?;
    shared_specific_bank(&model, proto.shared_atoms, proto.specific_atoms, proto.k_grid, proto.seed, rep)
}

fn shared_specific_bank(
    model: &TransformModel,
    shared_atoms: usize,
    specific_atoms: usize,
    k_grid: usize,
    seed: u64,
    rep: usize,
) -> Result<(ClassBank, [Pattern; 3])> {
    let mut rng = rng_stream(seed ^ 0xC1A5_5000, rep as u64);
    let r = &AtomRanges::REFERENCE;
    let shared = random_atoms(&mut rng, shared_atoms, r);
    let s0 = random_atoms(&mut rng, specific_atoms, r);
    let s1 = random_atoms(&mut rng, specific_atoms, r);
    let bank = ClassBank::new(model, vec![shared.plus(&s0), shared.plus(&s1)], GridSpec::new(k_grid)?)?;
    Ok((bank, [shared, s0, s1]))
}

pub fn run_classification(proto: &ClassificationProtocol) -> Result<Vec<QueryOutcome>> {
    let grid = GridSpec::new(proto.projection_grid)?;
    let per: Vec<Vec<QueryOutcome>> = (0..proto.repetitions)
        .into_par_iter()
        .map(|rep| classification_repetition(proto, rep, &grid))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

fn classification_repetition(proto: &ClassificationProtocol, rep: usize, grid: &GridSpec) -> Result<Vec<QueryOutcome>> {
    let (bank, [shared, s0, s1]) = two_class_bank(proto, rep)?;
    let model = bank.model().clone();
    let identity = vec![model.identity(); bank.len()];
    let mut rng = rng_stream(proto.seed, rep as u64);
    let mut out = Vec::with_capacity(proto.queries_per_repetition);
    for query in 0..proto.queries_per_repetition {
        let lambda_star = proto.draw_target(&mut rng);
        let [lo, hi] = proto.mix_range;
        let w = lo + (hi - lo) * rng.random::<f64>();
        let clean = shared.plus(&s0.scaled(w)).plus(&s1.scaled(1.0 - w));
        let nu = proto.noise * pattern_norm(&clean)?;
        let noise = synth_noise_with(&mut rng, NOISE_ATOMS, NOISE_SCALES, nu)?;
        let q = model.apply_to_pattern(&lambda_star, &clean).plus(&noise);
        let truth = true_label(&bank, &q, grid)?;
        let lam_r = if proto.oracle_references { &truth.lambdas } else { &identity };
        let mut predicted = Vec::with_capacity(proto.rhos.len());
        let mut distances = Vec::with_capacity(proto.rhos.len());
        let mut likeliness = Vec::with_capacity(proto.rhos.len());
        for &rho in &proto.rhos {
            let c = classify_query(&bank, &q, rho, lam_r)?;
            predicted.push(c.label);
            distances.push(c.distances.iter().map(|d| d.unwrap_or(f64::INFINITY)).collect());
            likeliness.push(misclassification_likeliness(&bank, &q, rho, &lam_r[truth.label], truth.label, grid)?);
        }
        out.push(QueryOutcome {
            repetition: rep,
            query,
            true_label: truth.label,
            margin: truth.distances[1] - truth.distances[0],
            predicted,
            distances,
            likeliness,
        });
    }
    Ok(out)
}

/// Misclassification rate and mean likeliness per filter size.
pub fn classification_curves(outcomes: &[QueryOutcome], n_rho: usize) -> (Vec<f64>, Vec<f64>) {
    let n = outcomes.len() as f64;
    let rate =
        (0..n_rho).map(|k| outcomes.iter().filter(|o| o.predicted[k] != o.true_label).count() as f64 / n).collect();
    let like = (0..n_rho).map(|k| outcomes.iter().map(|o| o.likeliness[k]).sum::<f64>() / n).collect();
    (rate, like)
}

/// Class samples drawn from bounded, well-separated distributions: each bank's queries are
/// its class patterns moved by at most `delta / 2` (l1, about the identity) plus small noise.
/// `Delta`, `epsilon` and `V_m` of the bound are the empirical extremes over the samples.
/// Bank `b` uses `deltas[b % deltas.len()]` and `noises[(b / deltas.len()) % noises.len()]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundedProtocol {
    pub kind: ModelKind,
    pub banks: usize,
    pub queries_per_class: usize,
    pub shared_atoms: usize,
    pub specific_atoms: usize,
    pub deltas: Vec<f64>,
    /// Noise norms as fractions of the class pattern norm.
    pub noises: Vec<f64>,
    pub k_grid: usize,
    pub projection_grid: usize,
    pub seed: u64,
}

impl BoundedProtocol {
    pub fn new(kind: ModelKind, banks: usize, queries_per_class: usize, seed: u64) -> Self {
        BoundedProtocol {
            kind,
            banks,
            queries_per_class,
            shared_atoms: 16,
            specific_atoms: 4,
            deltas: vec![0.005, 0.02, 0.1, 0.4],
            noises: vec![0.005, 0.05],
            k_grid: 9,
            projection_grid: 9,
            seed,
        }
    }
}

/// Empirical misclassification of one class of one bank against its bound.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundedClassResult {
    pub bank: usize,
    pub class: usize,
    pub samples: usize,
    pub misclassified: usize,
    pub bound: f64,
    pub vacuous: bool,
    pub stats: ClassStats,
    /// Samples breaking the support assumptions.
    pub violations: usize,
}

impl BoundedClassResult {
    pub fn rate(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.misclassified as f64 / self.samples as f64
        }
    }
}

pub fn run_bounded(proto: &BoundedProtocol) -> Result<Vec<BoundedClassResult>> {
    if proto.deltas.is_empty() || proto.noises.is_empty() {
        return Err(Error::InvalidConfig("bounded protocol needs deltas and noises".into()));
    }
    let grid = GridSpec::new(proto.projection_grid)?;
    let per: Vec<Vec<BoundedClassResult>> =
        (0..proto.banks).into_par_iter().map(|b| bounded_bank(proto, b, &grid)).collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

fn bounded_bank(proto: &BoundedProtocol, b: usize, grid: &GridSpec) -> Result<Vec<BoundedClassResult>> {
    let model = TransformModel::standard(proto.kind);
    let (bank, _) =
        shared_specific_bank(&model, proto.shared_atoms, proto.specific_atoms, proto.k_grid, proto.seed, b)?;
    let delta = proto.deltas[b % proto.deltas.len()];
    let noise = proto.noises[(b / proto.deltas.len()) % proto.noises.len()];
    let d = model.dim();
    let id = model.identity();
    let lam_r = vec![id.clone(); bank.len()];
    let mut rng = rng_stream(proto.seed ^ 0xB0_0AD5, b as u64);
    let mut truths = Vec::new();
    let mut predicted = Vec::new();
    for m in 0..bank.len() {
        let p = bank.classes[m].geometry.pattern().clone();
        let nu = noise * pattern_norm(&p)?;
        for _ in 0..proto.queries_per_class {
            // Uniform in the l1 box of half-width delta / (2d): the noise-free deviation stays
            // below delta / 2, leaving room for the noise-induced shift of lambda_o.
            let lam: ParamVector =
                id.iter().map(|c| c + delta / (2.0 * d as f64) * (2.0 * rng.random::<f64>() - 1.0)).collect();
            let n = synth_noise_with(&mut rng, NOISE_ATOMS, NOISE_SCALES, nu)?;
            let q = model.apply_to_pattern(&lam, &p).plus(&n);
            truths.push(true_label(&bank, &q, grid)?);
            predicted.push(classify_query(&bank, &q, 0.0, &lam_r)?.label);
        }
    }
    let observed = truths.iter().map(|t| deviation_from_identity(&bank, t)).fold(0.0, f64::max);
    let report = class_stats_from_labels(&bank, &truths, observed);
    let mut out = Vec::with_capacity(bank.len());
    for m in 0..bank.len() {
        let idx: Vec<usize> = (0..truths.len()).filter(|&s| truths[s].label == m).collect();
        let violations = report
            .violations
            .iter()
            .filter(|v| match v {
                AssumptionViolation::Intersecting { sample, .. } | AssumptionViolation::OutsideDelta { sample, .. } => {
                    truths[*sample].label == m
                }
            })
            .count();
        let (bound, vacuous) = if report.stats.epsilon > 0.0 {
            misclassification_bound(&bank, &report.stats, m)?
        } else {
            (f64::INFINITY, true)
        };
        out.push(BoundedClassResult {
            bank: b,
            class: m,
            samples: idx.len(),
            misclassified: idx.iter().filter(|&&s| predicted[s] != m).count(),
            bound,
            vacuous,
            stats: report.stats.clone(),
            violations,
        });
    }
    Ok(out)
}
