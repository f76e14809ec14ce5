//! The subcommands. Each builds a [`Table`] from a validated config; writing it out is the
//! caller's job.

use tanreg::bounds::{convergence_check, decay_factor, filtered_problem, l2_dist, EffectiveNoise};
use tanreg::experiments::{
    classification_curves, random_target, run_alignment, run_bounded, run_classification, run_convergence,
    run_sweep_each, AlignmentProtocol, BoundedProtocol, ClassificationProtocol, ConvergenceProtocol, SweepProtocol,
    SweepRow,
};
use tanreg::raster::{fmt_f64, rng_stream, synth_noise_with, synth_random_reference, NOISE_ATOMS, NOISE_SCALES};
use tanreg::register::{
    make_schedule, optimal_filter_size, register_hierarchical, register_until_converged, OracleInputs, ScheduleKind,
};
use tanreg::{
    pattern_norm, FilterSchedule, GridSpec, ManifoldGeometry, ModelKind, ParamVector, Pattern, Table, TransformModel,
};

use crate::config::ExperimentConfig;
use crate::CliError;

/// Slack for rounding when comparing a converged error against `alpha^k E0`.
pub const ROUNDING_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepAxis {
    Rho,
    Nu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BoundCheck {
    /// One-step alignment error and distance error against their bounds.
    Alignment,
    /// Iterated error against the geometric decay and hierarchical convergence.
    Convergence,
}

fn f(v: f64) -> String {
    fmt_f64(v)
}

fn config_err(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("field `{field}`: {msg}"))
}

fn grid(n: usize) -> Result<GridSpec, CliError> {
    Ok(GridSpec::new(n)?)
}

fn reference_pattern(cfg: &ExperimentConfig) -> Result<Pattern, CliError> {
    if let Some(path) = &cfg.pattern.file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err("pattern.file", format!("cannot read {}: {e}", path.display())))?;
        return Pattern::from_json(&text).map_err(|e| config_err("pattern.file", e));
    }
    Ok(synth_random_reference(cfg.pattern.seed.unwrap_or(0)))
}

/// Seeded experiment families use the standard model of their kind.
fn require_standard(cfg: &ExperimentConfig, command: &str) -> Result<ModelKind, CliError> {
    let kind = cfg.model.kind();
    if cfg.model != TransformModel::standard(kind) {
        return Err(config_err(
            "model",
            format!("`{command}` supports only the standard gains and domain of a model kind"),
        ));
    }
    Ok(kind)
}

fn axis_columns(model: &TransformModel) -> Vec<String> {
    model.axes().iter().map(|a| a.name().to_string()).collect()
}

/// A registration problem assembled from the config.
struct Problem {
    geometry: ManifoldGeometry,
    target: Pattern,
    lambda_star: ParamVector,
    lam_r: ParamVector,
    /// `(lambda_o, nu)` when an oracle source is configured.
    oracle: Option<(ParamVector, f64)>,
}

fn problem(cfg: &ExperimentConfig) -> Result<Problem, CliError> {
    let model = cfg.model.clone();
    let geometry = ManifoldGeometry::fitted(model.clone(), reference_pattern(cfg)?)?;
    let mut rng = rng_stream(cfg.seed, 0);
    let lambda_star = match &cfg.target {
        Some(t) => t.clone(),
        None => random_target(model.kind(), &mut rng),
    };
    let nu = cfg.nus[0] * pattern_norm(geometry.pattern())?;
    let noise = synth_noise_with(&mut rng, NOISE_ATOMS, NOISE_SCALES, nu)?;
    let target = model.apply_to_pattern(&lambda_star, geometry.pattern()).plus(&noise);
    let lam_r = cfg.initial.clone().unwrap_or_else(|| model.identity());
    let oracle = match &cfg.lambda_o {
        Some(lo) => Some((lo.clone(), geometry.distance(&target, lo)?)),
        None if cfg.brute_force_oracle => {
            let p = geometry.project_bruteforce(&target, &grid(cfg.projection_grid)?)?;
            Some((p.lambda, p.distance))
        }
        None => None,
    };
    Ok(Problem { geometry, target, lambda_star, lam_r, oracle })
}

/// The filter schedule of a run, deriving missing geometric parameters from the oracle.
fn resolve_schedule(cfg: &ExperimentConfig, pr: &Problem, notes: &mut Vec<String>) -> Result<FilterSchedule, CliError> {
    let sc = &cfg.schedule;
    let needs_oracle = match sc.kind {
        ScheduleKind::Fixed => false,
        ScheduleKind::Geometric => sc.alpha.is_none() || sc.rho1.is_none(),
        ScheduleKind::OptimalOracle => true,
    };
    if !needs_oracle {
        return Ok(make_schedule(sc, None)?);
    }
    let Some((lambda_o, nu)) = &pr.oracle else {
        let which = if sc.kind == ScheduleKind::OptimalOracle { "schedule.kind" } else { "schedule.alpha" };
        return Err(config_err(which, "this schedule needs `lambda_o` or `brute_force_oracle`"));
    };
    let g = &pr.geometry;
    let model = g.model();
    let c = g.estimate_constants(&grid(cfg.k_grid)?)?;
    let e0 = l2_dist(lambda_o, &pr.lam_r);
    let rho_ref = optimal_filter_size(c.c1, e0, nu.max(f64::MIN_POSITIVE));
    let nu_s = if model.kind().has_scale() && rho_ref > 0.0 && rho_ref.is_finite() {
        let clean = model.apply_to_pattern(lambda_o, g.pattern());
        filtered_problem(g, &clean, rho_ref, &grid(cfg.projection_grid)?)?.projection.distance
    } else {
        0.0
    };
    let nu_e = EffectiveNoise { nu: *nu, nu_s, has_scale: model.kind().has_scale() }.nu_e();
    notes.push(format!("nu={} nu_e={} e0={} c1={} c2={}", f(*nu), f(nu_e), f(e0), f(c.c1), f(c.c2)));
    if sc.kind == ScheduleKind::OptimalOracle {
        let oracle = OracleInputs { lambda_o: lambda_o.clone(), c1: c.c1, nu_e };
        return Ok(make_schedule(sc, Some(&oracle))?);
    }
    let d = model.dim();
    let alpha = match sc.alpha {
        Some(a) => a,
        None => {
            let check = convergence_check(&c, nu_e, e0, d);
            notes.push(format!(
                "convergence_check ok={} noise_slack={} init_slack={}",
                check.ok,
                f(check.noise_slack),
                f(check.init_slack)
            ));
            let (a, too_big) = decay_factor(&c, nu_e, e0, d);
            if too_big {
                return Err(CliError::Numerical(format!("decay factor {} >= 1: no geometric schedule exists", f(a))));
            }
            a
        }
    };
    let rho1 = match sc.rho1 {
        Some(r) => r,
        None => {
            let r = optimal_filter_size(c.c1, e0, nu_e);
            if !r.is_finite() {
                return Err(config_err("schedule.rho1", "cannot be derived without noise; set it explicitly"));
            }
            r
        }
    };
    notes.push(format!("alpha={} rho1={}", f(alpha), f(rho1)));
    if rho1 == 0.0 {
        return Ok(FilterSchedule::Fixed(vec![0.0; sc.levels]));
    }
    let mut resolved = sc.clone();
    resolved.alpha = Some(alpha);
    resolved.rho1 = Some(rho1);
    Ok(make_schedule(&resolved, None)?)
}

pub fn cmd_register(cfg: &ExperimentConfig) -> Result<Table, CliError> {
    let pr = problem(cfg)?;
    let mut notes = Vec::new();
    let schedule = resolve_schedule(cfg, &pr, &mut notes)?;
    let res = register_until_converged(&pr.geometry, &pr.target, &pr.lam_r, &schedule)?;
    let (reference, against) = match &pr.oracle {
        Some((lo, _)) => (lo, "lambda_o"),
        None => (&pr.lambda_star, "target"),
    };
    let mut cols = vec!["k".to_string(), "rho".into()];
    cols.extend(axis_columns(pr.geometry.model()));
    cols.extend(["residual".to_string(), "error".into()]);
    let mut t = Table::new(&cols.iter().map(String::as_str).collect::<Vec<_>>());
    t.comments = notes;
    t.comments.push(format!(
        "error is measured against {against}; converged={} diverged={} out_of_domain={}",
        res.converged, res.diverged, res.out_of_domain
    ));
    for k in 1..res.estimates.len() {
        let mut row = vec![k.to_string(), f(res.rhos[k - 1])];
        row.extend(res.estimates[k].iter().map(|v| f(*v)));
        row.push(f(res.residuals[k]));
        row.push(f(l2_dist(&res.estimates[k], reference)));
        t.push(row);
    }
    Ok(t)
}

pub fn cmd_schedule(cfg: &ExperimentConfig) -> Result<Table, CliError> {
    let pr = problem(cfg)?;
    let mut notes = Vec::new();
    let schedule = resolve_schedule(cfg, &pr, &mut notes)?;
    let rhos: Vec<f64> = match &schedule {
        FilterSchedule::OptimalOracle { .. } => {
            // The oracle sizes depend on the estimates, so they come from an actual run.
            notes.push("oracle filter sizes realized by registering the configured target".into());
            register_hierarchical(&pr.geometry, &pr.target, &pr.lam_r, &schedule)?.rhos
        }
        s => (1..=s.levels()).map(|k| s.rho(k, &pr.lam_r)).collect(),
    };
    let mut t = Table::new(&["k", "rho"]);
    t.comments = notes;
    for (k, r) in rhos.iter().enumerate() {
        t.push(vec![(k + 1).to_string(), f(*r)]);
    }
    Ok(t)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub fn cmd_sweep(cfg: &ExperimentConfig, axis: SweepAxis) -> Result<Table, CliError> {
    let kind = require_standard(cfg, "sweep")?;
    let proto = SweepProtocol {
        kind,
        nus: cfg.nus.clone(),
        rhos: cfg.rhos.clone(),
        realizations: cfg.trials,
        k_grid: cfg.k_grid,
        projection_grid: cfg.projection_grid,
        seed: cfg.seed,
    };
    let per = run_sweep_each(&proto)?;
    let mut t = Table::new(&[
        "rho",
        "nu",
        "realizations",
        "failed",
        "E1_hat",
        "E2_hat",
        "E_hat",
        "measured_error",
        "measured_error_std",
        "filtered_noise",
    ]);
    let mut ok: Vec<&SweepRow> = Vec::new();
    let mut failed = 0;
    for (real, r) in per.iter().enumerate() {
        match r {
            Ok(rows) => ok.extend(rows),
            Err(e) => {
                failed += 1;
                t.comments.push(format!("realization {real} failed: {e}"));
            }
        }
    }
    let points: Vec<(f64, f64)> = match axis {
        SweepAxis::Rho => cfg.nus.iter().flat_map(|&nu| cfg.rhos.iter().map(move |&rho| (rho, nu))).collect(),
        SweepAxis::Nu => cfg.rhos.iter().flat_map(|&rho| cfg.nus.iter().map(move |&nu| (rho, nu))).collect(),
    };
    for (rho, nu) in points {
        let sel: Vec<&SweepRow> = ok.iter().copied().filter(|r| r.rho == rho && r.nu_rel == nu).collect();
        if sel.is_empty() {
            t.push(vec![
                f(rho),
                f(nu),
                "0".into(),
                failed.to_string(),
                "nan".into(),
                "nan".into(),
                "nan".into(),
                "nan".into(),
                "nan".into(),
                "nan".into(),
            ]);
            continue;
        }
        let col = |g: fn(&SweepRow) -> f64| sel.iter().map(|r| g(r)).collect::<Vec<f64>>();
        let (e1, e2) = (mean_std(&col(|r| r.e1)).0, mean_std(&col(|r| r.e2)).0);
        let (err, err_std) = mean_std(&col(|r| r.measured_error));
        t.push(vec![
            f(rho),
            f(nu),
            sel.len().to_string(),
            failed.to_string(),
            f(e1),
            f(e2),
            f(e1 + e2),
            f(err),
            f(err_std),
            f(mean_std(&col(|r| r.filtered_noise)).0),
        ]);
    }
    Ok(t)
}

pub fn cmd_bounds(cfg: &ExperimentConfig, check: BoundCheck) -> Result<Table, CliError> {
    let kind = require_standard(cfg, "bounds")?;
    let lo = cfg.nus.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cfg.nus.iter().copied().fold(0.0, f64::max);
    match check {
        BoundCheck::Alignment => {
            let mut proto = AlignmentProtocol::new(kind, cfg.trials, cfg.seed);
            proto.nu_range = [lo, hi];
            proto.k_grid = cfg.k_grid;
            proto.projection_grid = cfg.projection_grid;
            let trials = run_alignment(&proto)?;
            let mut t = Table::new(&[
                "trial",
                "pattern",
                "nu",
                "error",
                "E1",
                "E2",
                "E",
                "dominated",
                "distance_error",
                "distance_bound",
                "distance_dominated",
                "on_boundary",
            ]);
            for r in &trials {
                t.push(vec![
                    r.trial.to_string(),
                    r.pattern.to_string(),
                    f(r.nu),
                    f(r.error),
                    f(r.e1),
                    f(r.e2),
                    f(r.bound()),
                    (r.error <= r.bound()).to_string(),
                    f(r.distance_error),
                    f(r.distance_bound),
                    (r.distance_error <= r.distance_bound).to_string(),
                    r.on_boundary.to_string(),
                ]);
            }
            Ok(t)
        }
        BoundCheck::Convergence => {
            let mut proto = ConvergenceProtocol::new(kind, cfg.trials, cfg.seed);
            proto.k_grid = cfg.k_grid;
            proto.projection_grid = cfg.projection_grid;
            let (trials, rejected) = run_convergence(&proto)?;
            let mut t = Table::new(&[
                "trial",
                "e0",
                "nu",
                "nu_e",
                "alpha",
                "rho1",
                "levels",
                "single_final_error",
                "single_dominated",
                "hierarchical_final_error",
                "hierarchical_converged",
            ]);
            t.comments.push(format!("draws rejected by the convergence conditions: {rejected}"));
            for r in &trials {
                let dominated = r
                    .single_errors
                    .iter()
                    .enumerate()
                    .skip(1)
                    .all(|(k, e)| *e <= r.alpha.powi(k as i32) * r.e0 + ROUNDING_SLACK);
                t.push(vec![
                    r.trial.to_string(),
                    f(r.e0),
                    f(r.nu),
                    f(r.nu_e),
                    f(r.alpha),
                    f(r.rho1),
                    r.rhos.len().to_string(),
                    f(*r.single_errors.last().expect("initial error")),
                    dominated.to_string(),
                    f(*r.hierarchical_errors.last().expect("initial error")),
                    r.hierarchical_converged.to_string(),
                ]);
            }
            Ok(t)
        }
    }
}

fn classification_protocol(cfg: &ExperimentConfig, kind: ModelKind) -> ClassificationProtocol {
    let c = &cfg.classify;
    let mut p = ClassificationProtocol::new(kind, c.repetitions.unwrap_or(400), cfg.seed);
    if let Some(v) = c.queries_per_repetition {
        p.queries_per_repetition = v;
    }
    if let Some(v) = c.shared_atoms {
        p.shared_atoms = v;
    }
    if let Some(v) = c.specific_atoms {
        p.specific_atoms = v;
    }
    if let Some(v) = c.mix_range {
        p.mix_range = v;
    }
    if let Some(v) = c.noise {
        p.noise = v;
    }
    if let Some(v) = &c.target_ranges {
        p.target_ranges = Some(v.clone());
    }
    if let Some(v) = &c.domain {
        p.domain = Some(v.clone());
    }
    p.oracle_references = c.oracle_references;
    p.rhos = cfg.rhos.clone();
    p.k_grid = cfg.k_grid;
    p.projection_grid = cfg.projection_grid;
    p
}

pub fn cmd_classify(cfg: &ExperimentConfig, bounded: bool) -> Result<Table, CliError> {
    let kind = cfg.model.kind();
    if bounded {
        let c = &cfg.classify;
        let mut p = BoundedProtocol::new(kind, c.banks.unwrap_or(25), c.queries_per_class.unwrap_or(10), cfg.seed);
        if let Some(v) = &c.deltas {
            p.deltas = v.clone();
        }
        if let Some(v) = &c.noises {
            p.noises = v.clone();
        }
        if let Some(v) = c.shared_atoms {
            p.shared_atoms = v;
        }
        if let Some(v) = c.specific_atoms {
            p.specific_atoms = v;
        }
        p.k_grid = cfg.k_grid;
        p.projection_grid = cfg.projection_grid;
        let res = run_bounded(&p)?;
        let mut t = Table::new(&[
            "bank",
            "class",
            "samples",
            "misclassified",
            "rate",
            "bound",
            "vacuous",
            "epsilon",
            "v",
            "delta",
            "violations",
        ]);
        for r in &res {
            t.push(vec![
                r.bank.to_string(),
                r.class.to_string(),
                r.samples.to_string(),
                r.misclassified.to_string(),
                f(r.rate()),
                f(r.bound),
                r.vacuous.to_string(),
                f(r.stats.epsilon),
                f(r.stats.v[r.class]),
                f(r.stats.delta),
                r.violations.to_string(),
            ]);
        }
        return Ok(t);
    }
    let p = classification_protocol(cfg, kind);
    let outcomes = run_classification(&p)?;
    let (rate, like) = classification_curves(&outcomes, p.rhos.len());
    let mut t = Table::new(&["rho", "misclassification_rate", "mean_likeliness", "queries"]);
    if p.oracle_references {
        t.comments.push("classes linearized at the exact projection of each query".into());
    }
    for (k, rho) in p.rhos.iter().enumerate() {
        t.push(vec![f(*rho), f(rate[k]), f(like[k]), outcomes.len().to_string()]);
    }
    Ok(t)
}
