use tanreg::raster::{
    finite_difference_tangents, parse_pgm, rasterize, rasterize_field, save_pgm16, synth_noise_pattern,
    synth_random_reference, AtomRanges, NOISE_ATOMS, NOISE_SCALES, REFERENCE_ATOMS,
};
use tanreg::{
    pattern_inner_product, pattern_norm, smooth, ManifoldGeometry, ModelKind, Pattern, QuadratureSpec, TransformModel,
};

fn spec(step: f64) -> QuadratureSpec {
    QuadratureSpec::new(12.0, step, 1e-6).unwrap()
}

#[test]
fn raster_norm_converges_to_closed_form() {
    let p = synth_random_reference(21);
    let exact = pattern_norm(&p).unwrap();
    let coarse = (rasterize(&p, &spec(0.2)).l2_norm() - exact).abs();
    let mid = (rasterize(&p, &spec(0.1)).l2_norm() - exact).abs();
    let fine = (rasterize(&p, &spec(0.05)).l2_norm() - exact).abs();
    assert!(fine <= 1e-3 * exact, "rel. error {}", fine / exact);
    // Halving the step at least halves the discrepancy until rounding takes over.
    assert!(mid <= 0.5 * coarse || mid <= 1e-12 * exact);
    assert!(fine <= 0.5 * mid || fine <= 1e-12 * exact);
}

#[test]
fn noise_is_seeded_normalized_and_nearly_uncorrelated() {
    assert!(synth_noise_pattern(NOISE_ATOMS, NOISE_SCALES, 0.0, 1).unwrap().is_empty());
    for s in 0..20u64 {
        let a = synth_noise_pattern(NOISE_ATOMS, NOISE_SCALES, 0.7, 2 * s).unwrap();
        let b = synth_noise_pattern(NOISE_ATOMS, NOISE_SCALES, 0.7, 2 * s + 1).unwrap();
        assert_eq!(a, synth_noise_pattern(NOISE_ATOMS, NOISE_SCALES, 0.7, 2 * s).unwrap());
        assert!((pattern_norm(&a).unwrap() - 0.7).abs() <= 1e-9 * 0.7);
        let corr = pattern_inner_product(&a, &b).unwrap() / (0.7 * 0.7);
        assert!(corr.abs() < 0.3, "seeds {} / {}: correlation {corr}", 2 * s, 2 * s + 1);
    }
}

#[test]
fn random_references_respect_dictionary_ranges() {
    let r = AtomRanges::REFERENCE;
    let mut seen: Vec<Pattern> = Vec::new();
    for seed in 0..100 {
        let p = synth_random_reference(seed);
        assert_eq!(p.len(), REFERENCE_ATOMS);
        for a in &p.atoms {
            let (tau, sigma) = (a.params.tau(), a.params.sigma());
            assert!(tau.iter().all(|t| (r.tau[0]..=r.tau[1]).contains(t)));
            assert!(sigma.iter().all(|s| (r.sigma[0]..=r.sigma[1]).contains(s)));
            assert!((r.coeff[0]..=r.coeff[1]).contains(&a.c));
            assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&a.params.psi()));
        }
        assert!(!seen.contains(&p));
        seen.push(p);
    }
}

/// Relative L2 error of finite-difference tangents of the rasterized pattern against the
/// analytic tangents over `|x|, |y| <= 10`.
fn fd_tangent_error(p: &Pattern, model: &TransformModel, lam: &[f64]) -> f64 {
    let quad = QuadratureSpec::new(18.0, 0.05, 1e-6).unwrap();
    let raster = rasterize(p, &quad);
    let fd = finite_difference_tangents(&raster, model, lam, 1e-2);
    assert!(!fd.ill_conditioned);
    let g = ManifoldGeometry::new(model.clone(), p.clone(), quad).unwrap();
    let (mut err, mut norm) = (0.0, 0.0);
    for (i, field) in fd.fields.iter().enumerate() {
        let t = g.tangent(lam, i);
        let exact = rasterize_field(|x| t.eval(x), &quad);
        for j in 0..raster.height {
            for k in 0..raster.width {
                let x = raster.world(k, j);
                if x[0].abs() > 10.0 || x[1].abs() > 10.0 {
                    continue;
                }
                let (a, b) = (field.get(k, j), exact.get(k, j));
                err += (a - b) * (a - b);
                norm += b * b;
            }
        }
    }
    (err / norm).sqrt()
}

#[test]
fn finite_difference_tangents_match_analytic_and_improve_with_smoothing() {
    let p = synth_random_reference(3);
    let trans = TransformModel::standard(ModelKind::Translation2D);
    let e = fd_tangent_error(&p, &trans, &[0.2, -0.1]);
    assert!(e <= 1e-2, "translation relative error {e}");

    // Off-axis displacements hit the O(h / sigma) slope error of bilinear interpolation,
    // which filtering suppresses.
    let model = TransformModel::standard(ModelKind::TransRotScale4D);
    let lam = [0.1, 0.2, -0.1, 1.1];
    let errs: Vec<f64> = [0.0, 1.0, 2.0].iter().map(|&r| fd_tangent_error(&smooth(&p, r), &model, &lam)).collect();
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "errors {errs:?}");
    assert!(errs[2] <= 1e-2, "errors {errs:?}");
}

#[test]
fn translation_tangent_is_negated_gradient() {
    let model = TransformModel::standard(ModelKind::Translation2D);
    let p = synth_random_reference(6);
    let quad = spec(0.05);
    let raster = rasterize(&p, &quad);
    let fd = finite_difference_tangents(&raster, &model, &[0.0, 0.0], 0.05);
    let gx = rasterize_field(|x| -tanreg::eval_gradient(&p, x)[0], &quad);
    let (mut err, mut norm) = (0.0, 0.0);
    for j in 1..raster.height - 1 {
        for i in 1..raster.width - 1 {
            let (a, b) = (fd.fields[0].get(i, j), gx.get(i, j));
            err += (a - b) * (a - b);
            norm += b * b;
        }
    }
    assert!((err / norm).sqrt() < 1e-2);
}

#[test]
fn pgm_sixteen_bit_round_trip() {
    let p = synth_random_reference(1);
    let quad = QuadratureSpec::new(6.0, 0.2, 1e-6).unwrap();
    let img = rasterize(&p, &quad);
    let (lo, hi) = img.data.iter().fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
    let unit = img.map_values(|v| (v - lo) / (hi - lo));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.pgm");
    save_pgm16(&unit, &path).unwrap();
    let back = parse_pgm(&std::fs::read(&path).unwrap(), Some(unit.map)).unwrap();
    assert_eq!((back.width, back.height), (unit.width, unit.height));
    for (a, b) in back.data.iter().zip(&unit.data) {
        assert!((a - b).abs() <= 1.0 / 65535.0);
    }
}
