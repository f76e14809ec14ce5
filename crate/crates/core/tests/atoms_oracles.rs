//! Closed-form atom algebra against independent quadrature and finite differences.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tanreg::atoms::{appendix_rate_terms, atom_product_integral, derivative_norms, eval_gradient, eval_hessian};
use tanreg::raster::{random_atoms, AtomRanges};
use tanreg::{eval_pattern, pattern_inner_product, pattern_norm, smooth, Atom, AtomParams, Pattern, QuadratureSpec};

fn unit_pattern() -> Pattern {
    Pattern::single(1.0, AtomParams::unit())
}

fn random_params(rng: &mut impl Rng) -> AtomParams {
    let psi = rng.random_range(-PI..PI);
    let tau = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
    let sigma = [rng.random_range(0.3..2.3), rng.random_range(0.3..2.3)];
    AtomParams::new(psi, tau, sigma).unwrap()
}

/// `Theta = Psi sigma^-2 Psi^T`, assembled from the raw parameters.
fn theta(a: &AtomParams) -> [[f64; 2]; 2] {
    let (c, s) = (a.psi().cos(), a.psi().sin());
    let [sx, sy] = a.sigma();
    let (ix, iy) = (1.0 / (sx * sx), 1.0 / (sy * sy));
    [[c * c * ix + s * s * iy, c * s * (ix - iy)], [c * s * (ix - iy), s * s * ix + c * c * iy]]
}

fn mul(a: [[f64; 2]; 2], v: [f64; 2]) -> [f64; 2] {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

/// The mother function composed with the atom's affine map, written out directly.
fn phi(a: &AtomParams, x: [f64; 2]) -> f64 {
    let d = [x[0] - a.tau()[0], x[1] - a.tau()[1]];
    let t = theta(a);
    let q = d[0] * (t[0][0] * d[0] + t[0][1] * d[1]) + d[1] * (t[1][0] * d[0] + t[1][1] * d[1]);
    (-q).exp()
}

/// Trapezoid rule on `[-l, l]^2`; spectrally accurate for Gaussian integrands.
fn quad2(l: f64, h: f64, mut f: impl FnMut([f64; 2]) -> f64) -> f64 {
    let n = (2.0 * l / h).round() as i64;
    let mut acc = 0.0;
    for j in 0..=n {
        let y = -l + j as f64 * h;
        for i in 0..=n {
            acc += f([-l + i as f64 * h, y]);
        }
    }
    acc * h * h
}

#[test]
fn evaluation_examples() {
    let p = unit_pattern();
    assert_eq!(eval_pattern(&p, [0.0, 0.0]), 1.0);
    assert!((eval_pattern(&p, [1.0, 0.0]) - (-1f64).exp()).abs() < 1e-15);
    assert_eq!(eval_pattern(&p.plus(&p), [0.0, 0.0]), 2.0);
    assert_eq!(eval_gradient(&p, [0.0, 0.0]), [0.0, 0.0]);
    let h = eval_hessian(&p, [0.0, 0.0]);
    assert_eq!((h.xx, h.xy, h.yy), (-2.0, 0.0, -2.0));
}

#[test]
fn derivatives_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let step = 1e-4;
    for _ in 0..20 {
        let p = random_atoms(&mut rng, 5, &AtomRanges::REFERENCE);
        let x = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
        let at = |dx: f64, dy: f64| [x[0] + dx, x[1] + dy];
        let g = eval_gradient(&p, x);
        let fd = [
            (eval_pattern(&p, at(step, 0.0)) - eval_pattern(&p, at(-step, 0.0))) / (2.0 * step),
            (eval_pattern(&p, at(0.0, step)) - eval_pattern(&p, at(0.0, -step))) / (2.0 * step),
        ];
        let scale = g[0].hypot(g[1]).max(1e-3);
        assert!((g[0] - fd[0]).hypot(g[1] - fd[1]) <= 1e-5 * scale, "gradient {g:?} vs {fd:?}");

        let h = eval_hessian(&p, x);
        let (gxp, gxm) = (eval_gradient(&p, at(step, 0.0)), eval_gradient(&p, at(-step, 0.0)));
        let (gyp, gym) = (eval_gradient(&p, at(0.0, step)), eval_gradient(&p, at(0.0, -step)));
        let fxx = (gxp[0] - gxm[0]) / (2.0 * step);
        let fxy = (gyp[0] - gym[0]) / (2.0 * step);
        let fyx = (gxp[1] - gxm[1]) / (2.0 * step);
        let fyy = (gyp[1] - gym[1]) / (2.0 * step);
        let err = ((h.xx - fxx).powi(2) + (h.xy - fxy).powi(2) + (h.xy - fyx).powi(2) + (h.yy - fyy).powi(2)).sqrt();
        let scale = (h.xx * h.xx + 2.0 * h.xy * h.xy + h.yy * h.yy).sqrt().max(1e-3);
        assert!(err <= 1e-5 * scale, "hessian error {err} at scale {scale}");
    }
}

/// 1-D discrete convolution along one axis of a row-major `n x n` array, kernel radius `r`.
fn convolve_axis(src: &[f64], n: usize, kernel: &[f64], along_x: bool) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let mut out = vec![0.0; src.len()];
    for j in 0..n {
        for i in 0..n {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let o = k as i64 - r;
                let (ii, jj) = if along_x { (i as i64 + o, j as i64) } else { (i as i64, j as i64 + o) };
                if ii >= 0 && jj >= 0 && (ii as usize) < n && (jj as usize) < n {
                    acc += w * src[jj as usize * n + ii as usize];
                }
            }
            out[j * n + i] = acc;
        }
    }
    out
}

/// L2 distance between `smooth(p, rho)` and the discrete convolution of rasterized `p`
/// with the rasterized kernel, both on a grid of step `h`.
fn convolution_discrepancy(p: &Pattern, rho: f64, l: f64, h: f64) -> f64 {
    let n = (2.0 * l / h).round() as usize + 1;
    let coord = |i: usize| -l + i as f64 * h;
    let raster: Vec<f64> = (0..n * n).map(|k| eval_pattern(p, [coord(k % n), coord(k / n)])).collect();
    // The isotropic kernel is separable: (pi rho^2)^-1 e^{-|x|^2/rho^2} = k(x) k(y).
    let r = (5.0 * rho / h).ceil() as i64;
    let kernel: Vec<f64> =
        (-r..=r).map(|k| (-(k as f64 * h).powi(2) / (rho * rho)).exp() / (PI.sqrt() * rho) * h).collect();
    let blurred = convolve_axis(&convolve_axis(&raster, n, &kernel, true), n, &kernel, false);
    let exact = smooth(p, rho);
    let mut err = 0.0;
    for (k, v) in blurred.iter().enumerate() {
        err += (v - eval_pattern(&exact, [coord(k % n), coord(k / n)])).powi(2);
    }
    (err * h * h).sqrt()
}

#[test]
fn smoothing_matches_discrete_convolution() {
    let s = smooth(&unit_pattern(), 1.0);
    let a = s.atoms[0];
    assert!((a.c - 0.5).abs() < 1e-15);
    assert!((a.params.sigma()[0] - 2f64.sqrt()).abs() < 1e-15 && (a.params.sigma()[1] - 2f64.sqrt()).abs() < 1e-15);
    assert!(convolution_discrepancy(&unit_pattern(), 1.0, 8.0, 0.05) <= 1e-3);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_atoms(&mut rng, 3, &AtomRanges { tau: [-2.0, 2.0], sigma: [0.3, 1.5], coeff: [-1.0, 1.0] });
    let e = convolution_discrepancy(&p, 0.7, 10.0, 0.05);
    assert!(e <= 1e-3, "L2 discrepancy {e}");
}

#[test]
fn zero_filter_is_identity_and_filters_compose() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = random_atoms(&mut rng, 6, &AtomRanges::REFERENCE);
    assert_eq!(smooth(&p, 0.0), p);
    let twice = smooth(&smooth(&p, 0.8), 1.5);
    let once = smooth(&p, (0.8f64 * 0.8 + 1.5 * 1.5).sqrt());
    for (a, b) in twice.atoms.iter().zip(&once.atoms) {
        assert!((a.c - b.c).abs() <= 1e-12 * b.c.abs());
        for k in 0..2 {
            assert!((a.params.sigma()[k] - b.params.sigma()[k]).abs() <= 1e-12 * b.params.sigma()[k]);
        }
    }
}

#[test]
fn product_integrals_match_quadrature() {
    let unit = atom_product_integral(&AtomParams::unit(), &AtomParams::unit()).unwrap();
    let q = quad2(8.0, 0.02, |x| (-2.0 * (x[0] * x[0] + x[1] * x[1])).exp());
    assert!((unit - PI / 2.0).abs() < 1e-14 && (unit - q).abs() < 1e-12);

    let far = AtomParams::new(0.0, [20.0, 0.0], [1.0, 1.0]).unwrap();
    assert!(atom_product_integral(&AtomParams::unit(), &far).unwrap() <= 1e-20);

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let (a, b) = (random_params(&mut rng), random_params(&mut rng));
        let exact = atom_product_integral(&a, &b).unwrap();
        let reverse = atom_product_integral(&b, &a).unwrap();
        let oracle = quad2(14.0, 0.05, |x| phi(&a, x) * phi(&b, x));
        assert!(exact > 0.0 && (exact - reverse).abs() <= 1e-14 * exact);
        assert!((exact - oracle).abs() <= 1e-6 * oracle, "{exact} vs {oracle}");
    }
}

#[test]
fn atom_norm_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let a = random_params(&mut rng);
        let [sx, sy] = a.sigma();
        let n2 = atom_product_integral(&a, &a).unwrap();
        assert!((n2 - PI / 2.0 * sx * sy).abs() <= 1e-13 * n2);
    }
}

#[test]
fn pattern_products_are_bilinear_and_match_quadrature() {
    let u = unit_pattern();
    assert!((pattern_inner_product(&u, &u).unwrap() - PI / 2.0).abs() < 1e-14);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..10 {
        let p = random_atoms(&mut rng, 3, &AtomRanges::REFERENCE);
        let q = random_atoms(&mut rng, 4, &AtomRanges::REFERENCE);
        let pq = pattern_inner_product(&p, &q).unwrap();
        assert!((pattern_inner_product(&q, &p).unwrap() - pq).abs() <= 1e-14 * pq.abs().max(1.0));
        let n = pattern_norm(&p).unwrap();
        assert!((pattern_inner_product(&p, &p.scaled(-1.0)).unwrap() + n * n).abs() <= 1e-13 * n * n);
        let oracle = quad2(14.0, 0.05, |x| eval_pattern(&p, x) * eval_pattern(&q, x));
        assert!((pq - oracle).abs() <= 1e-6 * oracle.abs().max(1e-3 * n * n), "{pq} vs {oracle}");
    }
}

#[test]
fn unit_atom_derivative_norms() {
    // Each gradient component contributes int 4x^2 e^{-2|X|^2} = pi/2, so grad_norm^2 = pi;
    // hess_norm^2 = int (16|X|^4 - 16|X|^2 + 8) e^{-2|X|^2} = 4 pi.
    let (g, h) = derivative_norms(&unit_pattern(), &QuadratureSpec::default()).unwrap();
    assert!((g * g - PI).abs() < 1e-9);
    assert!((h * h - 4.0 * PI).abs() < 1e-9);
    let tight = QuadratureSpec::new(1.0, 0.05, 1e-6).unwrap();
    assert!(derivative_norms(&unit_pattern(), &tight).is_err());
}

#[test]
fn gradient_norm_decreases_under_smoothing() {
    let p = tanreg::raster::synth_random_reference(4);
    let mut prev = f64::INFINITY;
    for rho in [0.0, 1.0, 2.0, 4.0, 8.0] {
        let s = smooth(&p, rho);
        let quad = QuadratureSpec::fit(&[&s], &QuadratureSpec::default());
        let (g, _) = derivative_norms(&s, &quad).unwrap();
        assert!(g <= prev, "rho {rho}: {g} > {prev}");
        prev = g;
    }
}

#[test]
fn rate_term_bounds_dominate_their_integrals() {
    let u = appendix_rate_terms(&AtomParams::unit(), &AtomParams::unit()).unwrap();
    assert!((u.l_bar - PI / 4.0).abs() < 1e-15);
    assert!((u.q - PI).abs() < 1e-14);

    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for _ in 0..50 {
        let (a, b) = (random_params(&mut rng), random_params(&mut rng));
        let r = appendix_rate_terms(&a, &b).unwrap();
        let (ta, tb) = (theta(&a), theta(&b));
        let tr_ab = ta[0][0] * tb[0][0] + ta[0][1] * tb[1][0] + ta[1][0] * tb[0][1] + ta[1][1] * tb[1][1];
        let (mut l, mut m, mut n) = (0.0, 0.0, 0.0);
        let p = quad2(14.0, 0.05, |x| {
            let w = phi(&a, x) * phi(&b, x);
            let ua = mul(ta, [x[0] - a.tau()[0], x[1] - a.tau()[1]]);
            let ub = mul(tb, [x[0] - b.tau()[0], x[1] - b.tau()[1]]);
            let dot = ua[0] * ub[0] + ua[1] * ub[1];
            // tr(ua ua^T ub ub^T) = (ua.ub)^2; tr(ua ua^T Theta_b) = ua^T Theta_b ua.
            let tbu = mul(tb, ua);
            let h2 = 0.05 * 0.05;
            l += w * dot * h2;
            m += w * dot * dot * h2;
            n += w * (ua[0] * tbu[0] + ua[1] * tbu[1]) * h2;
            w * tr_ab
        });
        assert!(r.l_bar >= l.abs(), "L {l} > {}", r.l_bar);
        assert!(r.m_bar >= m.abs(), "M {m} > {}", r.m_bar);
        assert!(r.n_bar >= n.abs(), "N {n} > {}", r.n_bar);
        assert!(r.p_bar >= p.abs() * (1.0 - 1e-9), "P {p} > {}", r.p_bar);
    }
}

#[test]
fn json_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = random_atoms(&mut rng, 20, &AtomRanges::REFERENCE);
    let back = Pattern::from_json(&p.to_json()).unwrap();
    assert_eq!(back, p);
    assert!(Atom::new(1.0, AtomParams::unit()).is_ok());
    assert!(AtomParams::new(0.0, [0.0, 0.0], [0.0, 1.0]).is_err());
}
