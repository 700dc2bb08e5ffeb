mod common;

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unimodal_response::chart_atlas::Loc;
use unimodal_response::susceptibility::*;

/// E[x^k] under the arcsine law: C(2k, k)/4^k.
fn arcsine_moment(k: u32) -> f64 {
    (0..k).map(|i| (2 * k - i) as f64 / (k - i) as f64).product::<f64>() / 4f64.powi(k as i32)
}

fn poly(c: &[f64]) -> Observable {
    Observable::new(c.to_vec())
}

fn sample_lambdas() -> Vec<C64> {
    vec![C64::new(0.0, 0.0), C64::new(0.3, 0.1), C64::new(-0.2, 0.35), C64::new(1.0, 0.0), C64::new(0.0, -1.0), C64::new(-0.8, 0.6)]
}

#[test]
fn first_term_matches_birkhoff_average_and_moments() {
    let p = common::ulam(32);
    let ctx = Context::new(&p.model, &p.sys, &p.op, &p.sigma);
    let s = direct_terms(&ctx, &poly(&[0.0, 1.0, -1.0]), &poly(&[0.0, 0.0, 1.0]), 2, 40, 2).unwrap();
    // ∫ρ x(1-x)·2x = 2(E x² - E x³)
    let moments = 2.0 * (arcsine_moment(2) - arcsine_moment(3));
    assert!((moments - 0.125).abs() < 1e-15);
    assert!((s.terms[0] - moments).abs() < 1e-10, "t0 = {}", s.terms[0]);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut x: f64 = rng.gen_range(0.1..0.9);
    let n = 1_000_000;
    let mut sum = 0.0;
    for _ in 0..n {
        sum += x * (1.0 - x) * 2.0 * x;
        x = 4.0 * x * (1.0 - x);
        if !(1e-12..1.0 - 1e-12).contains(&x) {
            // rounding can land on the fixed point 0; restart the orbit
            x = rng.gen_range(0.1..0.9);
        }
    }
    let birkhoff = sum / n as f64;
    assert!((s.terms[0] - birkhoff).abs() < 1e-3, "quadrature {} vs orbit average {birkhoff}", s.terms[0]);
}

#[test]
fn symmetric_perturbation_only_sees_the_first_term() {
    // ρ and fⁿ (n ≥ 1) are symmetric about 1/2, so (A∘fⁿ)' is odd and ∫ρ(A∘fⁿ)' = 0
    let p = common::ulam(32);
    let ctx = Context::new(&p.model, &p.sys, &p.op, &p.sigma);
    let pb = pole_basis(&p.model, &p.sys.lengths).unwrap();
    let span = solve_w(&ctx, &pb).unwrap();
    let one = poly(&[1.0]);
    let a = poly(&[0.0, 0.0, 0.0, 1.0]);
    let expected = 3.0 * arcsine_moment(2);
    let s = direct_terms(&ctx, &one, &a, 10, 40, 2).unwrap();
    assert!((s.terms[0] - expected).abs() < 1e-12);
    assert!(s.terms[1..].iter().all(|t| t.abs() < 1e-13), "{:?}", s.terms);
    let dec = decompose_y(&ctx, &pb, &span, &one).unwrap();
    let mero = Meromorphic::new(&ctx, &pb, &span, &dec, &a).unwrap();
    for l in sample_lambdas() {
        let v = mero.eval_c(l).unwrap();
        assert!((v - expected).norm() < 1e-9, "Ψ({l}) = {v}");
    }
}

#[test]
fn term_ratio_gives_pole_radius_one_half() {
    let p = common::ulam(32);
    let ctx = Context::new(&p.model, &p.sys, &p.op, &p.sigma);
    let s = direct_terms(&ctx, &poly(&[0.0, 1.0]), &poly(&[0.0, 0.0, 0.0, 1.0]), 14, 40, 1).unwrap();
    let r = s.radius_estimate.unwrap();
    assert!((r - 0.5).abs() < 1e-8, "radius {r}");
    for w in s.terms[6..].windows(2) {
        assert!((w[1] / w[0] - 2.0).abs() < 1e-8);
    }
    assert!(s.sum(C64::new(0.6, 0.0)).is_err(), "series must refuse |λ| beyond its radius");
}

#[test]
fn constant_observable_gives_zero() {
    let p = common::ulam(24);
    let ctx = Context::new(&p.model, &p.sys, &p.op, &p.sigma);
    let pb = pole_basis(&p.model, &p.sys.lengths).unwrap();
    let span = solve_w(&ctx, &pb).unwrap();
    let x = poly(&[0.0, 1.0]);
    let a = poly(&[2.5]);
    let s = direct_terms(&ctx, &x, &a, 6, 30, 2).unwrap();
    assert!(s.terms.iter().all(|&t| t == 0.0));
    let dec = decompose_y(&ctx, &pb, &span, &x).unwrap();
    let mero = Meromorphic::new(&ctx, &pb, &span, &dec, &a).unwrap();
    for l in sample_lambdas() {
        assert!(mero.eval_c(l).unwrap().norm() < 1e-14);
    }
}

#[test]
fn vanishing_perturbation_has_no_residues() {
    let p = common::ulam(32);
    let ctx = Context::new(&p.model, &p.sys, &p.op, &p.sigma);
    let pb = pole_basis(&p.model, &p.sys.lengths).unwrap();
    let span = solve_w(&ctx, &pb).unwrap();
    let dec = decompose_y(&ctx, &pb, &span, &poly(&[0.0, 1.0, -1.0])).unwrap();
    assert!(dec.y.residues.iter().all(|r| r.abs() < 1e-15));
    assert!(dec.c.iter().chain(&dec.c_tilde).all(|c| c.abs() < 1e-15));
    // Y₀ vanishes at both ends of the whole interval
    let basis = &p.op.basis;
    let m = basis.lengths.len();
    let left = basis.eval(&dec.y0, 0, Loc::from_left(0.0, basis.lengths[0]));
    let right = basis.eval(&dec.y0, m - 1, Loc::from_right(0.0, basis.lengths[m - 1]));
    assert!(left.abs() < 1e-8 && right.abs() < 1e-8, "{left} {right}");
}

#[test]
fn constant_perturbation_residue_is_density_at_the_pole() {
    let p = common::ulam(32);
    let ctx = Context::new(&p.model, &p.sys, &p.op, &p.sigma);
    let pb = pole_basis(&p.model, &p.sys.lengths).unwrap();
    let y = build_y(&ctx, &pb, &poly(&[1.0])).unwrap();
    for (pe, r) in pb.ends.iter().zip(&y.residues) {
        let l = p.sys.lengths[pe.interval];
        let end = if pe.right { Loc::from_right(0.0, l) } else { Loc::from_left(0.0, l) };
        let sign = if pe.right { -1.0 } else { 1.0 };
        assert!((r - sign * ctx.sigma_at(pe.interval, end)).abs() < 1e-12);
    }
    // the limit of ξ·Y is unsigned
    for (r, e) in y.residues.iter().zip(&y.extrapolated) {
        assert!((r.abs() - e).abs() < 1e-6);
    }
}

#[test]
fn psi_is_linear_in_both_observables() {
    let p = common::ulam(24);
    let ctx = Context::new(&p.model, &p.sys, &p.op, &p.sigma);
    let pb = pole_basis(&p.model, &p.sys.lengths).unwrap();
    let span = solve_w(&ctx, &pb).unwrap();
    let psi = |x: &[f64], a: &[f64], l: C64| {
        let dec = decompose_y(&ctx, &pb, &span, &poly(x)).unwrap();
        Meromorphic::new(&ctx, &pb, &span, &dec, &poly(a)).unwrap().eval_c(l).unwrap()
    };
    let (x1, x2) = ([0.0, 1.0], [1.0, 0.0, -0.5]);
    let (a1, a2) = ([0.0, 0.0, 1.0], [0.0, 1.0, 0.0, 0.3]);
    for l in [C64::new(0.25, -0.3), C64::new(0.0, 1.0)] {
        // 2 - 1.5x² = 3·(1 - 0.5x²) - 1
        let lhs = psi(&[2.0, 0.0, -1.5], &a1, l);
        let rhs = psi(&x2, &a1, l) * 3.0 - psi(&[1.0], &a1, l);
        assert!((lhs - rhs).norm() < 1e-10 * (1.0 + lhs.norm()), "{lhs} {rhs}");
        let lhs = psi(&x1, &[0.0, 2.0, 1.0, 0.6], l);
        let rhs = psi(&x1, &a1, l) + psi(&x1, &a2, l) * 2.0;
        assert!((lhs - rhs).norm() < 1e-10 * (1.0 + lhs.norm()), "{lhs} {rhs}");
    }
}

#[test]
fn polar_pole_sits_at_one_half_with_winding_minus_one() {
    let p = common::ulam(32);
    let ctx = Context::new(&p.model, &p.sys, &p.op, &p.sigma);
    let pb = pole_basis(&p.model, &p.sys.lengths).unwrap();
    assert_eq!(pb.big_lambda, 2.0);
    let span = solve_w(&ctx, &pb).unwrap();
    let x = poly(&[0.0, 1.0]);
    let dec = decompose_y(&ctx, &pb, &span, &x).unwrap();
    let mero = Meromorphic::new(&ctx, &pb, &span, &dec, &poly(&[0.0, 0.0, 1.0])).unwrap();
    let table = pole_table(&mero, &pb, 3).unwrap();
    let polar: Vec<&PoleEntry> = table.iter().filter(|e| e.family == "polar").collect();
    assert!(!polar.is_empty());
    for e in &polar {
        assert!((e.modulus - 0.5).abs() < 1e-12);
    }
    let half = polar.iter().find(|e| (e.re - 0.5).abs() < 1e-12).expect("pole at λ = 1/2");
    assert_eq!(half.winding, -1);
    assert!(table.iter().all(|e| (e.modulus - 1.0).abs() > 0.4));
    // t_n ≈ C·2ⁿ, so Ψ ≈ C/(1 - 2λ) and the residue at 1/2 is -C/2
    let s = direct_terms(&ctx, &x, &poly(&[0.0, 0.0, 1.0]), 12, 40, 1).unwrap();
    let expect = -s.terms[12] / 2f64.powi(13);
    assert!((half.residue_re - expect).abs() < 1e-6 * expect.abs(), "residue {} vs {expect}", half.residue_re);
    assert!(half.residue_im.abs() < 1e-6 * expect.abs());
}

#[test]
fn band_return_two_paths_agree() {
    let p = common::band_return();
    let ctx = Context::new(&p.model, &p.sys, &p.op, &p.sigma);
    let pb = pole_basis(&p.model, &p.sys.lengths).unwrap();
    let span = solve_w(&ctx, &pb).unwrap();
    let x = poly(&[1.0]);
    let a = poly(&[0.0, 0.0, 1.0]);
    let dec = decompose_y(&ctx, &pb, &span, &x).unwrap();
    let mero = Meromorphic::new(&ctx, &pb, &span, &dec, &a).unwrap();
    let s = direct_terms(&ctx, &x, &a, 14, 40, pb.p()).unwrap();
    for l in [C64::new(0.2, 0.0), C64::new(-0.1, 0.3)] {
        let d = s.sum(l).unwrap();
        let m = mero.eval_c(l).unwrap();
        assert!((d - m).norm() < 1e-7 * d.norm().max(1.0), "{d} vs {m}");
    }
    assert!(mero.eval_c(C64::new(1.0, 0.0)).unwrap().norm().is_finite());
}
