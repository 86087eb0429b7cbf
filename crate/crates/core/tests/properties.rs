// Property tests for the structural invariants: indexing, norms, modulation
// algebra, assembly row structure, solvability, pipeline identities, and the
// perturbation ensemble's exactness and reproducibility.

mod common;

use proptest::prelude::*;

use umblt_core::assembly::{assemble_forward_matrix, assemble_internal_matrix};
use umblt_core::coefficients::{
    experiment_coefficients, modulate, sample_fields, shepp_logan_phantom, ModulationParams,
    OpticalCoefficients, ScalarField, SourceField,
};
use umblt_core::mesh::{restrict_to_coarse, Grid2D, NodeClass, NodeField, NormKind};
use umblt_core::pipeline::{
    adjoint_positive, boundary_quadrature, domain_quadrature, fit_log_slope, forward_solve,
    internal_data, reconstruct_source,
};
use umblt_core::solver::{certify_wcdd, inverse_norm2, matrix_norm2, solve_sparse, Factorized};
use umblt_core::uq::{
    build_perturbation_ensemble, draw_perturbation, legendre_eval, perturb_coefficients,
};

fn smooth_coefficients(d0: f64, d1: f64, s0: f64, s1: f64) -> OpticalCoefficients {
    OpticalCoefficients::isotropic(
        ScalarField::new(move |x, y| d0 + d1 * (x + y).sin()),
        ScalarField::new(move |x, y| s0 + s1 * (2.0 * x - y).cos()),
    )
}

fn constant_source(v: f64) -> SourceField {
    SourceField { field: ScalarField::constant(v), support: "constant".into() }
}

proptest! {
    #[test]
    fn index_round_trip(nx in 3usize..40, ny in 3usize..40, iq in 0usize..1000, jq in 0usize..1000) {
        let grid = Grid2D::new(-1.0, 1.0, -1.0, 1.0, nx, ny).unwrap();
        let i = 1 + iq % nx;
        let j = 1 + jq % ny;
        let k = grid.index(i, j);
        prop_assert_eq!(k, (i - 1) * ny + (j - 1));
        prop_assert_eq!(grid.inverse_index(k), (i, j));
    }

    #[test]
    fn norm_homogeneity(values in proptest::collection::vec(-50.0f64..50.0, 25), c in -10.0f64..10.0) {
        let grid = Grid2D::unit_square(5).unwrap();
        let f = NodeField::from_values(grid, values.clone());
        let scaled = NodeField::from_values(grid, values.iter().map(|v| c * v).collect());
        for kind in [NormKind::L2, NormKind::H1, NormKind::LInf] {
            let lhs = scaled.norm(kind);
            let rhs = c.abs() * f.norm(kind);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs), "{kind:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn l2_bounded_by_h1(values in proptest::collection::vec(-50.0f64..50.0, 25)) {
        let grid = Grid2D::unit_square(5).unwrap();
        let f = NodeField::from_values(grid, values);
        prop_assert!(f.norm(NormKind::L2) <= f.norm(NormKind::H1) * (1.0 + 1e-14));
    }

    #[test]
    fn restriction_matches_coarse_sample(n in 3usize..17, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let coarse = Grid2D::unit_square(n).unwrap();
        let fine = Grid2D::unit_square(2 * (n - 1) + 1).unwrap();
        let f = move |x: f64, y: f64| a + b * (x + 0.7 * y).sin() + 0.3 * x * y;
        let restricted = restrict_to_coarse(&NodeField::from_fn(fine, f).unwrap(), coarse).unwrap();
        let direct = NodeField::from_fn(coarse, f).unwrap();
        for k in 0..coarse.n() {
            prop_assert!(
                (restricted.values[k] - direct.values[k]).abs()
                    <= 1e-12 * (1.0 + direct.values[k].abs())
            );
        }
    }

    #[test]
    fn modulation_identity_at_zero(
        gamma in 0.6f64..1.5,
        qx in -4.0f64..4.0,
        qy in -4.0f64..4.0,
        varphi in -3.0f64..3.0,
        x in -1.0f64..1.0,
        y in -1.0f64..1.0,
    ) {
        let (mut c, s) = experiment_coefficients(1).unwrap();
        c.gamma = gamma;
        let m = ModulationParams::new(0.0, [qx, qy], varphi);
        let (mc, ms) = modulate(&c, &s, m);
        prop_assert_eq!(
            mc.scalar_diffusion().unwrap().eval(x, y),
            c.scalar_diffusion().unwrap().eval(x, y)
        );
        prop_assert_eq!(mc.sigma_a.eval(x, y), c.sigma_a.eval(x, y));
        prop_assert_eq!(ms.field.eval(x, y), s.field.eval(x, y));
    }

    #[test]
    fn modulation_closed_form_and_linearity(
        eps in 1e-4f64..0.5,
        eps2 in 1e-4f64..0.5,
        gamma in 0.6f64..1.5,
        qx in -4.0f64..4.0,
        qy in -4.0f64..4.0,
        varphi in -3.0f64..3.0,
        x in -1.0f64..1.0,
        y in -1.0f64..1.0,
    ) {
        let (mut c, s) = experiment_coefficients(1).unwrap();
        c.gamma = gamma;
        let m = ModulationParams::new(eps, [qx, qy], varphi);
        let (mc, ms) = modulate(&c, &s, m);
        let carrier = (qx * x + qy * y + varphi).cos();
        let close = |got: f64, want: f64| (got - want).abs() <= 1e-13 * (1.0 + want.abs());
        let d0 = c.scalar_diffusion().unwrap().eval(x, y);
        prop_assert!(close(
            mc.scalar_diffusion().unwrap().eval(x, y),
            d0 * (1.0 + eps * (2.0 * gamma - 1.0) * carrier)
        ));
        prop_assert!(close(
            mc.sigma_a.eval(x, y),
            c.sigma_a.eval(x, y) * (1.0 + eps * (2.0 * gamma + 1.0) * carrier)
        ));
        prop_assert!(close(ms.field.eval(x, y), s.field.eval(x, y) * (1.0 + eps * carrier)));
        // Linear in eps: the divided difference is eps-independent.
        let (mc2, _) = modulate(&c, &s, ModulationParams::new(eps2, [qx, qy], varphi));
        let slope1 = (mc.scalar_diffusion().unwrap().eval(x, y) - d0) / eps;
        let slope2 = (mc2.scalar_diffusion().unwrap().eval(x, y) - d0) / eps2;
        prop_assert!((slope1 - slope2).abs() <= 1e-10 * (1.0 + slope1.abs()));
    }

    #[test]
    fn fit_log_slope_recovers_exponent(p in 0.3f64..3.0, c in 0.1f64..10.0) {
        let xs = [1e-1, 5e-2, 1e-2, 1e-3];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| c * x.powf(p)).collect();
        let slope = fit_log_slope(&xs, &ys);
        prop_assert!((slope - p).abs() < 1e-9, "{slope} vs {p}");
    }

    #[test]
    fn quadratures_measure_area_and_perimeter(
        x0 in -3.0f64..0.0,
        lx in 0.5f64..4.0,
        y0 in -3.0f64..0.0,
        ly in 0.5f64..4.0,
        nx in 3usize..30,
        ny in 3usize..30,
    ) {
        let grid = Grid2D::new(x0, x0 + lx, y0, y0 + ly, nx, ny).unwrap();
        let ones = NodeField::from_fn(grid, |_, _| 1.0).unwrap();
        let area = domain_quadrature(grid, &ones);
        let perimeter = boundary_quadrature(grid, &ones);
        prop_assert!((area - lx * ly).abs() <= 1e-12 * (1.0 + lx * ly));
        prop_assert!((perimeter - 2.0 * (lx + ly)).abs() <= 1e-12 * (1.0 + 2.0 * (lx + ly)));
    }

    #[test]
    fn frozen_ensemble_reproducible(k in 1usize..10, seed in 0u64..1_000_000, xi in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0) {
        let e1 = build_perturbation_ensemble(k, seed);
        let e2 = build_perturbation_ensemble(k, seed);
        prop_assert_eq!(e1.shells.len(), e2.shells.len());
        for (s1, s2) in e1.shells.iter().zip(&e2.shells) {
            prop_assert_eq!(s1.len(), s2.len());
            for (m1, m2) in s1.iter().zip(s2) {
                prop_assert_eq!(m1.n, m2.n);
                prop_assert_eq!(m1.sin_d, m2.sin_d);
                prop_assert_eq!(m1.cos_d, m2.cos_d);
                prop_assert_eq!(m1.sin_sigma, m2.sin_sigma);
                prop_assert_eq!(m1.cos_sigma, m2.cos_sigma);
            }
        }
        let (d1, s1) = draw_perturbation(&e1, xi).unwrap();
        let (d2, s2) = draw_perturbation(&e2, xi).unwrap();
        prop_assert_eq!(d1.eval(x, y), d2.eval(x, y));
        prop_assert_eq!(s1.eval(x, y), s2.eval(x, y));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forward_rows_sum_and_sign(
        d0 in 1.5f64..4.0,
        d1 in -1.0f64..1.0,
        s0 in 0.3f64..2.0,
        s1 in -0.25f64..0.25,
        n in 5usize..13,
    ) {
        let grid = Grid2D::unit_square(n).unwrap();
        let c = smooth_coefficients(d0, d1, s0, s1);
        let sampled = sample_fields(&c, &constant_source(1.0), grid).unwrap();
        let sys = assemble_forward_matrix(grid, &sampled, c.ell).unwrap();
        let dense = common::sparse_to_dense(&sys);
        let nn = grid.n();
        for r in 0..nn {
            let (i, j) = grid.inverse_index(r);
            let row = &dense[r * nn..(r + 1) * nn];
            let sum: f64 = row.iter().sum();
            let expected = match grid.classify(i, j) {
                NodeClass::Interior => sampled.sigma.values[r],
                _ => 1.0,
            };
            prop_assert!((sum - expected).abs() <= 1e-11 * (1.0 + expected.abs()));
            prop_assert!(row[r] > 0.0);
            for (cidx, &v) in row.iter().enumerate() {
                if cidx != r {
                    prop_assert!(v <= 0.0, "positive off-diagonal at ({r}, {cidx}): {v}");
                }
            }
        }
    }

    #[test]
    fn interior_block_symmetric_for_constant_coefficients(d0 in 0.5f64..5.0, s0 in 0.0f64..3.0, n in 5usize..13) {
        let grid = Grid2D::unit_square(n).unwrap();
        let c = OpticalCoefficients::isotropic(ScalarField::constant(d0), ScalarField::constant(s0));
        let sampled = sample_fields(&c, &constant_source(1.0), grid).unwrap();
        let dense = common::sparse_to_dense(&assemble_forward_matrix(grid, &sampled, c.ell).unwrap());
        let nn = grid.n();
        for r in 0..nn {
            let (i, j) = grid.inverse_index(r);
            if grid.classify(i, j) != NodeClass::Interior {
                continue;
            }
            for q in 0..nn {
                let (qi, qj) = grid.inverse_index(q);
                if grid.classify(qi, qj) != NodeClass::Interior {
                    continue;
                }
                prop_assert!((dense[r * nn + q] - dense[q * nn + r]).abs() <= 1e-14);
            }
        }
    }

    // With psi identically one the interior rows of the internal operator are
    // the negated flux part of the forward operator with a 2 gamma sigma
    // diagonal, and the boundary rows coincide with the forward Robin rows.
    #[test]
    fn internal_matrix_with_unit_psi(
        d0 in 1.5f64..4.0,
        d1 in -1.0f64..1.0,
        s0 in 0.3f64..2.0,
        s1 in -0.25f64..0.25,
        gamma in 0.6f64..1.5,
        n in 5usize..11,
    ) {
        let grid = Grid2D::unit_square(n).unwrap();
        let mut c = smooth_coefficients(d0, d1, s0, s1);
        c.gamma = gamma;
        let sampled = sample_fields(&c, &constant_source(1.0), grid).unwrap();
        let ones = NodeField::from_fn(grid, |_, _| 1.0).unwrap();
        let l = common::sparse_to_dense(&assemble_forward_matrix(grid, &sampled, c.ell).unwrap());
        let a = common::sparse_to_dense(
            &assemble_internal_matrix(grid, &sampled, &ones, gamma, c.ell).unwrap(),
        );
        let nn = grid.n();
        for r in 0..nn {
            let (i, j) = grid.inverse_index(r);
            let interior = grid.classify(i, j) == NodeClass::Interior;
            for q in 0..nn {
                let want = if !interior {
                    l[r * nn + q]
                } else if q == r {
                    -l[r * nn + r] + (2.0 * gamma + 1.0) * sampled.sigma.values[r]
                } else {
                    -l[r * nn + q]
                };
                let got = a[r * nn + q];
                prop_assert!(
                    (got - want).abs() <= 1e-13 * (1.0 + want.abs()),
                    "row {r} col {q}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn certified_systems_solve(
        d0 in 1.5f64..4.0,
        d1 in -1.0f64..1.0,
        s0 in 0.3f64..2.0,
        s1 in -0.25f64..0.25,
        sv in 0.1f64..3.0,
        n in 5usize..13,
    ) {
        let grid = Grid2D::unit_square(n).unwrap();
        let c = smooth_coefficients(d0, d1, s0, s1);
        let sampled = sample_fields(&c, &constant_source(sv), grid).unwrap();
        let sys = assemble_forward_matrix(grid, &sampled, c.ell).unwrap();
        let cert = certify_wcdd(&sys.csr());
        prop_assert!(cert.accepted);
        let rhs = umblt_core::assembly::assemble_rhs(
            grid,
            umblt_core::assembly::RhsKind::Source(&sampled.source),
        );
        let report = solve_sparse(&sys.with_rhs(rhs)).unwrap();
        prop_assert!(report.residual_norm < 1e-10, "residual {}", report.residual_norm);
    }

    #[test]
    fn forward_solve_linear_in_source(
        s1 in 0.1f64..3.0,
        s2 in 0.1f64..3.0,
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
        n in 5usize..13,
    ) {
        let grid = Grid2D::unit_square(n).unwrap();
        let c = smooth_coefficients(2.5, 0.4, 1.0, 0.1);
        let f1 = sample_fields(&c, &constant_source(s1), grid).unwrap();
        let f2 = sample_fields(&c, &constant_source(s2), grid).unwrap();
        let combo = sample_fields(
            &c,
            &SourceField {
                field: ScalarField::constant(alpha * s1 + beta * s2),
                support: "constant".into(),
            },
            grid,
        )
        .unwrap();
        let phi1 = forward_solve(grid, &f1, c.ell).unwrap().phi;
        let phi2 = forward_solve(grid, &f2, c.ell).unwrap().phi;
        let phi12 = forward_solve(grid, &combo, c.ell).unwrap().phi;
        let scale = 1.0 + phi12.norm(NormKind::LInf);
        for k in 0..grid.n() {
            let want = alpha * phi1.values[k] + beta * phi2.values[k];
            prop_assert!((phi12.values[k] - want).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn adjoint_positive_on_random_coefficients(
        d0 in 1.5f64..4.0,
        d1 in -1.0f64..1.0,
        s0 in 0.3f64..2.0,
        s1 in -0.25f64..0.25,
        n in 5usize..13,
    ) {
        let grid = Grid2D::unit_square(n).unwrap();
        let c = smooth_coefficients(d0, d1, s0, s1);
        let sampled = sample_fields(&c, &constant_source(1.0), grid).unwrap();
        let f = NodeField::from_fn(grid, |_, _| 1.0).unwrap();
        let adj = adjoint_positive(grid, &sampled, None, &f, c.ell).unwrap();
        prop_assert!(adj.min_psi > 0.0);
    }

    // Single-grid round trip: data synthesized and inverted on the same grid
    // with the same coefficients returns the source at interior nodes to
    // solver tolerance.
    #[test]
    fn reconstruction_round_trip_single_grid(
        d0 in 1.5f64..4.0,
        d1 in -1.0f64..1.0,
        s0 in 0.3f64..2.0,
        s1 in -0.25f64..0.25,
        n in 9usize..17,
    ) {
        let grid = Grid2D::unit_square(n).unwrap();
        let c = smooth_coefficients(d0, d1, s0, s1);
        let source = SourceField { field: shepp_logan_phantom(), support: "phantom".into() };
        let sampled = sample_fields(&c, &source, grid).unwrap();
        let f = NodeField::from_fn(grid, |_, _| 1.0).unwrap();
        let adj = adjoint_positive(grid, &sampled, None, &f, c.ell).unwrap();
        let phi0 = forward_solve(grid, &sampled, c.ell).unwrap().phi;
        let data = internal_data(grid, &sampled, &phi0, &adj.psi, c.gamma).unwrap();
        let rec = reconstruct_source(grid, &sampled, &adj.psi, &data.h, c.gamma, c.ell).unwrap();
        let mut err = 0.0f64;
        let mut scale = 0.0f64;
        for k in 0..grid.n() {
            let (i, j) = grid.inverse_index(k);
            if grid.classify(i, j) != NodeClass::Interior {
                continue;
            }
            err += (rec.s_rec.values[k] - sampled.source.values[k]).powi(2);
            scale += sampled.source.values[k].powi(2);
        }
        let rel = (err / scale.max(1e-300)).sqrt();
        prop_assert!(rel < 1e-8, "round-trip relative error {rel}");
    }

    #[test]
    fn per_draw_exactness(
        seed in 0u64..100_000,
        xi in -1.0f64..1.0,
        k in 2usize..10,
        e_d in 0.005f64..0.12,
        e_sigma in 0.005f64..0.12,
        n in 9usize..21,
    ) {
        let grid = Grid2D::unit_square(n).unwrap();
        let (c, _s) = experiment_coefficients(1).unwrap();
        let ensemble = build_perturbation_ensemble(k, seed);
        let (u_d, u_sigma) = draw_perturbation(&ensemble, xi).unwrap();
        let perturbed = perturb_coefficients(&c, &u_d, &u_sigma, e_d, e_sigma, grid);
        prop_assume!(perturbed.is_ok());
        let p = perturbed.unwrap();
        let d_true = c.scalar_diffusion().unwrap();
        let d_tilde = p.coefficients.scalar_diffusion().unwrap();
        let dd = NodeField::from_fn(grid, |x, y| d_tilde.eval(x, y) - d_true.eval(x, y)).unwrap();
        let base_d = NodeField::from_fn(grid, |x, y| d_true.eval(x, y)).unwrap();
        let got_d = dd.norm(NormKind::H1) / base_d.norm(NormKind::H1);
        prop_assert!((got_d - e_d).abs() <= 1e-12 * (1.0 + e_d), "{got_d} vs {e_d}");
        let ds = NodeField::from_fn(grid, |x, y| {
            p.coefficients.sigma_a.eval(x, y) - c.sigma_a.eval(x, y)
        })
        .unwrap();
        let base_s = NodeField::from_fn(grid, |x, y| c.sigma_a.eval(x, y)).unwrap();
        let got_s = ds.norm(NormKind::L2) / base_s.norm(NormKind::L2);
        prop_assert!((got_s - e_sigma).abs() <= 1e-12 * (1.0 + e_sigma), "{got_s} vs {e_sigma}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn spectral_norm_bounds_matvec(seed in 0u64..10_000, n in 5usize..11) {
        use rand::{Rng as _, SeedableRng as _};
        let grid = Grid2D::unit_square(n).unwrap();
        let c = smooth_coefficients(2.5, 0.4, 1.0, 0.1);
        let sampled = sample_fields(&c, &constant_source(1.0), grid).unwrap();
        let a = assemble_forward_matrix(grid, &sampled, c.ell).unwrap().csr();
        let est = matrix_norm2(&a, 1e-4, 10_000);
        prop_assert!(est.converged);
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let x: Vec<f64> = (0..a.n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ax = a.apply(&x);
            let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nax: f64 = ax.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(nax <= est.value * nx * (1.0 + 1e-2));
        }
    }

    #[test]
    fn condition_number_at_least_one(d0 in 0.8f64..4.0, s0 in 0.0f64..2.0, n in 5usize..11) {
        let grid = Grid2D::unit_square(n).unwrap();
        let c = OpticalCoefficients::isotropic(ScalarField::constant(d0), ScalarField::constant(s0));
        let sampled = sample_fields(&c, &constant_source(1.0), grid).unwrap();
        let a = assemble_forward_matrix(grid, &sampled, c.ell).unwrap().csr();
        let direct = matrix_norm2(&a, 1e-4, 10_000);
        let f = Factorized::factor(a).unwrap();
        let inverse = inverse_norm2(&f, 1e-4, 10_000).unwrap();
        prop_assert!(direct.value * inverse.value >= 1.0 - 1e-2);
    }
}

/// The basis is orthonormal against the sampling density 1/2 on [-1, 1];
/// checked by Simpson quadrature for all order pairs.
#[test]
fn legendre_basis_orthonormal() {
    let m = 20_000usize;
    let h = 2.0 / m as f64;
    for a in 1..=10usize {
        for b in a..=10usize {
            let mut acc = 0.0;
            for k in 0..=m {
                let t = -1.0 + k as f64 * h;
                let w = if k == 0 || k == m {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                acc += w * legendre_eval(a, t).unwrap() * legendre_eval(b, t).unwrap();
            }
            let integral = acc * h / 3.0 * 0.5;
            let want = if a == b { 1.0 } else { 0.0 };
            assert!(
                (integral - want).abs() < 1e-8,
                "orders ({a}, {b}): integral {integral}"
            );
        }
    }
}

/// The classic head phantom is left-right asymmetric: the lateral ellipses
/// differ in size and the bottom detail trio is offset. The asymmetry is
/// intentional (the standard parameter table) and pinned here so it cannot
/// silently change.
#[test]
fn phantom_keeps_classic_asymmetry() {
    let p = shepp_logan_phantom();
    assert_ne!(p.eval(-0.1, -0.605), p.eval(0.1, -0.605));
    // Centered structures are symmetric.
    for (x, y) in [(0.0, 0.35), (0.0, 0.1), (0.0, -0.1), (0.3, 0.6), (0.5, 0.0)] {
        assert_eq!(p.eval(x, y), p.eval(-x, y));
    }
}
