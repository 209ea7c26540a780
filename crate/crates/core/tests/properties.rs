//! Randomized invariants with fixed seeds.

use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};

use pd_core::analysis::{l2_error, observed_order, Rate};
use pd_core::app::{parse_config, preset_config, Overrides, Scheme, PRESETS};
use pd_core::forces::*;
use pd_core::geometry::*;
use pd_core::integrator::*;
use pd_core::mts::{gamma_closed_form, matrix_a};

fn config(seed: u64, cases: u32) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(seed),
        failure_persistence: None,
        ..Config::default()
    }
}

fn vec3() -> impl Strategy<Value = Vec3> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn steel(dim: Dim) -> Material {
    Material {
        youngs_modulus: 2e11,
        poisson_ratio: Material::required_poisson(dim),
        density: 7850.0,
    }
}

/// A jittered lattice: spacing 1, each point displaced by up to `jitter`.
fn jittered_cloud(nx: usize, ny: usize, offsets: &[(f64, f64)]) -> PointCloud {
    let positions: Vec<Vec3> = (0..nx * ny)
        .map(|k| {
            let (dx, dy) = offsets[k % offsets.len()];
            Vec3::new((k % nx) as f64 + 0.5 + dx, (k / nx) as f64 + 0.5 + dy, 0.0)
        })
        .collect();
    PointCloud::from_positions(Dim::Two, positions, 1.0, Some(1.0)).unwrap()
}

fn plate(nx: usize, ny: usize, horizon_cells: f64) -> Model {
    let b = Aabb::from_slices(&[0.0, 0.0], &[nx as f64 * 0.01, ny as f64 * 0.01]);
    let cloud = build_grid(&b, 0.01, Dim::Two, Some(0.01)).unwrap();
    Model::new(cloud, horizon_cells * 0.01, steel(Dim::Two), ForceLaw::Linear, vec![], None).unwrap()
}

fn with_law(m: &Model, law: ForceLaw, stretch: Option<f64>) -> Model {
    Model::with_bonds(m.cloud().clone(), m.bonds().clone(), *m.material(), law, vec![], stretch).unwrap()
}

proptest! {
    #![proptest_config(config(11, 48))]

    #[test]
    fn neighbor_lists_are_symmetric_and_match_brute_force(
        nx in 2usize..9,
        ny in 2usize..9,
        offsets in prop::collection::vec((-0.3..0.3f64, -0.3..0.3f64), 1..12),
        horizon in 1.0..3.2f64,
    ) {
        let cloud = jittered_cloud(nx, ny, &offsets);
        let nbrs = build_neighbor_list(&cloud, horizon).unwrap();
        let p = cloud.positions();
        for i in 0..cloud.len() {
            let mut expected: Vec<usize> = (0..cloud.len())
                .filter(|&j| j != i && (p[j] - p[i]).norm() <= horizon * (1.0 + HORIZON_SLACK))
                .collect();
            expected.sort_unstable();
            prop_assert_eq!(nbrs.neighbors(i), &expected[..]);
            for b in nbrs.range(i) {
                let j = nbrs.target(b);
                prop_assert!(nbrs.neighbors(j).contains(&i));
                prop_assert_eq!(nbrs.target(nbrs.reverse(b)), i);
                let l = nbrs.length(b);
                prop_assert!(l > 0.0 && l <= horizon * (1.0 + HORIZON_SLACK));
                prop_assert_eq!(nbrs.xi(b), p[j] - p[i]);
            }
        }
    }

    #[test]
    fn subdomains_partition_the_cloud(
        nx in 6usize..16,
        ny in 6usize..16,
        x0 in 0.0..0.08f64,
        w in 0.0..0.1f64,
        grow in 0.0..0.05f64,
    ) {
        let m = plate(nx, ny, 3.0);
        let fine = Aabb::from_slices(&[x0, 0.0], &[x0 + w, ny as f64 * 0.01]);
        let labels = classify_subdomains(m.cloud(), m.bonds(), &[fine]);
        let counts = labels.counts();
        prop_assert_eq!(counts.iter().sum::<usize>(), m.len());
        let tol = m.cloud().tolerance();
        let in_fine: Vec<bool> = m.cloud().positions().iter().map(|p| fine.contains(p, tol)).collect();
        for i in 0..m.len() {
            let label = labels.get(i);
            prop_assert_eq!(label.is_fine_region(), in_fine[i]);
            let all_fine = m.bonds().neighbors(i).iter().all(|&j| in_fine[j]);
            let all_coarse = m.bonds().neighbors(i).iter().all(|&j| !in_fine[j]);
            prop_assert_eq!(label == Label::Fine, in_fine[i] && all_fine);
            prop_assert_eq!(label == Label::Coarse, !in_fine[i] && all_coarse);
        }
        // Enlarging the fine region never moves a point out of it.
        let bigger = Aabb::from_slices(&[(x0 - grow).max(0.0), 0.0], &[x0 + w + grow, ny as f64 * 0.01]);
        let relabeled = classify_subdomains(m.cloud(), m.bonds(), &[bigger]);
        for i in 0..m.len() {
            if labels.get(i).is_fine_region() {
                prop_assert!(relabeled.get(i).is_fine_region());
            }
            if labels.get(i) == Label::Fine {
                prop_assert_eq!(relabeled.get(i), Label::Fine);
            }
        }
    }

    #[test]
    fn pair_forces_are_antisymmetric(xi in vec3(), eta in vec3(), alpha in 1.0..1e6f64) {
        prop_assume!(xi.norm() > 1e-3);
        let a = pairwise_force_linear(&xi, &eta, alpha);
        let b = pairwise_force_linear(&(-xi), &(-eta), alpha);
        prop_assert!((a + b).norm() <= 1e-12 * a.norm().max(1e-300));
        prop_assume!((xi + eta).norm() > 1e-6);
        let a = pairwise_force_nonlinear(&xi, &eta, alpha).unwrap();
        let b = pairwise_force_nonlinear(&(-xi), &(-eta), alpha).unwrap();
        prop_assert!((a + b).norm() <= 1e-12 * a.norm().max(1e-300));
    }

    #[test]
    fn nonlinear_law_linearizes(xi in vec3(), dir in vec3(), scale in 1e-7..1e-4f64) {
        prop_assume!(xi.norm() > 0.1 && dir.norm() > 1e-3);
        let eta = dir * scale;
        let lin = pairwise_force_linear(&xi, &eta, 1.0);
        let non = pairwise_force_nonlinear(&xi, &eta, 1.0).unwrap();
        // The laws agree to first order; the gap is second order in |eta| / |xi|.
        let size = eta.norm() / xi.norm();
        let gap = (lin - non).norm();
        prop_assert!(gap <= 4.0 * size * size / xi.norm() + 1e-12 * size / xi.norm(), "gap {gap} size {size}");
    }
}

proptest! {
    #![proptest_config(config(23, 24))]

    #[test]
    fn internal_forces_sum_to_zero(
        seeds in prop::collection::vec(vec3(), 1..40),
        nonlinear in any::<bool>(),
    ) {
        let base = plate(8, 6, 3.0);
        let law = if nonlinear { ForceLaw::Nonlinear } else { ForceLaw::Linear };
        let m = with_law(&base, law, None);
        let mut s = FieldState::zeros(m.len());
        for (i, u) in s.u.iter_mut().enumerate() {
            let v = seeds[i % seeds.len()];
            *u = Vec3::new(v.x, v.y, 0.0) * 1e-4;
        }
        let r = m.apply_all(&s).unwrap();
        let total: Vec3 = r.dv.iter().sum();
        let scale: f64 = r.dv.iter().map(|a| a.norm()).sum();
        prop_assert!(total.norm() <= 1e-10 * scale.max(1e-300), "{} vs {}", total.norm(), scale);
    }

    #[test]
    fn linear_operator_is_linear(
        a in -3.0..3.0f64,
        b in -3.0..3.0f64,
        f in prop::collection::vec(vec3(), 48),
        g in prop::collection::vec(vec3(), 48),
    ) {
        let m = plate(8, 6, 3.0);
        let field = |src: &[Vec3]| {
            let mut s = FieldState::zeros(m.len());
            for (u, x) in s.u.iter_mut().zip(src) {
                *u = Vec3::new(x.x, x.y, 0.0) * 1e-5;
            }
            s
        };
        let (sf, sg) = (field(&f), field(&g));
        let mut sc = FieldState::zeros(m.len());
        for i in 0..m.len() {
            sc.u[i] = sf.u[i] * a + sg.u[i] * b;
        }
        let (rf, rg, rc) = (m.apply_all(&sf).unwrap(), m.apply_all(&sg).unwrap(), m.apply_all(&sc).unwrap());
        for i in 0..m.len() {
            let expect = rf.dv[i] * a + rg.dv[i] * b;
            let scale = rf.dv[i].norm() * a.abs() + rg.dv[i].norm() * b.abs();
            prop_assert!((rc.dv[i] - expect).norm() <= 1e-11 * scale.max(1e-300));
        }
    }

    #[test]
    fn bonds_only_ever_break(
        pull in 0.002..0.02f64,
        stretch in 0.001..0.01f64,
    ) {
        let base = plate(10, 6, 3.0);
        let cloud = base.cloud().clone();
        let top = select_layer(&cloud, &Aabb::from_slices(&[0.0, 0.05], &[0.1, 0.06])).unwrap();
        let bottom = select_layer(&cloud, &Aabb::from_slices(&[0.0, 0.0], &[0.1, 0.01])).unwrap();
        let loads = vec![
            Loading { kind: LoadKind::Velocity, layer: top, value: Vec3::new(0.0, pull * 1e3, 0.0), profile: TimeProfile::Constant },
            Loading { kind: LoadKind::Velocity, layer: bottom, value: Vec3::new(0.0, -pull * 1e3, 0.0), profile: TimeProfile::Constant },
        ];
        let mut m = Model::with_bonds(cloud, base.bonds().clone(), *base.material(), ForceLaw::Nonlinear, loads, Some(stretch)).unwrap();
        let s0 = m.initial_state();
        let mut alive = m.bonds().alive_count();
        let mut flags = m.bonds().alive_flags().to_vec();
        let mut ok = true;
        upd_run(&mut m, &ButcherTableau::rk4(), &s0, 2e-7, 40, |_, _, model| {
            let now = model.bonds().alive_count();
            let new_flags = model.bonds().alive_flags();
            ok &= now <= alive;
            ok &= flags.iter().zip(new_flags).all(|(old, new)| *old || !*new);
            for b in 0..model.bonds().bond_count() {
                ok &= model.bonds().is_alive(b) == model.bonds().is_alive(model.bonds().reverse(b));
            }
            alive = now;
            flags = new_flags.to_vec();
            Ok(())
        }).unwrap();
        prop_assert!(ok);
        prop_assert!(m.damage_index().iter().all(|d| (0.0..=1.0).contains(d)));
    }
}

proptest! {
    #![proptest_config(config(37, 64))]

    #[test]
    fn tableaus_satisfy_order_conditions(h in 1e-3..0.5f64, lambda in -2.0..0.5f64) {
        for (tab, order) in [(tableau_rk3(), 3), (tableau_rk4(), 4)] {
            let s = tab.stages();
            let b = tab.b();
            let c = tab.c();
            let a = |j: usize, k: usize| if k < j { tab.a(j)[k] } else { 0.0 };
            prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            for j in 0..s {
                prop_assert!((tab.a(j).iter().sum::<f64>() - c[j]).abs() < 1e-15);
            }
            let bc: f64 = (0..s).map(|j| b[j] * c[j]).sum();
            let bc2: f64 = (0..s).map(|j| b[j] * c[j] * c[j]).sum();
            let bac: f64 = (0..s).map(|j| (0..s).map(|k| b[j] * a(j, k) * c[k]).sum::<f64>()).sum();
            prop_assert!((bc - 0.5).abs() < 1e-15);
            prop_assert!((bc2 - 1.0 / 3.0).abs() < 1e-15);
            prop_assert!((bac - 1.0 / 6.0).abs() < 1e-15);

            // One step on u' = lambda u reproduces the Taylor polynomial of exp to the order.
            let z = lambda * h;
            let mut s0 = FieldState::zeros(1);
            s0.u[0].x = 1.0;
            let step = rk_step(&tab, &s0, h, |st, out| {
                out.du[0] = st.u[0] * lambda;
                Ok(())
            }).unwrap();
            let mut poly = 0.0;
            let mut term = 1.0;
            for k in 0..=order {
                if k > 0 {
                    term *= z / k as f64;
                }
                poly += term;
            }
            prop_assert!((step.state.u[0].x - poly).abs() < 1e-14);
        }
    }

    #[test]
    fn correction_matrices_invert(log_dt in -8.0..0.0f64) {
        let dt = 10f64.powf(log_dt);
        for order in [3, 4] {
            let a = matrix_a(order, dt).unwrap();
            let g = gamma_closed_form(order, dt).unwrap();
            let n = a.nrows();
            // Scale rows and columns so the identity check is dimensionless.
            let prod = &a * &g;
            for i in 0..n {
                for j in 0..n {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((prod[(i, j)] - expect).abs() < 1e-13, "order {order} dt {dt}: {}", prod[(i, j)]);
                }
            }
            // Row j of the inverse carries units of dt^(-j).
            for j in 0..n {
                let scaled = gamma_closed_form(order, 1.0).unwrap();
                for k in 0..n {
                    let expect = scaled[(j, k)] * dt.powi(-(j as i32));
                    prop_assert!((g[(j, k)] - expect).abs() <= 1e-14 * expect.abs());
                }
            }
        }
    }

    #[test]
    fn l2_error_is_a_norm(
        x in prop::collection::vec(-1e3..1e3f64, 1..30),
        y_seed in prop::collection::vec(-1e3..1e3f64, 30),
        z_seed in prop::collection::vec(-1e3..1e3f64, 30),
        c in -10.0..10.0f64,
    ) {
        let n = x.len();
        let y = &y_seed[..n];
        let z = &z_seed[..n];
        prop_assert_eq!(l2_error(&x, &x).unwrap(), 0.0);
        let dxy = l2_error(&x, y).unwrap();
        prop_assert_eq!(dxy, l2_error(y, &x).unwrap());
        prop_assert!(dxy <= l2_error(&x, z).unwrap() + l2_error(z, y).unwrap() + 1e-9);
        if x.iter().zip(y).any(|(a, b)| a != b) {
            prop_assert!(dxy > 0.0);
        }
        let zero = vec![0.0; n];
        let cx: Vec<f64> = x.iter().map(|v| v * c).collect();
        let lhs = l2_error(&cx, &zero).unwrap();
        let rhs = c.abs() * l2_error(&x, &zero).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1e-300));
    }

    #[test]
    fn rate_of_power_law_is_exact(r in 1u32..7, c in 1e-6..1e3f64, dt0 in 1e-6..1e-2f64, rows in 2usize..6) {
        let dts: Vec<f64> = (0..rows).map(|m| dt0 / 2f64.powi(m as i32)).collect();
        let errors: Vec<f64> = dts.iter().map(|dt| c * dt.powi(r as i32)).collect();
        let rates = observed_order(&dts, &errors).unwrap();
        prop_assert!(rates[0].is_none());
        for rate in &rates[1..] {
            match rate {
                Some(Rate::Value(v)) => prop_assert!((v - r as f64).abs() < 1e-12),
                other => prop_assert!(false, "{other:?}"),
            }
        }
    }
}

proptest! {
    #![proptest_config(config(41, 24))]

    #[test]
    fn config_round_trip_is_idempotent(
        preset in 0usize..3,
        dt_scale in 0.1..1.0f64,
        repeats in 1usize..4,
        order in 3usize..5,
        k in 1usize..9,
        mts in any::<bool>(),
    ) {
        let base = preset_config(PRESETS[preset], false, &Overrides::default()).unwrap();
        let overrides = Overrides {
            dt: Some(base.time.dt * dt_scale),
            steps: Some(base.time.steps * repeats),
            order: Some(order),
            substeps: Some(k),
            scheme: Some(if mts { Scheme::Mts } else { Scheme::Upd }),
            output: None,
        };
        let c = preset_config(PRESETS[preset], false, &overrides).unwrap();
        let text = c.to_toml();
        let back = parse_config(&text, false, &Overrides::default()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_toml(), text);
    }
}
