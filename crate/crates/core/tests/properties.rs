use ddmhe::behavioral::{self, StackOptions, TrajectoryDataset};
use ddmhe::dynamics::{AffinePlant, NoiseSpec};
use ddmhe::harness::ExperimentConfig;
use ddmhe::mhe::{self, MheParams, NoiseSet, RgesAccumulator};
use ddmhe::qp::{self, QpProblem, QpSettings, QpStatus};
use ddmhe::{dynamics, Matrix, Vector};
use proptest::prelude::*;

fn mat(r: usize, c: usize, v: &[f64]) -> Matrix {
    Matrix::from_fn(r, c, |i, j| v[i * c + j])
}

fn plant_strategy() -> impl Strategy<Value = AffinePlant> {
    (proptest::collection::vec(-1.0f64..1.0, 9), proptest::collection::vec(-1.0f64..1.0, 6), 0.3f64..0.95).prop_filter_map(
        "well-posed plant",
        |(a, c, radius)| {
            let raw = mat(3, 3, &a);
            let sr = ddmhe::numerics::spectral_radius(&raw);
            if sr < 1e-2 {
                return None;
            }
            let a = raw * (radius / sr);
            let c = mat(2, 3, &c);
            AffinePlant::new(a, Vector::from_column_slice(&[0.2, -0.1, 0.3]), c, Vector::from_column_slice(&[0.1, -0.2]), 1.0).ok()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hankel_columns_are_sliding_windows(len in 4usize..20, depth in 1usize..4, seed in 0u64..1000) {
        prop_assume!(depth <= len);
        let seq: Vec<Vector> = (0..len).map(|k| Vector::from_column_slice(&[k as f64 + seed as f64, -(k as f64)])).collect();
        let h = behavioral::build_hankel(&seq, depth).unwrap();
        prop_assert_eq!(h.ncols(), len - depth + 1);
        for col in 0..h.ncols() {
            for j in 0..depth {
                prop_assert_eq!(h.fixed_view::<2, 1>(2 * j, col).into_owned(), seq[col + j].clone());
            }
        }
    }

    #[test]
    fn qp_solution_is_scale_invariant(v in proptest::collection::vec(-1.0f64..1.0, 16), q in proptest::collection::vec(-2.0f64..2.0, 4), scale in 1e-3f64..1e3) {
        let m = mat(4, 4, &v);
        let p = m.transpose() * &m + Matrix::identity(4, 4) * 0.5;
        let q = Vector::from_column_slice(&q);
        let lo = Vector::from_element(4, -0.3);
        let hi = Vector::from_element(4, 0.3);
        let eq = Matrix::from_row_slice(1, 4, &[1.0, 1.0, 0.0, 0.0]);
        let b = Vector::from_element(1, 0.1);
        let base = QpProblem::new(p.clone(), q.clone(), eq.clone(), b.clone(), lo.clone(), hi.clone()).unwrap();
        let scaled = QpProblem::new(p * scale, q * scale, eq, b, lo, hi).unwrap();
        let st = QpSettings::default();
        let (s1, s2) = (qp::solve(&base, &st), qp::solve(&scaled, &st));
        prop_assert_eq!(s1.status, QpStatus::Optimal);
        prop_assert_eq!(s2.status, QpStatus::Optimal);
        prop_assert!((&s1.x - &s2.x).amax() < 1e-6, "{} vs {}", s1.x, s2.x);
    }

    #[test]
    fn unconstrained_qp_matches_normal_equations(v in proptest::collection::vec(-1.0f64..1.0, 9), q in proptest::collection::vec(-5.0f64..5.0, 3)) {
        let m = mat(3, 3, &v);
        let p = m.transpose() * &m + Matrix::identity(3, 3);
        let q = Vector::from_column_slice(&q);
        let want = -p.clone().lu().solve(&q).unwrap();
        let s = qp::solve(&QpProblem::unconstrained(p, q).unwrap(), &QpSettings::default());
        prop_assert!((&s.x - &want).amax() < 1e-7);
    }

    #[test]
    fn fresh_trajectories_are_members(plant in plant_strategy(), x0 in proptest::collection::vec(-1.0f64..1.0, 3), x1 in proptest::collection::vec(-1.0f64..1.0, 3)) {
        let hist = dynamics::simulate(&plant, &Vector::from_column_slice(&x0), 40, &NoiseSpec::zero()).unwrap().data;
        let stack = match behavioral::build_stack(&hist, 4, StackOptions::default()) {
            Ok(s) => s,
            Err(_) => return Ok(()),
        };
        let cand = dynamics::simulate(&plant, &Vector::from_column_slice(&x1), 4, &NoiseSpec::zero()).unwrap().data;
        let m = behavioral::trajectory_membership(&stack, &cand.states, &cand.outputs).unwrap();
        prop_assert!(m.accepted, "residual {:e} threshold {:e}", m.residual, m.threshold);
    }

    #[test]
    fn estimated_noise_respects_its_box(seed in 0u64..500, bound in 0.01f64..0.2) {
        let a = Matrix::from_row_slice(2, 2, &[0.8, 0.3, -0.2, 0.7]);
        let c = Matrix::identity(2, 2);
        let plant = AffinePlant::new(a, Vector::from_column_slice(&[0.1, 0.05]), c, Vector::zeros(2), 1.0).unwrap();
        let x0 = Vector::from_column_slice(&[1.0, -1.0]);
        let hist = dynamics::simulate(&plant, &x0, 30, &NoiseSpec::zero()).unwrap().data;
        let online = dynamics::simulate(&plant, hist.states.last().unwrap(), 15, &NoiseSpec::gaussian(0.0, 0.05, seed)).unwrap().data;
        let mut params = MheParams::new(0.4, 10.0, 3, online.states[0].clone()).unwrap();
        params.noise_set = NoiseSet::Box { bound: Vector::from_element(2, bound) };
        // A tight box can exclude every data-consistent window; that must
        // surface as a hard error, never as a relaxed solution.
        let run = match mhe::run(&hist, &online.outputs, params) {
            Ok(run) => run,
            Err(ddmhe::Error::QpInfeasible { .. }) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        for step in &run.steps {
            for v in &step.window_noise {
                prop_assert!(v.amax() <= bound + 1e-6, "{} exceeds {}", v.amax(), bound);
            }
        }
    }

    #[test]
    fn rges_recursion_matches_closed_form(e0 in 0.0f64..2.0, kappa in 0.1f64..0.99, mu in 0.1f64..1e3, w in proptest::collection::vec(0.0f64..1e-2, 1..30), v in proptest::collection::vec(0.0f64..1e-2, 30)) {
        let mut acc = RgesAccumulator::new(e0, kappa, mu);
        for t in 1..=w.len() {
            let b = acc.push(w[t - 1], v[t - 1]);
            let closed = mhe::rges_bound(t, e0, &w[..t], &v[..t], kappa, mu);
            prop_assert!((b - closed).abs() <= 1e-12 * (1.0 + closed));
        }
    }

    #[test]
    fn contraction_gate_matches_definition(rho in 0.01f64..0.999, m in 1usize..60) {
        let ok = MheParams::new(rho, 1.0, m, Vector::zeros(1)).is_ok();
        prop_assert_eq!(ok, 4.0 * rho.powi(m as i32) < 1.0);
    }

    #[test]
    fn config_survives_toml(seed in any::<u64>(), mu in 1e-2f64..1e8, sigma in 1e-6f64..1e-1) {
        let mut cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
        cfg.mhe.mu = mu;
        cfg.scenario.online_noise = NoiseSpec::gaussian(sigma, 2.0 * sigma, seed ^ 1);
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn trajectory_csv_round_trips(len in 1usize..30, start in -50i64..50, scale in 1e-6f64..1e6) {
        let states: Vec<Vector> = (0..=len).map(|k| Vector::from_column_slice(&[k as f64 * scale, (k as f64).sin() / scale])).collect();
        let outputs: Vec<Vector> = (0..len).map(|k| Vector::from_column_slice(&[(k as f64).cos() * scale])).collect();
        let ds = TrajectoryDataset::new(0.01, start, states, outputs).unwrap();
        let mut buf = Vec::new();
        behavioral::write_trajectory_csv(&ds, &mut buf).unwrap();
        let back = behavioral::parse_trajectory_csv(std::str::from_utf8(&buf).unwrap(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.states, ds.states);
        prop_assert_eq!(back.outputs, ds.outputs);
    }
}
