//! Comparison estimators built on an explicit model fitted to the same
//! historical trajectory: an error-state Kalman filter on a least-squares
//! affine model, and a moving horizon estimator on an EDMD lift with
//! thin-plate spline observables.
//!
//! Both follow the timing of [`crate::mhe::DdMhe`]: feeding `y(t-1)`
//! publishes `xh(t)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::behavioral::{check_rank_condition, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::mhe::contraction;
use crate::numerics::{self, hstack, pinv, svd, vstack, Matrix, Tolerance, Vector};
use crate::qp::{solve_warm, QpProblem, QpSettings, QpStatus, WarmStart};

/// `x+ = A x + e`, `y = C x + r`, fitted by least squares.
#[derive(Debug, Clone)]
pub struct IdentifiedModel {
    pub a: Matrix,
    pub e: Vector,
    pub c: Matrix,
    pub r: Vector,
    /// Largest state and output residual norms over the data.
    pub state_residual: f64,
    pub output_residual: f64,
}

pub fn identify_model(ds: &TrajectoryDataset) -> Result<IdentifiedModel> {
    let n = ds.state_dim();
    let p = ds.output_dim();
    let t = ds.len();
    let report = check_rank_condition(ds, 1, Tolerance::Auto)?;
    if !report.holds {
        return Err(Error::RankDeficient {
            rank: report.rank,
            required: report.required,
            smallest: report.smallest_retained(),
            tol: report.tolerance,
        });
    }
    let x0 = hstack(&ds.states[..t]);
    let regress = vstack(&[&x0, &Matrix::from_element(1, t, 1.0)]);
    let rp = pinv(&regress, Tolerance::Auto)?;
    let ae = hstack(&ds.states[1..=t]) * &rp;
    let cr = hstack(&ds.outputs) * &rp;
    let a = ae.columns(0, n).into_owned();
    let e = ae.column(n).into_owned();
    let c = cr.columns(0, n).into_owned();
    let r = cr.column(n).into_owned();
    let mut state_residual = 0.0f64;
    let mut output_residual = 0.0f64;
    for k in 0..t {
        let x = &ds.states[k];
        state_residual = state_residual.max((&ds.states[k + 1] - &a * x - &e).norm());
        output_residual = output_residual.max((&ds.outputs[k] - &c * x - &r).norm());
    }
    debug_assert_eq!(r.len(), p);
    Ok(IdentifiedModel {
        a,
        e,
        c,
        r,
        state_residual,
        output_residual,
    })
}

impl IdentifiedModel {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct EskfParams {
    pub q: Matrix,
    pub r: Matrix,
    pub p0: Matrix,
}

impl EskfParams {
    /// `Q = q I_n`, `R = r I_p`, `P0 = p0 I_n`.
    pub fn isotropic(n: usize, p: usize, q: f64, r: f64, p0: f64) -> Result<Self> {
        Self::new(
            Matrix::identity(n, n) * q,
            Matrix::identity(p, p) * r,
            Matrix::identity(n, n) * p0,
        )
    }

    pub fn new(q: Matrix, r: Matrix, p0: Matrix) -> Result<Self> {
        for (name, m) in [("Q", &q), ("R", &r), ("P0", &p0)] {
            if numerics::asymmetry(m) > 1e-12 * m.amax().max(1.0) || numerics::sym_eig_min(m)? <= 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be symmetric positive definite")));
            }
        }
        Ok(Self { q, r, p0 })
    }
}

#[derive(Debug, Clone)]
pub struct EskfStep {
    pub t: usize,
    pub xhat: Vector,
    pub innovation: Vector,
    /// Trace of the predicted error covariance.
    pub covariance_trace: f64,
}

/// Kalman filter on the identified model. The nominal state is propagated
/// through the model; the error state carries the covariance and is injected
/// and reset after each update.
#[derive(Debug, Clone)]
pub struct Eskf {
    model: IdentifiedModel,
    params: EskfParams,
    nominal: Vector,
    cov: Matrix,
    t: usize,
}

impl Eskf {
    pub fn new(model: IdentifiedModel, params: EskfParams, x0: Vector) -> Result<Self> {
        let n = model.state_dim();
        if x0.len() != n || params.q.nrows() != n || params.p0.nrows() != n || params.r.nrows() != model.output_dim() {
            return Err(Error::Dimension("filter dimensions".into()));
        }
        Ok(Self {
            cov: params.p0.clone(),
            model,
            params,
            nominal: x0,
            t: 0,
        })
    }

    pub fn step(&mut self, y: &Vector) -> Result<EskfStep> {
        let m = &self.model;
        let n = m.state_dim();
        if y.len() != m.output_dim() {
            return Err(Error::Dimension("output sample".into()));
        }
        let innovation = y - (&m.c * &self.nominal + &m.r);
        let s = &m.c * &self.cov * m.c.transpose() + &self.params.r;
        let s_inv = numerics::symmetrize(&s)
            .cholesky()
            .ok_or(Error::Covariance { step: self.t })?
            .inverse();
        let gain = &self.cov * m.c.transpose() * s_inv;
        let delta = &gain * &innovation;
        let ikc = Matrix::identity(n, n) - &gain * &m.c;
        let updated = &ikc * &self.cov * ikc.transpose() + &gain * &self.params.r * gain.transpose();
        let injected = &self.nominal + delta;
        self.nominal = &m.a * injected + &m.e;
        let predicted = numerics::symmetrize(&(&m.a * updated * m.a.transpose() + &self.params.q));
        self.t += 1;
        if predicted.iter().any(|v| !v.is_finite()) || predicted.clone().cholesky().is_none() {
            return Err(Error::Covariance { step: self.t });
        }
        self.cov = predicted;
        Ok(EskfStep {
            t: self.t,
            xhat: self.nominal.clone(),
            innovation,
            covariance_trace: self.cov.trace(),
        })
    }

    pub fn covariance(&self) -> &Matrix {
        &self.cov
    }
}

pub fn eskf_run(model: &IdentifiedModel, params: &EskfParams, outputs: &[Vector], x0: &Vector) -> Result<Vec<EskfStep>> {
    let mut f = Eskf::new(model.clone(), params.clone(), x0.clone())?;
    outputs.iter().map(|y| f.step(y)).collect()
}

/// Sample autocorrelation of a scalar sequence at `lag`, normalized by the
/// lag-zero value.
pub fn autocorrelation(seq: &[f64], lag: usize) -> f64 {
    let n = seq.len();
    if lag >= n {
        return 0.0;
    }
    let mean = seq.iter().sum::<f64>() / n as f64;
    let c0: f64 = seq.iter().map(|v| (v - mean).powi(2)).sum();
    if c0 == 0.0 {
        return 0.0;
    }
    let c: f64 = (0..n - lag).map(|k| (seq[k] - mean) * (seq[k + lag] - mean)).sum();
    c / c0
}

/// `s^2 log s`, continued by zero at `s = 0`.
pub fn thin_plate(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else {
        s * s * s.ln()
    }
}

#[derive(Debug, Clone)]
pub struct KoopmanConfig {
    /// Total lifted dimension, state coordinates included.
    pub lift_dim: usize,
    pub seed: u64,
}

impl Default for KoopmanConfig {
    fn default() -> Self {
        Self { lift_dim: 20, seed: 7 }
    }
}

pub const GRAM_CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct KoopmanLift {
    pub centers: Vec<Vector>,
    pub a: Matrix,
    pub c: Matrix,
    pub seed: u64,
    /// Condition number of the snapshot Gram matrix.
    pub gram_condition: f64,
}

impl KoopmanLift {
    pub fn state_dim(&self) -> usize {
        self.lift_dim() - self.centers.len()
    }

    pub fn lift_dim(&self) -> usize {
        self.a.nrows()
    }

    /// `[x; phi_1(x); ...]`.
    pub fn lift(&self, x: &Vector) -> Vector {
        lift_with(&self.centers, x)
    }

    pub fn predict(&self, x: &Vector) -> Vector {
        let z = &self.a * self.lift(x);
        z.rows(0, self.state_dim()).into_owned()
    }
}

fn lift_with(centers: &[Vector], x: &Vector) -> Vector {
    let n = x.len();
    Vector::from_fn(n + centers.len(), |i, _| {
        if i < n {
            x[i]
        } else {
            thin_plate((x - &centers[i - n]).norm())
        }
    })
}

/// Centers drawn uniformly over the bounding box of the historical states.
pub fn draw_centers(ds: &TrajectoryDataset, count: usize, seed: u64) -> Vec<Vector> {
    let n = ds.state_dim();
    let mut lo = ds.states[0].clone();
    let mut hi = ds.states[0].clone();
    for x in &ds.states {
        lo = lo.inf(x);
        hi = hi.sup(x);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            Vector::from_fn(n, |i, _| {
                if hi[i] > lo[i] {
                    rng.random_range(lo[i]..=hi[i])
                } else {
                    lo[i]
                }
            })
        })
        .collect()
}

pub fn edmd_fit(ds: &TrajectoryDataset, cfg: &KoopmanConfig) -> Result<KoopmanLift> {
    let n = ds.state_dim();
    if cfg.lift_dim < n {
        return Err(Error::InvalidArgument(format!(
            "lift dimension {} below state dimension {n}",
            cfg.lift_dim
        )));
    }
    if ds.len() < cfg.lift_dim + 1 {
        return Err(Error::TooShort {
            len: ds.len(),
            bound: format!("EDMD needs at least lift dimension + 1 = {} samples", cfg.lift_dim + 1),
        });
    }
    let centers = draw_centers(ds, cfg.lift_dim - n, cfg.seed);
    fit_with_centers(ds, centers, cfg.seed)
}

/// EDMD least squares for given centers.
pub fn fit_with_centers(ds: &TrajectoryDataset, centers: Vec<Vector>, seed: u64) -> Result<KoopmanLift> {
    let t = ds.len();
    let lifted: Vec<Vector> = ds.states.iter().map(|x| lift_with(&centers, x)).collect();
    let z0 = hstack(&lifted[..t]);
    let z1 = hstack(&lifted[1..=t]);
    let f = svd(&z0)?;
    let smax = f.sigma_max();
    let smin = f.singular_values.iter().copied().fold(f64::INFINITY, f64::min);
    let gram_condition = if smin > 0.0 { (smax / smin).powi(2) } else { f64::INFINITY };
    if !(gram_condition <= GRAM_CONDITION_LIMIT) {
        return Err(Error::IllConditioned {
            what: format!("EDMD snapshot Gram (seed {seed}); try another seed or a smaller lift"),
            cond: gram_condition,
        });
    }
    let z0p = numerics::pinv_from_svd(&f, z0.nrows(), z0.ncols(), Tolerance::Absolute(0.0));
    let a = z1 * &z0p;
    let c = hstack(&ds.outputs) * &z0p;
    Ok(KoopmanLift {
        centers,
        a,
        c,
        seed,
        gram_condition,
    })
}

#[derive(Debug, Clone)]
pub struct KmheParams {
    pub rho: f64,
    pub mu: f64,
    pub horizon: usize,
    /// Prior on the physical state at `t = 0`; lifted before use.
    pub prior: Vector,
    pub qp: QpSettings,
}

impl KmheParams {
    pub fn new(rho: f64, mu: f64, horizon: usize, prior: Vector) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) || !(mu > 0.0) || horizon == 0 {
            return Err(Error::InvalidArgument("rho in (0,1), mu > 0 and M >= 1 required".into()));
        }
        let k = contraction(rho, horizon);
        if k >= 1.0 {
            return Err(Error::Contraction {
                rho,
                horizon,
                kappa_m: k,
            });
        }
        Ok(Self {
            rho,
            mu,
            horizon,
            prior,
            qp: QpSettings::default(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct KmheStep {
    pub t: usize,
    pub xhat: Vector,
    pub objective: f64,
    pub qp_iterations: usize,
}

/// Moving horizon estimation over the lifted linear model with the same
/// cost as the data-driven estimator. The prior term acts on the whole
/// lifted window start.
pub struct Kmhe {
    lift: KoopmanLift,
    params: KmheParams,
    outputs: Vec<Vector>,
    /// Lifted estimates `zh(0), zh(1), ...`.
    lifted: Vec<Vector>,
    powers: Vec<Matrix>,
    warm: Vec<Option<WarmStart>>,
}

impl Kmhe {
    pub fn new(lift: KoopmanLift, params: KmheParams) -> Result<Self> {
        if params.prior.len() != lift.state_dim() {
            return Err(Error::Dimension("prior".into()));
        }
        let nz = lift.lift_dim();
        let mut powers = vec![Matrix::identity(nz, nz)];
        for k in 1..=params.horizon {
            powers.push(&lift.a * &powers[k - 1]);
        }
        Ok(Self {
            lifted: vec![lift.lift(&params.prior)],
            warm: vec![None; params.horizon],
            powers,
            lift,
            params,
            outputs: Vec::new(),
        })
    }

    pub fn step(&mut self, y: &Vector) -> Result<KmheStep> {
        let p = self.lift.c.nrows();
        let nz = self.lift.lift_dim();
        if y.len() != p {
            return Err(Error::Dimension("output sample".into()));
        }
        self.outputs.push(y.clone());
        let t = self.outputs.len();
        let m = t.min(self.params.horizon);
        let prior = self.lifted[t - m].clone();
        let (rho, mu) = (self.params.rho, self.params.mu);
        // Variables: z(t-m), then vh(t-m..t-1) oldest first.
        let dim = nz + m * p;
        let mut hess = Matrix::zeros(dim, dim);
        let mut lin = Vector::zeros(dim);
        let wp = 2.0 * rho.powi(m as i32);
        for i in 0..nz {
            hess[(i, i)] = 2.0 * wp;
        }
        lin.rows_mut(0, nz).copy_from(&(&prior * (-2.0 * wp)));
        let mut a_eq = Matrix::zeros(m * p, dim);
        let mut b_eq = Vector::zeros(m * p);
        for k in 0..m {
            // Sample k is y(t-m+k), weighted rho^(j-1) with j = m - k.
            let w = rho.powi((m - k - 1) as i32) * mu;
            for i in 0..p {
                let idx = nz + k * p + i;
                hess[(idx, idx)] = 2.0 * w;
            }
            let ca = &self.lift.c * &self.powers[k];
            a_eq.view_mut((k * p, 0), (p, nz)).copy_from(&ca);
            for i in 0..p {
                a_eq[(k * p + i, nz + k * p + i)] = 1.0;
            }
            b_eq.rows_mut(k * p, p).copy_from(&self.outputs[t - m + k]);
        }
        let inf = Vector::from_element(dim, f64::INFINITY);
        let qp = QpProblem::new(hess, lin, a_eq, b_eq, -&inf, inf)?;
        let sol = solve_warm(&qp, &self.params.qp, self.warm[m - 1].as_ref());
        match sol.status {
            QpStatus::Optimal => {}
            QpStatus::Infeasible => {
                return Err(Error::QpInfeasible {
                    t,
                    diagnostic: "lifted window problem".into(),
                })
            }
            QpStatus::MaxIter => {
                return Err(Error::QpMaxIter {
                    t,
                    primal: sol.primal_residual,
                    dual: sol.dual_residual,
                })
            }
        }
        self.warm[m - 1] = Some(WarmStart {
            x: sol.x.clone(),
            y: sol.y.clone(),
        });
        let z_start = sol.x.rows(0, nz).into_owned();
        let z_now = &self.powers[m] * &z_start;
        if z_now.iter().any(|v| !v.is_finite()) {
            return Err(Error::Blowup { step: t });
        }
        let xhat = z_now.rows(0, self.lift.state_dim()).into_owned();
        self.lifted.push(z_now);
        // Cost without the constant term of the prior.
        let objective = sol.objective + wp * prior.norm_squared();
        Ok(KmheStep {
            t,
            xhat,
            objective,
            qp_iterations: sol.iterations,
        })
    }
}

pub fn kmhe_run(lift: &KoopmanLift, params: &KmheParams, outputs: &[Vector]) -> Result<Vec<KmheStep>> {
    let mut est = Kmhe::new(lift.clone(), params.clone())?;
    outputs.iter().map(|y| est.step(y)).collect()
}
