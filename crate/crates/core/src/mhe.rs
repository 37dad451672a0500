//! Data-driven moving horizon estimation.
//!
//! At time `t` the estimator solves, over a window of `m = min(t, M)` past
//! outputs,
//!
//! ```text
//! min  2 rho^m |xh(t-m) - xbar|^2 + sum_{j=1..m} rho^(j-1) mu |vh(t-j)|^2
//! s.t. [H_m(y); H_{m+1}(x); 1'] alpha = [y - vh; xh; 1]
//! ```
//!
//! with the Hankel matrices built from one recorded trajectory. The column
//! weights `alpha` are reparametrized through a thin SVD of the stack,
//! `alpha = V_r beta`, which is exact for every feasible point and keeps the
//! QP small. A tiny Tikhonov term on `beta` selects the minimum-norm `alpha`.

use crate::behavioral::{build_stack, StackOptions, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::numerics::{concat, pinv, svd, Matrix, Tolerance, Vector};
use crate::qp::{solve_warm, QpProblem, QpSettings, QpStatus, WarmStart};

/// State constraint set applied to every window state.
#[derive(Debug, Clone, PartialEq)]
pub enum StateSet {
    None,
    Box { lower: Vector, upper: Vector },
    /// Box of the given half-width around `H_{m+1}(x) H_m(y)^+ y_window`.
    DataCentered { half_width: Vector },
}

/// Noise constraint set `|vh_i| <= bound_i`.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSet {
    None,
    Box { bound: Vector },
}

#[derive(Debug, Clone)]
pub struct MheParams {
    pub rho: f64,
    pub mu: f64,
    pub horizon: usize,
    pub prior: Vector,
    pub state_set: StateSet,
    pub noise_set: NoiseSet,
    /// Weight of `|alpha|^2`; zero disables it.
    pub epsilon: f64,
    pub stack_tol: Tolerance,
    pub qp: QpSettings,
}

impl MheParams {
    /// Validates `rho in (0,1)`, `mu > 0`, `M >= 1` and the contraction
    /// condition `4 rho^M < 1`.
    pub fn new(rho: f64, mu: f64, horizon: usize, prior: Vector) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::InvalidArgument(format!("rho must lie in (0, 1), got {rho}")));
        }
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::InvalidArgument(format!("mu must be positive, got {mu}")));
        }
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        let kappa_m = contraction(rho, horizon);
        if kappa_m >= 1.0 {
            return Err(Error::Contraction {
                rho,
                horizon,
                kappa_m,
            });
        }
        Ok(Self {
            rho,
            mu,
            horizon,
            prior,
            state_set: StateSet::None,
            noise_set: NoiseSet::None,
            epsilon: 1e-9,
            stack_tol: Tolerance::Auto,
            qp: QpSettings::default(),
        })
    }

    /// `kappa^M = 4 rho^M`.
    pub fn contraction(&self) -> f64 {
        contraction(self.rho, self.horizon)
    }

    /// Per-step rate `kappa = (4 rho^M)^(1/M)`.
    pub fn kappa(&self) -> f64 {
        self.contraction().powf(1.0 / self.horizon as f64)
    }

    /// Requires `rho in (rho0, 1)` and `mu > mu0` from a certified synthesis.
    pub fn require_certified(&self, rho0: f64, mu0: f64) -> Result<()> {
        if self.rho <= rho0 {
            return Err(Error::BelowCertified(format!(
                "rho = {} must exceed rho0 = {rho0}",
                self.rho
            )));
        }
        if self.mu <= mu0 {
            return Err(Error::BelowCertified(format!(
                "mu = {} must exceed mu0 = {mu0}",
                self.mu
            )));
        }
        Ok(())
    }
}

pub fn contraction(rho: f64, horizon: usize) -> f64 {
    4.0 * rho.powi(horizon as i32)
}

/// Precomputed reduced stack for one window length.
#[derive(Debug, Clone)]
struct WindowModel {
    depth: usize,
    /// `U_r Sigma_r` split by row block.
    g_y: Matrix,
    g_x: Matrix,
    g_1: Matrix,
    /// `V_r`, mapping `beta` back to `alpha`.
    v_r: Matrix,
    /// `H_{m+1}(x) H_m(y)^+` for the data-centered box.
    center_map: Option<Matrix>,
}

impl WindowModel {
    fn build(hist: &TrajectoryDataset, depth: usize, params: &MheParams) -> Result<Self> {
        let stack = build_stack(
            hist,
            depth,
            StackOptions {
                tol: params.stack_tol,
                allow_rank_deficient: false,
            },
        )?;
        let k = stack.stacked();
        let f = svd(&k)?;
        let r = f.rank(k.nrows(), k.ncols(), params.stack_tol);
        let mut g = f.u.columns(0, r).into_owned();
        for j in 0..r {
            g.column_mut(j).scale_mut(f.singular_values[j]);
        }
        let v_r = f.v_t.rows(0, r).transpose();
        let (ny, nx) = (stack.y_block.nrows(), stack.x_block.nrows());
        let center_map = match params.state_set {
            StateSet::DataCentered { .. } => {
                Some(&stack.x_block * pinv(&stack.y_block, params.stack_tol)?)
            }
            _ => None,
        };
        Ok(Self {
            depth,
            g_y: g.rows(0, ny).into_owned(),
            g_x: g.rows(ny, nx).into_owned(),
            g_1: g.rows(ny + nx, 1).into_owned(),
            v_r,
            center_map,
        })
    }

    fn rank(&self) -> usize {
        self.g_y.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct MheStepResult {
    pub t: usize,
    pub xhat: Vector,
    /// `xh(t-m|t), ..., xh(t|t)`.
    pub window_states: Vec<Vector>,
    /// `vh(t-m|t), ..., vh(t-1|t)`.
    pub window_noise: Vec<Vector>,
    pub alpha: Vector,
    /// Value of the estimation cost (without the Tikhonov term).
    pub objective: f64,
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
    /// Prior used for the window start.
    pub prior: Vector,
    pub window_len: usize,
}

/// Receding-horizon estimator state.
#[derive(Debug, Clone)]
pub struct DdMhe {
    params: MheParams,
    windows: Vec<WindowModel>,
    n: usize,
    p: usize,
    outputs: Vec<Vector>,
    /// Published estimates, `estimates[0]` is the prior `xbar(0)`.
    estimates: Vec<Vector>,
    warm: Vec<Option<WarmStart>>,
}

impl DdMhe {
    /// Precomputes reduced stacks for window lengths `1..=M`; fails if the
    /// data do not satisfy the rank condition for any of them.
    pub fn new(hist: &TrajectoryDataset, params: MheParams) -> Result<Self> {
        let n = hist.state_dim();
        let p = hist.output_dim();
        if params.prior.len() != n {
            return Err(Error::Dimension(format!(
                "prior has {} entries, state dimension is {n}",
                params.prior.len()
            )));
        }
        match &params.state_set {
            StateSet::Box { lower, upper } if lower.len() != n || upper.len() != n => {
                return Err(Error::Dimension("state box".into()))
            }
            StateSet::DataCentered { half_width } if half_width.len() != n => {
                return Err(Error::Dimension("state box half-width".into()))
            }
            _ => {}
        }
        if let NoiseSet::Box { bound } = &params.noise_set {
            if bound.len() != p {
                return Err(Error::Dimension("noise box".into()));
            }
        }
        let windows = (1..=params.horizon)
            .map(|m| {
                WindowModel::build(hist, m, &params).map_err(|e| e.stage(format!("window length {m}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let estimates = vec![params.prior.clone()];
        Ok(Self {
            warm: vec![None; params.horizon],
            params,
            windows,
            n,
            p,
            outputs: Vec::new(),
            estimates,
        })
    }

    pub fn params(&self) -> &MheParams {
        &self.params
    }

    /// Current time index `t` (number of outputs consumed).
    pub fn time(&self) -> usize {
        self.outputs.len()
    }

    pub fn estimates(&self) -> &[Vector] {
        &self.estimates
    }

    /// Retained rank of the reduced stack for window length `m`.
    pub fn stack_rank(&self, m: usize) -> Option<usize> {
        self.windows.get(m.checked_sub(1)?).map(WindowModel::rank)
    }

    /// Prior anchor for the window starting at `t - m`.
    pub fn prior_for(&self, t: usize) -> Vector {
        let m = t.min(self.params.horizon);
        if t <= self.params.horizon {
            self.params.prior.clone()
        } else {
            self.estimates[t - m].clone()
        }
    }

    /// Consumes `y(t-1)` and publishes `xh(t)`.
    pub fn step(&mut self, y_new: &Vector) -> Result<MheStepResult> {
        if y_new.len() != self.p {
            return Err(Error::Dimension(format!(
                "output has {} entries, expected {}",
                y_new.len(),
                self.p
            )));
        }
        self.outputs.push(y_new.clone());
        let t = self.outputs.len();
        let m = t.min(self.params.horizon);
        let prior = self.prior_for(t);
        let y_window = concat(&self.outputs[t - m..t]);
        let wm = &self.windows[m - 1];
        let (qp, layout) = assemble(wm, &y_window, &prior, &self.params, self.n, self.p)?;
        let sol = solve_warm(&qp, &self.params.qp, self.warm[m - 1].as_ref());
        match sol.status {
            QpStatus::Optimal => {}
            QpStatus::Infeasible => {
                return Err(Error::QpInfeasible {
                    t,
                    diagnostic: format!(
                        "window length {m}; the state or noise constraint set excludes every \
                         data-consistent trajectory, consider widening it"
                    ),
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
        let beta = sol.x.rows(0, layout.r).into_owned();
        let window_states: Vec<Vector> = (0..=m)
            .map(|k| sol.x.rows(layout.r + k * self.n, self.n).into_owned())
            .collect();
        let v_off = layout.r + (m + 1) * self.n;
        let window_noise: Vec<Vector> = (0..m)
            .map(|k| sol.x.rows(v_off + k * self.p, self.p).into_owned())
            .collect();
        let objective = estimation_cost(&window_states[0], &prior, &window_noise, &self.params);
        let xhat = window_states[m].clone();
        self.estimates.push(xhat.clone());
        Ok(MheStepResult {
            t,
            xhat,
            window_states,
            window_noise,
            alpha: &wm.v_r * beta,
            objective,
            qp_status: sol.status,
            qp_iterations: sol.iterations,
            prior,
            window_len: m,
        })
    }
}

struct Layout {
    r: usize,
}

/// Estimation cost `2 rho^m |x0 - xbar|^2 + sum rho^(j-1) mu |vh(t-j)|^2`;
/// `noise` is ordered oldest first.
pub fn estimation_cost(x0: &Vector, prior: &Vector, noise: &[Vector], params: &MheParams) -> f64 {
    let m = noise.len();
    let mut j_l = 2.0 * params.rho.powi(m as i32) * (x0 - prior).norm_squared();
    for (k, v) in noise.iter().enumerate() {
        let j = m - k;
        j_l += params.rho.powi(j as i32 - 1) * params.mu * v.norm_squared();
    }
    j_l
}

/// Builds the window QP in variables `(beta, xh window, vh window)`.
fn assemble(
    wm: &WindowModel,
    y_window: &Vector,
    prior: &Vector,
    params: &MheParams,
    n: usize,
    p: usize,
) -> Result<(QpProblem, Layout)> {
    let m = wm.depth;
    if y_window.len() != m * p {
        return Err(Error::Dimension(format!(
            "window holds {} values, expected {}",
            y_window.len(),
            m * p
        )));
    }
    let r = wm.rank();
    let nx = (m + 1) * n;
    let nv = m * p;
    let dim = r + nx + nv;
    let rho = params.rho;

    let mut pm = Matrix::zeros(dim, dim);
    let mut q = Vector::zeros(dim);
    for i in 0..r {
        pm[(i, i)] = 2.0 * params.epsilon;
    }
    let w0 = 4.0 * rho.powi(m as i32);
    for i in 0..n {
        pm[(r + i, r + i)] = w0;
        q[r + i] = -w0 * prior[i];
    }
    for k in 0..m {
        let j = m - k;
        let w = 2.0 * rho.powi(j as i32 - 1) * params.mu;
        for i in 0..p {
            let idx = r + nx + k * p + i;
            pm[(idx, idx)] = w;
        }
    }

    let rows = nv + nx + 1;
    let mut a = Matrix::zeros(rows, dim);
    let mut b = Vector::zeros(rows);
    a.view_mut((0, 0), (nv, r)).copy_from(&wm.g_y);
    for i in 0..nv {
        a[(i, r + nx + i)] = 1.0;
    }
    b.rows_mut(0, nv).copy_from(y_window);
    a.view_mut((nv, 0), (nx, r)).copy_from(&wm.g_x);
    for i in 0..nx {
        a[(nv + i, r + i)] = -1.0;
    }
    a.view_mut((nv + nx, 0), (1, r)).copy_from(&wm.g_1);
    b[nv + nx] = 1.0;

    let mut lower = Vector::from_element(dim, f64::NEG_INFINITY);
    let mut upper = Vector::from_element(dim, f64::INFINITY);
    match &params.state_set {
        StateSet::None => {}
        StateSet::Box { lower: lo, upper: hi } => {
            for k in 0..=m {
                for i in 0..n {
                    lower[r + k * n + i] = lo[i];
                    upper[r + k * n + i] = hi[i];
                }
            }
        }
        StateSet::DataCentered { half_width } => {
            let center = wm.center_map.as_ref().expect("built with data-centered set") * y_window;
            for k in 0..=m {
                for i in 0..n {
                    let c = center[k * n + i];
                    lower[r + k * n + i] = c - half_width[i];
                    upper[r + k * n + i] = c + half_width[i];
                }
            }
        }
    }
    if let NoiseSet::Box { bound } = &params.noise_set {
        for k in 0..m {
            for i in 0..p {
                lower[r + nx + k * p + i] = -bound[i];
                upper[r + nx + k * p + i] = bound[i];
            }
        }
    }
    Ok((QpProblem::new(pm, q, a, b, lower, upper)?, Layout { r }))
}

#[derive(Debug, Clone)]
pub struct MheRun {
    pub steps: Vec<MheStepResult>,
}

impl MheRun {
    /// `xh(1), ..., xh(T_f)`.
    pub fn estimates(&self) -> Vec<Vector> {
        self.steps.iter().map(|s| s.xhat.clone()).collect()
    }
}

/// Runs the estimator over `outputs = y(0), ..., y(T_f - 1)`.
pub fn run(hist: &TrajectoryDataset, outputs: &[Vector], params: MheParams) -> Result<MheRun> {
    let mut est = DdMhe::new(hist, params)?;
    let steps = outputs
        .iter()
        .map(|y| est.step(y))
        .collect::<Result<Vec<_>>>()?;
    Ok(MheRun { steps })
}

/// Truth over one estimation window, for the M-step Lyapunov certificate.
#[derive(Debug, Clone)]
pub struct WindowTruth {
    pub x_t: Vector,
    pub x_start: Vector,
    /// `w(t-1), ..., w(t-m)`.
    pub w: Vec<Vector>,
    /// `v(t-1), ..., v(t-m)`.
    pub v: Vec<Vector>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `|x(t) - xh(t)|^2 <= 4 rho^m |x(t-m) - xbar|^2
///   + sum_j rho^(j-1) mu (|w(t-j)|^2 + 2 |v(t-j)|^2)`.
pub fn lyapunov_check(truth: &WindowTruth, xhat: &Vector, prior: &Vector, rho: f64, mu: f64) -> LyapunovCheck {
    let m = truth.w.len();
    let lhs = (&truth.x_t - xhat).norm_squared();
    let mut rhs = 4.0 * rho.powi(m as i32) * (&truth.x_start - prior).norm_squared();
    for j in 1..=m {
        rhs += rho.powi(j as i32 - 1)
            * mu
            * (truth.w[j - 1].norm_squared() + 2.0 * truth.v[j - 1].norm_squared());
    }
    LyapunovCheck {
        lhs,
        rhs,
        holds: lhs <= rhs * (1.0 + 1e-8),
    }
}

/// `(sqrt k)^t e0 + sum_{j<t} (sqrt k)^(t-1-j) sqrt(mu) (|w(j)| + sqrt2 |v(j)|)`.
pub fn rges_bound(t: usize, e0: f64, w_norms: &[f64], v_norms: &[f64], kappa: f64, mu: f64) -> f64 {
    let sk = kappa.sqrt();
    let mut bound = sk.powi(t as i32) * e0;
    for j in 0..t {
        bound += sk.powi((t - 1 - j) as i32)
            * mu.sqrt()
            * (w_norms[j] + std::f64::consts::SQRT_2 * v_norms[j]);
    }
    bound
}

/// Running form of [`rges_bound`]: `B(t) = sqrt(k) B(t-1) + sqrt(mu)(|w| + sqrt2 |v|)`.
#[derive(Debug, Clone, Copy)]
pub struct RgesAccumulator {
    sqrt_kappa: f64,
    sqrt_mu: f64,
    pub bound: f64,
}

impl RgesAccumulator {
    pub fn new(e0: f64, kappa: f64, mu: f64) -> Self {
        Self {
            sqrt_kappa: kappa.sqrt(),
            sqrt_mu: mu.sqrt(),
            bound: e0,
        }
    }

    pub fn push(&mut self, w_norm: f64, v_norm: f64) -> f64 {
        self.bound = self.sqrt_kappa * self.bound
            + self.sqrt_mu * (w_norm + std::f64::consts::SQRT_2 * v_norm);
        self.bound
    }
}
