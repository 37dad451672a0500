//! Convex QP solver: `min 1/2 x'Px + q'x  s.t.  A_eq x = b_eq,  lb <= x <= ub`.
//!
//! Operator splitting (ADMM with over-relaxation) on the stacked constraint
//! `l <= [A_eq; I_box] x <= u`, followed by active-set polishing: the
//! constraints the iterates flag as active are solved as an equality KKT
//! system and the result is accepted only if it passes the full optimality
//! check.

use nalgebra::Cholesky;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub p: Matrix,
    pub q: Vector,
    pub a_eq: Matrix,
    pub b_eq: Vector,
    /// Per-variable bounds; `-inf`/`+inf` for absent.
    pub lower: Vector,
    pub upper: Vector,
}

impl QpProblem {
    pub fn new(
        p: Matrix,
        q: Vector,
        a_eq: Matrix,
        b_eq: Vector,
        lower: Vector,
        upper: Vector,
    ) -> Result<Self> {
        let n = q.len();
        if p.shape() != (n, n) {
            return Err(Error::Dimension(format!("P is {:?}, expected {n}x{n}", p.shape())));
        }
        if a_eq.ncols() != n || a_eq.nrows() != b_eq.len() {
            return Err(Error::Dimension("equality system shape".into()));
        }
        if lower.len() != n || upper.len() != n {
            return Err(Error::Dimension("bound vectors".into()));
        }
        let scale = p.amax().max(1.0);
        let asym = crate::numerics::asymmetry(&p);
        if asym > 1e-10 * scale {
            return Err(Error::NotSymmetric { asymmetry: asym });
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
            return Err(Error::InvalidArgument("lower bound exceeds upper bound".into()));
        }
        Ok(Self {
            p,
            q,
            a_eq,
            b_eq,
            lower,
            upper,
        })
    }

    /// Unconstrained problem of dimension `n`.
    pub fn unconstrained(p: Matrix, q: Vector) -> Result<Self> {
        let n = q.len();
        Self::new(
            p,
            q,
            Matrix::zeros(0, n),
            Vector::zeros(0),
            Vector::from_element(n, f64::NEG_INFINITY),
            Vector::from_element(n, f64::INFINITY),
        )
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn objective(&self, x: &Vector) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    fn bounded(&self) -> Vec<usize> {
        (0..self.dim())
            .filter(|&i| self.lower[i].is_finite() || self.upper[i].is_finite())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vector,
    /// Multipliers of `[A_eq; I_box]` in solver row order.
    pub y: Vector,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub objective: f64,
    pub polished: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct QpSettings {
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub max_iter: usize,
    pub sigma: f64,
    pub relaxation: f64,
    pub rho_update_every: usize,
    pub infeasibility_tol: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol_primal: 1e-8,
            tol_dual: 1e-8,
            max_iter: 20_000,
            sigma: 1e-6,
            relaxation: 1.6,
            rho_update_every: 50,
            infeasibility_tol: 1e-9,
        }
    }
}

/// Warm-start point: primal `x` and stacked multipliers `y`.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub x: Vector,
    pub y: Vector,
}

pub fn solve(p: &QpProblem, settings: &QpSettings) -> QpSolution {
    solve_warm(p, settings, None)
}

struct Stacked {
    a: Matrix,
    l: Vector,
    u: Vector,
    eq_rows: usize,
}

fn stack(p: &QpProblem) -> Stacked {
    let n = p.dim();
    let boxed = p.bounded();
    let m = p.a_eq.nrows() + boxed.len();
    let mut a = Matrix::zeros(m, n);
    let mut l = Vector::zeros(m);
    let mut u = Vector::zeros(m);
    a.view_mut((0, 0), p.a_eq.shape()).copy_from(&p.a_eq);
    l.rows_mut(0, p.b_eq.len()).copy_from(&p.b_eq);
    u.rows_mut(0, p.b_eq.len()).copy_from(&p.b_eq);
    for (k, &i) in boxed.iter().enumerate() {
        let r = p.a_eq.nrows() + k;
        a[(r, i)] = 1.0;
        l[r] = p.lower[i];
        u[r] = p.upper[i];
    }
    Stacked {
        a,
        l,
        u,
        eq_rows: p.a_eq.nrows(),
    }
}

fn inf_norm(v: &Vector) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

struct Residuals {
    primal: f64,
    dual: f64,
    primal_scale: f64,
    dual_scale: f64,
}

fn residuals(p: &QpProblem, s: &Stacked, x: &Vector, z: &Vector, y: &Vector) -> Residuals {
    let ax = &s.a * x;
    let px = &p.p * x;
    let aty = s.a.transpose() * y;
    Residuals {
        primal: inf_norm(&(&ax - z)),
        dual: inf_norm(&(&px + &p.q + &aty)),
        primal_scale: inf_norm(&ax).max(inf_norm(z)),
        dual_scale: inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&p.q)),
    }
}

fn converged(r: &Residuals, st: &QpSettings) -> bool {
    r.primal <= st.tol_primal * (1.0 + r.primal_scale) && r.dual <= st.tol_dual * (1.0 + r.dual_scale)
}

fn rho_vector(s: &Stacked, rho: f64) -> Vector {
    Vector::from_fn(s.l.len(), |i, _| {
        if s.l[i] == s.u[i] {
            1e3 * rho
        } else if s.l[i].is_infinite() && s.u[i].is_infinite() {
            1e-6
        } else {
            rho
        }
    })
}

fn factor(p: &QpProblem, s: &Stacked, rho: &Vector, sigma: f64) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    let n = p.dim();
    let mut k = p.p.clone();
    for i in 0..n {
        k[(i, i)] += sigma;
    }
    let mut ra = s.a.clone();
    for (i, mut row) in ra.row_iter_mut().enumerate() {
        row *= rho[i];
    }
    k += s.a.transpose() * ra;
    Cholesky::new(k)
}

fn project(v: &Vector, l: &Vector, u: &Vector) -> Vector {
    Vector::from_fn(v.len(), |i, _| v[i].clamp(l[i], u[i]))
}

pub fn solve_warm(p: &QpProblem, st: &QpSettings, warm: Option<&WarmStart>) -> QpSolution {
    let s = stack(p);
    let n = p.dim();
    let m = s.l.len();
    let norm_p = p.p.amax();
    let norm_a = s.a.amax().max(1e-12);
    let mut rho_scalar = (0.1 * norm_p.max(1e-6) / (norm_a * norm_a)).clamp(1e-6, 1e6);
    let mut rho = rho_vector(&s, rho_scalar);

    let (mut x, mut y) = match warm {
        Some(w) if w.x.len() == n && w.y.len() == m => (w.x.clone(), w.y.clone()),
        _ => (Vector::zeros(n), Vector::zeros(m)),
    };
    let mut z = project(&(&s.a * &x), &s.l, &s.u);

    let mut chol = match factor(p, &s, &rho, st.sigma) {
        Some(c) => c,
        None => {
            return QpSolution {
                objective: p.objective(&x),
                x,
                y,
                status: QpStatus::MaxIter,
                primal_residual: f64::INFINITY,
                dual_residual: f64::INFINITY,
                iterations: 0,
                polished: false,
            }
        }
    };

    let alpha = st.relaxation;
    let mut last_polish_active: Option<Vec<i8>> = None;
    for iter in 1..=st.max_iter {
        let y_prev = y.clone();
        let rhs = &x * st.sigma - &p.q + s.a.transpose() * (rho.component_mul(&z) - &y);
        let x_tilde = chol.solve(&rhs);
        let z_tilde = &s.a * &x_tilde;
        let x_next = &x_tilde * alpha + &x * (1.0 - alpha);
        let z_relaxed = &z_tilde * alpha + &z * (1.0 - alpha);
        let z_next = project(&(&z_relaxed + y.component_div(&rho)), &s.l, &s.u);
        y += rho.component_mul(&(&z_relaxed - &z_next));
        x = x_next;
        z = z_next;

        let r = residuals(p, &s, &x, &z, &y);
        if converged(&r, st) {
            // Polishing sharpens the active set; keep the ADMM point if it fails.
            if let Some(sol) = polish(p, &s, &x, &z, &y, &rho, st, iter) {
                return sol;
            }
            return QpSolution {
                objective: p.objective(&x),
                x,
                y,
                status: QpStatus::Optimal,
                primal_residual: r.primal,
                dual_residual: r.dual,
                iterations: iter,
                polished: false,
            };
        }

        // Try polishing whenever the guessed active set changes.
        let active = active_set(&s, &z, &y, &rho);
        if last_polish_active.as_ref() != Some(&active) {
            if let Some(sol) = polish(p, &s, &x, &z, &y, &rho, st, iter) {
                return sol;
            }
            last_polish_active = Some(active);
        }

        if let Some(diag) = primal_infeasible(&s, &(&y - &y_prev), st.infeasibility_tol) {
            let _ = diag;
            return QpSolution {
                objective: p.objective(&x),
                x,
                y,
                status: QpStatus::Infeasible,
                primal_residual: r.primal,
                dual_residual: r.dual,
                iterations: iter,
                polished: false,
            };
        }

        if iter % st.rho_update_every == 0 {
            let pr = r.primal / (r.primal_scale + 1e-30);
            let dr = r.dual / (r.dual_scale + 1e-30);
            let ratio = (pr / dr.max(1e-30)).sqrt();
            if !(0.2..=5.0).contains(&ratio) {
                rho_scalar = (rho_scalar * ratio).clamp(1e-6, 1e6);
                rho = rho_vector(&s, rho_scalar);
                if let Some(c) = factor(p, &s, &rho, st.sigma) {
                    chol = c;
                }
            }
        }
    }
    let r = residuals(p, &s, &x, &z, &y);
    QpSolution {
        objective: p.objective(&x),
        x,
        y,
        status: QpStatus::MaxIter,
        primal_residual: r.primal,
        dual_residual: r.dual,
        iterations: st.max_iter,
        polished: false,
    }
}

/// -1 lower active, +1 upper active, 0 inactive, 2 equality.
fn active_set(s: &Stacked, z: &Vector, y: &Vector, rho: &Vector) -> Vec<i8> {
    (0..s.l.len())
        .map(|i| {
            if i < s.eq_rows || s.l[i] == s.u[i] {
                2
            } else if z[i] - s.l[i] < -y[i] / rho[i] {
                -1
            } else if s.u[i] - z[i] < y[i] / rho[i] {
                1
            } else {
                0
            }
        })
        .collect()
}

/// Farkas-type certificate on the multiplier increment.
fn primal_infeasible(s: &Stacked, dy: &Vector, eps: f64) -> Option<String> {
    let ndy = inf_norm(dy);
    if ndy < 1e-30 {
        return None;
    }
    let aty = inf_norm(&(s.a.transpose() * dy));
    let mut support = 0.0;
    for i in 0..dy.len() {
        if dy[i] > 0.0 {
            if s.u[i].is_infinite() {
                return None;
            }
            support += s.u[i] * dy[i];
        } else if dy[i] < 0.0 {
            if s.l[i].is_infinite() {
                return None;
            }
            support += s.l[i] * dy[i];
        }
    }
    if aty <= eps * ndy && support < -eps * ndy {
        Some(format!("certificate |A'dy| = {aty:e}, support = {support:e}"))
    } else {
        None
    }
}

#[allow(clippy::too_many_arguments)]
fn polish(
    p: &QpProblem,
    s: &Stacked,
    _x: &Vector,
    z: &Vector,
    y: &Vector,
    rho: &Vector,
    st: &QpSettings,
    iter: usize,
) -> Option<QpSolution> {
    let n = p.dim();
    let active = active_set(s, z, y, rho);
    let rows: Vec<usize> = (0..active.len()).filter(|&i| active[i] != 0).collect();
    let k = rows.len();
    let mut kkt = Matrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&p.p);
    let mut rhs = Vector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-&p.q));
    for (j, &i) in rows.iter().enumerate() {
        for c in 0..n {
            kkt[(n + j, c)] = s.a[(i, c)];
            kkt[(c, n + j)] = s.a[(i, c)];
        }
        rhs[n + j] = match active[i] {
            -1 => s.l[i],
            1 => s.u[i],
            _ => s.l[i],
        };
    }
    // Regularized factorization with iterative refinement against the exact KKT.
    let delta = 1e-11 * (1.0 + p.p.amax());
    let mut reg = kkt.clone();
    for i in 0..n {
        reg[(i, i)] += delta;
    }
    for j in 0..k {
        reg[(n + j, n + j)] -= delta;
    }
    let lu = reg.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..5 {
        let res = &rhs - &kkt * &sol;
        let corr = lu.solve(&res)?;
        sol += corr;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let xp = sol.rows(0, n).into_owned();
    let mut yp = Vector::zeros(s.l.len());
    for (j, &i) in rows.iter().enumerate() {
        yp[i] = sol[n + j];
    }
    // Validate: bounds, multiplier signs, stationarity.
    let zp = &s.a * &xp;
    let scale = 1.0 + inf_norm(&zp);
    for i in 0..s.l.len() {
        if zp[i] < s.l[i] - st.tol_primal * scale || zp[i] > s.u[i] + st.tol_primal * scale {
            return None;
        }
        let ytol = st.tol_dual * (1.0 + inf_norm(&yp));
        match active[i] {
            -1 if yp[i] > ytol => return None,
            1 if yp[i] < -ytol => return None,
            _ => {}
        }
    }
    let zc = project(&zp, &s.l, &s.u);
    let r = residuals(p, s, &xp, &zc, &yp);
    if !converged(&r, st) {
        return None;
    }
    Some(QpSolution {
        objective: p.objective(&xp),
        x: xp,
        y: yp,
        status: QpStatus::Optimal,
        primal_residual: r.primal,
        dual_residual: r.dual,
        iterations: iter,
        polished: true,
    })
}
