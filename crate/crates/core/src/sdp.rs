//! Small dense semidefinite programs: minimize `c'x` subject to affine LMI
//! blocks `F0 + sum_i x_i F_i` declared positive or negative definite, plus
//! optional linear equalities.
//!
//! Log-det barrier with damped Newton steps. Equalities are eliminated through
//! a nullspace basis. A Phase-I auxiliary problem finds a strictly feasible
//! start or names the block that cannot be satisfied.

use std::ops::Range;

use nalgebra::Cholesky;

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, Tolerance, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    /// Block must be positive definite.
    Psd,
    /// Block must be negative definite.
    Nsd,
}

impl Sense {
    fn sign(self) -> f64 {
        match self {
            Sense::Psd => 1.0,
            Sense::Nsd => -1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmiBlock {
    pub name: String,
    pub sense: Sense,
    pub f0: Matrix,
    /// Sparse list of `(variable index, coefficient matrix)`.
    pub terms: Vec<(usize, Matrix)>,
}

impl LmiBlock {
    pub fn size(&self) -> usize {
        self.f0.nrows()
    }

    pub fn evaluate(&self, x: &Vector) -> Matrix {
        let mut out = self.f0.clone();
        for (i, f) in &self.terms {
            if x[*i] != 0.0 {
                out += f * x[*i];
            }
        }
        out
    }

    /// Strictness margin applied by the solver.
    pub fn delta(&self, base: f64) -> f64 {
        base * (1.0 + self.f0.amax())
    }
}

/// Minimum eigenvalue of the evaluated block, sign-adjusted so that a
/// satisfied constraint has a nonnegative margin.
pub fn lmi_margin(block: &LmiBlock, x: &Vector) -> f64 {
    let m = numerics::symmetrize(&(block.evaluate(x) * block.sense.sign()));
    numerics::sym_eig_min(&m).unwrap_or(f64::NEG_INFINITY)
}

#[derive(Debug, Clone)]
pub struct Slab {
    pub name: String,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct SdpProblem {
    pub slabs: Vec<Slab>,
    pub cost: Vec<f64>,
    pub blocks: Vec<LmiBlock>,
    pub eq_rows: Vec<(Vec<(usize, f64)>, f64)>,
}

impl SdpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn dim(&self) -> usize {
        self.cost.len()
    }

    /// Appends `len` decision variables under `name`.
    pub fn add_slab(&mut self, name: &str, len: usize) -> Range<usize> {
        let start = self.cost.len();
        self.cost.resize(start + len, 0.0);
        let range = start..start + len;
        self.slabs.push(Slab {
            name: name.to_string(),
            range: range.clone(),
        });
        range
    }

    pub fn slab(&self, name: &str) -> Option<Range<usize>> {
        self.slabs.iter().find(|s| s.name == name).map(|s| s.range.clone())
    }

    pub fn add_block(&mut self, block: LmiBlock) -> Result<()> {
        let m = block.size();
        if block.f0.ncols() != m {
            return Err(Error::Dimension(format!("block `{}` is not square", block.name)));
        }
        let check = |f: &Matrix| -> Result<()> {
            if f.shape() != (m, m) {
                return Err(Error::Dimension(format!("block `{}` term shape", block.name)));
            }
            let a = numerics::asymmetry(f);
            if a > 1e-9 * (1.0 + f.amax()) {
                return Err(Error::NotSymmetric { asymmetry: a });
            }
            Ok(())
        };
        check(&block.f0)?;
        for (i, f) in &block.terms {
            if *i >= self.dim() {
                return Err(Error::Dimension(format!(
                    "block `{}` references variable {i} of {}",
                    block.name,
                    self.dim()
                )));
            }
            check(f)?;
        }
        self.blocks.push(block);
        Ok(())
    }

    pub fn add_equality(&mut self, row: Vec<(usize, f64)>, rhs: f64) {
        self.eq_rows.push((row, rhs));
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SdpSettings {
    pub tol: f64,
    pub max_iter: usize,
    /// Base of the strictness margin `delta = margin * (1 + |F0|)`.
    pub margin: f64,
}

impl Default for SdpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 3000,
            margin: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub x: Vector,
    pub status: SdpStatus,
    pub objective: f64,
    /// `(block name, margin)` for every block.
    pub margins: Vec<(String, f64)>,
    pub iterations: usize,
    /// Duality-gap bound `m / t` of the last barrier stage.
    pub gap: f64,
    /// Most violated block when infeasible.
    pub violated: Option<String>,
}

impl SdpSolution {
    pub fn slab<'a>(&'a self, p: &SdpProblem, name: &str) -> Option<nalgebra::DVectorView<'a, f64>> {
        p.slab(name).map(|r| self.x.rows(r.start, r.len()))
    }

    pub fn min_margin(&self) -> f64 {
        self.margins.iter().map(|m| m.1).fold(f64::INFINITY, f64::min)
    }
}

/// Blocks in reduced coordinates: `G_k(z) = C_k + sum_j z_j D_kj`, required ≻ 0.
struct Reduced {
    c: Vec<Matrix>,
    d: Vec<Vec<Matrix>>,
    cost: Vector,
    x_p: Vector,
    basis: Matrix,
}

impl Reduced {
    fn to_full(&self, z: &Vector) -> Vector {
        &self.x_p + &self.basis * z
    }
}

fn reduce(p: &SdpProblem, margin: f64) -> Result<Reduced> {
    let n = p.dim();
    let (x_p, basis) = if p.eq_rows.is_empty() {
        (Vector::zeros(n), Matrix::identity(n, n))
    } else {
        let mut g = Matrix::zeros(p.eq_rows.len(), n);
        let mut h = Vector::zeros(p.eq_rows.len());
        for (r, (row, rhs)) in p.eq_rows.iter().enumerate() {
            for &(i, v) in row {
                g[(r, i)] += v;
            }
            h[r] = *rhs;
        }
        let f = numerics::svd(&g)?;
        let rank = f.rank(g.nrows(), g.ncols(), Tolerance::Auto);
        let x_p = numerics::pinv_from_svd(&f, g.nrows(), g.ncols(), Tolerance::Auto) * &h;
        let res = (&g * &x_p - &h).amax();
        if res > 1e-9 * (1.0 + h.amax()) {
            return Err(Error::InvalidArgument(format!(
                "inconsistent equality constraints (residual {res:e})"
            )));
        }
        // Nullspace from the full right singular basis.
        let full = numerics::svd(&Matrix::from_fn(n, n, |i, j| if i < g.nrows() { g[(i, j)] } else { 0.0 }))?;
        let vt = full.v_t;
        let basis = Matrix::from_fn(n, n - rank, |i, j| vt[(rank + j, i)]);
        (x_p, basis)
    };
    let k = basis.ncols();
    let mut c = Vec::with_capacity(p.blocks.len());
    let mut d = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let s = b.sense.sign();
        let m = b.size();
        let mut ck = b.evaluate(&x_p) * s;
        for i in 0..m {
            ck[(i, i)] -= b.delta(margin);
        }
        let mut dk = vec![Matrix::zeros(m, m); k];
        for (i, f) in &b.terms {
            for j in 0..k {
                let w = basis[(*i, j)];
                if w != 0.0 {
                    dk[j] += f * (s * w);
                }
            }
        }
        c.push(numerics::symmetrize(&ck));
        d.push(dk.iter().map(numerics::symmetrize).collect::<Vec<_>>());
    }
    // Rescale reduced variables so every coefficient family has unit size.
    let mut basis = basis;
    for j in 0..k {
        let w = d.iter().map(|dk: &Vec<Matrix>| dk[j].amax()).fold(0.0f64, f64::max);
        if w > 0.0 {
            basis.column_mut(j).unscale_mut(w);
            for dk in d.iter_mut() {
                dk[j].unscale_mut(w);
            }
        }
    }
    let cost = basis.transpose() * Vector::from_column_slice(&p.cost);
    Ok(Reduced {
        c,
        d,
        cost,
        x_p,
        basis,
    })
}

/// Barrier problem over variables `v`: blocks `C_k + sum_j v_j D_kj ≻ 0`.
struct Barrier<'a> {
    c: &'a [Matrix],
    d: &'a [Vec<Matrix>],
    cost: Vector,
}

impl Barrier<'_> {
    fn dim(&self) -> usize {
        self.cost.len()
    }

    fn block(&self, k: usize, v: &Vector) -> Matrix {
        let mut g = self.c[k].clone();
        for (j, dj) in self.d[k].iter().enumerate() {
            if v[j] != 0.0 {
                g += dj * v[j];
            }
        }
        g
    }

    /// `-sum log det`, or `None` outside the domain.
    fn log_barrier(&self, v: &Vector) -> Option<f64> {
        let mut total = 0.0;
        for k in 0..self.c.len() {
            let ch = Cholesky::new(self.block(k, v))?;
            let l = ch.l();
            for i in 0..l.nrows() {
                total -= 2.0 * l[(i, i)].ln();
            }
        }
        Some(total)
    }

    fn total_degree(&self) -> f64 {
        self.c.iter().map(|c| c.nrows() as f64).sum()
    }

    /// Gradient and Hessian of `t c'v - sum log det`.
    fn derivatives(&self, v: &Vector, t: f64) -> Option<(Vector, Matrix)> {
        let n = self.dim();
        let mut g = &self.cost * t;
        let mut h = Matrix::zeros(n, n);
        for k in 0..self.c.len() {
            let ch = Cholesky::new(self.block(k, v))?;
            let l = ch.l();
            let scaled: Vec<Option<Matrix>> = self.d[k]
                .iter()
                .map(|dj| {
                    if dj.amax() == 0.0 {
                        return None;
                    }
                    // L^{-1} D L^{-T}
                    let a = l.solve_lower_triangular(dj)?;
                    let b = l.solve_lower_triangular(&a.transpose())?;
                    Some(b)
                })
                .collect();
            for i in 0..n {
                let Some(mi) = &scaled[i] else { continue };
                g[i] -= mi.trace();
                for j in i..n {
                    let Some(mj) = &scaled[j] else { continue };
                    let v = mi.dot(mj);
                    h[(i, j)] += v;
                    if i != j {
                        h[(j, i)] += v;
                    }
                }
            }
        }
        Some((g, h))
    }

    fn objective(&self, v: &Vector, t: f64) -> Option<f64> {
        Some(t * self.cost.dot(v) + self.log_barrier(v)?)
    }

    /// Damped Newton centering; returns iterations used.
    fn center(
        &self,
        v: &mut Vector,
        t: f64,
        budget: usize,
        stop: &dyn Fn(&Vector) -> bool,
    ) -> Result<usize> {
        let mut used = 0;
        let budget = budget.min(MAX_CENTERING_STEPS);
        while used < budget {
            used += 1;
            let (g, h) = self
                .derivatives(v, t)
                .ok_or_else(|| Error::InvalidArgument("iterate left the barrier domain".into()))?;
            let step = newton_step(&h, &g)?;
            let decrement = -g.dot(&step);
            if decrement.is_nan() {
                return Err(Error::NonFinite);
            }
            if decrement / 2.0 < 1e-10 {
                break;
            }
            let f0 = self.objective(v, t).expect("current iterate is interior");
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial = &*v + &step * alpha;
                if let Some(f) = self.objective(&trial, t) {
                    if f <= f0 - 0.25 * alpha * decrement {
                        *v = trial;
                        // Progress below round-off of the objective.
                        accepted = f0 - f > 1e-13 * (1.0 + f0.abs());
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
            if stop(v) {
                break;
            }
        }
        Ok(used)
    }
}

fn newton_step(h: &Matrix, g: &Vector) -> Result<Vector> {
    let n = h.nrows();
    let scale = (0..n).map(|i| h[(i, i)].abs()).fold(0.0f64, f64::max).max(1e-300);
    let mut reg = 0.0;
    for _ in 0..12 {
        let mut hr = h.clone();
        for i in 0..n {
            hr[(i, i)] += reg;
        }
        if let Some(ch) = Cholesky::new(hr) {
            let s = -ch.solve(g);
            if s.iter().all(|x| x.is_finite()) {
                return Ok(s);
            }
        }
        reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
    }
    Err(Error::SdpFailed {
        radius: f64::NAN,
        reason: "singular Newton system".into(),
    })
}

const PHASE_ONE_RETRIES: usize = 4;
const MAX_CENTERING_STEPS: usize = 80;

/// One bounded Phase-I solve; returns the final `(z, s)` and iterations used.
fn phase_one(red: &Reduced, worst: f64, radius: f64, budget: usize) -> Result<(Vector, usize)> {
    let k = red.basis.ncols();
    let mut c1: Vec<Matrix> = red.c.clone();
    let mut d1: Vec<Vec<Matrix>> = red
        .d
        .iter()
        .zip(&red.c)
        .map(|(dk, ck)| {
            let mut v = dk.clone();
            v.push(Matrix::identity(ck.nrows(), ck.nrows()));
            v
        })
        .collect();
    c1.push(Matrix::from_element(1, 1, 1.0));
    let mut floor = vec![Matrix::zeros(1, 1); k];
    floor.push(Matrix::from_element(1, 1, 1.0));
    d1.push(floor);
    // [R z'; z R I] ≻ 0.
    c1.push(Matrix::identity(k + 1, k + 1) * radius);
    let mut ball = Vec::with_capacity(k + 1);
    for j in 0..k {
        let mut e = Matrix::zeros(k + 1, k + 1);
        e[(0, j + 1)] = 1.0;
        e[(j + 1, 0)] = 1.0;
        ball.push(e);
    }
    ball.push(Matrix::zeros(k + 1, k + 1));
    d1.push(ball);
    let mut cost = Vector::zeros(k + 1);
    cost[k] = 1.0;
    let bar = Barrier {
        c: &c1,
        d: &d1,
        cost,
    };
    let mut v = Vector::zeros(k + 1);
    v[k] = -worst + 1.0;
    let m = bar.total_degree();
    let mut t = 1.0;
    let mut used = 0;
    let feasible = |v: &Vector| v[k] < 0.0;
    while used < budget {
        used += bar.center(&mut v, t, budget - used, &feasible)?;
        if feasible(&v) || m / t < 1e-10 {
            break;
        }
        t *= 20.0;
    }
    Ok((v, used))
}

pub fn solve_sdp(p: &SdpProblem, settings: &SdpSettings) -> Result<SdpSolution> {
    if p.blocks.is_empty() {
        return Err(Error::InvalidArgument("no LMI blocks".into()));
    }
    let red = reduce(p, settings.margin)?;
    let k = red.basis.ncols();
    let mut iterations = 0;

    // Phase I over (z, s): G_k(z) + s I ≻ 0, s + 1 > 0 and |z| < R, minimizing
    // s. The ball keeps the barrier bounded along recession directions of the
    // constraint set; it is enlarged before infeasibility is declared.
    let mut z = Vector::zeros(k);
    let worst = red
        .c
        .iter()
        .map(numerics::sym_eig_min)
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    if worst <= 0.0 {
        let c_scale = red.c.iter().map(|c| c.amax()).fold(1.0f64, f64::max);
        let mut radius = 1e8 * c_scale;
        let mut found = None;
        let mut last = Vector::zeros(k + 1);
        for _ in 0..PHASE_ONE_RETRIES {
            let (v, used) = phase_one(&red, worst, radius, settings.max_iter.saturating_sub(iterations))?;
            iterations += used; 
            if v[k] < 0.0 {
                found = Some(v);
                break;
            }
            last = v;
            radius *= 1e3;
        }
        let Some(v) = found else {
            let zf = last.rows(0, k).into_owned();
            let x = red.to_full(&zf);
            let margins = block_margins(p, &x);
            let (name, margin) = margins
                .iter()
                .cloned()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("at least one block");
            return Ok(SdpSolution {
                objective: dot_cost(p, &x),
                x,
                status: SdpStatus::Infeasible,
                margins,
                iterations,
                gap: f64::INFINITY,
                violated: Some(format!("{name} (margin {margin:e})")),
            });
        };
        z = v.rows(0, k).into_owned();
    }

    // Phase II.
    let bar = Barrier {
        c: &red.c,
        d: &red.d,
        cost: red.cost.clone(),
    };
    let m = bar.total_degree();
    let obj0 = red.cost.dot(&z).abs();
    let mut t = (m / (1.0 + obj0)).max(1e-3);
    let mut status = SdpStatus::MaxIter;
    let mut gap = m / t;
    let never = |_: &Vector| false;
    while iterations < settings.max_iter {
        let budget = settings.max_iter - iterations;
        iterations += bar.center(&mut z, t, budget, &never)?;
        gap = m / t;
        let obj = red.cost.dot(&z).abs();
        if gap <= settings.tol * (1.0 + obj) {
            status = SdpStatus::Optimal;
            break;
        }
        t *= 10.0;
    }
    let x = red.to_full(&z);
    let margins = block_margins(p, &x);
    Ok(SdpSolution {
        objective: dot_cost(p, &x),
        x,
        status,
        margins,
        iterations,
        gap,
        violated: None,
    })
}

fn dot_cost(p: &SdpProblem, x: &Vector) -> f64 {
    p.cost.iter().zip(x.iter()).map(|(c, v)| c * v).sum()
}

fn block_margins(p: &SdpProblem, x: &Vector) -> Vec<(String, f64)> {
    p.blocks
        .iter()
        .map(|b| (b.name.clone(), lmi_margin(b, x)))
        .collect()
}

/// Index map for a symmetric `n x n` matrix stored as its upper triangle.
pub fn sym_index(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * n - i * (i + 1) / 2 + j
}

/// Basis matrix `E_ij + E_ji` (or `E_ii`) for a symmetric slab entry.
pub fn sym_basis(n: usize, i: usize, j: usize) -> Matrix {
    let mut e = Matrix::zeros(n, n);
    e[(i, j)] = 1.0;
    e[(j, i)] = 1.0;
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn one(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    #[test]
    fn eigenvalue_bound() {
        let mut p = SdpProblem::new();
        let r = p.add_slab("beta", 1);
        p.cost[r.start] = 1.0;
        p.add_block(LmiBlock {
            name: "bound".into(),
            sense: Sense::Psd,
            f0: -Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 2.0])),
            terms: vec![(r.start, Matrix::identity(2, 2))],
        })
        .unwrap();
        let s = solve_sdp(&p, &SdpSettings::default()).unwrap();
        assert_eq!(s.status, SdpStatus::Optimal);
        assert!((s.x[0] - 2.0).abs() < 1e-6, "{}", s.x[0]);
        assert!(s.min_margin() >= -1e-7);
    }

    #[test]
    fn scalar_lower_bound() {
        let mut p = SdpProblem::new();
        p.add_slab("x", 1);
        p.cost[0] = 1.0;
        p.add_block(LmiBlock {
            name: "nonneg".into(),
            sense: Sense::Psd,
            f0: Matrix::zeros(2, 2),
            terms: vec![(0, Matrix::identity(2, 2))],
        })
        .unwrap();
        p.add_block(LmiBlock {
            name: "at-least-one".into(),
            sense: Sense::Psd,
            f0: one(-1.0),
            terms: vec![(0, one(1.0))],
        })
        .unwrap();
        let s = solve_sdp(&p, &SdpSettings::default()).unwrap();
        assert_eq!(s.status, SdpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reports_most_violated_block() {
        // x <= -1 and x >= 1.
        let mut p = SdpProblem::new();
        p.add_slab("x", 1);
        p.add_block(LmiBlock {
            name: "upper".into(),
            sense: Sense::Nsd,
            f0: one(1.0),
            terms: vec![(0, one(1.0))],
        })
        .unwrap();
        p.add_block(LmiBlock {
            name: "lower".into(),
            sense: Sense::Psd,
            f0: one(-1.0),
            terms: vec![(0, one(1.0))],
        })
        .unwrap();
        let s = solve_sdp(&p, &SdpSettings::default()).unwrap();
        assert_eq!(s.status, SdpStatus::Infeasible);
        assert!(s.violated.is_some());
    }

    #[test]
    fn equality_constraints_are_respected() {
        // min x0 + x1  s.t. x0 - x1 = 0.5, x0 >= 0, x1 >= 0.
        let mut p = SdpProblem::new();
        p.add_slab("x", 2);
        p.cost = vec![1.0, 1.0];
        for i in 0..2 {
            p.add_block(LmiBlock {
                name: format!("x{i}"),
                sense: Sense::Psd,
                f0: one(0.0),
                terms: vec![(i, one(1.0))],
            })
            .unwrap();
        }
        p.add_equality(vec![(0, 1.0), (1, -1.0)], 0.5);
        let s = solve_sdp(&p, &SdpSettings::default()).unwrap();
        assert_eq!(s.status, SdpStatus::Optimal);
        assert!((s.x[0] - 0.5).abs() < 1e-6 && s.x[1].abs() < 1e-6, "{}", s.x);
    }

    #[test]
    fn rejects_asymmetric_terms() {
        let mut p = SdpProblem::new();
        p.add_slab("x", 1);
        let bad = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(p
            .add_block(LmiBlock {
                name: "bad".into(),
                sense: Sense::Psd,
                f0: Matrix::zeros(2, 2),
                terms: vec![(0, bad)],
            })
            .is_err());
    }

    /// Fixed-point iteration for `P = A'PA + I`.
    fn lyapunov_fixed_point(a: &Matrix) -> Matrix {
        let n = a.nrows();
        let mut p = Matrix::identity(n, n);
        for _ in 0..100_000 {
            let next = a.transpose() * &p * a + Matrix::identity(n, n);
            let done = (&next - &p).amax() < 1e-14 * next.amax();
            p = next;
            if done {
                break;
            }
        }
        p
    }

    /// min trace(P) s.t. A'PA - P + I ⪯ 0, P ⪰ I: the minimizer is the
    /// Lyapunov solution itself.
    pub(crate) fn lyapunov_sdp(a: &Matrix) -> (SdpProblem, usize) {
        let n = a.nrows();
        let mut p = SdpProblem::new();
        let r = p.add_slab("P", n * (n + 1) / 2);
        let mut dec = Vec::new();
        let mut pos = Vec::new();
        for i in 0..n {
            for j in i..n {
                let idx = r.start + sym_index(n, i, j);
                let e = sym_basis(n, i, j);
                if i == j {
                    p.cost[idx] = 1.0;
                }
                dec.push((idx, a.transpose() * &e * a - &e));
                pos.push((idx, e));
            }
        }
        p.add_block(LmiBlock {
            name: "decrease".into(),
            sense: Sense::Nsd,
            f0: Matrix::identity(n, n),
            terms: dec,
        })
        .unwrap();
        p.add_block(LmiBlock {
            name: "positive".into(),
            sense: Sense::Psd,
            f0: -Matrix::identity(n, n),
            terms: pos,
        })
        .unwrap();
        (p, n)
    }

    fn unpack(x: &Vector, n: usize) -> Matrix {
        Matrix::from_fn(n, n, |i, j| x[sym_index(n, i, j)])
    }

    #[test]
    fn lyapunov_matches_fixed_point() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for trial in 0..6 {
            let n = 2 + trial % 2;
            let raw = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let a = &raw * (0.8 / numerics::spectral_radius(&raw).max(1e-3));
            let want = lyapunov_fixed_point(&a);
            let (p, n) = lyapunov_sdp(&a);
            let s = solve_sdp(&p, &SdpSettings::default()).unwrap();
            assert_eq!(s.status, SdpStatus::Optimal);
            assert!(s.min_margin() >= -1e-7);
            let got = unpack(&s.x, n);
            let rel = (&got - &want).amax() / want.amax();
            assert!(rel < 1e-5, "relative mismatch {rel:e}");
        }
    }

    #[test]
    fn unstable_system_is_infeasible() {
        let a = Matrix::from_row_slice(2, 2, &[1.1, 0.3, 0.0, 0.5]);
        let (p, _) = lyapunov_sdp(&a);
        let s = solve_sdp(&p, &SdpSettings::default()).unwrap();
        assert_eq!(s.status, SdpStatus::Infeasible);
    }

    #[test]
    fn doubled_margin_stays_feasible() {
        let a = Matrix::from_row_slice(2, 2, &[0.5, 0.2, -0.1, 0.3]);
        let (p, _) = lyapunov_sdp(&a);
        let st = SdpSettings {
            margin: 2e-8,
            ..SdpSettings::default()
        };
        let s = solve_sdp(&p, &st).unwrap();
        assert_eq!(s.status, SdpStatus::Optimal);
        for b in &p.blocks {
            assert!(lmi_margin(b, &s.x) >= b.delta(1e-8) * 0.999);
        }
    }

    #[test]
    fn symmetric_index_round_trip() {
        let n = 4;
        let mut seen = vec![false; n * (n + 1) / 2];
        for i in 0..n {
            for j in i..n {
                let k = sym_index(n, i, j);
                assert!(!seen[k]);
                seen[k] = true;
                assert_eq!(k, sym_index(n, j, i));
            }
        }
        assert!(seen.iter().all(|&s| s));
    }
}
