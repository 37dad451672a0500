//! Observer-gain synthesis for unknown systems through the dual system.
//!
//! From one trajectory, first-differenced to cancel offsets, a trajectory of
//! the dual system `xd+ = A' xd + C' ud` is formed by pseudoinverses. A
//! data-driven LQR program with a circular pole region then yields a gain
//! `L` and the closed loop `A_L = A + L C` without ever identifying `A` or
//! `C`. The region radius is halved until `rho0 = 6 lmax(A_L' A_L) < 1`.

use crate::behavioral::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::numerics::{self, hstack, pinv_from_svd, svd, vstack, Matrix, Tolerance, Vector};
use crate::sdp::{self, LmiBlock, SdpProblem, SdpSettings, SdpStatus, Sense};

/// Dual-system data `X1 = (X0p')^+`, `[X0; U0] = [X1p' Yp']^+`, where the
/// `p` suffix denotes primal data.
#[derive(Debug, Clone)]
pub struct DualData {
    pub x0: Matrix,
    pub x1: Matrix,
    pub u0: Matrix,
    /// Singular values of the primal state block.
    pub state_singular_values: Vec<f64>,
    /// Singular values of `[X1p' Yp']`.
    pub output_singular_values: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct DualOptions {
    /// First-difference the data to cancel offsets.
    pub differenced: bool,
    pub tol: Tolerance,
    /// Enforce `rank [X1p' Yp'] = n + p`.
    pub require_output_rank: bool,
}

impl Default for DualOptions {
    fn default() -> Self {
        Self {
            differenced: true,
            tol: Tolerance::Auto,
            require_output_rank: true,
        }
    }
}

fn rank_gate(
    m: &Matrix,
    required: usize,
    tol: Tolerance,
    which: &'static str,
    enforce: bool,
) -> Result<(numerics::SvdResult, Vec<f64>)> {
    let f = svd(m)?;
    let rank = f.rank(m.nrows(), m.ncols(), tol);
    let sv: Vec<f64> = f.singular_values.iter().copied().collect();
    if enforce && rank < required {
        let first = sv.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
        let gap = sv.get(required - 1).copied().unwrap_or(0.0) / first;
        return Err(Error::DualRank {
            which,
            rank,
            required,
            gap,
        });
    }
    Ok((f, sv))
}

pub fn build_dual_data(ds: &TrajectoryDataset, opts: DualOptions) -> Result<DualData> {
    let n = ds.state_dim();
    let p = ds.output_dim();
    let t = ds.len();
    let (x0p, x1p, yp) = if opts.differenced {
        if t < 3 {
            return Err(Error::TooShort {
                len: t,
                bound: "differenced dual data needs T >= 3".into(),
            });
        }
        let dx: Vec<Vector> = ds.states.windows(2).map(|w| &w[1] - &w[0]).collect();
        let dy: Vec<Vector> = ds.outputs.windows(2).map(|w| &w[1] - &w[0]).collect();
        (hstack(&dx[..t - 1]), hstack(&dx[1..t]), hstack(&dy[..t - 1]))
    } else {
        (
            hstack(&ds.states[..t]),
            hstack(&ds.states[1..=t]),
            hstack(&ds.outputs[..t]),
        )
    };
    let x0t = x0p.transpose();
    let (fs, state_sv) = rank_gate(&x0t, n, opts.tol, "state", true)?;
    let x1 = pinv_from_svd(&fs, x0t.nrows(), x0t.ncols(), opts.tol);
    let joint = vstack(&[&x1p, &yp]).transpose();
    let (fo, output_sv) = rank_gate(&joint, n + p, opts.tol, "output", opts.require_output_rank)?;
    let stacked = pinv_from_svd(&fo, joint.nrows(), joint.ncols(), opts.tol);
    Ok(DualData {
        x0: stacked.rows(0, n).into_owned(),
        u0: stacked.rows(n, p).into_owned(),
        x1,
        state_singular_values: state_sv,
        output_singular_values: output_sv,
    })
}

impl DualData {
    /// Wraps a dual trajectory given directly (known-system studies).
    pub fn from_dual_trajectory(x0: Matrix, x1: Matrix, u0: Matrix) -> Result<Self> {
        if x0.shape() != x1.shape() || u0.ncols() != x0.ncols() {
            return Err(Error::Dimension("dual trajectory blocks".into()));
        }
        Ok(Self {
            x0,
            x1,
            u0,
            state_singular_values: Vec::new(),
            output_singular_values: Vec::new(),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.x0.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.u0.nrows()
    }

    pub fn columns(&self) -> usize {
        self.x0.ncols()
    }

    /// Least-squares residual of `X1 = A' X0 + C' U0` for known `A`, `C`.
    pub fn dual_residual(&self, a: &Matrix, c: &Matrix) -> f64 {
        (&self.x1 - a.transpose() * &self.x0 - c.transpose() * &self.u0).amax()
    }
}

/// Origin-centred disc of radius `r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmiRegion {
    pub radius: f64,
}

impl LmiRegion {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius < 1.0) {
            return Err(Error::InvalidArgument(format!("region radius must lie in (0, 1), got {radius}")));
        }
        Ok(Self { radius })
    }
}

/// The synthesis program in reduced coordinates `X = V Z`, where the columns
/// of `V` span the row space of `[X0; U0; X1]`, rescaled by the inverse
/// singular values. Components of `X` outside that space do not enter any
/// constraint or the cost.
#[derive(Debug, Clone)]
pub struct SynthesisSdp {
    pub problem: SdpProblem,
    pub basis: Matrix,
    /// `X0 V`, `U0 V`, `X1 V`.
    pub x0v: Matrix,
    pub u0v: Matrix,
    pub x1v: Matrix,
    pub region: LmiRegion,
    pub q: Matrix,
    pub r_sqrt: Matrix,
}

pub const BLOCK_NAMES: [&str; 5] = ["performance", "stability", "circle", "symmetry", "positive"];

fn sym_sqrt(m: &Matrix) -> Result<Matrix> {
    let e = numerics::sym_eig(m)?;
    if e.values.iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidArgument("weight matrix must be positive definite".into()));
    }
    let d = Matrix::from_diagonal(&e.values.map(f64::sqrt));
    Ok(&e.vectors * d * e.vectors.transpose())
}

pub fn assemble_synthesis_sdp(dd: &DualData, q: &Matrix, r: &Matrix, region: LmiRegion) -> Result<SynthesisSdp> {
    let n = dd.state_dim();
    let p = dd.input_dim();
    if q.shape() != (n, n) || r.shape() != (p, p) {
        return Err(Error::Dimension("weight matrices".into()));
    }
    let r_sqrt = sym_sqrt(r)?;
    sym_sqrt(q)?;
    let all = vstack(&[&dd.x0, &dd.u0, &dd.x1]);
    let f = svd(&all)?;
    let k = f.rank(all.nrows(), all.ncols(), Tolerance::Auto);
    // Whitened coordinates: with `[X0; U0; X1] = U S V'`, take `X = V S^-1 Z`
    // so the coefficient blocks are slices of the orthonormal `U`.
    let mut basis = f.v_t.rows(0, k).transpose();
    for j in 0..k {
        basis.column_mut(j).unscale_mut(f.singular_values[j]);
    }
    let coeffs = f.u.columns(0, k);
    let x0v = coeffs.rows(0, n).into_owned();
    let u0v = coeffs.rows(n, p).into_owned();
    let x1v = coeffs.rows(n + p, n).into_owned();

    let mut prob = SdpProblem::new();
    let zr = prob.add_slab("Z", k * n);
    let wr = prob.add_slab("W", p * (p + 1) / 2);
    let br = prob.add_slab("beta", 1);
    let z_idx = |row: usize, col: usize| zr.start + row * n + col;
    let w_idx = |i: usize, j: usize| wr.start + sdp::sym_index(p, i, j);
    let beta = br.start;

    // d(M Z)/d z_{kl}: column l equals M[:, k].
    let unit = |m: &Matrix, kk: usize, l: usize| {
        let mut d = Matrix::zeros(m.nrows(), n);
        d.set_column(l, &m.column(kk));
        d
    };
    let sym = |d: &Matrix| (d + d.transpose()) * 0.5;
    let embed = |size: usize, parts: &[(usize, usize, &Matrix)]| {
        let mut out = Matrix::zeros(size, size);
        for &(r0, c0, m) in parts {
            out.view_mut((r0, c0), m.shape()).copy_from(m);
            if r0 != c0 {
                out.view_mut((c0, r0), (m.ncols(), m.nrows())).copy_from(&m.transpose());
            }
        }
        out
    };

    let mut perf = Vec::new();
    let mut stab = Vec::new();
    let mut circ = Vec::new();
    let mut symm = Vec::new();
    let mut posi = Vec::new();
    for kk in 0..k {
        for l in 0..n {
            let idx = z_idx(kk, l);
            let ds = sym(&unit(&x0v, kk, l));
            let du = &r_sqrt * unit(&u0v, kk, l);
            let d1 = unit(&x1v, kk, l);
            let d0 = unit(&x0v, kk, l);
            let skew = &d0 - d0.transpose();
            perf.push((idx, embed(p + n, &[(p, p, &ds), (0, p, &du)])));
            stab.push((idx, embed(2 * n, &[(0, 0, &ds), (n, n, &ds), (0, n, &d1)])));
            let neg = &ds * -region.radius;
            circ.push((idx, embed(2 * n, &[(0, 0, &neg), (n, n, &neg), (0, n, &d1)])));
            symm.push((idx, embed(2 * n, &[(0, n, &skew)])));
            posi.push((idx, embed(1 + n, &[(1, 1, &ds)])));
            prob.cost[idx] = (q * &ds).trace();
        }
    }
    for i in 0..p {
        for j in i..p {
            let e = sdp::sym_basis(p, i, j);
            perf.push((w_idx(i, j), embed(p + n, &[(0, 0, &e)])));
            if i == j {
                prob.cost[w_idx(i, j)] = 1.0;
            }
        }
    }
    let mut eye_beta = Matrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        eye_beta[(i, i)] = -1.0;
    }
    symm.push((beta, eye_beta));
    let mut e0 = Matrix::zeros(1 + n, 1 + n);
    e0[(0, 0)] = 1.0;
    posi.push((beta, e0));
    prob.cost[beta] = 1.0;

    let mut stab0 = Matrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        stab0[(i, i)] = -1.0;
    }
    let mut sym0 = Matrix::zeros(2 * n, 2 * n);
    for i in n..2 * n {
        sym0[(i, i)] = -1.0;
    }
    let blocks = [
        (BLOCK_NAMES[0], Sense::Psd, Matrix::zeros(p + n, p + n), perf),
        (BLOCK_NAMES[1], Sense::Psd, stab0, stab),
        (BLOCK_NAMES[2], Sense::Nsd, Matrix::zeros(2 * n, 2 * n), circ),
        (BLOCK_NAMES[3], Sense::Nsd, sym0, symm),
        (BLOCK_NAMES[4], Sense::Psd, Matrix::zeros(1 + n, 1 + n), posi),
    ];
    for (name, sense, f0, terms) in blocks {
        prob.add_block(LmiBlock {
            name: name.to_string(),
            sense,
            f0,
            terms,
        })?;
    }
    // X0 X must be symmetric for it to play the Lyapunov matrix; the
    // symmetry block alone only bounds the skew part through beta.
    for i in 0..n {
        for j in i + 1..n {
            let mut row = Vec::new();
            for kk in 0..k {
                row.push((z_idx(kk, j), x0v[(i, kk)]));
                row.push((z_idx(kk, i), -x0v[(j, kk)]));
            }
            prob.add_equality(row, 0.0);
        }
    }
    Ok(SynthesisSdp {
        problem: prob,
        basis,
        x0v,
        u0v,
        x1v,
        region,
        q: q.clone(),
        r_sqrt,
    })
}

/// Decision values of the synthesis program in matrix form.
#[derive(Debug, Clone)]
pub struct SynthesisPoint {
    /// Reduced variable `Z`, `k x n`.
    pub z: Matrix,
    pub w: Matrix,
    pub beta: f64,
}

impl SynthesisSdp {
    pub fn unpack(&self, x: &Vector) -> SynthesisPoint {
        let n = self.x0v.nrows();
        let p = self.u0v.nrows();
        let k = self.basis.ncols();
        let zr = self.problem.slab("Z").expect("Z slab");
        let wr = self.problem.slab("W").expect("W slab");
        let br = self.problem.slab("beta").expect("beta slab");
        SynthesisPoint {
            z: Matrix::from_fn(k, n, |i, j| x[zr.start + i * n + j]),
            w: Matrix::from_fn(p, p, |i, j| x[wr.start + sdp::sym_index(p, i, j)]),
            beta: x[br.start],
        }
    }

    /// Full-width `X = V Z`.
    pub fn full_x(&self, pt: &SynthesisPoint) -> Matrix {
        &self.basis * &pt.z
    }

    /// Re-evaluates the five blocks directly from matrices, independent of
    /// the solver's affine representation. Margins are sign-adjusted minimum
    /// eigenvalues.
    pub fn independent_margins(&self, pt: &SynthesisPoint) -> Result<Vec<(String, f64)>> {
        let n = self.x0v.nrows();
        let p = self.u0v.nrows();
        let xd = &self.x0v * &pt.z;
        let s = numerics::symmetrize(&xd);
        let ux = &self.r_sqrt * (&self.u0v * &pt.z);
        let x1x = &self.x1v * &pt.z;
        let r = self.region.radius;
        let eye = Matrix::identity(n, n);
        let mut perf = Matrix::zeros(p + n, p + n);
        perf.view_mut((0, 0), (p, p)).copy_from(&pt.w);
        perf.view_mut((0, p), (p, n)).copy_from(&ux);
        perf.view_mut((p, 0), (n, p)).copy_from(&ux.transpose());
        perf.view_mut((p, p), (n, n)).copy_from(&s);
        let two = |a: &Matrix, b: &Matrix, d: &Matrix| {
            let mut m = Matrix::zeros(2 * n, 2 * n);
            m.view_mut((0, 0), (n, n)).copy_from(a);
            m.view_mut((0, n), (n, n)).copy_from(b);
            m.view_mut((n, 0), (n, n)).copy_from(&b.transpose());
            m.view_mut((n, n), (n, n)).copy_from(d);
            m
        };
        let stab = two(&(&s - &eye), &x1x, &s);
        let circ = two(&(&s * -r), &x1x, &(&s * -r));
        let skew = &xd - xd.transpose();
        let symm = two(&(&eye * -pt.beta), &skew, &-&eye);
        let mut posi = Matrix::zeros(1 + n, 1 + n);
        posi[(0, 0)] = pt.beta;
        posi.view_mut((1, 1), (n, n)).copy_from(&s);
        let blocks = [(perf, 1.0), (stab, 1.0), (circ, -1.0), (symm, -1.0), (posi, 1.0)];
        blocks
            .iter()
            .zip(BLOCK_NAMES)
            .map(|((m, sign), name)| {
                let v = numerics::sym_eig_min(&numerics::symmetrize(&(m * *sign)))?;
                Ok((name.to_string(), v))
            })
            .collect()
    }
}

/// Gain and data-implied closed loop from a synthesis point.
#[derive(Debug, Clone)]
pub struct ExtractedGain {
    pub l: Matrix,
    pub a_l: Matrix,
    pub x_d: Matrix,
}

/// `L' = U0 X (X0 X)^-1`, `A_L' = X1 X (X0 X)^-1`.
pub fn extract_gain(dd: &DualData, x: &Matrix) -> Result<ExtractedGain> {
    let xd = &dd.x0 * x;
    let scale = xd.amax().max(f64::MIN_POSITIVE);
    let asym = numerics::asymmetry(&xd) / scale;
    if asym > 1e-6 {
        return Err(Error::AsymmetricXd(asym));
    }
    let cond = numerics::condition_number(&xd)?;
    if !(cond < 1e10) {
        return Err(Error::IllConditioned {
            what: "X0 X".into(),
            cond,
        });
    }
    let inv = xd
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::IllConditioned {
            what: "X0 X".into(),
            cond,
        })?;
    let lt = &dd.u0 * x * &inv;
    let alt = &dd.x1 * x * &inv;
    Ok(ExtractedGain {
        l: lt.transpose(),
        a_l: alt.transpose(),
        x_d: xd,
    })
}

/// `(6 lmax(A_L' A_L), 6 lmax(L' L))`.
pub fn certified_parameters(l: &Matrix, a_l: &Matrix) -> Result<(f64, f64)> {
    let rho0 = 6.0 * numerics::sym_eig_max(&numerics::symmetrize(&(a_l.transpose() * a_l)))?;
    let mu0 = 6.0 * numerics::sym_eig_max(&numerics::symmetrize(&(l.transpose() * l)))?;
    Ok((rho0, mu0))
}

/// Floor on `6 lmax(A_L' A_L)` over every gain for a known `(A, C)`: with `N`
/// an orthonormal basis of `ker C`, `(A + L C) N = A N` whatever `L` is.
pub fn rho0_floor(a: &Matrix, c: &Matrix, tol: Tolerance) -> Result<f64> {
    let n = a.nrows();
    let padded = Matrix::from_fn(n.max(c.nrows()), n, |i, j| if i < c.nrows() { c[(i, j)] } else { 0.0 });
    let f = svd(&padded)?;
    let rank = f.rank(c.nrows(), n, tol);
    if rank == n {
        return Ok(0.0);
    }
    let null = f.v_t.rows(rank, n - rank).transpose();
    let an = a * null;
    Ok(6.0 * svd(&an)?.sigma_max().powi(2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisIteration {
    pub radius: f64,
    pub rho0: f64,
    pub mu0: f64,
    pub objective: f64,
    pub sdp_iterations: usize,
    /// Smallest independently recomputed block margin.
    pub min_margin: f64,
    /// Largest eigenvalue modulus of the data-implied `A_L`.
    pub max_eigenvalue_modulus: f64,
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub l: Matrix,
    pub a_l: Matrix,
    pub rho0: f64,
    pub mu0: f64,
    pub radius: f64,
    pub iterations: usize,
    pub trace: Vec<SynthesisIteration>,
    /// Independently recomputed block margins at the returned point.
    pub margins: Vec<(String, f64)>,
    /// Moduli of the eigenvalues of `A_L`.
    pub eigenvalue_moduli: Vec<f64>,
    pub state_singular_values: Vec<f64>,
    pub output_singular_values: Vec<f64>,
}

impl SynthesisResult {
    pub fn min_margin(&self) -> f64 {
        self.margins.iter().map(|m| m.1).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisOptions {
    pub initial_radius: f64,
    pub q: Option<Matrix>,
    pub r: Option<Matrix>,
    pub max_halvings: usize,
    pub dual: DualOptions,
    pub sdp: SdpSettings,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            initial_radius: 0.9,
            q: None,
            r: None,
            max_halvings: 20,
            dual: DualOptions::default(),
            sdp: SdpSettings::default(),
        }
    }
}

/// Builds dual data from `ds` and runs the radius-halving loop.
pub fn synthesize(ds: &TrajectoryDataset, opts: &SynthesisOptions) -> Result<SynthesisResult> {
    let dd = build_dual_data(ds, opts.dual)?;
    synthesize_from_dual(&dd, opts)
}

pub fn synthesize_from_dual(dd: &DualData, opts: &SynthesisOptions) -> Result<SynthesisResult> {
    synthesize_traced(dd, opts).1
}

/// Like [`synthesize_from_dual`], but also returns the per-radius trace when
/// the loop fails.
pub fn synthesize_traced(dd: &DualData, opts: &SynthesisOptions) -> (Vec<SynthesisIteration>, Result<SynthesisResult>) {
    let mut trace = Vec::new();
    let out = halving_loop(dd, opts, &mut trace);
    (trace, out)
}

fn halving_loop(dd: &DualData, opts: &SynthesisOptions, trace: &mut Vec<SynthesisIteration>) -> Result<SynthesisResult> {
    let n = dd.state_dim();
    let p = dd.input_dim();
    let q = opts.q.clone().unwrap_or_else(|| Matrix::identity(n, n));
    let r = opts.r.clone().unwrap_or_else(|| Matrix::identity(p, p));
    let mut radius = opts.initial_radius;
    let mut last_rho0 = f64::INFINITY;
    for halving in 0..=opts.max_halvings {
        let region = LmiRegion::new(radius)?;
        let prog = assemble_synthesis_sdp(dd, &q, &r, region)?;
        let sol = sdp::solve_sdp(&prog.problem, &opts.sdp)?;
        match sol.status {
            SdpStatus::Optimal => {}
            SdpStatus::Infeasible => {
                let (block, margin) = sol
                    .margins
                    .iter()
                    .cloned()
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap_or_default();
                return Err(Error::SdpInfeasible {
                    radius,
                    block,
                    margin,
                });
            }
            SdpStatus::MaxIter => {
                return Err(Error::SdpFailed {
                    radius,
                    reason: format!("iteration limit, gap {:e}", sol.gap),
                })
            }
        }
        let pt = prog.unpack(&sol.x);
        let x = prog.full_x(&pt);
        let gain = extract_gain(dd, &x)?;
        let (rho0, mu0) = certified_parameters(&gain.l, &gain.a_l)?;
        let margins = prog.independent_margins(&pt)?;
        let eigenvalue_moduli: Vec<f64> = gain
            .a_l
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .collect();
        trace.push(SynthesisIteration {
            radius,
            rho0,
            mu0,
            objective: sol.objective,
            sdp_iterations: sol.iterations,
            min_margin: margins.iter().map(|m| m.1).fold(f64::INFINITY, f64::min),
            max_eigenvalue_modulus: eigenvalue_moduli.iter().copied().fold(0.0, f64::max),
        });
        last_rho0 = rho0;
        if rho0 < 1.0 {
            return Ok(SynthesisResult {
                l: gain.l,
                a_l: gain.a_l,
                rho0,
                mu0,
                radius,
                iterations: halving + 1,
                trace: trace.clone(),
                margins,
                eigenvalue_moduli,
                state_singular_values: dd.state_singular_values.clone(),
                output_singular_values: dd.output_singular_values.clone(),
            });
        }
        radius /= 2.0;
    }
    Err(Error::HalvingCap {
        cap: opts.max_halvings,
        rho0: last_rho0,
    })
}

/// `6 lmax(L'L) <= mu` and `6 lmax(A_L' A_L) <= rho < 1`.
pub fn verify_constraints(l: &Matrix, a_l: &Matrix, rho: f64, mu: f64) -> bool {
    match certified_parameters(l, a_l) {
        Ok((rho0, mu0)) => mu0 <= mu && rho0 <= rho && rho < 1.0,
        Err(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate, AffinePlant, NoiseSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn system() -> (Matrix, Matrix) {
        let a = Matrix::from_row_slice(3, 3, &[0.9, 0.2, 0.0, -0.1, 0.8, 0.1, 0.0, 0.05, 0.7]);
        let c = Matrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        (a, c)
    }

    /// Dual trajectory driven by a random input so that `[X0; U0]` has full
    /// row rank.
    fn dual_trajectory(a: &Matrix, c: &Matrix, len: usize, seed: u64) -> DualData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = a.nrows();
        let p = c.nrows();
        let mut xs = vec![Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))];
        let mut us = Vec::new();
        for k in 0..len {
            let u = Vector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
            xs.push(a.transpose() * &xs[k] + c.transpose() * &u);
            us.push(u);
        }
        DualData::from_dual_trajectory(hstack(&xs[..len]), hstack(&xs[1..]), hstack(&us)).unwrap()
    }

    #[test]
    fn dual_identity_residual_on_linear_data() {
        let (a, c) = system();
        let plant = AffinePlant::new(a.clone(), Vector::zeros(3), c.clone(), Vector::zeros(2), 1.0).unwrap();
        let sim = simulate(&plant, &Vector::from_vec(vec![1.0, -1.0, 0.5]), 30, &NoiseSpec::zero()).unwrap();
        // Exactly linear data cannot meet the output rank requirement.
        let strict = build_dual_data(&sim.data, DualOptions { differenced: false, ..Default::default() });
        assert!(matches!(strict, Err(Error::DualRank { which: "output", .. })));
        let dd = build_dual_data(
            &sim.data,
            DualOptions {
                differenced: false,
                require_output_rank: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(dd.dual_residual(&a, &c) < 1e-8);
    }

    #[test]
    fn offset_data_via_differences() {
        let (a, c) = system();
        let plant = AffinePlant::new(
            a.clone(),
            Vector::from_vec(vec![0.3, -0.2, 0.1]),
            c.clone(),
            Vector::from_vec(vec![2.0, -1.0]),
            1.0,
        )
        .unwrap();
        let sim = simulate(&plant, &Vector::from_vec(vec![1.0, -1.0, 0.5]), 30, &NoiseSpec::zero()).unwrap();
        let dd = build_dual_data(
            &sim.data,
            DualOptions {
                require_output_rank: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(dd.dual_residual(&a, &c) < 1e-8);
    }

    #[test]
    fn constant_trajectory_fails_state_rank() {
        let x = Vector::from_vec(vec![1.0, 2.0]);
        let ds = TrajectoryDataset::new(1.0, 0, vec![x.clone(); 11], vec![Vector::from_vec(vec![3.0]); 10]).unwrap();
        let err = build_dual_data(&ds, DualOptions::default()).unwrap_err();
        assert!(matches!(err, Error::DualRank { which: "state", .. }), "{err}");
    }

    #[test]
    fn block_dimensions() {
        let (a, c) = system();
        let dd = dual_trajectory(&a, &c, 40, 1);
        let prog = assemble_synthesis_sdp(&dd, &Matrix::identity(3, 3), &Matrix::identity(2, 2), LmiRegion::new(0.5).unwrap()).unwrap();
        let sizes: Vec<usize> = prog.problem.blocks.iter().map(|b| b.size()).collect();
        assert_eq!(sizes, vec![5, 6, 6, 6, 4]);
        assert_eq!(prog.basis.ncols(), 3 + 2);
        assert_eq!(prog.problem.eq_rows.len(), 3);
    }

    /// The unobserved direction maps to a short vector, so `6 |A_L|^2 < 1`
    /// is attainable.
    fn certifiable() -> (Matrix, Matrix) {
        let a = Matrix::from_row_slice(3, 3, &[0.9, 0.1, 0.0, -0.2, 0.2, 0.1, 0.0, 0.1, 0.7]);
        let c = Matrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        (a, c)
    }

    #[test]
    fn data_implied_closed_loop_matches_known_system() {
        let (a, c) = system();
        let dd = dual_trajectory(&a, &c, 40, 2);
        let prog = assemble_synthesis_sdp(&dd, &Matrix::identity(3, 3), &Matrix::identity(2, 2), LmiRegion::new(0.5).unwrap()).unwrap();
        let sol = sdp::solve_sdp(&prog.problem, &SdpSettings::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        let pt = prog.unpack(&sol.x);
        let g = extract_gain(&dd, &prog.full_x(&pt)).unwrap();
        let closed = &a + &g.l * &c;
        let rel = (&closed - &g.a_l).amax() / closed.amax().max(1e-12);
        assert!(rel < 1e-6, "relative mismatch {rel:e}");
        for z in closed.complex_eigenvalues().iter() {
            assert!(z.norm() <= 0.5 + 1e-6);
        }
        for (name, m) in prog.independent_margins(&pt).unwrap() {
            assert!(m >= -1e-7, "{name}: {m:e}");
        }
    }

    #[test]
    fn halving_loop_certifies() {
        let (a, c) = certifiable();
        let dd = dual_trajectory(&a, &c, 40, 4);
        let res = synthesize_from_dual(&dd, &SynthesisOptions::default()).unwrap();
        assert!(res.rho0 < 1.0);
        assert!(res.min_margin() >= -1e-7, "{:?}", res.margins);
        assert!(res.eigenvalue_moduli.iter().all(|&m| m <= res.radius + 1e-6));
        assert!(verify_constraints(&res.l, &res.a_l, res.rho0, res.mu0));
        for w in res.trace.windows(2) {
            assert_eq!(w[1].radius, w[0].radius / 2.0);
        }
        let again = synthesize_from_dual(&dd, &SynthesisOptions::default()).unwrap();
        assert_eq!(again.trace, res.trace);
    }

    #[test]
    fn uncertifiable_system_hits_cap() {
        // |A e2| > 1/sqrt(6) whatever L is.
        let (a, c) = system();
        let dd = dual_trajectory(&a, &c, 40, 5);
        let opts = SynthesisOptions {
            max_halvings: 3,
            ..Default::default()
        };
        let err = synthesize_from_dual(&dd, &opts).unwrap_err();
        assert!(matches!(err, Error::HalvingCap { cap: 3, .. }), "{err}");
    }

    #[test]
    fn zero_gain_slice() {
        let (a, c) = system();
        let dd = dual_trajectory(&a, &c, 40, 3);
        // Columns of X in the nullspace of U0 give L = 0 and A_L = A.
        let f = svd(&dd.u0).unwrap();
        let rank = f.rank(dd.u0.nrows(), dd.u0.ncols(), Tolerance::Auto);
        let full = svd(&Matrix::from_fn(dd.columns(), dd.columns(), |i, j| {
            if i < dd.u0.nrows() { dd.u0[(i, j)] } else { 0.0 }
        }))
        .unwrap();
        let null = full.v_t.rows(rank, 3).transpose();
        let raw = &dd.x0 * &null;
        // Make X0 X symmetric: X = null * (X0 null)^-1.
        let x = &null * raw.try_inverse().unwrap();
        let g = extract_gain(&dd, &x).unwrap();
        assert!(g.l.amax() < 1e-9);
        assert!((&g.a_l - &a).amax() < 1e-8);
    }

    #[test]
    fn floor_separates_certifiable_systems() {
        let (a, c) = system();
        let (ac, cc) = certifiable();
        assert!(rho0_floor(&a, &c, Tolerance::Auto).unwrap() > 1.0);
        let f = rho0_floor(&ac, &cc, Tolerance::Auto).unwrap();
        assert!((f - 6.0 * (0.01 + 0.04 + 0.01)).abs() < 1e-12, "{f}");
        assert_eq!(rho0_floor(&a, &Matrix::identity(3, 3), Tolerance::Auto).unwrap(), 0.0);
    }

    #[test]
    fn verify_constraints_cases() {
        let l = Matrix::zeros(3, 2);
        let a_l = Matrix::zeros(3, 3);
        assert!(verify_constraints(&l, &a_l, 0.5, 1e-3));
        let a_l = Matrix::identity(3, 3) * 0.2;
        let (rho0, _) = certified_parameters(&l, &a_l).unwrap();
        assert!(!verify_constraints(&l, &a_l, rho0 * 0.99, 1.0));
        assert!(verify_constraints(&l, &a_l, rho0, 1.0));
    }
}
