//! Hankel matrices, the data richness (rank) condition, and the
//! trajectory-membership test for autonomous systems with offsets.
//!
//! A single recorded trajectory `x[0..=T]`, `y[0..T]` of
//! `x+ = A x + e`, `y = C x + r` spans every other trajectory of the same
//! system once `rank [H1(x[0..=T-L]); 1^T] = n + 1`. The ones row absorbs
//! the offsets `e`, `r`; they are never estimated.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{concat, pinv_from_svd, svd, vstack, Matrix, Tolerance, Vector};

/// Historical data: `states` has one more sample than `outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub sample_interval: f64,
    pub start_index: i64,
    pub states: Vec<Vector>,
    pub outputs: Vec<Vector>,
}

impl TrajectoryDataset {
    pub fn new(
        sample_interval: f64,
        start_index: i64,
        states: Vec<Vector>,
        outputs: Vec<Vector>,
    ) -> Result<Self> {
        if !(sample_interval > 0.0 && sample_interval.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sample interval must be positive, got {sample_interval}"
            )));
        }
        if states.len() != outputs.len() + 1 {
            return Err(Error::Dimension(format!(
                "expected states = outputs + 1, got {} states and {} outputs",
                states.len(),
                outputs.len()
            )));
        }
        let n = states[0].len();
        let p = outputs.first().map_or(1, |y| y.len());
        if n == 0 || p == 0 {
            return Err(Error::Dimension("state and output dimensions must be >= 1".into()));
        }
        if states.iter().any(|x| x.len() != n) || outputs.iter().any(|y| y.len() != p) {
            return Err(Error::Dimension("ragged state or output samples".into()));
        }
        if states.iter().chain(outputs.iter()).any(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            sample_interval,
            start_index,
            states,
            outputs,
        })
    }

    /// Number of output samples `T`.
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.first().map_or(0, |y| y.len())
    }

    /// Keep samples `[from, from + len]` of the states and `[from, from + len)`
    /// of the outputs.
    pub fn window(&self, from: usize, len: usize) -> Result<Self> {
        if from + len > self.len() {
            return Err(Error::TooShort {
                len: self.len(),
                bound: format!("window [{from}, {}] out of range", from + len),
            });
        }
        Self::new(
            self.sample_interval,
            self.start_index + from as i64,
            self.states[from..=from + len].to_vec(),
            self.outputs[from..from + len].to_vec(),
        )
    }
}

/// Block Hankel matrix of depth `depth`: column `j` stacks
/// `seq[j], seq[j+1], ..., seq[j+depth-1]`.
pub fn build_hankel(seq: &[Vector], depth: usize) -> Result<Matrix> {
    if depth == 0 {
        return Err(Error::InvalidArgument("hankel depth must be >= 1".into()));
    }
    if seq.len() < depth {
        return Err(Error::TooShort {
            len: seq.len(),
            bound: format!("hankel depth {depth} exceeds sequence length"),
        });
    }
    let d = seq[0].len();
    let cols = seq.len() - depth + 1;
    let mut h = Matrix::zeros(depth * d, cols);
    for j in 0..cols {
        for k in 0..depth {
            h.view_mut((k * d, j), (d, 1)).copy_from(&seq[j + k]);
        }
    }
    Ok(h)
}

#[derive(Debug, Clone)]
pub struct RankReport {
    pub holds: bool,
    pub rank: usize,
    pub required: usize,
    pub singular_values: Vec<f64>,
    pub tolerance: f64,
}

impl RankReport {
    /// Ratio between the smallest retained singular value and the tolerance.
    pub fn gap(&self) -> f64 {
        match self.rank.checked_sub(1).and_then(|i| self.singular_values.get(i)) {
            Some(s) => s / self.tolerance.max(f64::MIN_POSITIVE),
            None => 0.0,
        }
    }

    pub fn smallest_retained(&self) -> f64 {
        self.rank
            .checked_sub(1)
            .and_then(|i| self.singular_values.get(i))
            .copied()
            .unwrap_or(0.0)
    }
}

/// Checks `rank [H1(x[0..=T-L]); 1^T] = n + 1` with the length bound `T >= L + n`.
pub fn check_rank_condition(
    ds: &TrajectoryDataset,
    depth: usize,
    tol: Tolerance,
) -> Result<RankReport> {
    let n = ds.state_dim();
    let t = ds.len();
    if t < depth + n {
        return Err(Error::TooShort {
            len: t,
            bound: format!("T >= L + n = {} + {}", depth, n),
        });
    }
    let h1 = build_hankel(&ds.states[..=t - depth], 1)?;
    let ones = Matrix::from_element(1, h1.ncols(), 1.0);
    let m = vstack(&[&h1, &ones]);
    let f = svd(&m)?;
    let rank = f.rank(m.nrows(), m.ncols(), tol);
    Ok(RankReport {
        holds: rank == n + 1,
        rank,
        required: n + 1,
        singular_values: f.singular_values.iter().copied().collect(),
        tolerance: tol.resolve(m.nrows(), m.ncols(), f.sigma_max()),
    })
}

/// `[H_L(y); H_{L+1}(x); 1^T]`, the equality-constraint matrix of the
/// data-driven estimator.
#[derive(Debug, Clone)]
pub struct HankelStack {
    pub depth: usize,
    pub y_block: Matrix,
    pub x_block: Matrix,
    pub ones_row: Matrix,
    pub rank: RankReport,
}

impl HankelStack {
    pub fn columns(&self) -> usize {
        self.ones_row.ncols()
    }

    pub fn stacked(&self) -> Matrix {
        vstack(&[&self.y_block, &self.x_block, &self.ones_row])
    }

    pub fn state_dim(&self) -> usize {
        self.x_block.nrows() / (self.depth + 1)
    }

    pub fn output_dim(&self) -> usize {
        self.y_block.nrows() / self.depth
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StackOptions {
    pub tol: Tolerance,
    /// Build the stack even if the rank condition fails.
    pub allow_rank_deficient: bool,
}

pub fn build_stack(ds: &TrajectoryDataset, depth: usize, opts: StackOptions) -> Result<HankelStack> {
    let rank = check_rank_condition(ds, depth, opts.tol)?;
    if !rank.holds && !opts.allow_rank_deficient {
        return Err(Error::RankDeficient {
            rank: rank.rank,
            required: rank.required,
            smallest: rank.smallest_retained(),
            tol: rank.tolerance,
        });
    }
    let x_block = build_hankel(&ds.states, depth + 1)?;
    let y_block = build_hankel(&ds.outputs, depth)?;
    let ones_row = Matrix::from_element(1, x_block.ncols(), 1.0);
    debug_assert_eq!(x_block.ncols(), y_block.ncols());
    Ok(HankelStack {
        depth,
        y_block,
        x_block,
        ones_row,
        rank,
    })
}

#[derive(Debug, Clone)]
pub struct Membership {
    pub alpha: Vector,
    pub residual: f64,
    pub threshold: f64,
    pub accepted: bool,
}

/// Relative residual scale for membership decisions.
pub const MEMBERSHIP_REL_TOL: f64 = 1e-7;

/// Minimum-norm `alpha` solving `[H_L(y); H_{L+1}(x); 1^T] alpha = [y'; x'; 1]`
/// in the least-squares sense, plus the accept/refuse decision.
pub fn trajectory_membership(
    stack: &HankelStack,
    cand_x: &[Vector],
    cand_y: &[Vector],
) -> Result<Membership> {
    let (n, p, l) = (stack.state_dim(), stack.output_dim(), stack.depth);
    if cand_x.len() != l + 1 || cand_y.len() != l {
        return Err(Error::Dimension(format!(
            "candidate needs {} states and {} outputs, got {} and {}",
            l + 1,
            l,
            cand_x.len(),
            cand_y.len()
        )));
    }
    if cand_x.iter().any(|x| x.len() != n) || cand_y.iter().any(|y| y.len() != p) {
        return Err(Error::Dimension("candidate sample dimension mismatch".into()));
    }
    let k = stack.stacked();
    let rhs = concat(&[concat(cand_y), concat(cand_x), Vector::from_element(1, 1.0)]);
    let f = svd(&k)?;
    let kp = pinv_from_svd(&f, k.nrows(), k.ncols(), Tolerance::Auto);
    let alpha = kp * &rhs;
    let residual = (&k * &alpha - &rhs).norm();
    let cand_norm = concat(&[concat(cand_y), concat(cand_x)]).norm();
    let threshold = MEMBERSHIP_REL_TOL * (1.0 + cand_norm);
    Ok(Membership {
        alpha,
        residual,
        threshold,
        accepted: residual < threshold,
    })
}

/// Writes `t,x1..xn,y1..yp`; the final state row carries empty output cells.
pub fn save_trajectory_csv(ds: &TrajectoryDataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    write_trajectory_csv(ds, &mut out)?;
    fs::write(path, out)?;
    Ok(())
}

pub fn write_trajectory_csv<W: Write>(ds: &TrajectoryDataset, w: &mut W) -> Result<()> {
    let n = ds.state_dim();
    let p = ds.output_dim();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=p).map(|i| format!("y{i}")));
    writeln!(w, "{}", header.join(","))?;
    for (k, x) in ds.states.iter().enumerate() {
        let t = (ds.start_index + k as i64) as f64 * ds.sample_interval;
        let mut row = vec![format!("{t}")];
        row.extend(x.iter().map(|v| format!("{v}")));
        match ds.outputs.get(k) {
            Some(y) => row.extend(y.iter().map(|v| format!("{v}"))),
            None => row.extend(std::iter::repeat_n(String::new(), p)),
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn load_trajectory_csv(path: &Path) -> Result<TrajectoryDataset> {
    let text = fs::read_to_string(path)?;
    parse_trajectory_csv(&text, path)
}

pub fn parse_trajectory_csv(text: &str, path: &Path) -> Result<TrajectoryDataset> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"t") {
        return Err(err(1, format!("header must start with `t`, got `{header}`")));
    }
    let n = cols.iter().filter(|c| c.starts_with('x')).count();
    let p = cols.iter().filter(|c| c.starts_with('y')).count();
    let expected: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=n).map(|i| format!("x{i}")))
        .chain((1..=p).map(|i| format!("y{i}")))
        .collect();
    if cols != expected || n == 0 || p == 0 {
        return Err(err(1, format!("expected header `{}`", expected.join(","))));
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut outputs = Vec::new();
    let mut finished = false;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if finished {
            return Err(err(lineno, "row after the final state row".into()));
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 1 + n + p {
            return Err(err(
                lineno,
                format!("expected {} cells, got {}", 1 + n + p, cells.len()),
            ));
        }
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| err(lineno, format!("non-numeric cell `{s}`")))
        };
        times.push(num(cells[0])?);
        let x: Result<Vec<f64>> = cells[1..=n].iter().map(|c| num(c)).collect();
        states.push(Vector::from_vec(x?));
        let ycells = &cells[1 + n..];
        if ycells.iter().all(|c| c.trim().is_empty()) {
            finished = true;
        } else {
            let y: Result<Vec<f64>> = ycells.iter().map(|c| num(c)).collect();
            outputs.push(Vector::from_vec(y?));
        }
    }
    if !finished {
        return Err(err(text.lines().count(), "missing final state row with empty outputs".into()));
    }
    if times.len() < 2 {
        return Err(err(2, "need at least one output sample".into()));
    }
    // Differences of printed times are only accurate to ~1e-15 relative;
    // snap the interval to 12 significant digits.
    let ts: f64 = format!("{:.11e}", times[1] - times[0]).parse().unwrap_or(f64::NAN);
    let start_index = (times[0] / ts).round() as i64;
    TrajectoryDataset::new(ts, start_index, states, outputs)
}
