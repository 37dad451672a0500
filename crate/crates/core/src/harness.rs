//! Experiment runner: simulate a plant, run the estimators on identical
//! data, evaluate the certificates and write CSV logs, a TOML report and SVG
//! plots.
//!
//! Output files contain no wall-clock data, so a run is byte-identical under
//! a fixed configuration.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, EskfParams, KmheParams, KoopmanConfig};
use crate::behavioral::{self, TrajectoryDataset};
use crate::dynamics::{self, AffinePlant, NoiseSpec, Plant, RigidBodyParams, RigidBodyPlant, Simulation};
use crate::error::{Error, Result};
use crate::mhe::{self, lyapunov_check, MheParams, NoiseSet, RgesAccumulator, StateSet, WindowTruth};
use crate::numerics::{Matrix, Vector};
use crate::stability::{self, SynthesisOptions};

pub mod svg;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PlantConfig {
    /// The published de-tumbling case.
    RigidBody {
        /// Initial target rate in deg/s; defaults to the published value.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        initial_rate_deg: Option<[f64; 3]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sample_interval: Option<f64>,
    },
    /// `x+ = A x + e`, `y = C x + r`, matrices given row by row.
    Affine {
        a: Vec<Vec<f64>>,
        e: Vec<f64>,
        c: Vec<Vec<f64>>,
        r: Vec<f64>,
        sample_interval: f64,
        initial_state: Vec<f64>,
    },
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig::RigidBody {
            initial_rate_deg: None,
            sample_interval: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Historical samples `T`.
    pub history: usize,
    /// Online samples `T_f`.
    pub online: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            history: 2000,
            online: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub history_noise: NoiseSpec,
    #[serde(default)]
    pub online_noise: NoiseSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MheConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    pub rho: f64,
    pub mu: f64,
    pub horizon: usize,
    /// Added to the true online start state to form the prior.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_offset: Option<Vec<f64>>,
    /// Half-width of the data-centered state box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_half_width: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_bound: Option<Vec<f64>>,
}

impl Default for MheConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rho: 0.8,
            mu: 1e5,
            horizon: 10,
            prior_offset: None,
            state_half_width: None,
            noise_bound: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EskfConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    pub q: f64,
    pub r: f64,
    pub p0: f64,
}

impl Default for EskfConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            q: 0.9,
            r: 1e5,
            p0: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmheConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    pub lift_dim: usize,
    pub seed: u64,
}

impl Default for KmheConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lift_dim: 20,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    #[serde(default)]
    pub enabled: bool,
    pub initial_radius: f64,
    pub max_halvings: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            initial_radius: 0.9,
            max_halvings: 20,
        }
    }
}

/// Linear system against which the certificate disturbances are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    /// The plant's own matrices for affine plants, the window-start
    /// linearization otherwise.
    #[default]
    Auto,
    /// Least-squares affine fit of the historical data.
    Identified,
    /// Linearization at the first true state of each window. The growth
    /// bound, which needs one model for the whole run, uses the run start.
    WindowStart,
    /// Linearization at the first online state.
    RunStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default)]
    pub reference: Reference,
}

impl Default for CertificateConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            reference: Reference::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of the online run used for the final-window RMSE.
    #[serde(default = "default_final_window")]
    pub final_window: f64,
    #[serde(default)]
    pub plant: PlantConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub mhe: MheConfig,
    #[serde(default)]
    pub eskf: EskfConfig,
    #[serde(default)]
    pub kmhe: KmheConfig,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub certificates: CertificateConfig,
}

fn default_final_window() -> f64 {
    0.1
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "simulation".into(),
            seed: 0,
            final_window: default_final_window(),
            plant: PlantConfig::default(),
            data: DataConfig::default(),
            scenario: ScenarioConfig::default(),
            mhe: MheConfig::default(),
            eskf: EskfConfig::default(),
            kmhe: KmheConfig::default(),
            synthesis: SynthesisConfig::default(),
            certificates: CertificateConfig::default(),
        }
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if r == 0 || c == 0 || rows.iter().any(|x| x.len() != c) {
        return Err(Error::Config(format!("{what} must be a non-empty rectangular matrix")));
    }
    Ok(Matrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| e.stage(format!("config {}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Schema checks that need no computation.
    pub fn validate(&self) -> Result<()> {
        if !(self.final_window > 0.0 && self.final_window <= 1.0) {
            return Err(Error::Config("final_window must lie in (0, 1]".into()));
        }
        if self.data.history == 0 || self.data.online == 0 {
            return Err(Error::Config("data.history and data.online must be positive".into()));
        }
        let (n, p) = self.dims()?;
        if self.mhe.enabled {
            MheParams::new(self.mhe.rho, self.mhe.mu, self.mhe.horizon, Vector::zeros(n))
                .map_err(|e| e.stage("mhe section"))?;
        }
        for (what, v, len) in [
            ("mhe.prior_offset", &self.mhe.prior_offset, n),
            ("mhe.state_half_width", &self.mhe.state_half_width, n),
            ("mhe.noise_bound", &self.mhe.noise_bound, p),
        ] {
            if let Some(v) = v {
                if v.len() != len {
                    return Err(Error::Config(format!("{what} needs {len} entries")));
                }
            }
        }
        if self.eskf.enabled {
            EskfParams::isotropic(n, p, self.eskf.q, self.eskf.r, self.eskf.p0).map_err(|e| e.stage("eskf section"))?;
        }
        if self.kmhe.enabled && self.kmhe.lift_dim < n {
            return Err(Error::Config(format!("kmhe.lift_dim must be at least {n}")));
        }
        if self.synthesis.enabled {
            stability::LmiRegion::new(self.synthesis.initial_radius).map_err(|e| e.stage("synthesis section"))?;
        }
        Ok(())
    }

    fn dims(&self) -> Result<(usize, usize)> {
        match &self.plant {
            PlantConfig::RigidBody { .. } => Ok((3, 3)),
            PlantConfig::Affine {
                a,
                e,
                c,
                r,
                initial_state,
                ..
            } => {
                let am = matrix_from_rows(a, "plant.a")?;
                let cm = matrix_from_rows(c, "plant.c")?;
                let n = am.nrows();
                if am.ncols() != n || cm.ncols() != n || e.len() != n || r.len() != cm.nrows() || initial_state.len() != n {
                    return Err(Error::Config("affine plant dimensions disagree".into()));
                }
                Ok((n, cm.nrows()))
            }
        }
    }

    pub fn build_plant(&self) -> Result<(Box<dyn Plant>, Vector)> {
        match &self.plant {
            PlantConfig::RigidBody {
                initial_rate_deg,
                sample_interval,
            } => {
                let mut params = RigidBodyParams::detumbling_case();
                if let Some(ts) = sample_interval {
                    params.sample_interval = *ts;
                }
                let w0 = match initial_rate_deg {
                    Some(d) => dynamics::deg_to_rad(nalgebra::Vector3::from_column_slice(d)),
                    None => RigidBodyParams::detumbling_initial_rate(),
                };
                Ok((Box::new(RigidBodyPlant::new(params)), Vector::from_column_slice(w0.as_slice())))
            }
            PlantConfig::Affine {
                a,
                e,
                c,
                r,
                sample_interval,
                initial_state,
            } => {
                let plant = AffinePlant::new(
                    matrix_from_rows(a, "plant.a")?,
                    Vector::from_column_slice(e),
                    matrix_from_rows(c, "plant.c")?,
                    Vector::from_column_slice(r),
                    *sample_interval,
                )?;
                Ok((Box::new(plant), Vector::from_column_slice(initial_state)))
            }
        }
    }

    fn state_unit(&self) -> &'static str {
        match self.plant {
            PlantConfig::RigidBody { .. } => "rad/s",
            PlantConfig::Affine { .. } => "state",
        }
    }
}

/// Historical and online data of one scenario.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub history: Simulation,
    pub online: Simulation,
}

impl ScenarioData {
    /// Prior at the start of the online phase.
    pub fn online_start(&self) -> &Vector {
        &self.online.data.states[0]
    }
}

pub fn simulate_scenario(cfg: &ExperimentConfig) -> Result<ScenarioData> {
    let (plant, x0) = cfg.build_plant()?;
    let mut hn = cfg.scenario.history_noise.clone();
    hn.seed ^= cfg.seed;
    let history = dynamics::simulate(plant.as_ref(), &x0, cfg.data.history, &hn).map_err(|e| e.stage("history"))?;
    let start = history.data.states.last().expect("non-empty").clone();
    let mut on = cfg.scenario.online_noise.clone();
    on.seed ^= cfg.seed.rotate_left(17) ^ 0x5bd1_e995;
    let mut online = dynamics::simulate(plant.as_ref(), &start, cfg.data.online, &on).map_err(|e| e.stage("online"))?;
    online.data.start_index = 0;
    let mut history = history;
    history.data.start_index = -(cfg.data.history as i64);
    Ok(ScenarioData { history, online })
}

/// One row of an estimator log; empty cells for quantities an estimator
/// does not produce.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub t: usize,
    pub xhat: Vector,
    pub objective: Option<f64>,
    pub qp_iterations: Option<usize>,
    pub lyap_lhs: Option<f64>,
    pub lyap_rhs: Option<f64>,
    pub rges_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateLog {
    pub name: String,
    pub rows: Vec<EstimateRow>,
}

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_estimate_csv<W: Write>(log: &EstimateLog, n: usize, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("xhat{i}")));
    header.extend(["obj", "qp_iters", "lyap_lhs", "lyap_rhs", "rges_bound"].map(String::from));
    out.write_record(&header)?;
    for r in &log.rows {
        let mut rec = vec![r.t.to_string()];
        rec.extend(r.xhat.iter().map(|v| v.to_string()));
        rec.push(cell(r.objective));
        rec.push(cell(r.qp_iterations));
        rec.push(cell(r.lyap_lhs));
        rec.push(cell(r.lyap_rhs));
        rec.push(cell(r.rges_bound));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_estimate_csv(path: &Path, name: &str) -> Result<EstimateLog> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rd = csv::Reader::from_path(path)?;
    let header = rd.headers()?.clone();
    let n = header.iter().filter(|h| h.starts_with("xhat")).count();
    if header.len() != n + 6 {
        return Err(parse_err(1, "unexpected header".into()));
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let num = |k: usize| -> Result<Option<f64>> {
            let s = rec.get(k).unwrap_or("");
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|e| parse_err(line, format!("column {}: {e}", k + 1)))
            }
        };
        let t = rec
            .get(0)
            .unwrap_or("")
            .parse::<usize>()
            .map_err(|e| parse_err(line, format!("t: {e}")))?;
        let mut xhat = Vector::zeros(n);
        for j in 0..n {
            xhat[j] = num(1 + j)?.ok_or_else(|| parse_err(line, "missing estimate".into()))?;
        }
        rows.push(EstimateRow {
            t,
            xhat,
            objective: num(n + 1)?,
            qp_iterations: num(n + 2)?.map(|v| v as usize),
            lyap_lhs: num(n + 3)?,
            lyap_rhs: num(n + 4)?,
            rges_bound: num(n + 5)?,
        });
    }
    Ok(EstimateLog {
        name: name.to_string(),
        rows,
    })
}

/// Error statistics of a log against the online truth `x(1), x(2), ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub rmse: f64,
    pub final_rmse: f64,
    pub max_error: f64,
    pub max_axis_error: f64,
    pub final_error: f64,
}

pub fn error_metrics(log: &EstimateLog, states: &[Vector], final_window: f64) -> Result<ErrorMetrics> {
    if log.rows.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: empty log", log.name)));
    }
    let errs: Vec<Vector> = log
        .rows
        .iter()
        .map(|r| {
            states
                .get(r.t)
                .map(|x| &r.xhat - x)
                .ok_or_else(|| Error::Dimension(format!("{}: no truth for t = {}", log.name, r.t)))
        })
        .collect::<Result<_>>()?;
    let rms = |e: &[Vector]| (e.iter().map(|v| v.norm_squared()).sum::<f64>() / e.len() as f64).sqrt();
    let k = ((errs.len() as f64 * final_window).ceil() as usize).clamp(1, errs.len());
    Ok(ErrorMetrics {
        rmse: rms(&errs),
        final_rmse: rms(&errs[errs.len() - k..]),
        max_error: errs.iter().map(|e| e.norm()).fold(0.0, f64::max),
        max_axis_error: errs.iter().map(|e| e.amax()).fold(0.0, f64::max),
        final_error: errs.last().map_or(0.0, |e| e.norm()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub name: String,
    /// `ok`, or the error that stopped the estimator.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<ErrorMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lyapunov_pass_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rges_pass_rate: Option<f64>,
}

impl EstimatorSummary {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisIterationSummary {
    pub radius: f64,
    pub rho0: f64,
    pub mu0: f64,
    pub min_margin: f64,
    pub max_eigenvalue_modulus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSummary {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigenvalue_moduli: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margins: Option<Vec<(String, f64)>>,
    /// Whether the configured `(rho, mu)` exceed the certified bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameters_certified: Option<bool>,
    pub trace: Vec<SynthesisIterationSummary>,
}

impl SynthesisSummary {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub history_samples: usize,
    pub online_samples: usize,
    /// Norm of the first historical state.
    pub initial_state_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stack_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesis: Option<SynthesisSummary>,
    pub estimators: Vec<EstimatorSummary>,
    /// Every requested certificate passed.
    pub certificates_pass: bool,
}

impl RunReport {
    pub fn estimator(&self, name: &str) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.name == name)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub data: ScenarioData,
    pub logs: Vec<EstimateLog>,
}

pub const MHE: &str = "dd-mhe";
pub const ESKF: &str = "dd-eskf";
pub const KMHE: &str = "dd-kmhe";

fn mhe_params(cfg: &ExperimentConfig, prior: Vector) -> Result<MheParams> {
    let mut p = MheParams::new(cfg.mhe.rho, cfg.mhe.mu, cfg.mhe.horizon, prior)?;
    if let Some(h) = &cfg.mhe.state_half_width {
        p.state_set = StateSet::DataCentered {
            half_width: Vector::from_column_slice(h),
        };
    }
    if let Some(b) = &cfg.mhe.noise_bound {
        p.noise_set = NoiseSet::Box {
            bound: Vector::from_column_slice(b),
        };
    }
    Ok(p)
}

fn prior_of(cfg: &ExperimentConfig, data: &ScenarioData) -> Vector {
    let mut prior = data.online_start().clone();
    if let Some(off) = &cfg.mhe.prior_offset {
        prior += Vector::from_column_slice(off);
    }
    prior
}

/// Reference affine model `(A, e, C, r)` for one window start.
struct ReferenceModel {
    fixed: Option<(Matrix, Vector, Matrix, Vector)>,
    window: bool,
}

impl ReferenceModel {
    fn new(cfg: &ExperimentConfig, plant: &dyn Plant, data: &ScenarioData) -> Result<Self> {
        let kind = match (cfg.certificates.reference, &cfg.plant) {
            (Reference::Auto, PlantConfig::Affine { .. }) => None,
            (Reference::Auto, _) => Some(Reference::WindowStart),
            (r, _) => Some(r),
        };
        Ok(match kind {
            None => match &cfg.plant {
                PlantConfig::Affine { a, e, c, r, .. } => Self {
                    fixed: Some((
                        matrix_from_rows(a, "plant.a")?,
                        Vector::from_column_slice(e),
                        matrix_from_rows(c, "plant.c")?,
                        Vector::from_column_slice(r),
                    )),
                    window: false,
                },
                PlantConfig::RigidBody { .. } => unreachable!("auto resolves to window-start"),
            },
            Some(Reference::Identified) | Some(Reference::Auto) => {
                let m = baselines::identify_model(&data.history.data).map_err(|e| e.stage("certificate reference"))?;
                Self {
                    fixed: Some((m.a, m.e, m.c, m.r)),
                    window: false,
                }
            }
            Some(Reference::RunStart) => {
                let lin = dynamics::linearize(plant, data.online_start());
                Self {
                    fixed: Some((lin.a, lin.e, lin.c, lin.r)),
                    window: false,
                }
            }
            Some(Reference::WindowStart) => Self {
                fixed: None,
                window: true,
            },
        })
    }

    fn at(&self, plant: &dyn Plant, x: &Vector) -> (Matrix, Vector, Matrix, Vector) {
        match (&self.fixed, self.window) {
            (Some(m), false) => m.clone(),
            _ => {
                let l = dynamics::linearize(plant, x);
                (l.a, l.e, l.c, l.r)
            }
        }
    }
}

/// MHE log, Hankel stack rank and the certificate pass rates.
type MheOutcome = (EstimateLog, Option<usize>, Option<(f64, f64)>);

fn run_mhe(
    cfg: &ExperimentConfig,
    plant: &dyn Plant,
    data: &ScenarioData,
) -> Result<MheOutcome> {
    let prior = prior_of(cfg, data);
    let params = mhe_params(cfg, prior.clone())?;
    let kappa = params.kappa();
    let mut est = mhe::DdMhe::new(&data.history.data, params)?;
    let rank = est.stack_rank(cfg.mhe.horizon);
    let xs = &data.online.data.states;
    let ys = &data.online.data.outputs;
    let reference = if cfg.certificates.enabled {
        Some(ReferenceModel::new(cfg, plant, data)?)
    } else {
        None
    };
    let mut rges = RgesAccumulator::new((&xs[0] - &prior).norm(), kappa, cfg.mhe.mu);
    let mut rows = Vec::with_capacity(ys.len());
    let (mut t1_pass, mut rg_pass) = (0usize, 0usize);
    for y in ys {
        let s = est.step(y)?;
        let t = s.t;
        let mut row = EstimateRow {
            t,
            xhat: s.xhat.clone(),
            objective: Some(s.objective),
            qp_iterations: Some(s.qp_iterations),
            lyap_lhs: None,
            lyap_rhs: None,
            rges_bound: None,
        };
        if let Some(rf) = &reference {
            let m = s.window_len;
            let (a, e, c, r) = rf.at(plant, &xs[t - m]);
            let w: Vec<Vector> = (1..=m).map(|j| &xs[t - j + 1] - &a * &xs[t - j] - &e).collect();
            let v: Vec<Vector> = (1..=m).map(|j| &ys[t - j] - &c * &xs[t - j] - &r).collect();
            let truth = WindowTruth {
                x_t: xs[t].clone(),
                x_start: xs[t - m].clone(),
                w,
                v,
            };
            let chk = lyapunov_check(&truth, &s.xhat, &s.prior, cfg.mhe.rho, cfg.mhe.mu);
            t1_pass += chk.holds as usize;
            // The RGES bound is measured against one fixed model: the
            // run-start or identified reference, never per window.
            let (a0, e0, c0, r0) = if rf.window { rf.at(plant, &xs[0]) } else { (a, e, c, r) };
            let wn = (&xs[t] - &a0 * &xs[t - 1] - &e0).norm();
            let vn = (&ys[t - 1] - &c0 * &xs[t - 1] - &r0).norm();
            let bound = rges.push(wn, vn);
            rg_pass += ((&xs[t] - &s.xhat).norm() <= bound) as usize;
            row.lyap_lhs = Some(chk.lhs);
            row.lyap_rhs = Some(chk.rhs);
            row.rges_bound = Some(bound);
        }
        rows.push(row);
    }
    let n = rows.len().max(1) as f64;
    let rates = reference.map(|_| (t1_pass as f64 / n, rg_pass as f64 / n));
    Ok((
        EstimateLog {
            name: MHE.into(),
            rows,
        },
        rank,
        rates,
    ))
}

fn run_eskf(cfg: &ExperimentConfig, data: &ScenarioData) -> Result<EstimateLog> {
    let model = baselines::identify_model(&data.history.data)?;
    let (n, p) = (model.state_dim(), model.output_dim());
    let params = EskfParams::isotropic(n, p, cfg.eskf.q, cfg.eskf.r, cfg.eskf.p0)?;
    let steps = baselines::eskf_run(&model, &params, &data.online.data.outputs, &prior_of(cfg, data))?;
    Ok(EstimateLog {
        name: ESKF.into(),
        rows: steps
            .into_iter()
            .map(|s| EstimateRow {
                t: s.t,
                xhat: s.xhat,
                objective: None,
                qp_iterations: None,
                lyap_lhs: None,
                lyap_rhs: None,
                rges_bound: None,
            })
            .collect(),
    })
}

fn run_kmhe(cfg: &ExperimentConfig, data: &ScenarioData) -> Result<EstimateLog> {
    let lift = baselines::edmd_fit(
        &data.history.data,
        &KoopmanConfig {
            lift_dim: cfg.kmhe.lift_dim,
            seed: cfg.kmhe.seed,
        },
    )?;
    let params = KmheParams::new(cfg.mhe.rho, cfg.mhe.mu, cfg.mhe.horizon, prior_of(cfg, data))?;
    let steps = baselines::kmhe_run(&lift, &params, &data.online.data.outputs)?;
    Ok(EstimateLog {
        name: KMHE.into(),
        rows: steps
            .into_iter()
            .map(|s| EstimateRow {
                t: s.t,
                xhat: s.xhat,
                objective: Some(s.objective),
                qp_iterations: Some(s.qp_iterations),
                lyap_lhs: None,
                lyap_rhs: None,
                rges_bound: None,
            })
            .collect(),
    })
}

pub fn run_synthesis(cfg: &ExperimentConfig, history: &TrajectoryDataset) -> SynthesisSummary {
    let opts = SynthesisOptions {
        initial_radius: cfg.synthesis.initial_radius,
        max_halvings: cfg.synthesis.max_halvings,
        ..Default::default()
    };
    let (trace, result) = match stability::build_dual_data(history, opts.dual) {
        Ok(dd) => stability::synthesize_traced(&dd, &opts),
        Err(e) => (Vec::new(), Err(e)),
    };
    let trace = trace
        .iter()
        .map(|it| SynthesisIterationSummary {
            radius: it.radius,
            rho0: it.rho0,
            mu0: it.mu0,
            min_margin: it.min_margin,
            max_eigenvalue_modulus: it.max_eigenvalue_modulus,
        })
        .collect();
    match result {
        Ok(r) => SynthesisSummary {
            status: "ok".into(),
            rho0: Some(r.rho0),
            mu0: Some(r.mu0),
            radius: Some(r.radius),
            gain: Some(r.l.row_iter().map(|row| row.iter().copied().collect()).collect()),
            eigenvalue_moduli: Some(r.eigenvalue_moduli.clone()),
            margins: Some(r.margins.clone()),
            parameters_certified: Some(cfg.mhe.rho > r.rho0 && cfg.mhe.rho < 1.0 && cfg.mhe.mu > r.mu0),
            trace,
        },
        Err(e) => SynthesisSummary {
            status: e.to_string(),
            rho0: None,
            mu0: None,
            radius: None,
            gain: None,
            eigenvalue_moduli: None,
            margins: None,
            parameters_certified: None,
            trace,
        },
    }
}

/// Runs every enabled stage. Estimator failures are recorded in the report
/// rather than aborting the other estimators; data generation failures
/// abort.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (plant, _) = cfg.build_plant()?;
    let data = simulate_scenario(cfg)?;
    let synthesis = cfg
        .synthesis
        .enabled
        .then(|| run_synthesis(cfg, &data.history.data));
    let mut logs = Vec::new();
    let mut estimators = Vec::new();
    let mut stack_rank = None;
    let mut certificates_pass = true;
    let states = &data.online.data.states;
    let mut record = |name: &str, res: Result<EstimateLog>, rates: Option<(f64, f64)>, logs: &mut Vec<EstimateLog>| -> Result<bool> {
        match res {
            Ok(log) => {
                let metrics = error_metrics(&log, states, cfg.final_window)?;
                logs.push(log);
                estimators.push(EstimatorSummary {
                    name: name.into(),
                    status: "ok".into(),
                    metrics: Some(metrics),
                    lyapunov_pass_rate: rates.map(|r| r.0),
                    rges_pass_rate: rates.map(|r| r.1),
                });
                Ok(true)
            }
            Err(e) => {
                estimators.push(EstimatorSummary {
                    name: name.into(),
                    status: e.to_string(),
                    metrics: None,
                    lyapunov_pass_rate: None,
                    rges_pass_rate: None,
                });
                Ok(false)
            }
        }
    };
    if cfg.mhe.enabled {
        let res = run_mhe(cfg, plant.as_ref(), &data);
        let (res, rates) = match res {
            Ok((log, rank, rates)) => {
                stack_rank = rank;
                (Ok(log), rates)
            }
            Err(e) => (Err(e), None),
        };
        let ok = record(MHE, res, rates, &mut logs)?;
        if cfg.certificates.enabled {
            certificates_pass &= ok && rates.is_some_and(|(a, b)| a == 1.0 && b == 1.0);
        }
    }
    if cfg.eskf.enabled {
        record(ESKF, run_eskf(cfg, &data), None, &mut logs)?;
    }
    if cfg.kmhe.enabled {
        record(KMHE, run_kmhe(cfg, &data), None, &mut logs)?;
    }
    if let Some(s) = &synthesis {
        certificates_pass &= s.status == "ok" && s.parameters_certified == Some(true);
    }
    let report = RunReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        history_samples: cfg.data.history,
        online_samples: cfg.data.online,
        initial_state_norm: data.history.data.states[0].norm(),
        stack_rank,
        synthesis,
        estimators,
        certificates_pass,
    };
    Ok(RunOutput { report, data, logs })
}

/// Writes `config.toml`, `history.csv`, `online.csv`, one CSV per estimator,
/// `report.toml` and per-axis SVG plots into `dir`.
pub fn write_artifacts(cfg: &ExperimentConfig, out: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    put("config.toml", cfg.to_toml()?.into_bytes())?;
    let mut buf = Vec::new();
    behavioral::write_trajectory_csv(&out.data.history.data, &mut buf)?;
    put("history.csv", std::mem::take(&mut buf))?;
    behavioral::write_trajectory_csv(&out.data.online.data, &mut buf)?;
    put("online.csv", std::mem::take(&mut buf))?;
    let n = out.data.online.data.state_dim();
    for log in &out.logs {
        write_estimate_csv(log, n, &mut buf)?;
        put(&format!("{}.csv", log.name), std::mem::take(&mut buf))?;
    }
    put("report.toml", out.report.to_toml()?.into_bytes())?;
    let ts = out.data.online.data.sample_interval;
    for axis in 0..n {
        let truth: Vec<(f64, f64)> = out
            .data
            .online
            .data
            .states
            .iter()
            .enumerate()
            .skip(1)
            .map(|(t, x)| (t as f64 * ts, x[axis]))
            .collect();
        let mut series = vec![svg::Series {
            label: "truth".into(),
            points: truth,
        }];
        for log in &out.logs {
            series.push(svg::Series {
                label: log.name.clone(),
                points: log.rows.iter().map(|r| (r.t as f64 * ts, r.xhat[axis])).collect(),
            });
        }
        let chart = svg::line_chart(
            &format!("{}: axis {}", cfg.name, axis + 1),
            "time (s)",
            &format!("x{} ({})", axis + 1, cfg.state_unit()),
            &series,
        );
        put(&format!("axis{}.svg", axis + 1), chart.into_bytes())?;
    }
    Ok(written)
}

/// Runs the experiment and writes artifacts. On failure, a `manifest.txt`
/// lists what was written before the error.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutput> {
    let result = run_experiment(cfg).and_then(|out| write_artifacts(cfg, &out, dir).map(|_| out));
    if let Err(e) = &result {
        fs::create_dir_all(dir)?;
        let mut manifest = format!("error: {e}\n");
        if let Ok(entries) = fs::read_dir(dir) {
            let mut names: Vec<String> = entries.filter_map(|d| d.ok()).map(|d| d.file_name().to_string_lossy().into_owned()).collect();
            names.sort();
            for n in names.into_iter().filter(|n| n != "manifest.txt") {
                manifest.push_str(&format!("written: {n}\n"));
            }
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
    }
    result
}

pub const SWEEP_VALUES: [f64; 4] = [1e3, 1e4, 1e5, 1e6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub mu: f64,
    pub report: RunReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
}

impl SweepReport {
    /// `(mu, final-window RMSE)` for one estimator, skipping failed runs.
    pub fn final_rmse(&self, estimator: &str) -> Vec<(f64, f64)> {
        self.entries
            .iter()
            .filter_map(|e| {
                let s = e.report.estimator(estimator)?;
                Some((e.mu, s.metrics.as_ref()?.final_rmse))
            })
            .collect()
    }
}

fn mu_dir(mu: f64) -> String {
    format!("mu_{mu:e}")
}

/// Replays the scenario for each `mu` in parallel. With `dir`, each entry
/// writes into its own subdirectory.
pub fn sweep_mu(cfg: &ExperimentConfig, values: &[f64], dir: Option<&Path>) -> Result<SweepReport> {
    let entries = values
        .par_iter()
        .map(|&mu| {
            let mut c = cfg.clone();
            c.mhe.mu = mu;
            c.name = format!("{} mu={mu:e}", cfg.name);
            let out = match dir {
                Some(d) => run_to_dir(&c, &d.join(mu_dir(mu)))?,
                None => run_experiment(&c)?,
            };
            Ok(SweepEntry { mu, report: out.report })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = SweepReport { entries };
    if let Some(d) = dir {
        fs::write(
            d.join("sweep.toml"),
            toml::to_string(&report).map_err(|e| Error::Config(e.to_string()))?,
        )?;
        let series: Vec<svg::Series> = [MHE, KMHE]
            .iter()
            .map(|name| svg::Series {
                label: name.to_string(),
                points: report.final_rmse(name).into_iter().map(|(m, r)| (m.log10(), r)).collect(),
            })
            .filter(|s| !s.points.is_empty())
            .collect();
        fs::write(
            d.join("sweep.svg"),
            svg::line_chart("final-window RMSE vs mu", "log10(mu)", &format!("RMSE ({})", cfg.state_unit()), &series),
        )?;
    }
    Ok(report)
}

/// Recomputes estimator metrics from the CSVs of a run directory and checks
/// them against its `report.toml`. Returns the report and the largest
/// absolute discrepancy.
pub fn verify_run_dir(dir: &Path) -> Result<(RunReport, f64)> {
    let report = RunReport::from_toml(&fs::read_to_string(dir.join("report.toml"))?)?;
    let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
    let online = behavioral::load_trajectory_csv(&dir.join("online.csv"))?;
    let mut worst = 0.0f64;
    for s in &report.estimators {
        let Some(m) = &s.metrics else { continue };
        let log = read_estimate_csv(&dir.join(format!("{}.csv", s.name)), &s.name)?;
        let r = error_metrics(&log, &online.states, cfg.final_window)?;
        for (a, b) in [
            (r.rmse, m.rmse),
            (r.final_rmse, m.final_rmse),
            (r.max_error, m.max_error),
            (r.max_axis_error, m.max_axis_error),
            (r.final_error, m.final_error),
        ] {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((report, worst))
}
