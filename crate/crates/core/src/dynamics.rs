//! Ground-truth plants: rigid-body attitude rates under eddy-current braking,
//! plus an affine test plant, with Euler discretization, linearization and a
//! noise-injecting simulator.
//!
//! All rates are rad/s internally. Degree inputs are converted by the config
//! layer only.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::behavioral::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

/// Discrete-time autonomous plant `x+ = f(x)`, `y = h(x)`.
pub trait Plant: Send + Sync {
    fn state_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn sample_interval(&self) -> f64;
    fn transition(&self, x: &Vector) -> Vector;
    fn output(&self, x: &Vector) -> Vector;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidBodyParams {
    /// Inertia tensor, kg m^2.
    pub inertia: Matrix3<f64>,
    /// Effective magnetic tensor, S m^4.
    pub m_eff: Matrix3<f64>,
    /// Field at the target centre of gravity, T.
    pub b_field: Vector3<f64>,
    /// Field Jacobian at the centre of gravity, T/m.
    pub field_jacobian: Matrix3<f64>,
    /// Chaser-to-target position, m.
    pub position: Vector3<f64>,
    /// Chaser angular velocity, rad/s.
    pub chaser_rate: Vector3<f64>,
    pub sample_interval: f64,
    inertia_inv: Matrix3<f64>,
}

pub fn deg_to_rad(v: Vector3<f64>) -> Vector3<f64> {
    v * std::f64::consts::PI / 180.0
}

impl RigidBodyParams {
    pub fn new(
        inertia: Matrix3<f64>,
        m_eff: Matrix3<f64>,
        b_field: Vector3<f64>,
        field_jacobian: Matrix3<f64>,
        position: Vector3<f64>,
        chaser_rate: Vector3<f64>,
        sample_interval: f64,
    ) -> Result<Self> {
        if !(sample_interval > 0.0) {
            return Err(Error::InvalidArgument("sample interval must be positive".into()));
        }
        if (inertia - inertia.transpose()).amax() > 1e-9 * inertia.amax() {
            return Err(Error::InvalidArgument("inertia tensor is not symmetric".into()));
        }
        if inertia.cholesky().is_none() {
            return Err(Error::InvalidArgument(
                "inertia tensor is not positive definite".into(),
            ));
        }
        let inertia_inv = inertia
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("singular inertia tensor".into()))?;
        Ok(Self {
            inertia,
            m_eff,
            b_field,
            field_jacobian,
            position,
            chaser_rate,
            sample_interval,
            inertia_inv,
        })
    }

    /// Published de-tumbling simulation case; `0.89e5` scales all three axes
    /// of the magnetic tensor.
    pub fn detumbling_case() -> Self {
        let jac = Matrix3::new(-23.0, -116.0, 8.0, -116.0, -119.0, 49.0, 8.0, 49.0, 142.0) * 1e-4;
        Self::new(
            Matrix3::from_diagonal(&Vector3::new(4513.2, 4138.1, 3282.5)),
            Matrix3::from_diagonal(&Vector3::new(5.908, 5.908, 1.951)) * 0.89e5,
            Vector3::new(41.0, 51.0, -41.0) * 1e-4,
            jac,
            Vector3::new(0.5, 1.0, 0.5),
            Vector3::zeros(),
            0.01,
        )
        .expect("published parameters are valid")
    }

    /// Initial target rate of the published case, rad/s.
    pub fn detumbling_initial_rate() -> Vector3<f64> {
        deg_to_rad(Vector3::new(14.364, 1.224, 3.4195))
    }

    pub fn inertia_inv(&self) -> &Matrix3<f64> {
        &self.inertia_inv
    }
}

/// Eddy-current torque on the target: `(M_eff((w - w_c) x B)) x B`.
pub fn eddy_torque_target(omega: &Vector3<f64>, p: &RigidBodyParams) -> Vector3<f64> {
    let u = (omega - p.chaser_rate).cross(&p.b_field);
    (p.m_eff * u).cross(&p.b_field)
}

/// Induced force on the target: `Lambda M_eff ((w - w_c) x B)`.
pub fn eddy_force(omega: &Vector3<f64>, p: &RigidBodyParams) -> Vector3<f64> {
    let u = (omega - p.chaser_rate).cross(&p.b_field);
    p.field_jacobian * (p.m_eff * u)
}

/// Torque measured on the chaser: `-tau_t - r x F`.
pub fn measured_output(omega: &Vector3<f64>, p: &RigidBodyParams) -> Vector3<f64> {
    -eddy_torque_target(omega, p) - p.position.cross(&eddy_force(omega, p))
}

pub fn kinetic_energy(omega: &Vector3<f64>, p: &RigidBodyParams) -> f64 {
    0.5 * omega.dot(&(p.inertia * omega))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    pub omega: Vector3<f64>,
    pub t: usize,
}

#[derive(Debug, Clone)]
pub struct RigidBodyPlant {
    pub params: RigidBodyParams,
}

impl RigidBodyPlant {
    pub fn new(params: RigidBodyParams) -> Self {
        Self { params }
    }

    fn rate_derivative(&self, w: &Vector3<f64>) -> Vector3<f64> {
        let p = &self.params;
        p.inertia_inv * (eddy_torque_target(w, p) - w.cross(&(p.inertia * w)))
    }

    /// One forward-Euler step with additive disturbance `w`.
    pub fn step(&self, state: &PlantState, w: &Vector3<f64>) -> PlantState {
        let next = state.omega + self.params.sample_interval * self.rate_derivative(&state.omega) + w;
        PlantState {
            omega: next,
            t: state.t + 1,
        }
    }
}

fn to_v3(x: &Vector) -> Vector3<f64> {
    Vector3::new(x[0], x[1], x[2])
}

fn from_v3(v: Vector3<f64>) -> Vector {
    Vector::from_column_slice(v.as_slice())
}

impl Plant for RigidBodyPlant {
    fn state_dim(&self) -> usize {
        3
    }

    fn output_dim(&self) -> usize {
        3
    }

    fn sample_interval(&self) -> f64 {
        self.params.sample_interval
    }

    fn transition(&self, x: &Vector) -> Vector {
        let w = to_v3(x);
        from_v3(w + self.params.sample_interval * self.rate_derivative(&w))
    }

    fn output(&self, x: &Vector) -> Vector {
        from_v3(measured_output(&to_v3(x), &self.params))
    }
}

/// `x+ = A x + e`, `y = C x + r`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePlant {
    pub a: Matrix,
    pub e: Vector,
    pub c: Matrix,
    pub r: Vector,
    pub sample_interval: f64,
}

impl AffinePlant {
    pub fn new(a: Matrix, e: Vector, c: Matrix, r: Vector, sample_interval: f64) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || e.len() != n || c.ncols() != n || r.len() != c.nrows() {
            return Err(Error::Dimension("inconsistent affine plant matrices".into()));
        }
        if !(sample_interval > 0.0) {
            return Err(Error::InvalidArgument("sample interval must be positive".into()));
        }
        Ok(Self {
            a,
            e,
            c,
            r,
            sample_interval,
        })
    }
}

impl Plant for AffinePlant {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    fn sample_interval(&self) -> f64 {
        self.sample_interval
    }

    fn transition(&self, x: &Vector) -> Vector {
        &self.a * x + &self.e
    }

    fn output(&self, x: &Vector) -> Vector {
        &self.c * x + &self.r
    }
}

/// Local affine model `x+ ~ A x + e`, `y ~ C x + r` about a point.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub point: Vector,
    pub a: Matrix,
    pub e: Vector,
    pub c: Matrix,
    pub r: Vector,
}

impl Linearization {
    /// Residuals `w = f(x) - A x - e`, `v = h(x) - C x - r`.
    pub fn residuals(&self, plant: &dyn Plant, x: &Vector) -> (Vector, Vector) {
        let w = plant.transition(x) - &self.a * x - &self.e;
        let v = plant.output(x) - &self.c * x - &self.r;
        (w, v)
    }
}

fn central_jacobian(g: impl Fn(&Vector) -> Vector, x: &Vector, rows: usize) -> Matrix {
    let n = x.len();
    let mut jac = Matrix::zeros(rows, n);
    for i in 0..n {
        let h = 1e-6 * (1.0 + x[i].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let col = (g(&xp) - g(&xm)) / (2.0 * h);
        jac.set_column(i, &col);
    }
    jac
}

/// Central-difference linearization with step `1e-6 (1 + |x_i|)`.
pub fn linearize(plant: &dyn Plant, point: &Vector) -> Linearization {
    let a = central_jacobian(|x| plant.transition(x), point, plant.state_dim());
    let c = central_jacobian(|x| plant.output(x), point, plant.output_dim());
    let e = plant.transition(point) - &a * point;
    let r = plant.output(point) - &c * point;
    Linearization {
        point: point.clone(),
        a,
        e,
        c,
        r,
    }
}

/// One additive noise source; a channel is the sum of its components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseComponent {
    Zero,
    Gaussian {
        sigma: f64,
    },
    /// Constant `amplitude` on steps `start..end`.
    Pulse {
        start: usize,
        end: usize,
        amplitude: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(default)]
    pub process: Vec<NoiseComponent>,
    #[serde(default)]
    pub measurement: Vec<NoiseComponent>,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn gaussian(process_sigma: f64, measurement_sigma: f64, seed: u64) -> Self {
        Self {
            process: vec![NoiseComponent::Gaussian {
                sigma: process_sigma,
            }],
            measurement: vec![NoiseComponent::Gaussian {
                sigma: measurement_sigma,
            }],
            seed,
        }
    }

    /// Realize `steps` samples of both channels.
    pub fn realize(&self, steps: usize, n: usize, p: usize) -> Result<(Vec<Vector>, Vec<Vector>)> {
        // Separate streams so adding measurement noise leaves the process
        // realization untouched.
        let mut rng_w = ChaCha8Rng::seed_from_u64(self.seed);
        let mut rng_v = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let w = realize_channel(&self.process, steps, n, &mut rng_w)?;
        let v = realize_channel(&self.measurement, steps, p, &mut rng_v)?;
        Ok((w, v))
    }
}

fn realize_channel(
    comps: &[NoiseComponent],
    steps: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vector>> {
    let mut out = vec![Vector::zeros(dim); steps];
    for comp in comps {
        match comp {
            NoiseComponent::Zero => {}
            NoiseComponent::Gaussian { sigma } => {
                let dist = Normal::new(0.0, *sigma)
                    .map_err(|e| Error::InvalidArgument(format!("gaussian noise: {e}")))?;
                for s in out.iter_mut() {
                    for c in s.iter_mut() {
                        *c += dist.sample(rng);
                    }
                }
            }
            NoiseComponent::Pulse {
                start,
                end,
                amplitude,
            } => {
                if amplitude.len() != dim {
                    return Err(Error::Dimension(format!(
                        "pulse amplitude has {} entries, channel has {dim}",
                        amplitude.len()
                    )));
                }
                for s in out.iter_mut().take((*end).min(steps)).skip(*start) {
                    for (c, a) in s.iter_mut().zip(amplitude) {
                        *c += a;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// A simulated run with the realized noise kept as ground truth.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub data: TrajectoryDataset,
    pub process_noise: Vec<Vector>,
    pub measurement_noise: Vec<Vector>,
}

/// `x(k+1) = f(x(k)) + w(k)`, `y(k) = h(x(k)) + v(k)` for `k < horizon`.
pub fn simulate(plant: &dyn Plant, x0: &Vector, horizon: usize, noise: &NoiseSpec) -> Result<Simulation> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be >= 1".into()));
    }
    if x0.len() != plant.state_dim() {
        return Err(Error::Dimension("initial state dimension".into()));
    }
    let (w, v) = noise.realize(horizon, plant.state_dim(), plant.output_dim())?;
    let mut states = Vec::with_capacity(horizon + 1);
    let mut outputs = Vec::with_capacity(horizon);
    states.push(x0.clone());
    for k in 0..horizon {
        let x = &states[k];
        outputs.push(plant.output(x) + &v[k]);
        let next = plant.transition(x) + &w[k];
        if next.iter().any(|c| !c.is_finite()) {
            return Err(Error::Blowup { step: k + 1 });
        }
        states.push(next);
    }
    Ok(Simulation {
        data: TrajectoryDataset::new(plant.sample_interval(), 0, states, outputs)?,
        process_noise: w,
        measurement_noise: v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case() -> RigidBodyParams {
        RigidBodyParams::detumbling_case()
    }

    #[test]
    fn torque_vanishes_at_chaser_rate_and_along_field() {
        let p = case();
        assert_eq!(eddy_torque_target(&p.chaser_rate.clone(), &p), Vector3::zeros());
        let along = p.b_field * 37.0;
        assert!(eddy_torque_target(&along, &p).norm() < 1e-15);
        assert_eq!(eddy_force(&p.chaser_rate.clone(), &p), Vector3::zeros());
    }

    #[test]
    fn torque_brakes_published_rate() {
        let p = case();
        let w = RigidBodyParams::detumbling_initial_rate();
        let tau = eddy_torque_target(&w, &p);
        assert!(tau.iter().all(|c| c.is_finite()));
        assert!(tau.dot(&(w - p.chaser_rate)) <= 0.0);
        // Direct triple-product expansion: tau = -B x (M (u)), u = w x B.
        let u = w.cross(&p.b_field);
        let direct = -p.b_field.cross(&(p.m_eff * u));
        assert!((tau - direct).norm() < 1e-12 * tau.norm());
        // <tau, B> vanishes: tau is a cross product with B.
        assert!(tau.dot(&p.b_field).abs() < 1e-12 * tau.norm() * p.b_field.norm());
    }

    #[test]
    fn force_zero_without_field_and_linear_in_rate() {
        let mut p = case();
        let w = RigidBodyParams::detumbling_initial_rate();
        let f1 = eddy_force(&w, &p);
        let f2 = eddy_force(&(2.0 * w), &p);
        assert!((f2 - 2.0 * f1).norm() < 1e-12 * f2.norm());
        p.b_field = Vector3::zeros();
        assert_eq!(eddy_force(&w, &p), Vector3::zeros());
    }

    #[test]
    fn output_composition() {
        let mut p = case();
        let w = RigidBodyParams::detumbling_initial_rate();
        assert_eq!(measured_output(&p.chaser_rate.clone(), &p), Vector3::zeros());
        // Hand composition for the published input.
        let u = w.cross(&p.b_field);
        let mu = p.m_eff * u;
        let tau_t = mu.cross(&p.b_field);
        let force = p.field_jacobian * mu;
        let want = -tau_t - p.position.cross(&force);
        assert!((measured_output(&w, &p) - want).norm() < 1e-12);
        p.position = Vector3::zeros();
        assert_eq!(measured_output(&w, &p), -eddy_torque_target(&w, &p));
    }

    #[test]
    fn torque_free_sphere_keeps_rate() {
        let mut p = case();
        p.m_eff = Matrix3::zeros();
        let p = RigidBodyParams::new(
            Matrix3::identity() * 10.0,
            p.m_eff,
            p.b_field,
            p.field_jacobian,
            p.position,
            p.chaser_rate,
            0.01,
        )
        .unwrap();
        let plant = RigidBodyPlant::new(p);
        let s = PlantState {
            omega: Vector3::new(0.3, -0.2, 0.1),
            t: 0,
        };
        let next = plant.step(&s, &Vector3::zeros());
        assert!((next.omega - s.omega).norm() < 1e-15);
        assert_eq!(next.t, 1);
        let zero = PlantState {
            omega: Vector3::zeros(),
            t: 0,
        };
        let w = Vector3::new(1e-3, 2e-3, -1e-3);
        assert_eq!(plant.step(&zero, &w).omega, w);
    }

    #[test]
    fn rejects_indefinite_inertia() {
        let p = case();
        let bad = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, 1.0));
        assert!(RigidBodyParams::new(
            bad,
            p.m_eff,
            p.b_field,
            p.field_jacobian,
            p.position,
            p.chaser_rate,
            0.01
        )
        .is_err());
    }

    #[test]
    fn energy_is_nonincreasing_without_noise() {
        let p = case();
        let plant = RigidBodyPlant::new(p.clone());
        let mut s = PlantState {
            omega: RigidBodyParams::detumbling_initial_rate(),
            t: 0,
        };
        let mut e = kinetic_energy(&s.omega, &p);
        for _ in 0..2000 {
            s = plant.step(&s, &Vector3::zeros());
            let e2 = kinetic_energy(&s.omega, &p);
            assert!(e2 <= e, "energy rose at step {}: {e} -> {e2}", s.t);
            e = e2;
        }
    }

    #[test]
    fn linearization_recovers_affine_plant() {
        let a = Matrix::from_row_slice(2, 2, &[0.9, 0.1, -0.2, 0.8]);
        let c = Matrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let plant = AffinePlant::new(
            a.clone(),
            Vector::from_vec(vec![0.5, -0.1]),
            c.clone(),
            Vector::from_vec(vec![3.0]),
            0.1,
        )
        .unwrap();
        let pt = Vector::from_vec(vec![1.5, -2.0]);
        let lin = linearize(&plant, &pt);
        assert!((lin.a - a).amax() < 1e-9);
        assert!((lin.c - c).amax() < 1e-9);
        assert!((&lin.e - &plant.e).amax() < 1e-8);
        assert!((&lin.r - &plant.r).amax() < 1e-8);
    }

    #[test]
    fn linearization_is_exact_at_its_point() {
        let plant = RigidBodyPlant::new(case());
        let pt = from_v3(RigidBodyParams::detumbling_initial_rate());
        let lin = linearize(&plant, &pt);
        let (w, v) = lin.residuals(&plant, &pt);
        assert!(w.amax() < 1e-15 && v.amax() < 1e-12);
    }

    #[test]
    fn jacobian_matches_eighth_order_stencil() {
        // Independent oracle: 8th-order central stencil with a larger step.
        let plant = RigidBodyPlant::new(case());
        let x0 = from_v3(RigidBodyParams::detumbling_initial_rate());
        let lin = linearize(&plant, &x0);
        let coef = [4.0 / 5.0, -1.0 / 5.0, 4.0 / 105.0, -1.0 / 280.0];
        let h = 1e-3;
        let mut oracle = Matrix::zeros(3, 3);
        for i in 0..3 {
            let mut col = Vector::zeros(3);
            for (k, ck) in coef.iter().enumerate() {
                let d = (k + 1) as f64 * h;
                let mut xp = x0.clone();
                let mut xm = x0.clone();
                xp[i] += d;
                xm[i] -= d;
                col += (plant.transition(&xp) - plant.transition(&xm)) * (*ck / h);
            }
            oracle.set_column(i, &col);
        }
        let rel = (&lin.a - &oracle).amax() / oracle.amax();
        assert!(rel < 1e-6, "relative jacobian error {rel}");
    }

    #[test]
    fn linearization_error_is_second_order() {
        let plant = RigidBodyPlant::new(case());
        let x0 = from_v3(RigidBodyParams::detumbling_initial_rate());
        let lin = linearize(&plant, &x0);
        let dir = Vector::from_vec(vec![0.6, -0.48, 0.64]);
        let mut pts = Vec::new();
        for k in 0..=6 {
            let d = 1e-4 * 10f64.powf(k as f64 / 2.0);
            let x = &x0 + &dir * d;
            let (w, _) = lin.residuals(&plant, &x);
            pts.push((d.ln(), w.norm().ln()));
        }
        let m = pts.len() as f64;
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
        let (mx, my) = (sx / m, sy / m);
        let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = num / den;
        assert!((1.8..=2.2).contains(&slope), "slope {slope}");
    }

    #[test]
    fn zero_noise_simulation_is_bit_reproducible() {
        let plant = RigidBodyPlant::new(case());
        let x0 = from_v3(RigidBodyParams::detumbling_initial_rate());
        let a = simulate(&plant, &x0, 300, &NoiseSpec::zero()).unwrap();
        let b = simulate(&plant, &x0, 300, &NoiseSpec::zero()).unwrap();
        assert_eq!(a.data, b.data);
        let g = NoiseSpec::gaussian(1e-3, 1e-3, 9);
        let c = simulate(&plant, &x0, 300, &g).unwrap();
        let d = simulate(&plant, &x0, 300, &g).unwrap();
        assert_eq!(c.data, d.data);
    }

    #[test]
    fn simulation_reports_blowup_step() {
        let plant = AffinePlant::new(
            Matrix::from_element(1, 1, 1e200),
            Vector::zeros(1),
            Matrix::identity(1, 1),
            Vector::zeros(1),
            1.0,
        )
        .unwrap();
        let e = simulate(&plant, &Vector::from_element(1, 1e200), 5, &NoiseSpec::zero()).unwrap_err();
        assert!(matches!(e, Error::Blowup { step: 1 }));
    }

    #[test]
    fn pulse_noise_is_windowed() {
        let spec = NoiseSpec {
            process: vec![NoiseComponent::Pulse {
                start: 2,
                end: 4,
                amplitude: vec![1.0, -1.0],
            }],
            measurement: vec![],
            seed: 0,
        };
        let (w, v) = spec.realize(6, 2, 1).unwrap();
        assert_eq!(w[1], Vector::zeros(2));
        assert_eq!(w[2], Vector::from_vec(vec![1.0, -1.0]));
        assert_eq!(w[3], Vector::from_vec(vec![1.0, -1.0]));
        assert_eq!(w[4], Vector::zeros(2));
        assert!(v.iter().all(|x| x[0] == 0.0));
    }
}
