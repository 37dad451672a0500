//! Fixtures shared by the benchmarks.

use ddmhe::behavioral::TrajectoryDataset;
use ddmhe::dynamics::{self, NoiseSpec, RigidBodyParams, RigidBodyPlant};
use ddmhe::mhe::MheParams;
use ddmhe::{Matrix, Vector};

/// Noise-free de-tumbling history of `len` samples.
pub fn detumbling_history(len: usize) -> TrajectoryDataset {
    let plant = RigidBodyPlant::new(RigidBodyParams::detumbling_case());
    let x0 = Vector::from_column_slice(RigidBodyParams::detumbling_initial_rate().as_slice());
    dynamics::simulate(&plant, &x0, len, &NoiseSpec::zero())
        .expect("published case simulates")
        .data
}

/// Estimator weights used in the de-tumbling experiments.
pub fn detumbling_params(prior: Vector) -> MheParams {
    MheParams::new(0.8, 1e5, 10, prior).expect("valid weights")
}

/// `[H_L(y); H_{L+1}(x); 1']` for the given history.
pub fn hankel_stack(ds: &TrajectoryDataset, depth: usize) -> Matrix {
    ddmhe::behavioral::build_stack(ds, depth, Default::default())
        .expect("rank condition holds")
        .stacked()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_build() {
        let ds = detumbling_history(200);
        assert_eq!(ds.outputs.len(), 200);
        let h = hankel_stack(&ds, 10);
        assert_eq!(h.nrows(), 10 * 3 + 11 * 3 + 1);
        let _ = detumbling_params(ds.states[0].clone());
    }
}
