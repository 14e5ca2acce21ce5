//! Finite-difference verification suites for the differentiable ops and
//! the full network, shared by the CLI entry point and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_full, BatchNormState, Mode, Tape, Var};
use crate::cloud::{CropBounds, PointCloud};
use crate::error::Result;
use crate::loss::{tape_lovasz_softmax, tape_total_loss, LossConfig};
use crate::network::{forward_batch, init_params, NetworkConfig, NetworkInput, NetworkParams};
use crate::projection::{PlaneKind, PlaneSetConfig, PolarGridConfig, RangeImageConfig};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

/// One finite-difference comparison.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_error < self.tolerance
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::new(
        shape,
        (0..shape.iter().product())
            .map(|_| rng.gen_range(-1.5..1.5))
            .collect(),
    )
}

fn check<F>(name: &str, f: F, inputs: &[Tensor<f64>]) -> CheckResult
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    CheckResult {
        name: name.to_string(),
        rel_error: grad_check_full(&f, inputs, FD_STEP),
        tolerance: OP_TOLERANCE,
    }
}

/// Per-operation finite-difference checks on randomized shapes.
pub fn op_suite(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();

    let inputs = [
        random_tensor(&mut rng, &[5, 3]),
        random_tensor(&mut rng, &[4, 3]),
        random_tensor(&mut rng, &[4]),
    ];
    results.push(check(
        "linear_pointwise",
        |t, v| {
            let y = t.linear_pointwise(v[0], v[1], v[2]).unwrap();
            t.mean_all(y)
        },
        &inputs,
    ));

    let inputs = [
        random_tensor(&mut rng, &[4, 4, 2]),
        random_tensor(&mut rng, &[3, 3, 3, 2]),
        random_tensor(&mut rng, &[3]),
    ];
    results.push(check(
        "conv2d_same",
        |t, v| {
            let y = t.conv2d_same(v[0], v[1], v[2]).unwrap();
            let s = t.sigmoid(y);
            t.mean_all(s)
        },
        &inputs,
    ));

    let inputs = [
        random_tensor(&mut rng, &[6, 3]),
        random_tensor(&mut rng, &[3]),
        random_tensor(&mut rng, &[3]),
    ];
    results.push(check(
        "depthwise_pointwise",
        |t, v| {
            let y = t.depthwise_pointwise(v[0], v[1], v[2]).unwrap();
            let s = t.sigmoid(y);
            t.mean_all(s)
        },
        &inputs,
    ));

    let inputs = [
        random_tensor(&mut rng, &[7, 3]),
        random_tensor(&mut rng, &[3]),
        random_tensor(&mut rng, &[3]),
    ];
    for mode in [Mode::Train, Mode::Eval] {
        let label = match mode {
            Mode::Train => "batch_norm(train)",
            Mode::Eval => "batch_norm(eval)",
        };
        results.push(check(
            label,
            move |t, v| {
                let mut state = BatchNormState::new(3, 0.1, 1e-5);
                state.running_mean = vec![0.2, -0.4, 1.0];
                state.running_var = vec![1.5, 0.7, 2.0];
                let y = t.batch_norm(v[0], v[1], v[2], &mut state, mode).unwrap();
                let s = t.sigmoid(y);
                t.mean_all(s)
            },
            &inputs,
        ));
    }

    let inputs = [random_tensor(&mut rng, &[5, 4])];
    results.push(check(
        "relu",
        |t, v| {
            let y = t.relu(v[0]);
            t.mean_all(y)
        },
        &inputs,
    ));
    results.push(check(
        "sigmoid",
        |t, v| {
            let y = t.sigmoid(v[0]);
            t.mean_all(y)
        },
        &inputs,
    ));
    results.push(check(
        "softmax_rows",
        |t, v| {
            let y = t.softmax_rows(v[0]);
            let s = t.mul(y, y).unwrap();
            t.mean_all(s)
        },
        &inputs,
    ));

    let inputs = [random_tensor(&mut rng, &[6, 4])];
    results.push(check(
        "max_over_neighbors",
        |t, v| {
            let m = t.max_over_neighbors(v[0], 3).unwrap();
            let s = t.sigmoid(m);
            t.mean_all(s)
        },
        &inputs,
    ));

    let assignment = std::rc::Rc::new(crate::projection::CellAssignment {
        cells: vec![0, 2, 2, 5, 1, 2],
        counts: vec![1, 1, 3, 0, 0, 1],
        height: 2,
        width: 3,
    });
    let inputs = [random_tensor(&mut rng, &[6, 3])];
    results.push(check(
        "scatter_mean/gather_cells",
        move |t, v| {
            let grid = t.scatter_mean(v[0], assignment.clone()).unwrap();
            let back = t.gather_cells(grid, std::rc::Rc::new(assignment.cells.clone())).unwrap();
            let s = t.sigmoid(back);
            t.mean_all(s)
        },
        &inputs,
    ));

    let indices = std::rc::Rc::new(vec![1u32, 2, 0, 2, 0, 1]);
    let inputs = [random_tensor(&mut rng, &[3, 2])];
    results.push(check(
        "neighbor_diffs",
        move |t, v| {
            let d = t.neighbor_diffs(v[0], indices.clone(), 2).unwrap();
            let m = t.max_over_neighbors(d, 2).unwrap();
            let s = t.sigmoid(m);
            t.mean_all(s)
        },
        &inputs,
    ));

    let logits = random_tensor(&mut rng, &[8, 3]);
    let labels: Vec<u32> = (0..8).map(|_| rng.gen_range(0..3u32)).collect();
    let cfg = LossConfig {
        lambda: 1.0,
        ignore_index: 9,
    };
    results.push(check(
        "cross_entropy+lovasz(total_loss)",
        move |t, v| tape_total_loss(t, v[0], &labels, &cfg).unwrap(),
        &[logits],
    ));

    // Distinct probabilities keep the Lovász sort stable under the probe.
    let probs = Tensor::from_rows(&[
        vec![0.81, 0.19],
        vec![0.33, 0.67],
        vec![0.55, 0.45],
        vec![0.12, 0.88],
    ]);
    let labels = [0u32, 1, 1, 0];
    let cfg = LossConfig {
        lambda: 1.0,
        ignore_index: 9,
    };
    results.push(check(
        "lovasz_softmax",
        move |t, v| tape_lovasz_softmax(t, v[0], &labels, &cfg).unwrap(),
        &[probs],
    ));

    results
}

/// Small network configuration for the end-to-end check.
pub fn tiny_network_config() -> NetworkConfig {
    let bounds = CropBounds {
        x_min: -10.0,
        x_max: 10.0,
        y_min: -10.0,
        y_max: 10.0,
        z_min: -3.0,
        z_max: 3.0,
    };
    let mut planes = PlaneSetConfig::from_crop_bounds(&bounds, 2.5);
    planes.polar = PolarGridConfig {
        rho_min: 0.5,
        rho_max: 15.0,
        rings: 6,
        sectors: 8,
    };
    planes.range_image = RangeImageConfig {
        height: 6,
        width: 16,
        fov_up: 0.4,
        fov_down: 0.6,
    };
    NetworkConfig {
        layers: 5,
        channels: 4,
        k_neighbors: 4,
        num_classes: 3,
        mlp_hidden: 8,
        conv_hidden: 4,
        bn_momentum: 0.1,
        bn_eps: 1e-5,
        plane_order: PlaneKind::ALL,
        planes,
    }
}

/// End-to-end check: gradient of the mean-logit objective of the full
/// network on a 20-point cloud (L = 5, C = 4, f64) against central
/// finite differences over a deterministic sample of coordinates from
/// every parameter block.
pub fn end_to_end_check(seed: u64) -> Result<CheckResult> {
    let cfg = tiny_network_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = PointCloud::new(
        (0..20)
            .map(|_| {
                [
                    rng.gen_range(-9.0..9.0),
                    rng.gen_range(-9.0..9.0),
                    rng.gen_range(-2.0..2.0),
                ]
            })
            .collect(),
        (0..20).map(|_| rng.gen_range(0.0..1.0)).collect(),
    );
    let input = NetworkInput::<f64>::prepare(&cloud, &cfg)?;
    let params = init_params::<f64>(&cfg, seed.wrapping_add(1))?;

    let objective = |p: &NetworkParams<f64>| -> Result<f64> {
        let mut p = p.clone();
        let pass = forward_batch(std::slice::from_ref(&input), &mut p, &cfg, Mode::Train)?;
        let mut tape = pass.tape;
        let m = tape.mean_all(pass.logits[0]);
        Ok(tape.value(m).item())
    };

    let mut p = params.clone();
    let pass = forward_batch(std::slice::from_ref(&input), &mut p, &cfg, Mode::Train)?;
    let mut tape = pass.tape;
    let m = tape.mean_all(pass.logits[0]);
    let grads = tape.backward(m)?;
    let analytic: std::collections::HashMap<String, Tensor<f64>> = tape
        .params()
        .iter()
        .map(|(name, var)| {
            let g = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(*var).shape()));
            (name.clone(), g)
        })
        .collect();

    let mut names = Vec::new();
    params.for_each(|n, _| names.push(n.to_string()));
    let mut max_rel: f64 = 0.0;
    for name in names {
        let len = analytic[&name].len();
        let picks: Vec<usize> = if len <= 4 {
            (0..len).collect()
        } else {
            vec![0, len / 3, (2 * len) / 3, len - 1]
        };
        for j in picks {
            let mut plus = params.clone();
            plus.for_each_mut(|n, t| {
                if n == name {
                    t.data_mut()[j] += FD_STEP;
                }
            });
            let mut minus = params.clone();
            minus.for_each_mut(|n, t| {
                if n == name {
                    t.data_mut()[j] -= FD_STEP;
                }
            });
            let fd = (objective(&plus)? - objective(&minus)?) / (2.0 * FD_STEP);
            let a = analytic[&name].data()[j];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max((a - fd).abs() / denom);
        }
    }
    Ok(CheckResult {
        name: "network end-to-end (20 points, L=5, C=4)".into(),
        rel_error: max_rel,
        tolerance: END_TO_END_TOLERANCE,
    })
}

/// The whole verification suite.
pub fn full_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = op_suite(seed);
    results.push(end_to_end_check(seed)?);
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_default_seed() {
        for result in full_suite(0).unwrap() {
            assert!(
                result.passed(),
                "{}: rel error {} over {}",
                result.name,
                result.rel_error,
                result.tolerance
            );
        }
    }
}
