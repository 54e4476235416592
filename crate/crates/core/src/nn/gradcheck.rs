use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::loss::{mse_loss, softmax_cross_entropy_batch};
use crate::nn::network::{Network, ParamMap};
use crate::nn::tensor::Tensor;

/// Scalar loss attached to a network output for gradient checking.
#[derive(Clone, Debug)]
pub enum LossSpec {
    /// Cross-entropy per batch row against fixed labels.
    SoftmaxCe { labels: Vec<usize> },
    /// Mean squared error against a fixed target.
    Mse { target: Tensor },
}

impl LossSpec {
    fn eval(&self, output: &Tensor) -> Result<(f64, Tensor)> {
        match self {
            LossSpec::SoftmaxCe { labels } => softmax_cross_entropy_batch(output, labels),
            LossSpec::Mse { target } => mse_loss(output, target),
        }
    }
}

/// Which parameter coordinates the checker differentiates.
#[derive(Clone, Copy, Debug)]
pub enum ProbePolicy {
    /// Every coordinate of every tensor; O(params) forward passes.
    Exhaustive,
    /// A seeded random sample of coordinates per parameter tensor.
    Sampled { per_tensor: usize, seed: u64 },
}

/// Per-parameter worst relative error between analytic and central
/// finite-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

const FD_STEP: f64 = 1e-5;

/// Compare the network's own backward pass against finite differences.
pub fn grad_check(
    net: &Network,
    input: &Tensor,
    loss: &LossSpec,
    tolerance: f64,
    probes: ProbePolicy,
) -> Result<GradCheckReport> {
    let (output, tape) = net.forward(input)?;
    let (_, output_grad) = loss.eval(&output)?;
    let grads = net.backward(&tape, &output_grad)?;
    compare_grads_fd(net, input, loss, &grads.params, tolerance, probes)
}

/// Compare a caller-supplied gradient map against finite differences.
///
/// Split out so tests can feed deliberately corrupted gradients and watch
/// the check fail.
pub fn compare_grads_fd(
    net: &Network,
    input: &Tensor,
    loss: &LossSpec,
    analytic: &ParamMap,
    tolerance: f64,
    probes: ProbePolicy,
) -> Result<GradCheckReport> {
    let mut work = net.clone();
    let mut per_param = BTreeMap::new();
    let mut max_rel_err = 0.0_f64;
    let mut coords_checked = 0;

    let names: Vec<String> = net.params.keys().cloned().collect();
    for name in names {
        let len = net.params[&name].len();
        let coords: Vec<usize> = match probes {
            ProbePolicy::Exhaustive => (0..len).collect(),
            ProbePolicy::Sampled { per_tensor, seed } => {
                let mut all: Vec<usize> = (0..len).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(
                    crate::rng::derive_seed(seed, name.len() as u64 ^ len as u64),
                );
                all.shuffle(&mut rng);
                all.truncate(per_tensor.min(len));
                all
            }
        };
        let mut worst = 0.0_f64;
        for &c in &coords {
            let orig = work.params[&name].data()[c];
            work.params.get_mut(&name).unwrap().data_mut()[c] = orig + FD_STEP;
            let (lp, _) = loss.eval(&work.infer(input)?)?;
            work.params.get_mut(&name).unwrap().data_mut()[c] = orig - FD_STEP;
            let (lm, _) = loss.eval(&work.infer(input)?)?;
            work.params.get_mut(&name).unwrap().data_mut()[c] = orig;
            let fd = (lp - lm) / (2.0 * FD_STEP);
            let a = analytic.get(&name).map(|t| t.data()[c]).unwrap_or(0.0);
            let denom = a.abs().max(fd.abs()).max(1e-4);
            worst = worst.max((a - fd).abs() / denom);
            coords_checked += 1;
        }
        max_rel_err = max_rel_err.max(worst);
        per_param.insert(name, worst);
    }
    Ok(GradCheckReport { per_param, max_rel_err, tolerance, coords_checked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::network::{weight_name, LayerSpec};
    use rand::Rng;

    fn random_input(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn dense_layer_matches_finite_differences() {
        let net = Network::with_init(vec![LayerSpec::Dense { in_dim: 6, out_dim: 4 }], 2).unwrap();
        let input = random_input(vec![3, 6], 7);
        let loss = LossSpec::Mse { target: random_input(vec![3, 4], 8) };
        let report = grad_check(&net, &input, &loss, 1e-4, ProbePolicy::Exhaustive).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn conv_layer_matches_finite_differences() {
        let net = Network::with_init(
            vec![
                LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 2, padding: 1 },
                LayerSpec::Flatten,
            ],
            4,
        )
        .unwrap();
        let input = random_input(vec![2, 2, 7, 7], 9);
        let loss = LossSpec::Mse { target: random_input(vec![2, 3 * 4 * 4], 10) };
        let report = grad_check(&net, &input, &loss, 1e-4, ProbePolicy::Exhaustive).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn relu_stack_with_ce_matches_finite_differences() {
        let net = Network::with_init(
            vec![
                LayerSpec::Dense { in_dim: 5, out_dim: 8 },
                LayerSpec::Relu,
                LayerSpec::Dense { in_dim: 8, out_dim: 4 },
            ],
            6,
        )
        .unwrap();
        let input = random_input(vec![4, 5], 11);
        let loss = LossSpec::SoftmaxCe { labels: vec![0, 3, 2, 1] };
        let report = grad_check(&net, &input, &loss, 1e-4, ProbePolicy::Exhaustive).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn dense_weight_grad_is_outer_product() {
        // For a single sample, dL/dW[i][o] = x[i] * g_out[o]; checked by
        // symbolic expansion on a 2x2 case.
        let net = Network::with_init(vec![LayerSpec::Dense { in_dim: 2, out_dim: 2 }], 0).unwrap();
        let input = Tensor::new(vec![1, 2], vec![3.0, -2.0]).unwrap();
        let (_, tape) = net.forward(&input).unwrap();
        let gout = Tensor::new(vec![1, 2], vec![0.5, -1.5]).unwrap();
        let grads = net.backward(&tape, &gout).unwrap();
        let dw = &grads.params[&weight_name(0)];
        assert_eq!(dw.data(), &[3.0 * 0.5, 3.0 * -1.5, -2.0 * 0.5, -2.0 * -1.5]);
    }

    #[test]
    fn empty_network_passes_vacuously() {
        let net = Network::with_init(vec![], 0).unwrap();
        let input = random_input(vec![1, 3], 1);
        let loss = LossSpec::Mse { target: random_input(vec![1, 3], 2) };
        let report = grad_check(&net, &input, &loss, 1e-4, ProbePolicy::Exhaustive).unwrap();
        assert!(report.passed());
        assert_eq!(report.coords_checked, 0);
    }

    #[test]
    fn corrupted_dense_backward_fails_loudly() {
        let net = Network::with_init(vec![LayerSpec::Dense { in_dim: 3, out_dim: 3 }], 12).unwrap();
        let input = random_input(vec![1, 3], 13);
        let loss = LossSpec::Mse { target: random_input(vec![1, 3], 14) };
        let (output, tape) = net.forward(&input).unwrap();
        let (_, ograd) = loss.eval(&output).unwrap();
        let mut grads = net.backward(&tape, &ograd).unwrap().params;
        // Off-by-transpose corruption of the weight gradient.
        let name = weight_name(0);
        let dw = grads.get_mut(&name).unwrap();
        let old = dw.data().to_vec();
        for i in 0..3 {
            for j in 0..3 {
                dw.data_mut()[i * 3 + j] = old[j * 3 + i];
            }
        }
        let report =
            compare_grads_fd(&net, &input, &loss, &grads, 1e-4, ProbePolicy::Exhaustive).unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_err > 1e-1, "max rel err {}", report.max_rel_err);
    }
}
