use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::{matmul, Tensor};
use crate::rng::derive_seed;

/// Named parameter tensors, ordered for deterministic iteration.
pub type ParamMap = BTreeMap<String, Tensor>;

static NET_COUNTER: AtomicU64 = AtomicU64::new(1);

/// The fixed layer vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense { in_dim: usize, out_dim: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Relu,
    Flatten,
}

impl LayerSpec {
    fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }
}

/// How the parameters of a [`Network`] were initialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInit {
    pub seed: u64,
    pub scheme: String,
}

/// A feed-forward stack of layers with named parameters.
///
/// Inputs are batched: dense layers consume `[N, in]`, convolutions
/// `[N, C, H, W]`. Forward/backward are pure in `(params, input)` and
/// bitwise deterministic.
#[derive(Clone, Debug)]
pub struct Network {
    pub layers: Vec<LayerSpec>,
    pub params: ParamMap,
    pub param_init: ParamInit,
    uid: u64,
}

/// Activation record from a forward pass; consumed by [`Network::backward`].
#[derive(Clone, Debug)]
pub struct Tape {
    net_uid: u64,
    /// Input seen by each layer, in order.
    layer_inputs: Vec<Tensor>,
    output_shape: Vec<usize>,
}

/// Gradients returned by the backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: ParamMap,
    pub input: Tensor,
}

pub fn weight_name(layer: usize) -> String {
    format!("l{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("l{layer}.bias")
}

fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl Network {
    /// Build a network with seeded uniform weight init and zero biases.
    pub fn with_init(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut params = ParamMap::new();
        for (i, layer) in layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { in_dim, out_dim } => {
                    if in_dim == 0 || out_dim == 0 {
                        return Err(Error::InvalidValue { context: "dense dims", value: 0.0 });
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
                    let w = xavier_uniform(&mut rng, in_dim, out_dim, in_dim * out_dim);
                    params.insert(weight_name(i), Tensor::new(vec![in_dim, out_dim], w)?);
                    params.insert(bias_name(i), Tensor::zeros(vec![out_dim]));
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding: _ } => {
                    if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::InvalidValue { context: "conv dims", value: 0.0 });
                    }
                    let fan_in = in_channels * kernel * kernel;
                    let fan_out = out_channels * kernel * kernel;
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
                    let w = xavier_uniform(&mut rng, fan_in, fan_out, out_channels * fan_in);
                    params.insert(
                        weight_name(i),
                        Tensor::new(vec![out_channels, in_channels, kernel, kernel], w)?,
                    );
                    params.insert(bias_name(i), Tensor::zeros(vec![out_channels]));
                }
                LayerSpec::Relu | LayerSpec::Flatten => {}
            }
        }
        Ok(Self {
            layers,
            params,
            param_init: ParamInit { seed, scheme: "xavier_uniform".to_string() },
            uid: NET_COUNTER.fetch_add(1, Ordering::Relaxed),
        })
    }

    /// Rebuild from a deserialized layer list and parameter map.
    pub fn from_parts(layers: Vec<LayerSpec>, params: ParamMap, param_init: ParamInit) -> Result<Self> {
        for (i, layer) in layers.iter().enumerate() {
            if layer.has_params() {
                for name in [weight_name(i), bias_name(i)] {
                    let t = params.get(&name).ok_or(Error::EmptyInput("missing parameter tensor"))?;
                    t.ensure_finite("network parameter")?;
                }
            }
        }
        Ok(Self { layers, params, param_init, uid: NET_COUNTER.fetch_add(1, Ordering::Relaxed) })
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Run the layer stack on a batched input, recording activations.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Tape)> {
        input.ensure_finite("network input")?;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            layer_inputs.push(x.clone());
            x = self.forward_layer(i, layer, &x)?;
        }
        let tape = Tape { net_uid: self.uid, layer_inputs, output_shape: x.shape().to_vec() };
        Ok((x, tape))
    }

    /// Forward pass without keeping the tape.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        input.ensure_finite("network input")?;
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = self.forward_layer(i, layer, &x)?;
        }
        Ok(x)
    }

    fn forward_layer(&self, i: usize, layer: &LayerSpec, x: &Tensor) -> Result<Tensor> {
        match *layer {
            LayerSpec::Dense { in_dim, out_dim } => {
                let shape = x.shape();
                if shape.len() != 2 || shape[1] != in_dim {
                    return Err(Error::LayerInput {
                        layer: i,
                        expected: vec![0, in_dim],
                        got: shape.to_vec(),
                    });
                }
                let n = shape[0];
                let w = &self.params[&weight_name(i)];
                let b = &self.params[&bias_name(i)];
                let mut out = vec![0.0; n * out_dim];
                for row in out.chunks_exact_mut(out_dim) {
                    row.copy_from_slice(b.data());
                }
                matmul(x.data(), w.data(), n, in_dim, out_dim, &mut out);
                Tensor::new(vec![n, out_dim], out)
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                let shape = x.shape();
                if shape.len() != 4 || shape[1] != in_channels {
                    return Err(Error::LayerInput {
                        layer: i,
                        expected: vec![0, in_channels, 0, 0],
                        got: shape.to_vec(),
                    });
                }
                let (n, h, w_in) = (shape[0], shape[2], shape[3]);
                let (oh, ow) = conv_out_size(h, w_in, kernel, stride, padding).ok_or(
                    Error::LayerInput { layer: i, expected: vec![kernel], got: shape.to_vec() },
                )?;
                let wt = &self.params[&weight_name(i)];
                let b = &self.params[&bias_name(i)];
                let mut out = vec![0.0; n * out_channels * oh * ow];
                conv2d_forward(
                    x.data(), wt.data(), b.data(), &mut out,
                    n, in_channels, h, w_in, out_channels, kernel, stride, padding, oh, ow,
                );
                Tensor::new(vec![n, out_channels, oh, ow], out)
            }
            LayerSpec::Relu => {
                let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                Tensor::new(x.shape().to_vec(), data)
            }
            LayerSpec::Flatten => {
                let shape = x.shape();
                if shape.is_empty() {
                    return Err(Error::LayerInput { layer: i, expected: vec![0], got: vec![] });
                }
                let n = shape[0];
                let rest: usize = shape[1..].iter().product();
                x.clone().reshape(vec![n, rest])
            }
        }
    }

    /// Propagate `output_grad` back through the tape, returning parameter
    /// and input gradients.
    pub fn backward(&self, tape: &Tape, output_grad: &Tensor) -> Result<Gradients> {
        if tape.net_uid != self.uid || tape.layer_inputs.len() != self.layers.len() {
            return Err(Error::StaleTape);
        }
        if output_grad.shape() != tape.output_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                context: "backward output_grad",
                left: output_grad.shape().to_vec(),
                right: tape.output_shape.clone(),
            });
        }
        let mut grads = ParamMap::new();
        let mut g = output_grad.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &tape.layer_inputs[i];
            g = match *layer {
                LayerSpec::Dense { in_dim, out_dim } => {
                    let n = x.shape()[0];
                    let w = &self.params[&weight_name(i)];
                    let mut dw = vec![0.0; in_dim * out_dim];
                    let mut db = vec![0.0; out_dim];
                    let mut dx = vec![0.0; n * in_dim];
                    let gd = g.data();
                    let xd = x.data();
                    for nrow in 0..n {
                        let grow = &gd[nrow * out_dim..(nrow + 1) * out_dim];
                        let xrow = &xd[nrow * in_dim..(nrow + 1) * in_dim];
                        for (o, &gv) in grow.iter().enumerate() {
                            db[o] += gv;
                        }
                        for (ii, &xv) in xrow.iter().enumerate() {
                            if xv != 0.0 {
                                let dwrow = &mut dw[ii * out_dim..(ii + 1) * out_dim];
                                for (d, &gv) in dwrow.iter_mut().zip(grow.iter()) {
                                    *d += xv * gv;
                                }
                            }
                        }
                        let dxrow = &mut dx[nrow * in_dim..(nrow + 1) * in_dim];
                        for (ii, dxi) in dxrow.iter_mut().enumerate() {
                            let wrow = &w.data()[ii * out_dim..(ii + 1) * out_dim];
                            let mut acc = 0.0;
                            for (&gv, &wv) in grow.iter().zip(wrow.iter()) {
                                acc += gv * wv;
                            }
                            *dxi = acc;
                        }
                    }
                    grads.insert(weight_name(i), Tensor::new(vec![in_dim, out_dim], dw)?);
                    grads.insert(bias_name(i), Tensor::new(vec![out_dim], db)?);
                    Tensor::new(x.shape().to_vec(), dx)?
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                    let shape = x.shape();
                    let (n, h, w_in) = (shape[0], shape[2], shape[3]);
                    let (oh, ow) = conv_out_size(h, w_in, kernel, stride, padding).unwrap();
                    let wt = &self.params[&weight_name(i)];
                    let mut dw = vec![0.0; out_channels * in_channels * kernel * kernel];
                    let mut db = vec![0.0; out_channels];
                    let mut dx = vec![0.0; x.len()];
                    conv2d_backward(
                        x.data(), wt.data(), g.data(), &mut dw, &mut db, &mut dx,
                        n, in_channels, h, w_in, out_channels, kernel, stride, padding, oh, ow,
                    );
                    grads.insert(
                        weight_name(i),
                        Tensor::new(vec![out_channels, in_channels, kernel, kernel], dw)?,
                    );
                    grads.insert(bias_name(i), Tensor::new(vec![out_channels], db)?);
                    Tensor::new(x.shape().to_vec(), dx)?
                }
                LayerSpec::Relu => {
                    let data = x
                        .data()
                        .iter()
                        .zip(g.data().iter())
                        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    Tensor::new(x.shape().to_vec(), data)?
                }
                LayerSpec::Flatten => g.clone().reshape(x.shape().to_vec())?,
            };
        }
        for t in grads.values() {
            t.ensure_finite("parameter gradient")?;
        }
        Ok(Gradients { params: grads, input: g })
    }
}

/// `floor((in + 2p - k)/s) + 1`, rejecting kernels larger than the padded input.
pub fn conv_out_size(h: usize, w: usize, kernel: usize, stride: usize, padding: usize) -> Option<(usize, usize)> {
    let oh = (h + 2 * padding).checked_sub(kernel)? / stride + 1;
    let ow = (w + 2 * padding).checked_sub(kernel)? / stride + 1;
    if oh == 0 || ow == 0 {
        None
    } else {
        Some((oh, ow))
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64], w: &[f64], b: &[f64], out: &mut [f64],
    n: usize, ic: usize, h: usize, win: usize,
    oc: usize, k: usize, stride: usize, pad: usize, oh: usize, ow: usize,
) {
    for ni in 0..n {
        for oci in 0..oc {
            let bias = b[oci];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias;
                    for ici in 0..ic {
                        let xbase = (ni * ic + ici) * h * win;
                        let wbase = (oci * ic + ici) * k * k;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * win;
                            let wrow = wbase + ky * k;
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= win as isize {
                                    continue;
                                }
                                acc += x[xrow + ix as usize] * w[wrow + kx];
                            }
                        }
                    }
                    out[((ni * oc + oci) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &[f64], w: &[f64], g: &[f64], dw: &mut [f64], db: &mut [f64], dx: &mut [f64],
    n: usize, ic: usize, h: usize, win: usize,
    oc: usize, k: usize, stride: usize, pad: usize, oh: usize, ow: usize,
) {
    for ni in 0..n {
        for oci in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g[((ni * oc + oci) * oh + oy) * ow + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    db[oci] += gv;
                    for ici in 0..ic {
                        let xbase = (ni * ic + ici) * h * win;
                        let wbase = (oci * ic + ici) * k * k;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * win;
                            let wrow = wbase + ky * k;
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= win as isize {
                                    continue;
                                }
                                dw[wrow + kx] += gv * x[xrow + ix as usize];
                                dx[xrow + ix as usize] += gv * w[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_shape_formula() {
        // 32x32 single channel through conv(1->8, k3, s2, p1) comes out 8x16x16.
        let net = Network::with_init(
            vec![LayerSpec::Conv2d { in_channels: 1, out_channels: 8, kernel: 3, stride: 2, padding: 1 }],
            7,
        )
        .unwrap();
        let input = Tensor::zeros(vec![1, 1, 32, 32]);
        let (out, _) = net.forward(&input).unwrap();
        assert_eq!(out.shape(), &[1, 8, 16, 16]);
    }

    #[test]
    fn relu_zeroes_negative_input() {
        let net = Network::with_init(vec![LayerSpec::Relu], 0).unwrap();
        let input = Tensor::new(vec![1, 4], vec![-1.0, -0.5, -2.0, -1e-9]).unwrap();
        let (out, _) = net.forward(&input).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dense_identity_passthrough() {
        let mut net =
            Network::with_init(vec![LayerSpec::Dense { in_dim: 3, out_dim: 3 }], 0).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        net.params.insert(weight_name(0), Tensor::new(vec![3, 3], eye).unwrap());
        let input = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let (out, _) = net.forward(&input).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn mismatched_input_names_layer() {
        let net = Network::with_init(vec![LayerSpec::Dense { in_dim: 4, out_dim: 2 }], 0).unwrap();
        let err = net.forward(&Tensor::zeros(vec![1, 3])).unwrap_err();
        match err {
            Error::LayerInput { layer, .. } => assert_eq!(layer, 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn stale_tape_rejected() {
        let net_a = Network::with_init(vec![LayerSpec::Relu], 0).unwrap();
        let net_b = Network::with_init(vec![LayerSpec::Relu], 0).unwrap();
        let input = Tensor::zeros(vec![1, 4]);
        let (out, tape) = net_a.forward(&input).unwrap();
        assert!(matches!(net_b.backward(&tape, &out), Err(Error::StaleTape)));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Network::with_init(
            vec![
                LayerSpec::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 2, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { in_dim: 2 * 16 * 16, out_dim: 5 },
            ],
            99,
        )
        .unwrap();
        let input = Tensor::new(
            vec![1, 1, 32, 32],
            (0..1024).map(|i| (i as f64 * 0.37).sin().abs()).collect(),
        )
        .unwrap();
        let (a, _) = net.forward(&input).unwrap();
        let (b, _) = net.forward(&input).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_output_grad_gives_zero_param_grads() {
        let net = Network::with_init(
            vec![LayerSpec::Dense { in_dim: 3, out_dim: 2 }, LayerSpec::Relu],
            5,
        )
        .unwrap();
        let input = Tensor::new(vec![1, 3], vec![0.3, -0.2, 0.9]).unwrap();
        let (out, tape) = net.forward(&input).unwrap();
        let zeros = Tensor::zeros(out.shape().to_vec());
        let grads = net.backward(&tape, &zeros).unwrap();
        for t in grads.params.values() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }
}
