//! Fixed-topology ReLU MLPs with hand-written forward and backward passes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::{gemm, Op, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// `y = act(W x + b)` with `W` stored `[out x in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        weight.ensure_matrix("layer weight")?;
        if bias.shape() != [weight.rows()] {
            return Err(Error::dim(format!(
                "bias {:?} does not match weight rows {}",
                bias.shape(),
                weight.rows()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// He initialisation: `W_ij ~ N(0, 2 / fan_in)`, zero bias.
    pub fn he(inputs: usize, outputs: usize, activation: Activation, prng: &mut Prng) -> Self {
        let std = (2.0 / inputs as f64).sqrt();
        let w = (0..inputs * outputs).map(|_| prng.gaussian(0.0, std)).collect();
        Self {
            weight: Tensor::from_raw(vec![outputs, inputs], w),
            bias: Tensor::zeros(&[outputs]),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// `act(x W^T + b)` for a `[batch x in]` input.
    pub(crate) fn apply(&self, x: &Tensor) -> Tensor {
        let batch = x.rows();
        let out = self.outputs();
        let mut y = Vec::with_capacity(batch * out);
        for _ in 0..batch {
            y.extend_from_slice(self.bias.data());
        }
        gemm(
            1.0,
            x.data(),
            batch,
            x.cols(),
            Op::N,
            self.weight.data(),
            out,
            self.inputs(),
            Op::T,
            1.0,
            &mut y,
        );
        if self.activation == Activation::Relu {
            for v in &mut y {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Tensor::from_raw(vec![batch, out], y)
    }
}

/// Gradient of a scalar loss with respect to one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// One entry per layer; `None` below the layer where backprop stopped.
    pub layers: Vec<Option<LayerGrad>>,
    /// Gradient with respect to the network input, when requested.
    pub input: Option<Tensor>,
    /// Gradient with respect to the pre-activation of the lowest visited
    /// layer, one row per example.
    pub pre_activation: Tensor,
}

/// Activations recorded by a forward pass.
///
/// `acts[0]` is the input and `acts[l + 1]` the output of layer `l`; ReLU
/// masks are recovered from the outputs since `relu(z) > 0` iff `z > 0`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) acts: Vec<Tensor>,
    fingerprint: u64,
}

impl ForwardCache {
    pub fn input(&self) -> &Tensor {
        &self.acts[0]
    }

    /// Input seen by layer `l`.
    pub fn layer_input(&self, l: usize) -> &Tensor {
        &self.acts[l]
    }

    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("cache has at least the input")
    }

    /// ReLU on/off pattern of every hidden unit, row-major per example.
    pub fn activation_pattern(&self, layers: &[&DenseLayer]) -> Vec<bool> {
        let mut out = Vec::new();
        for (l, layer) in layers.iter().enumerate() {
            if layer.activation == Activation::Relu {
                out.extend(self.acts[l + 1].data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }
}

fn fingerprint(layers: &[&DenseLayer]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |v: u64| {
        h ^= v;
        h = h.wrapping_mul(0x0000_0100_0000_01b3).rotate_left(5);
    };
    for layer in layers {
        mix(layer.outputs() as u64);
        mix(layer.inputs() as u64);
        for v in layer.weight.data().iter().chain(layer.bias.data()) {
            mix(v.to_bits());
        }
    }
    h
}

pub(crate) fn forward_layers(layers: &[&DenseLayer], x: &Tensor) -> ForwardCache {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(x.clone());
    for layer in layers {
        let next = layer.apply(acts.last().unwrap());
        acts.push(next);
    }
    ForwardCache {
        acts,
        fingerprint: fingerprint(layers),
    }
}

/// Plain inference without keeping the activations.
pub(crate) fn predict_layers(layers: &[&DenseLayer], x: &Tensor) -> Tensor {
    let mut cur = layers[0].apply(x);
    for layer in &layers[1..] {
        cur = layer.apply(&cur);
    }
    cur
}

fn relu_mask(delta: &mut [f64], output: &[f64]) {
    for (d, &o) in delta.iter_mut().zip(output) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Backpropagates `dlogits` from the top layer down to layer `stop_at`.
pub(crate) fn backward_layers(
    layers: &[&DenseLayer],
    cache: &ForwardCache,
    dlogits: &Tensor,
    stop_at: usize,
    input_grad: bool,
) -> Gradients {
    let depth = layers.len();
    let batch = dlogits.rows();
    let mut delta = dlogits.data().to_vec();
    if layers[depth - 1].activation == Activation::Relu {
        relu_mask(&mut delta, cache.acts[depth].data());
    }
    let mut grads: Vec<Option<LayerGrad>> = vec![None; depth];
    let mut input = None;
    let mut stop_delta = None;
    for l in (stop_at..depth).rev() {
        let layer = layers[l];
        let (out, inp) = (layer.outputs(), layer.inputs());
        let a_in = &cache.acts[l];
        let mut gw = vec![0.0; out * inp];
        gemm(
            1.0,
            &delta,
            batch,
            out,
            Op::T,
            a_in.data(),
            batch,
            inp,
            Op::N,
            0.0,
            &mut gw,
        );
        let mut gb = vec![0.0; out];
        for row in delta.chunks_exact(out) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        grads[l] = Some(LayerGrad {
            weight: Tensor::from_raw(vec![out, inp], gw),
            bias: Tensor::from_raw(vec![out], gb),
        });
        let need_prev = l > stop_at || (l == 0 && input_grad);
        if l == stop_at {
            stop_delta = Some(Tensor::from_raw(vec![batch, out], delta.clone()));
        }
        if need_prev {
            let mut prev = vec![0.0; batch * inp];
            gemm(
                1.0,
                &delta,
                batch,
                out,
                Op::N,
                layer.weight.data(),
                out,
                inp,
                Op::N,
                0.0,
                &mut prev,
            );
            if l > 0 && layers[l - 1].activation == Activation::Relu {
                relu_mask(&mut prev, cache.acts[l].data());
            }
            if l == 0 {
                input = Some(Tensor::from_raw(vec![batch, inp], prev));
                break;
            }
            delta = prev;
        }
    }
    Gradients {
        layers: grads,
        input,
        pre_activation: stop_delta.expect("loop visits stop_at"),
    }
}

/// Ordered stack of dense layers; the last layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layers: Vec<DenseLayer>,
}

impl MlpModel {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::input("model needs at least one layer"));
        };
        if last.activation != Activation::Identity {
            return Err(Error::input("final layer must use the identity activation"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::dim(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    i + 1,
                    pair[0].outputs(),
                    i + 2,
                    pair[1].inputs()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// He-initialised ReLU MLP with the given layer widths
    /// (`[input, hidden.., output]`).
    pub fn he_init(widths: &[usize], prng: &mut Prng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::input(format!("bad layer widths {widths:?}")));
        }
        let depth = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 1 == depth {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                DenseLayer::he(w[0], w[1], act, prng)
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &DenseLayer {
        &self.layers[l]
    }

    /// Mutable layer access. Shapes are fixed by the topology, so callers may
    /// only rewrite values.
    pub fn layer_mut(&mut self, l: usize) -> &mut DenseLayer {
        &mut self.layers[l]
    }

    pub(crate) fn layer_refs(&self) -> Vec<&DenseLayer> {
        self.layers.iter().collect()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(DenseLayer::outputs));
        w
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        x.ensure_matrix("input batch")?;
        if x.cols() != self.input_dim() {
            return Err(Error::dim(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.check_input(x)?;
        if !x.is_finite() {
            return Err(Error::input("non-finite input"));
        }
        let cache = forward_layers(&self.layer_refs(), x);
        Ok((cache.output().clone(), cache))
    }

    /// Logits without a cache.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(predict_layers(&self.layer_refs(), x))
    }

    /// Full backward pass: every layer's gradient plus the input gradient.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Tensor) -> Result<Gradients> {
        let refs = self.layer_refs();
        if cache.acts.len() != refs.len() + 1 || cache.fingerprint != fingerprint(&refs) {
            return Err(Error::Usage(
                "forward cache was produced by a different model state".into(),
            ));
        }
        if dlogits.shape() != cache.output().shape() {
            return Err(Error::dim(format!(
                "upstream gradient {:?} vs logits {:?}",
                dlogits.shape(),
                cache.output().shape()
            )));
        }
        Ok(backward_layers(&refs, cache, dlogits, 0, true))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        crate::checkpoint::save(path, crate::checkpoint::MLP_FORMAT, self)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let model: MlpModel = crate::checkpoint::load(path, crate::checkpoint::MLP_FORMAT)?;
        Self::new(model.layers)
    }
}
