//! Linear and MLP probes with hand-derived reverse-mode gradients.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Ix1, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::container::{read_tensor, write_tensor, Tensor};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const DEFAULT_HIDDEN_WIDTH: usize = 256;

/// How a probe is applied to a scene's representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeLayout {
    /// One shared head applied to each slot: input d, output P.
    SlotWise,
    /// One head applied to the flat scene vector, output split into
    /// `groups` predictions of width P.
    Distributed { groups: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    /// 0 for a linear probe, up to 3 for MLPs.
    pub hidden_layers: usize,
    #[serde(default = "default_hidden_width")]
    pub hidden_width: usize,
    pub input_width: usize,
    pub output_width: usize,
    pub layout: ProbeLayout,
}

fn default_hidden_width() -> usize {
    DEFAULT_HIDDEN_WIDTH
}

impl PredictorConfig {
    pub fn slot_wise(hidden_layers: usize, slot_dim: usize, target_width: usize) -> Self {
        Self {
            hidden_layers,
            hidden_width: DEFAULT_HIDDEN_WIDTH,
            input_width: slot_dim,
            output_width: target_width,
            layout: ProbeLayout::SlotWise,
        }
    }

    pub fn distributed(hidden_layers: usize, latent_dim: usize, target_width: usize, groups: usize) -> Self {
        Self {
            hidden_layers,
            hidden_width: DEFAULT_HIDDEN_WIDTH,
            input_width: latent_dim,
            output_width: target_width * groups,
            layout: ProbeLayout::Distributed { groups },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers > 3 {
            return Err(Error::Config(format!("hidden_layers {} not in 0..=3", self.hidden_layers)));
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return Err(Error::Config("hidden_width must be positive".into()));
        }
        if self.output_width == 0 {
            return Err(Error::Config("output_width must be positive".into()));
        }
        if let ProbeLayout::Distributed { groups } = self.layout {
            if groups == 0 || self.output_width % groups != 0 {
                return Err(Error::Config(format!(
                    "output width {} not divisible into {groups} groups",
                    self.output_width
                )));
            }
        }
        Ok(())
    }

    /// Width of one object prediction (P).
    pub fn target_width(&self) -> usize {
        match self.layout {
            ProbeLayout::SlotWise => self.output_width,
            ProbeLayout::Distributed { groups } => self.output_width / groups,
        }
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_width;
        for _ in 0..self.hidden_layers {
            dims.push((self.hidden_width, fan_in));
            fan_in = self.hidden_width;
        }
        dims.push((self.output_width, fan_in));
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// out × in.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Weights of a probe; also used to hold gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub layers: Vec<Linear>,
}

impl PredictorParams {
    /// Uniform initialization in ±1/√fan_in for weights and biases; layers
    /// with no inputs draw biases from ±1.
    pub fn init(config: &PredictorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(out, inp)| {
                let bound = if inp == 0 { 1.0 } else { 1.0 / (inp as f64).sqrt() };
                Linear {
                    weight: Array2::from_shape_simple_fn((out, inp), || rng.random_range(-bound..bound)),
                    bias: Array1::from_shape_simple_fn(out, || rng.random_range(-bound..bound)),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: Array2::zeros(l.weight.dim()),
                    bias: Array1::zeros(l.bias.dim()),
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Flat views over every parameter, weights before biases, layer by layer.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn matches(&self, config: &PredictorConfig) -> bool {
        let dims = config.layer_dims();
        dims.len() == self.layers.len()
            && dims
                .iter()
                .zip(&self.layers)
                .all(|(&(o, i), l)| l.weight.dim() == (o, i) && l.bias.len() == o)
    }

    /// Writes one OCBT f64 tensor per weight and bias plus `predictor.json`.
    pub fn save(&self, config: &PredictorConfig, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, l) in self.layers.iter().enumerate() {
            write_tensor(&dir.join(format!("layer{i}_weight.ocbt")), &Tensor::F64(l.weight.clone().into_dyn()))?;
            write_tensor(&dir.join(format!("layer{i}_bias.ocbt")), &Tensor::F64(l.bias.clone().into_dyn()))?;
        }
        let path = dir.join("predictor.json");
        let mut text = serde_json::to_string_pretty(config).expect("config serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<(Self, PredictorConfig)> {
        let path = dir.join("predictor.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: PredictorConfig = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        config.validate()?;
        let mut layers = Vec::new();
        for i in 0..=config.hidden_layers {
            let wp = dir.join(format!("layer{i}_weight.ocbt"));
            let bp = dir.join(format!("layer{i}_bias.ocbt"));
            let weight = read_tensor(&wp)?
                .into_f64(&wp)?
                .into_dimensionality::<Ix2>()
                .map_err(|e| Error::format(&wp, e.to_string()))?;
            let bias = read_tensor(&bp)?
                .into_f64(&bp)?
                .into_dimensionality::<Ix1>()
                .map_err(|e| Error::format(&bp, e.to_string()))?;
            layers.push(Linear { weight, bias });
        }
        let params = Self { layers };
        if !params.matches(&config) {
            return Err(Error::format(&path, "parameter shapes do not match predictor config"));
        }
        Ok((params, config))
    }
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn affine(x: ArrayView2<f64>, l: &Linear) -> Array2<f64> {
    let mut z = x.dot(&l.weight.t());
    z += &l.bias;
    z
}

/// Forward pass on a batch (rows are inputs). No output nonlinearity.
pub fn forward(params: &PredictorParams, x: ArrayView2<f64>) -> Array2<f64> {
    let mut h = x.to_owned();
    let last = params.layers.len() - 1;
    for (i, l) in params.layers.iter().enumerate() {
        h = affine(h.view(), l);
        if i < last {
            h.mapv_inplace(leaky);
        }
    }
    h
}

/// Forward pass on a single input vector.
pub fn forward_one(params: &PredictorParams, input: &[f64]) -> Vec<f64> {
    let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
    forward(params, x).into_raw_vec_and_offset().0
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
}

pub fn forward_cached(params: &PredictorParams, x: ArrayView2<f64>) -> (Array2<f64>, ForwardCache) {
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len().saturating_sub(1));
    let mut h = x.to_owned();
    let last = params.layers.len() - 1;
    for (i, l) in params.layers.iter().enumerate() {
        let z = affine(h.view(), l);
        inputs.push(h);
        if i < last {
            h = z.mapv(leaky);
            pre.push(z);
        } else {
            h = z;
        }
    }
    (h, ForwardCache { inputs, pre })
}

/// Gradients of a scalar loss with respect to all parameters, given its
/// gradient with respect to the outputs. Also returns the input gradient.
pub fn backward(params: &PredictorParams, cache: &ForwardCache, grad_out: Array2<f64>) -> (PredictorParams, Array2<f64>) {
    let n = params.layers.len();
    let mut grads: Vec<Linear> = Vec::with_capacity(n);
    let mut g = grad_out;
    for i in (0..n).rev() {
        let l = &params.layers[i];
        let gw = g.t().dot(&cache.inputs[i]);
        let gb = g.sum_axis(Axis(0));
        grads.push(Linear { weight: gw, bias: gb });
        let mut gin = g.dot(&l.weight);
        if i > 0 {
            ndarray::Zip::from(&mut gin)
                .and(&cache.pre[i - 1])
                .for_each(|gv, &z| {
                    if z <= 0.0 {
                        *gv *= LEAKY_SLOPE;
                    }
                });
        }
        g = gin;
    }
    grads.reverse();
    (PredictorParams { layers: grads }, g)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: PredictorParams,
    v: PredictorParams,
    t: i32,
}

impl Adam {
    pub fn new(params: &PredictorParams) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut PredictorParams, grads: &PredictorParams, lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let it = params
            .values_mut()
            .zip(grads.values())
            .zip(self.m.values_mut())
            .zip(self.v.values_mut());
        for (((p, &g), m), v) in it {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}
