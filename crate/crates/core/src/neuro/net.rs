use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn fresh_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Elu,
    /// Absolute value, used on hypernetwork outputs that become mixing
    /// weights.
    Abs,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Abs => z.abs(),
        }
    }

    /// Derivative at the pre-activation `z`. ReLU and Abs use 0 at the kink.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
            Activation::Abs => {
                if z > 0.0 {
                    1.0
                } else if z < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetSpec {
    /// Hidden layers share one activation; the output layer has its own.
    pub fn mlp(
        input: usize,
        hidden: &[usize],
        hidden_activation: Activation,
        output: usize,
        output_activation: Activation,
    ) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|&width| LayerSpec { width, activation: hidden_activation })
            .collect();
        layers.push(LayerSpec { width: output, activation: output_activation });
        Self { input, layers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        if self.input == 0 || self.layers.iter().any(|l| l.width == 0) {
            return Err(Error::Config("layer widths must be at least 1".into()));
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.width).unwrap_or(0)
    }

    fn fan_ins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut prev = self.input;
        self.layers.iter().map(move |l| {
            let shape = (prev, l.width);
            prev = l.width;
            shape
        })
    }

    pub fn param_count(&self) -> usize {
        self.fan_ins().map(|(i, o)| i * o + o).sum()
    }
}

/// Weights (`input x output`) and biases of every layer.
#[derive(Debug, Clone)]
pub struct NetParams {
    spec: NetSpec,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    generation: u64,
}

impl PartialEq for NetParams {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.weights == other.weights && self.biases == other.biases
    }
}

/// Activations retained by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

/// Parameter gradients, shaped like [`NetParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl NetParams {
    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(spec: &NetSpec, rng: &mut SimRng) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::with_capacity(spec.layers.len());
        let mut biases = Vec::with_capacity(spec.layers.len());
        for (fan_in, fan_out) in spec.fan_ins() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            weights.push(Array2::from_shape_simple_fn((fan_in, fan_out), || {
                rng.random_range(-bound..=bound)
            }));
            biases.push(Array1::from_shape_simple_fn(fan_out, || rng.random_range(-bound..=bound)));
        }
        Ok(Self { spec: spec.clone(), weights, biases, generation: fresh_generation() })
    }

    pub fn zeros(spec: &NetSpec) -> Result<Self> {
        spec.validate()?;
        let (weights, biases) = spec
            .fan_ins()
            .map(|(i, o)| (Array2::zeros((i, o)), Array1::zeros(o)))
            .unzip();
        Ok(Self { spec: spec.clone(), weights, biases, generation: fresh_generation() })
    }

    pub fn from_flat(spec: &NetSpec, flat: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(spec)?;
        params.set_flat(flat)?;
        Ok(params)
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    /// Mutable access to one layer. Invalidates outstanding caches.
    pub fn layer_mut(&mut self, layer: usize) -> (&mut Array2<f64>, &mut Array1<f64>) {
        self.generation = fresh_generation();
        (&mut self.weights[layer], &mut self.biases[layer])
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, network needs {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for x in w.iter_mut().chain(b.iter_mut()) {
                *x = flat[offset];
                offset += 1;
            }
        }
        self.generation = fresh_generation();
        Ok(())
    }

    /// Bit-identical copy of `source` into `self`.
    pub fn copy_from(&mut self, source: &NetParams) -> Result<()> {
        if self.spec != source.spec {
            return Err(Error::Shape("cannot copy between networks of different specs".into()));
        }
        for (dst, src) in self.weights.iter_mut().zip(&source.weights) {
            dst.assign(src);
        }
        for (dst, src) in self.biases.iter_mut().zip(&source.biases) {
            dst.assign(src);
        }
        self.generation = fresh_generation();
        Ok(())
    }

    fn check_input(&self, input: &ArrayView2<f64>) -> Result<()> {
        if input.ncols() != self.spec.input {
            return Err(Error::Shape(format!(
                "network expects {} input features, got {}",
                self.spec.input,
                input.ncols()
            )));
        }
        Ok(())
    }

    /// Batched forward pass over the rows of `input`.
    pub fn forward(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&input)?;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut pre = Vec::with_capacity(self.weights.len());
        let mut x = input.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = x.dot(w) + b;
            let act = self.spec.layers[l].activation;
            let a = z.mapv(|v| act.apply(v));
            inputs.push(x);
            pre.push(z);
            x = a;
        }
        Ok((x, ForwardCache { generation: self.generation, inputs, pre }))
    }

    /// Forward pass without retaining a cache.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&input)?;
        let mut x = input.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let act = self.spec.layers[l].activation;
            let mut z = x.dot(w) + b;
            z.mapv_inplace(|v| act.apply(v));
            x = z;
        }
        Ok(x)
    }

    /// Single-sample forward pass.
    pub fn predict_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.predict(view)?.into_raw_vec_and_offset().0)
    }

    /// Reverse pass: parameter gradients and the gradient with respect to
    /// the input, given the gradient of the objective with respect to the
    /// output.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(NetGrads, Array2<f64>)> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache(
                "forward cache was produced by different or since-modified parameters".into(),
            ));
        }
        let last = cache.pre.last().expect("validated spec has layers");
        if upstream.dim() != last.dim() {
            return Err(Error::Shape(format!(
                "upstream gradient has shape {:?}, output has {:?}",
                upstream.dim(),
                last.dim()
            )));
        }
        let layers = self.weights.len();
        let mut grad_w = Vec::with_capacity(layers);
        let mut grad_b = Vec::with_capacity(layers);
        let mut delta = upstream.to_owned();
        for l in (0..layers).rev() {
            let act = self.spec.layers[l].activation;
            Zip::from(&mut delta)
                .and(&cache.pre[l])
                .for_each(|d, &z| *d *= act.derivative(z));
            grad_w.push(cache.inputs[l].t().dot(&delta));
            grad_b.push(delta.sum_axis(Axis(0)));
            delta = delta.dot(&self.weights[l].t());
        }
        grad_w.reverse();
        grad_b.reverse();
        Ok((NetGrads { weights: grad_w, biases: grad_b }, delta))
    }
}

impl NetGrads {
    pub fn zeros_like(params: &NetParams) -> Self {
        Self {
            weights: params.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: params.biases.iter().map(|b| Array1::zeros(b.dim())).collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn add_assign(&mut self, other: &NetGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }
}

impl NetParams {
    pub(crate) fn iter_mut_with_generation(&mut self) -> impl Iterator<Item = &mut f64> {
        self.generation = fresh_generation();
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }
}
