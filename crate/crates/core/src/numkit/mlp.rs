use serde::{Deserialize, Serialize};

use super::{Params, Rng, Scalar, Tensor};
use crate::{Error, Result};

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(T::zero()),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn slope_from_output<T: Scalar>(self, a: T) -> T {
        match self {
            Activation::Tanh => T::one() - a * a,
            Activation::Relu => {
                if a > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Identity => T::one(),
        }
    }
}

/// Fully connected feed-forward network. Weights are `[out, in]` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    into = "MlpRecord<T>",
    try_from = "MlpRecord<T>",
    bound = "T: Scalar"
)]
pub struct Mlp<T: Scalar> {
    layer_sizes: Vec<usize>,
    activation: Activation,
    weights: Vec<Tensor<T>>,
    biases: Vec<Tensor<T>>,
}

/// JSON checkpoint fragment: `{layer_sizes, activation, weights, biases}`.
#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct MlpRecord<T: Scalar> {
    layer_sizes: Vec<usize>,
    activation: Activation,
    weights: Vec<Vec<T>>,
    biases: Vec<Vec<T>>,
}

impl<T: Scalar> From<Mlp<T>> for MlpRecord<T> {
    fn from(m: Mlp<T>) -> Self {
        MlpRecord {
            layer_sizes: m.layer_sizes,
            activation: m.activation,
            weights: m.weights.into_iter().map(Tensor::into_data).collect(),
            biases: m.biases.into_iter().map(Tensor::into_data).collect(),
        }
    }
}

impl<T: Scalar> TryFrom<MlpRecord<T>> for Mlp<T> {
    type Error = Error;

    fn try_from(r: MlpRecord<T>) -> Result<Self> {
        check_sizes(&r.layer_sizes)?;
        let n = r.layer_sizes.len() - 1;
        if r.weights.len() != n || r.biases.len() != n {
            return Err(Error::Shape("layer count does not match layer_sizes".into()));
        }
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        for (l, (w, b)) in r.weights.into_iter().zip(r.biases).enumerate() {
            let (i, o) = (r.layer_sizes[l], r.layer_sizes[l + 1]);
            weights.push(Tensor::new(vec![o, i], w)?);
            biases.push(Tensor::new(vec![o], b)?);
        }
        Ok(Mlp {
            layer_sizes: r.layer_sizes,
            activation: r.activation,
            weights,
            biases,
        })
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
    }
    Ok(())
}

/// Cached layer outputs from a batched forward pass; `activations[0]` is the input.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    batch: usize,
    activations: Vec<Vec<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &[T] {
        self.activations.last().expect("trace has layers")
    }

    pub fn into_output(mut self) -> Vec<T> {
        self.activations.pop().expect("trace has layers")
    }
}

impl<T: Scalar> Mlp<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn new(layer_sizes: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        let mut m = Self::zeros(layer_sizes, activation)?;
        for (l, w) in m.weights.iter_mut().enumerate() {
            let (fan_in, fan_out) = (layer_sizes[l], layer_sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in w.data_mut() {
                *v = T::lit(rng.uniform_range(-limit, limit));
            }
        }
        Ok(m)
    }

    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        check_sizes(layer_sizes)?;
        let weights = layer_sizes
            .windows(2)
            .map(|w| Tensor::zeros(vec![w[1], w[0]]))
            .collect();
        let biases = layer_sizes[1..]
            .iter()
            .map(|&o| Tensor::zeros(vec![o]))
            .collect();
        Ok(Mlp {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            weights,
            biases,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated sizes")
    }

    pub fn weight(&self, layer: usize) -> &Tensor<T> {
        &self.weights[layer]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor<T> {
        &mut self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor<T> {
        &self.biases[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Tensor<T> {
        &mut self.biases[layer]
    }

    /// Batched forward pass over a flat `[batch, in]` buffer, keeping the
    /// intermediate activations for [`Mlp::backprop`].
    pub fn trace(&self, input: &[T], batch: usize) -> Result<ForwardTrace<T>> {
        let d_in = self.input_dim();
        if input.len() != batch * d_in {
            return Err(Error::Shape(format!(
                "mlp input has {} values, expected batch {batch} x {d_in}",
                input.len()
            )));
        }
        let n_layers = self.weights.len();
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(input.to_vec());
        for l in 0..n_layers {
            let (i_dim, o_dim) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = self.weights[l].data();
            let b = self.biases[l].data();
            let act = if l + 1 == n_layers {
                Activation::Identity
            } else {
                self.activation
            };
            let x = &activations[l];
            let mut out = vec![T::zero(); batch * o_dim];
            for r in 0..batch {
                let xr = &x[r * i_dim..(r + 1) * i_dim];
                let yr = &mut out[r * o_dim..(r + 1) * o_dim];
                for (o, y) in yr.iter_mut().enumerate() {
                    let wr = &w[o * i_dim..(o + 1) * i_dim];
                    let mut s = b[o];
                    for (wi, xi) in wr.iter().zip(xr) {
                        s += *wi * *xi;
                    }
                    *y = act.apply(s);
                }
            }
            activations.push(out);
        }
        if activations.last().unwrap().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mlp forward output".into()));
        }
        Ok(ForwardTrace { batch, activations })
    }

    /// Reverse pass: accumulates parameter gradients into `grads` and returns
    /// the gradient with respect to the traced input.
    pub fn backprop(
        &self,
        trace: &ForwardTrace<T>,
        upstream: &[T],
        grads: &mut Mlp<T>,
    ) -> Result<Vec<T>> {
        let batch = trace.batch;
        if upstream.len() != batch * self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream gradient has {} values, expected {}",
                upstream.len(),
                batch * self.output_dim()
            )));
        }
        if grads.layer_sizes != self.layer_sizes {
            return Err(Error::Shape("gradient buffer has different layout".into()));
        }
        let n_layers = self.weights.len();
        let mut delta = upstream.to_vec();
        for l in (0..n_layers).rev() {
            let (i_dim, o_dim) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            if l + 1 != n_layers {
                let a = &trace.activations[l + 1];
                for (d, &av) in delta.iter_mut().zip(a) {
                    *d *= self.activation.slope_from_output(av);
                }
            }
            let x = &trace.activations[l];
            let w = self.weights[l].data();
            {
                let gw = grads.weights[l].data_mut();
                for r in 0..batch {
                    let xr = &x[r * i_dim..(r + 1) * i_dim];
                    for o in 0..o_dim {
                        let d = delta[r * o_dim + o];
                        if d == T::zero() {
                            continue;
                        }
                        let gr = &mut gw[o * i_dim..(o + 1) * i_dim];
                        for (g, xi) in gr.iter_mut().zip(xr) {
                            *g += d * *xi;
                        }
                    }
                }
            }
            {
                let gb = grads.biases[l].data_mut();
                for r in 0..batch {
                    for o in 0..o_dim {
                        gb[o] += delta[r * o_dim + o];
                    }
                }
            }
            let mut dx = vec![T::zero(); batch * i_dim];
            for r in 0..batch {
                let dxr = &mut dx[r * i_dim..(r + 1) * i_dim];
                for o in 0..o_dim {
                    let d = delta[r * o_dim + o];
                    if d == T::zero() {
                        continue;
                    }
                    let wr = &w[o * i_dim..(o + 1) * i_dim];
                    for (g, wi) in dxr.iter_mut().zip(wr) {
                        *g += d * *wi;
                    }
                }
            }
            delta = dx;
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mlp input gradient".into()));
        }
        Ok(delta)
    }

    /// Forward pass on a `[in]` vector or a `[batch, in]` matrix.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, one_d) = self.batch_of(input)?;
        let out = self.trace(input.data(), batch)?.into_output();
        let shape = if one_d {
            vec![self.output_dim()]
        } else {
            vec![batch, self.output_dim()]
        };
        Tensor::new(shape, out)
    }

    /// Parameter gradients (as a same-shaped model) and the input gradient.
    pub fn backward(&self, input: &Tensor<T>, upstream: &Tensor<T>) -> Result<(Mlp<T>, Tensor<T>)> {
        let (batch, _) = self.batch_of(input)?;
        let trace = self.trace(input.data(), batch)?;
        let mut grads = self.zeros_like();
        let dx = self.backprop(&trace, upstream.data(), &mut grads)?;
        Ok((grads, Tensor::new(input.shape().to_vec(), dx)?))
    }

    fn batch_of(&self, input: &Tensor<T>) -> Result<(usize, bool)> {
        if input.cols() != self.input_dim() || input.shape().len() > 2 {
            return Err(Error::Shape(format!(
                "input shape {:?} incompatible with first layer size {}",
                input.shape(),
                self.input_dim()
            )));
        }
        Ok((input.rows(), input.shape().len() == 1))
    }
}

impl<T: Scalar> Params<T> for Mlp<T> {
    fn param_slices(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("layer{l}.weight"), w.data()));
            out.push((format!("layer{l}.bias"), b.data()));
        }
        out
    }

    fn param_slices_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (l, (w, b)) in self.weights.iter_mut().zip(self.biases.iter_mut()).enumerate() {
            out.push((format!("layer{l}.weight"), w.data_mut()));
            out.push((format!("layer{l}.bias"), b.data_mut()));
        }
        out
    }

    fn zeros_like(&self) -> Self {
        Mlp::zeros(&self.layer_sizes, self.activation).expect("sizes already validated")
    }
}
