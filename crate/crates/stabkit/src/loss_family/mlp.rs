//! Small fully connected network with a smooth activation.
//!
//! Hidden layers apply a C^2 activation (tanh by default), the output layer
//! is linear, and the per-sample loss is half the squared error against a
//! fixed target. Gradients are analytic backpropagation; Hessian-vector
//! products are central differences of analytic gradients, which keeps the
//! whole family twice differentiable without a second differentiation pass.
//!
//! Parameters are flattened layer-major: for each layer, the weight matrix
//! in row-major order followed by the bias vector.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_argument, Result};
use crate::numerics::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            // Stable softplus: max(z, 0) + ln(1 + exp(-|z|)).
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpFamily {
    layers: Vec<usize>,
    activation: Activation,
    inputs: Vec<Vector>,
    targets: Vec<Vector>,
    dim: usize,
}

/// Parameter count for a layer-sizes list: weights plus biases per layer.
pub fn parameter_count(layers: &[usize]) -> usize {
    layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl MlpFamily {
    pub fn new(
        layers: Vec<usize>,
        activation: Activation,
        inputs: Vec<Vector>,
        targets: Vec<Vector>,
    ) -> Result<Self> {
        if layers.len() < 2 || layers.contains(&0) {
            return Err(invalid_argument(
                "mlp needs at least input and output layers of nonzero size",
            ));
        }
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(invalid_argument("mlp: sample counts disagree"));
        }
        let (d_in, d_out) = (layers[0], *layers.last().unwrap());
        if inputs.iter().any(|x| x.len() != d_in) || targets.iter().any(|y| y.len() != d_out) {
            return Err(invalid_argument("mlp: sample shapes disagree with layers"));
        }
        let dim = parameter_count(&layers);
        Ok(MlpFamily {
            layers,
            activation,
            inputs,
            targets,
            dim,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn max_samples(&self) -> usize {
        self.inputs.len()
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    /// Network output for a raw input (used during data generation too).
    pub fn forward(&self, w: &Vector, x: &Vector) -> Vector {
        debug_assert_eq!(w.len(), self.dim);
        let mut a: Vec<f64> = x.as_slice().to_vec();
        let mut off = 0;
        let n_layers = self.layers.len() - 1;
        for l in 0..n_layers {
            let (rows, cols) = (self.layers[l + 1], self.layers[l]);
            let mut z = vec![0.0; rows];
            for r in 0..rows {
                let mut s = w[off + rows * cols + r]; // bias
                let row_off = off + r * cols;
                for (c, ac) in a.iter().enumerate() {
                    s += w[row_off + c] * ac;
                }
                z[r] = s;
            }
            a = if l + 1 == n_layers {
                z
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            off += rows * cols + rows;
        }
        Vector::new(a).expect("finite forward pass")
    }

    pub fn loss(&self, i: usize, w: &Vector) -> f64 {
        let out = self.forward(w, &self.inputs[i]);
        let r = out.sub(&self.targets[i]);
        0.5 * r.dot(&r)
    }

    /// Analytic gradient of the per-sample loss by backpropagation.
    pub fn grad(&self, i: usize, w: &Vector) -> Vector {
        let x = &self.inputs[i];
        let y = &self.targets[i];
        let n_layers = self.layers.len() - 1;

        // Forward pass, keeping activations and pre-activations.
        let mut acts: Vec<Vec<f64>> = vec![x.as_slice().to_vec()];
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            let (rows, cols) = (self.layers[l + 1], self.layers[l]);
            let a_prev = &acts[l];
            let mut z = vec![0.0; rows];
            for r in 0..rows {
                let mut s = w[off + rows * cols + r];
                let row_off = off + r * cols;
                for (c, ac) in a_prev.iter().enumerate() {
                    s += w[row_off + c] * ac;
                }
                z[r] = s;
            }
            let a = if l + 1 == n_layers {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            pre.push(z);
            acts.push(a);
            off += rows * cols + rows;
        }

        // Backward pass: the output layer is linear, so delta_L = out - y.
        let mut grad = vec![0.0; self.dim];
        let out = &acts[n_layers];
        let mut delta: Vec<f64> = out.iter().zip(y.as_slice()).map(|(o, t)| o - t).collect();
        for l in (0..n_layers).rev() {
            let (rows, cols) = (self.layers[l + 1], self.layers[l]);
            off -= rows * cols + rows;
            let a_prev = &acts[l];
            for r in 0..rows {
                let row_off = off + r * cols;
                for c in 0..cols {
                    grad[row_off + c] = delta[r] * a_prev[c];
                }
                grad[off + rows * cols + r] = delta[r];
            }
            if l > 0 {
                let mut next = vec![0.0; cols];
                for (c, nc) in next.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for (r, dr) in delta.iter().enumerate() {
                        s += w[off + r * cols + c] * dr;
                    }
                    *nc = s * self.activation.derivative(pre[l - 1][c]);
                }
                delta = next;
            }
        }
        Vector::new(grad).expect("finite gradient")
    }

    /// Per-sample Hessian-vector product by central differences of the
    /// analytic gradient, step `sqrt(eps) * (1 + ||w||) / ||v||`.
    pub fn hvp(&self, i: usize, w: &Vector, v: &Vector) -> Result<Vector> {
        let h = fd_step(w, v)?;
        let mut wp = w.clone();
        wp.axpy_mut(h, v);
        let mut wm = w.clone();
        wm.axpy_mut(-h, v);
        let gp = self.grad(i, &wp);
        let gm = self.grad(i, &wm);
        Ok(gp.sub(&gm).scale(0.5 / h))
    }
}

/// Finite-difference step for Hessian-vector products.
pub(crate) fn fd_step(w: &Vector, v: &Vector) -> Result<f64> {
    let vn = v.norm2();
    if vn == 0.0 {
        return Err(invalid_argument("hvp direction must be nonzero"));
    }
    Ok(f64::EPSILON.sqrt() * (1.0 + w.norm2()) / vn)
}
