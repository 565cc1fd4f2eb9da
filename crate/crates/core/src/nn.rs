//! Layer primitives and the Adam optimizer built on [`crate::autograd`].

use crate::autograd::Tensor;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Named parameter handle; names key checkpoint entries.
#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    // Box-Muller; keeps us off extra distribution crates and fully seeded.
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
    })
}

pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Conv2d {
        let w = normal_init(rng, &[out_ch, in_ch, kernel, kernel], 0.02);
        let b = ArrayD::zeros(IxDyn(&[out_ch]));
        Conv2d {
            weight: Param {
                name: format!("{name}.weight"),
                tensor: Tensor::leaf(w),
            },
            bias: Param {
                name: format!("{name}.bias"),
                tensor: Tensor::leaf(b),
            },
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.weight.tensor, &self.bias.tensor, self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

pub struct InstanceNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl InstanceNorm2d {
    pub fn new(name: &str, channels: usize) -> InstanceNorm2d {
        InstanceNorm2d {
            gamma: Param {
                name: format!("{name}.gamma"),
                tensor: Tensor::leaf(ArrayD::from_elem(IxDyn(&[channels]), 1.0)),
            },
            beta: Param {
                name: format!("{name}.beta"),
                tensor: Tensor::leaf(ArrayD::zeros(IxDyn(&[channels]))),
            },
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.instance_norm(&self.gamma.tensor, &self.beta.tensor, self.eps)
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.gamma.clone(), self.beta.clone()]
    }
}

pub struct Linear {
    pub weight: Param, // out×in
    pub bias: Param,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Linear {
        let std = (2.0 / in_dim as f64).sqrt();
        Linear {
            weight: Param {
                name: format!("{name}.weight"),
                tensor: Tensor::leaf(normal_init(rng, &[out_dim, in_dim], std)),
            },
            bias: Param {
                name: format!("{name}.bias"),
                tensor: Tensor::leaf(ArrayD::zeros(IxDyn(&[out_dim]))),
            },
        }
    }

    /// x: n×in → n×out.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul_nt(&self.weight.tensor).add_bias_rows(&self.bias.tensor)
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// Adam with optional global-norm gradient clipping. Moment buffers are
/// indexed by parameter order, which is fixed per network.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(params: &[Param], beta1: f64, beta2: f64) -> Adam {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: params
                .iter()
                .map(|p| ArrayD::zeros(p.tensor.array().raw_dim()))
                .collect(),
            v: params
                .iter()
                .map(|p| ArrayD::zeros(p.tensor.array().raw_dim()))
                .collect(),
        }
    }

    pub fn step(&mut self, params: &[Param], lr: f64, clip_norm: Option<f64>) {
        assert_eq!(params.len(), self.m.len(), "adam: parameter set changed");
        let grads: Vec<ArrayD<f64>> = params
            .iter()
            .map(|p| {
                p.tensor
                    .grad()
                    .unwrap_or_else(|| ArrayD::zeros(p.tensor.array().raw_dim()))
            })
            .collect();
        let mut scale = 1.0;
        if let Some(max_norm) = clip_norm {
            let total: f64 = grads
                .iter()
                .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if total > max_norm {
                scale = max_norm / total;
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let g = g * scale;
            *m = &*m * self.beta1 + &g * (1.0 - self.beta1);
            *v = &*v * self.beta2 + &(&g * &g) * (1.0 - self.beta2);
            let mut value = p.tensor.to_array();
            ndarray::Zip::from(&mut value)
                .and(&*m)
                .and(&*v)
                .for_each(|w, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + self.eps);
                });
            p.tensor.set_value(value);
        }
    }
}

pub fn zero_grads(params: &[Param]) {
    for p in params {
        p.tensor.zero_grad();
    }
}
