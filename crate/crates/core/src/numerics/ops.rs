//! Primitive layers shared by every model component, plus eager wrappers
//! of the core ops for callers that do not need gradients.


use super::graph::{Graph, Var};
use super::params::Session;
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// Epsilon used by every layer norm in the model.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: Tensor::ones([d]),
            beta: Tensor::zeros([d]),
            eps: LN_EPS,
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

pub fn layer_norm(x: &Tensor, p: &LayerNormParams) -> Result<Tensor> {
    if p.gamma.dims() != [x.last_dim()] {
        return Err(shape_err!(
            "layer_norm over {} features got gamma {:?}",
            x.last_dim(),
            p.gamma.dims()
        ));
    }
    let mut g = Graph::new();
    let (xv, gv, bv) = (
        g.constant(x.clone()),
        g.constant(p.gamma.clone()),
        g.constant(p.beta.clone()),
    );
    let y = g.layer_norm(xv, gv, bv, p.eps)?;
    Ok(g.value(y).clone())
}

/// Softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let dims = x.dims();
    if axis >= dims.len() {
        return Err(shape_err!("axis {axis} out of range for {dims:?}"));
    }
    let inner: usize = dims[axis + 1..].iter().product();
    let n = dims[axis];
    let outer: usize = dims[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            for k in 0..n {
                buf[k] = data[(o * n + k) * inner + i];
            }
            super::graph::softmax_in_place(&mut buf);
            for k in 0..n {
                data[(o * n + k) * inner + i] = buf[k];
            }
        }
    }
    Ok(out)
}

pub fn depthwise_conv1d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(kernel.clone()));
    let y = g.depthwise_conv1d(xv, kv)?;
    Ok(g.value(y).clone())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---- parameterised layers -------------------------------------------------

pub fn linear(s: &mut Session, prefix: &str, x: Var) -> Result<Var> {
    let w = s.param(&format!("{prefix}.weight"))?;
    let y = s.g.matmul(x, w)?;
    let bias = format!("{prefix}.bias");
    if s.store().contains(&bias) {
        let b = s.param(&bias)?;
        s.g.add_row(y, b)
    } else {
        Ok(y)
    }
}

pub fn layer_norm_layer(s: &mut Session, prefix: &str, x: Var) -> Result<Var> {
    let gamma = s.param(&format!("{prefix}.gamma"))?;
    let beta = s.param(&format!("{prefix}.beta"))?;
    s.g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Parameter count of a linear layer.
pub fn linear_params(d_in: usize, d_out: usize, bias: bool) -> usize {
    d_in * d_out + if bias { d_out } else { 0 }
}

/// Parameter count of a layer norm over `d` features.
pub fn layer_norm_params(d: usize) -> usize {
    2 * d
}
