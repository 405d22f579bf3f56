//! Dense tensors, reverse-mode differentiation and gradient checking.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use gradcheck::{check_params, finite_diff_check, relative_error, CheckReport};
pub use graph::{Activation, Graph, NodeId, SoftmaxDomain};
pub use params::ParamStore;
pub use tensor::{argmax, Real, Tensor};

use crate::error::{Error, Result};

/// Matrix product of an m×k and a k×n tensor.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    Ok(Tensor::from_parts(
        vec![m, n],
        kernels::matmul(a.data(), b.data(), m, k, n),
    ))
}

/// `x·W + b` with `{prefix}.w` (in×out) and `{prefix}.b` bound from the store.
pub fn linear<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn softmax<T: Real>(x: &Tensor<T>, domain: SoftmaxDomain) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let id = g.input(x.clone());
    let y = g.softmax(id, domain, None)?;
    Ok(g.value(y).clone())
}

pub fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (rows, d) = x.dims2()?;
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    graph::check_layer_norm_args(d, eps)?;
    let (out, _) = kernels::layer_norm(x.data(), rows, d, gamma.data(), beta.data(), eps);
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Elementwise nonlinearity selected by name (`relu`, `gelu`, `tanh`,
/// `sigmoid`).
pub fn activation<T: Real>(x: &Tensor<T>, kind: &str) -> Result<Tensor<T>> {
    let kind: Activation = kind.parse()?;
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().map(|&v| kind.apply(v)).collect(),
    ))
}
