//! Forward and backward kernels for the handful of layer types the models
//! are built from. Every backward takes the upstream gradient `dy` and the
//! values cached from the forward pass.

use super::Tensor;

/// `y = x Wᵀ + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut y = x.matmul_nt(w);
    let out = w.rows();
    for row in y.data_mut().chunks_exact_mut(out) {
        for (v, bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    y
}

pub struct LinearGrads {
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Tensor,
}

/// Gradients of a linear layer. `dx` is only computed when `need_dx`.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor, need_dx: bool) -> LinearGrads {
    let dw = dy.matmul_tn(x);
    let db = dy.sum_rows();
    let dx = need_dx.then(|| dy.matmul(w));
    LinearGrads { dx, dw, db }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// `pre` is the ReLU input. The derivative at exactly zero is taken as 0.
pub fn relu_backward(pre: &Tensor, dy: &Tensor) -> Tensor {
    pre.zip_map(dy, |p, g| if p > 0.0 { g } else { 0.0 })
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// `out` is the sigmoid output, so `σ' = out (1 - out)`.
pub fn sigmoid_backward(out: &Tensor, dy: &Tensor) -> Tensor {
    out.zip_map(dy, |s, g| g * s * (1.0 - s))
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip_map(b, |x, y| x * y)
}

/// Returns `(da, db)` for `y = a ⊙ b`.
pub fn hadamard_backward(a: &Tensor, b: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    (b.zip_map(dy, |bv, g| bv * g), a.zip_map(dy, |av, g| av * g))
}
