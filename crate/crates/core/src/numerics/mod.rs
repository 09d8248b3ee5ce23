//! Tensors, a reverse-mode tape, and the optimizer used to train every model.

mod adam;
mod gradcheck;
mod graph;
mod real;
mod tensor;
mod topk;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport, ScalarFn};
pub use graph::{AttentionLayout, CustomOp, Graph, Segment, Var};
pub use real::{gemm, Real};
pub use tensor::Tensor;
pub use topk::topk;

/// Softmax of a plain tensor along `axis` (not recorded).
pub fn softmax<F: Real>(x: &Tensor<F>, axis: usize) -> crate::Result<Tensor<F>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.softmax(v, axis)?;
    Ok(g.value(y).clone())
}

/// Epsilon used by every RMS normalization in the model.
pub const RMS_EPS: f64 = 1e-6;

/// Inverted dropout: zeroes entries with probability `p` and rescales the
/// rest by `1 / (1 - p)`. Identity when `p == 0`.
pub fn dropout<F: Real, R: rand::Rng + ?Sized>(g: &mut Graph<F>, x: Var, p: f64, rng: &mut R) -> crate::Result<Var> {
    if p <= 0.0 {
        return Ok(x);
    }
    if p >= 1.0 {
        return Err(crate::Error::invalid(format!("dropout rate must be below 1, got {p}")));
    }
    let keep = F::from_f64_lossy(1.0 / (1.0 - p));
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<F> = (0..n)
        .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
        .collect();
    g.mul_const(x, &Tensor::from_vec(&shape, mask)?)
}
