//! Minimal dense tensor engine with reverse-mode differentiation.
//!
//! [`Tensor`] holds values, [`Tape`] records operations on them and evaluates
//! gradients. The free functions here are the plain (tape-free) forms used by
//! evaluation code and diagnostics.

pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, PairAttentionInputs, Tape, Var};
pub use tensor::Tensor;

use crate::error::{MbvrError, Result};

/// Cosine of the angle between two equally sized vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MbvrError::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (kernels::norm(a), kernels::norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(MbvrError::Degenerate("cosine with a zero vector".into()));
    }
    Ok(kernels::dot(a, b) / (na * nb))
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(MbvrError::InvalidArgument("softmax of an empty vector".into()));
    }
    let mut out = vec![0.0; logits.len()];
    kernels::softmax_into(logits, &mut out);
    Ok(out)
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let nrm = kernels::norm(v);
    if nrm == 0.0 || !nrm.is_finite() {
        return Err(MbvrError::Degenerate(format!("cannot normalize, norm is {nrm}")));
    }
    Ok(v.iter().map(|x| x / nrm).collect())
}

/// Gradients of the scalar `loss` with respect to each of `params`.
///
/// Parameters that do not feed into `loss` get an all-zero gradient.
pub fn gradient_eval(tape: &Tape, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
    tape.gradients(loss, params)
}

#[cfg(test)]
pub(crate) mod testing {
    //! Central finite differences for unit tests.

    use super::Tensor;

    /// Numerical gradient of `f` at every coordinate of every tensor in `point`.
    pub fn central_differences(point: &[Tensor], step: f64, mut f: impl FnMut(&[Tensor]) -> f64) -> Vec<Vec<f64>> {
        let mut work = point.to_vec();
        let mut out = Vec::with_capacity(point.len());
        for t in 0..point.len() {
            let mut grad = vec![0.0; point[t].len()];
            for (i, g) in grad.iter_mut().enumerate() {
                let orig = work[t].data()[i];
                work[t].data_mut()[i] = orig + step;
                let plus = f(&work);
                work[t].data_mut()[i] = orig - step;
                let minus = f(&work);
                work[t].data_mut()[i] = orig;
                *g = (plus - minus) / (2.0 * step);
            }
            out.push(grad);
        }
        out
    }

    /// Max-abs difference scaled by the larger max-abs magnitude.
    pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        let diff = analytic
            .iter()
            .zip(numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let scale = analytic.iter().chain(numeric).map(|x| x.abs()).fold(1e-12, f64::max);
        diff / scale
    }
}
