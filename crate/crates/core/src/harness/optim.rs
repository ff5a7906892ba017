use crate::encoders::ModelParams;
use crate::numcore::Tensor;

use super::OptimizerKind;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

/// Plain SGD or Adam (bias-corrected, no weight decay) over every model
/// parameter tensor.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.named().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Optimizer {
            kind,
            lr,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one update. `grads` follows [`ModelParams::named`] order. A
    /// parameter whose gradient has always been zero is left bit-for-bit
    /// unchanged.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) {
        self.step += 1;
        let bias1 = 1.0 - BETA1.powi(self.step);
        let bias2 = 1.0 - BETA2.powi(self.step);
        for (i, ((_, p), g)) in params.named_mut().into_iter().zip(grads).enumerate() {
            let p = p.data_mut();
            let g = g.data();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, &dx) in p.iter_mut().zip(g) {
                        *x -= self.lr * dx;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for j in 0..p.len() {
                        m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                        v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                        let m_hat = m[j] / bias1;
                        let v_hat = v[j] / bias2;
                        p[j] -= self.lr * m_hat / (v_hat.sqrt() + EPSILON);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ModelConfig;

    fn tiny() -> ModelParams {
        ModelParams::init(
            ModelConfig {
                vocab_size: 4,
                token_dim: 2,
                vision_input_dim: 2,
                vision_hidden: 2,
                embed_dim: 2,
                heads: 1,
            },
            0,
        )
        .unwrap()
    }

    fn grads_like(p: &ModelParams, value: f64) -> Vec<Tensor> {
        p.named()
            .iter()
            .map(|(_, t)| Tensor::new(t.shape().to_vec(), vec![value; t.len()]).unwrap())
            .collect()
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut p = tiny();
        let before = p.clone();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, &p);
        let g = grads_like(&p, 3.0);
        opt.step(&mut p, &g);
        for ((_, a), (_, b)) in p.named().iter().zip(before.named()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((y - x - 0.01).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_gradients_leave_parameters_bitwise_unchanged() {
        let mut p = tiny();
        let before = p.clone();
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut opt = Optimizer::new(kind, 0.1, &p);
            for _ in 0..5 {
                let g = grads_like(&p, 0.0);
                opt.step(&mut p, &g);
            }
        }
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_is_plain_descent() {
        let mut p = tiny();
        let before = p.clone();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, &p);
        let g = grads_like(&p, 2.0);
        opt.step(&mut p, &g);
        let (_, a) = &p.named()[0];
        let (_, b) = &before.named()[0];
        assert!((b.data()[0] - a.data()[0] - 1.0).abs() < 1e-15);
    }
}
