use super::network::Parameters;
use super::tensor::{Real, Tensor};
use super::NnError;

/// Adam moments and hyperparameters. `m` and `v` mirror the parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    /// Fresh state with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(params: &Parameters<T>, lr: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut Parameters<T>, grads: &Parameters<T>) -> Result<(), NnError> {
        let grads: Vec<&Tensor<T>> = grads.tensors().collect();
        let n = params.tensors().count();
        if grads.len() != n || self.m.len() != n {
            return Err(NnError::ShapeMismatch(format!(
                "adam: {n} parameter tensors, {} gradients, {} moments",
                grads.len(),
                self.m.len()
            )));
        }
        for ((p, g), m) in params.tensors().zip(&grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(NnError::ShapeMismatch(format!(
                    "adam: parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let corr1 = T::of(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = T::of(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi / corr1;
                let v_hat = *vi / corr2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::network::{LayerParams, LayerSpec, NetworkConfig};

    fn scalar_params(theta: f64) -> Parameters<f64> {
        Parameters {
            layers: vec![Some(LayerParams {
                weight: Tensor::from_vec(&[1, 1], vec![theta]).unwrap(),
                bias: Tensor::zeros(&[1]),
            })],
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_params(0.7);
        let g = scalar_params(0.0);
        let mut s = AdamState::new(&p, 0.001);
        s.step(&mut p, &g).unwrap();
        assert_eq!(p, scalar_params(0.7));
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_params(0.0);
        let g = scalar_params(1.0);
        let mut s = AdamState::new(&p, 0.001);
        s.step(&mut p, &g).unwrap();
        // m̂ = v̂ = 1 after bias correction: Δθ = -lr / (1 + eps)
        let theta = p.tensors().next().unwrap().data()[0];
        assert!((theta + 0.001).abs() < 1e-10);
    }

    #[test]
    fn repeated_gradient_moves_monotonically_against_it() {
        let mut p = scalar_params(0.0);
        let g = scalar_params(-2.0);
        let mut s = AdamState::new(&p, 0.01);
        let mut last = 0.0;
        for _ in 0..5 {
            s.step(&mut p, &g).unwrap();
            let theta = p.tensors().next().unwrap().data()[0];
            assert!(theta > last);
            last = theta;
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = scalar_params(0.0);
        let cfg = NetworkConfig {
            input: (1, 1, 2),
            layers: vec![LayerSpec::Flatten, LayerSpec::dense(1)],
            num_classes: 1,
            labels: vec![],
        };
        let g = Parameters::<f64>::zeros(&cfg).unwrap();
        let mut s = AdamState::new(&p, 0.01);
        assert!(matches!(s.step(&mut p, &g), Err(NnError::ShapeMismatch(_))));
    }
}
