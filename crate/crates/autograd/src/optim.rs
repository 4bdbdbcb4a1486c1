use crate::{Error, Float, Result, Tensor};

/// Adaptive moment estimation with bias correction, no weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    /// Fresh state sized to `params`, with β = (0.9, 0.999) and ε = 1e-8.
    pub fn new(lr: f64, params: &[Tensor<T>]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Shape {
                op: "adam",
                detail: format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            });
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let bc1 = T::lit(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        // With bias correction the first update is lr * g/|g| (up to eps).
        let mut params = vec![Tensor::<f64>::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let grads = vec![Tensor::from_vec(&[3], vec![0.3, -4.0, 1e-2]).unwrap()];
        let mut adam = Adam::new(0.1, &params);
        adam.update(&mut params, &grads).unwrap();
        let got = params[0].data();
        assert!((got[0] - 0.9).abs() < 1e-6);
        assert!((got[1] + 1.9).abs() < 1e-6);
        assert!((got[2] - 0.4).abs() < 1e-5);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let start = Tensor::<f32>::from_vec(&[4], vec![0.1, -0.7, 3.0, 1e-9]).unwrap();
        let mut params = vec![start.clone()];
        let grads = vec![Tensor::from_vec(&[4], vec![1.0, -2.0, 0.0, 5.0]).unwrap()];
        let mut adam = Adam::new(0.0, &params);
        for _ in 0..3 {
            adam.update(&mut params, &grads).unwrap();
        }
        assert_eq!(params[0], start);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut params = vec![Tensor::<f64>::from_vec(&[2], vec![3.0, -1.0]).unwrap()];
        let mut adam = Adam::new(0.05, &params);
        for _ in 0..2000 {
            let grads = vec![params[0].map(|x| 2.0 * (x - 0.5))];
            adam.update(&mut params, &grads).unwrap();
        }
        for &x in params[0].data() {
            assert!((x - 0.5).abs() < 1e-3);
        }
    }
}
