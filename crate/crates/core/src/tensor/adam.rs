use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Adam hyper-parameters. `lr` defaults to 1e-4; the moment decay rates and
/// epsilon are Kingma & Ba's reference values.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar = f32> {
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self::from_shapes(params.iter().map(|p| p.shape()))
    }

    pub fn from_shapes<'a>(shapes: impl Iterator<Item = &'a [usize]>) -> Self {
        let (first, second) = shapes.map(|s| (Tensor::zeros(s), Tensor::zeros(s))).unzip();
        Self {
            first,
            second,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update<'p>(
        &mut self,
        params: impl ExactSizeIterator<Item = &'p mut Tensor<T>>,
        grads: &[Tensor<T>],
        config: &AdamConfig,
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            ));
        }
        let params: Vec<&mut Tensor<T>> = params.collect();
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "parameter {i}: {:?} vs gradient {:?} vs moments {:?}",
                        p.shape(),
                        g.shape(),
                        self.first[i].shape()
                    ),
                ));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (config.beta1, config.beta2);
        let correction1 = 1.0 - b1.powi(t);
        let correction2 = 1.0 - b2.powi(t);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let lr = T::of(config.lr);
        let eps = T::of(config.eps);
        let (c1, c2) = (T::of(correction1), T::of(correction2));

        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1t * *mv + one_b1 * gv;
                *vv = b2t * *vv + one_b2 * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
