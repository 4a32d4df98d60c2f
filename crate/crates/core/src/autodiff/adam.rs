use super::{ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 3e-4;

/// Adam moments and step counter for one parameter group.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first_moment: Vec<Tensor<S>>,
    second_moment: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamSet<S>, lr: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    pub fn first_moment(&self) -> &[Tensor<S>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor<S>] {
        &self.second_moment
    }

    /// One bias-corrected Adam update. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &[Tensor<S>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.get(i).shape() {
                return Err(Error::Shape(format!(
                    "gradient for {} has shape {:?}, parameter has {:?}",
                    params.name(i),
                    g.shape(),
                    params.get(i).shape()
                )));
            }
            if !g.all_finite() {
                let bad = g.data().iter().filter(|x| !x.is_finite()).count();
                return Err(Error::Numerical(format!(
                    "non-finite gradient in parameter group {} ({bad} of {} entries)",
                    params.name(i),
                    g.len()
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let bc1 = S::of(1.0 - self.beta1.powi(t));
        let bc2 = S::of(1.0 - self.beta2.powi(t));
        let lr = S::of(self.lr);
        let eps = S::of(self.eps);
        for (i, g) in grads.iter().enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let p = params.get_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (S::one() - b1) * gj;
                v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
