use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::{named, Params};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of `w` in place; `t` is the 1-based step.
pub fn adam_update(w: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], hp: &AdamConfig, t: u64) {
    let c1 = 1.0 - hp.beta1.powf(t as f64);
    let c2 = 1.0 - hp.beta2.powf(t as f64);
    for i in 0..w.len() {
        let g = grad[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        w[i] -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

/// Moment estimates for every leaf of a parameter tree, in traversal order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new<P: Params<Tensor>>(config: AdamConfig, params: &P) -> Self {
        let zeros: Vec<Tensor> = named(params)
            .into_iter()
            .map(|(_, t)| Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).expect("same shape"))
            .collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update. Every gradient is checked first, so a non-finite
    /// entry aborts without touching any parameter.
    pub fn update<P: Params<Tensor>>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let grads = named(grads);
        if grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {} gradients",
                self.m.len(),
                grads.len()
            )));
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        self.step += 1;
        let (hp, t) = (self.config, self.step);
        let mut idx = 0;
        let mut shape_err = None;
        params.visit_mut("", &mut |_, w| {
            let g = &grads[idx].1;
            if g.shape() != w.shape() {
                shape_err.get_or_insert_with(|| Error::shape("adam", w.shape(), g.shape()));
            } else {
                adam_update(w.data_mut(), g.data(), self.m[idx].data_mut(), self.v[idx].data_mut(), &hp, t);
            }
            idx += 1;
        });
        shape_err.map_or(Ok(()), Err)
    }
}
