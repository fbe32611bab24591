use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hyper-parameters of one AdamW update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// AdamW with decoupled weight decay. Moment buffers are keyed by parameter
/// name and created on first use.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    state: BTreeMap<String, Moments>,
    step: u64,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances the step counter; call once per optimizer step, before the
    /// per-parameter updates.
    pub fn begin_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    /// Updates one parameter in place at the current step.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, hp: &AdamWParams) -> Result<()> {
        if self.step == 0 {
            return Err(Error::Numerical("AdamW update before the first step".into()));
        }
        if param.shape() != grad.shape() {
            return Err(Error::Numerical(format!(
                "{name}: gradient shape {:?} does not match parameter {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        let n = param.numel();
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        if st.m.len() != n {
            return Err(Error::Numerical(format!("{name}: moment buffers do not match the parameter")));
        }
        let t = self.step as i32;
        let (b1, b2) = (hp.beta1 as f32, hp.beta2 as f32);
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        let decay = (1.0 - hp.lr * hp.weight_decay) as f32;
        let step_size = (hp.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = hp.eps as f32;
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(&mut st.m).zip(&mut st.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            if hp.weight_decay != 0.0 {
                *p *= decay;
            }
            *p -= step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(lr: f64, wd: f64) -> AdamWParams {
        AdamWParams {
            lr,
            weight_decay: wd,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn single_step_closed_form() {
        for (wd, expect) in [(0.0, 0.9), (0.01, 0.899)] {
            let mut opt = AdamW::new();
            let mut p = Tensor::scalar(1.0f32);
            opt.begin_step();
            opt.update("p", &mut p, &Tensor::scalar(1.0), &hp(0.1, wd)).unwrap();
            assert!((f64::from(p.item()) - expect).abs() < 1e-6, "{}", p.item());
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_alone() {
        let mut opt = AdamW::new();
        let mut p = Tensor::new([3], vec![0.3f32, -1.7, 2.5]).unwrap();
        let before = p.clone();
        for _ in 0..5 {
            opt.begin_step();
            opt.update("p", &mut p, &Tensor::zeros([3]), &hp(1e-3, 0.0)).unwrap();
        }
        assert!(p.data().iter().zip(before.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let mut opt = AdamW::new();
        let mut p = Tensor::<f32>::zeros([2]);
        assert!(opt.update("p", &mut p, &Tensor::zeros([2]), &hp(0.1, 0.0)).is_err());
        opt.begin_step();
        assert!(opt.update("p", &mut p, &Tensor::zeros([3]), &hp(0.1, 0.0)).is_err());
    }

    #[test]
    fn matches_reference_over_several_steps() {
        // Scalar reference written directly from the update rule.
        let grads = [0.5f64, -1.0, 0.25, 2.0];
        let (lr, wd, b1, b2, eps) = (0.01, 0.1, 0.9, 0.999, 1e-8);
        let (mut theta, mut m, mut v) = (0.7f64, 0.0, 0.0);
        let mut opt = AdamW::new();
        let mut p = Tensor::scalar(0.7f32);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            theta -= lr * wd * theta;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            theta -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            opt.begin_step();
            opt.update("p", &mut p, &Tensor::scalar(g as f32), &hp(lr, wd)).unwrap();
        }
        assert!((f64::from(p.item()) - theta).abs() < 1e-6);
    }
}
