//! AdamW with decoupled weight decay, driven by a one-cycle learning-rate
//! schedule: linear warm-up from `max_lr / DIV_FACTOR` to `max_lr`, then
//! cosine decay back down to `max_lr / DIV_FACTOR`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Parameter;
use serde::{Deserialize, Serialize};

/// Start/end learning rate is `max_lr / DIV_FACTOR`.
pub const DIV_FACTOR: f64 = 25.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    /// Fraction of steps spent in linear warm-up.
    pub warmup_frac: f64,
}

impl OneCycle {
    pub fn lr(&self, step: usize) -> f64 {
        let total = self.total_steps.max(1) as f64;
        let t = (step as f64).min(total) / total;
        let floor = self.max_lr / DIV_FACTOR;
        if self.warmup_frac > 0.0 && t < self.warmup_frac {
            let p = t / self.warmup_frac;
            floor + (self.max_lr - floor) * p
        } else {
            let denom = (1.0 - self.warmup_frac).max(f64::EPSILON);
            let p = ((t - self.warmup_frac) / denom).clamp(0.0, 1.0);
            floor + (self.max_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        }
    }
}

/// Optimizer configuration and per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState<F: Scalar> {
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: OneCycle,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &[Parameter<F>], schedule: OneCycle, weight_decay: f64) -> Self {
        OptimizerState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            schedule,
            m: params.iter().map(|p| vec![F::zero(); p.tensor.numel()]).collect(),
            v: params.iter().map(|p| vec![F::zero(); p.tensor.numel()]).collect(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// One decoupled-weight-decay Adam step over `params`, reading each
    /// parameter's populated gradient. The learning rate is taken from the
    /// schedule at the current step; the step counter then advances.
    pub fn adamw_step(&mut self, params: &mut [Parameter<F>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer built for {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        let lr = F::c(self.current_lr());
        let b1 = F::c(self.beta1);
        let b2 = F::c(self.beta2);
        let eps = F::c(self.eps);
        let wd = F::c(self.weight_decay);
        let t = self.step + 1;
        let bc1 = F::one() - F::c(self.beta1.powi(t as i32));
        let bc2 = F::one() - F::c(self.beta2.powi(t as i32));

        for (i, p) in params.iter_mut().enumerate() {
            let g = p
                .tensor
                .grad
                .as_ref()
                .ok_or_else(|| Error::MissingGrad { name: p.name.clone() })?;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (((w, &gi), mi), vi) in
                p.tensor.data.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mi = b1 * *mi + (F::one() - b1) * gi;
                *vi = b2 * *vi + (F::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w - lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
        }
        self.step = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(v: f64, g: f64) -> Vec<Parameter<f64>> {
        let mut t = Tensor::scalar(v);
        t.grad = Some(vec![g]);
        vec![Parameter::new("p", t)]
    }

    #[test]
    fn zero_grad_zero_decay_leaves_parameter_unchanged() {
        let mut params = one_param(1.5, 0.0);
        let sched = OneCycle { max_lr: 0.1, total_steps: 10, warmup_frac: 0.0 };
        let mut opt = OptimizerState::new(&params, sched, 0.0);
        opt.adamw_step(&mut params).unwrap();
        assert!((params[0].tensor.data[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn first_step_is_bias_corrected() {
        // p = 1, grad = 1, lr = 0.1: bias-corrected m-hat = v-hat = 1, so the
        // update is lr / (1 + eps) which is 0.1 to within eps.
        let mut params = one_param(1.0, 1.0);
        let sched = OneCycle { max_lr: 0.1, total_steps: 10, warmup_frac: 0.0 };
        let mut opt = OptimizerState::new(&params, sched, 0.0);
        opt.adamw_step(&mut params).unwrap();
        let delta = 1.0 - params[0].tensor.data[0];
        assert!((delta - 0.1).abs() < 1e-8, "delta = {delta}");
    }

    #[test]
    fn one_cycle_warms_up_then_decays() {
        let sched = OneCycle { max_lr: 1.0, total_steps: 100, warmup_frac: 0.3 };
        assert!(sched.lr(0) < sched.lr(50));
        assert!((sched.lr(30) - 1.0).abs() < 1e-12);
        assert!((sched.lr(100) - 1.0 / DIV_FACTOR).abs() < 1e-12);
        // Monotone on each side of the peak.
        for s in 0..30 {
            assert!(sched.lr(s) <= sched.lr(s + 1) + 1e-15);
        }
        for s in 30..100 {
            assert!(sched.lr(s) + 1e-15 >= sched.lr(s + 1));
        }
    }

    #[test]
    fn missing_grad_names_the_parameter() {
        let mut t = Tensor::scalar(1.0);
        t.grad = None;
        let mut params = vec![Parameter::new("w_q", t)];
        let sched = OneCycle { max_lr: 0.1, total_steps: 1, warmup_frac: 0.0 };
        let mut opt = OptimizerState::new(&params, sched, 0.0);
        match opt.adamw_step(&mut params) {
            Err(Error::MissingGrad { name }) => assert_eq!(name, "w_q"),
            other => panic!("expected MissingGrad, got {other:?}"),
        }
    }
}
