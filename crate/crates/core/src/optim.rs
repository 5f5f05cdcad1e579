//! SGD with momentum and Adam, both with coupled (L2) weight decay.

use std::collections::BTreeMap;

use crate::autodiff::{GradMap, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    /// Contrastive pretraining defaults: lr 0.015, momentum 0.9, decay 1e-4.
    pub fn sgd_default() -> Self {
        OptimizerConfig { kind: OptimizerKind::Sgd { momentum: 0.9 }, lr: 0.015, weight_decay: 1e-4 }
    }

    /// Fine-tuning defaults: lr 1e-4 with the usual Adam moments.
    pub fn adam_default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            lr: 1e-4,
            weight_decay: 0.0,
        }
    }

    /// `lr == 0` is accepted so a run can be frozen for checks.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        match self.kind {
            OptimizerKind::Sgd { momentum } if !(0.0..=1.0).contains(&momentum) => {
                Err(Error::Config(format!("sgd momentum must lie in [0,1], got {momentum}")))
            }
            OptimizerKind::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                Err(Error::Config(format!("invalid adam constants beta1={beta1} beta2={beta2} eps={eps}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
struct Slot<T> {
    first: Tensor<T>,
    second: Option<Tensor<T>>,
}

/// Per-parameter auxiliary buffers keyed like the parameters they track.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    config: OptimizerConfig,
    step: u64,
    slots: BTreeMap<String, Slot<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState { config, step: 0, slots: BTreeMap::new() })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Velocity (SGD) or first moment (Adam) of `name`, once it exists.
    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.slots.get(name).map(|s| &s.first)
    }

    pub fn set_velocity(&mut self, name: &str, v: Tensor<T>) {
        self.slots.insert(name.to_string(), Slot { first: v, second: None });
    }

    /// Applies whichever update rule the state was configured for.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &GradMap<T>) -> Result<()> {
        match self.config.kind {
            OptimizerKind::Sgd { .. } => sgd_step(params, grads, self),
            OptimizerKind::Adam { .. } => adam_step(params, grads, self),
        }
    }
}

fn check_shapes<T: Scalar>(params: &ParamSet<T>, grads: &GradMap<T>) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::dim(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::dim(format!("parameter `{name}` is {:?} but gradient is {:?}", p.shape(), g.shape())));
        }
    }
    Ok(())
}

/// `v <- mu*v + (g + wd*theta)`, `theta <- theta - lr*v`.
///
/// Parameters without a gradient entry are left untouched.
pub fn sgd_step<T: Scalar>(params: &mut ParamSet<T>, grads: &GradMap<T>, state: &mut OptimizerState<T>) -> Result<()> {
    let OptimizerKind::Sgd { momentum } = state.config.kind else {
        return Err(Error::Contract("sgd_step called with an Adam optimizer state".into()));
    };
    check_shapes(params, grads)?;
    let (lr, mu, wd) = (T::of(state.config.lr), T::of(momentum), T::of(state.config.weight_decay));
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked");
        let slot = state
            .slots
            .entry(name.clone())
            .or_insert_with(|| Slot { first: Tensor::zeros(p.shape().to_vec()), second: None });
        if slot.first.shape() != p.shape() {
            return Err(Error::dim(format!("velocity of `{name}` has shape {:?}", slot.first.shape())));
        }
        for ((theta, v), &gi) in p.data_mut().iter_mut().zip(slot.first.data_mut()).zip(g.data()) {
            *v = mu * *v + (gi + wd * *theta);
            *theta -= lr * *v;
        }
    }
    state.step += 1;
    Ok(())
}

/// Adam with bias-corrected moments; weight decay folded into the gradient.
pub fn adam_step<T: Scalar>(params: &mut ParamSet<T>, grads: &GradMap<T>, state: &mut OptimizerState<T>) -> Result<()> {
    let OptimizerKind::Adam { beta1, beta2, eps } = state.config.kind else {
        return Err(Error::Contract("adam_step called with an SGD optimizer state".into()));
    };
    check_shapes(params, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (T::of(beta1), T::of(beta2));
    let (lr, wd, eps) = (T::of(state.config.lr), T::of(state.config.weight_decay), T::of(eps));
    let (c1, c2) = (T::of(c1), T::of(c2));
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked");
        let slot = state.slots.entry(name.clone()).or_insert_with(|| Slot {
            first: Tensor::zeros(p.shape().to_vec()),
            second: Some(Tensor::zeros(p.shape().to_vec())),
        });
        let second = slot.second.get_or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        for (((theta, m), v), &gi) in
            p.data_mut().iter_mut().zip(slot.first.data_mut()).zip(second.data_mut()).zip(g.data())
        {
            let gi = gi + wd * *theta;
            *m = b1 * *m + (T::one() - b1) * gi;
            *v = b2 * *v + (T::one() - b2) * gi * gi;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> ParamSet<f64> {
        ParamSet::from([(name.to_string(), Tensor::scalar(v))])
    }

    fn sgd(lr: f64, momentum: f64, wd: f64) -> OptimizerState<f64> {
        OptimizerState::new(OptimizerConfig { kind: OptimizerKind::Sgd { momentum }, lr, weight_decay: wd }).unwrap()
    }

    fn adam(lr: f64) -> OptimizerState<f64> {
        OptimizerState::new(OptimizerConfig { lr, ..OptimizerConfig::adam_default() }).unwrap()
    }

    #[test]
    fn plain_gradient_descent() {
        let mut p = single("w", 5.0);
        let mut s = sgd(1.0, 0.0, 0.0);
        sgd_step(&mut p, &single("w", 2.0), &mut s).unwrap();
        assert_eq!(p["w"].item(), 3.0);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single("w", 5.0);
        let mut s = sgd(0.1, 0.9, 0.0);
        sgd_step(&mut p, &single("w", 0.0), &mut s).unwrap();
        assert_eq!(p["w"].item(), 5.0);
    }

    #[test]
    fn momentum_single_step() {
        let mut p = single("w", 0.0);
        let mut s = sgd(0.1, 0.9, 0.0);
        s.set_velocity("w", Tensor::scalar(1.0));
        sgd_step(&mut p, &single("w", 1.0), &mut s).unwrap();
        assert!((s.first_moment("w").unwrap().item() - 1.9).abs() < 1e-15);
        assert!((p["w"].item() + 0.19).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_is_added_to_gradient() {
        let mut p = single("w", 2.0);
        let mut s = sgd(0.5, 0.0, 0.1);
        sgd_step(&mut p, &single("w", 1.0), &mut s).unwrap();
        assert!((p["w"].item() - (2.0 - 0.5 * (1.0 + 0.2))).abs() < 1e-15);
    }

    #[test]
    fn sgd_defaults() {
        let c = OptimizerConfig::sgd_default();
        assert_eq!(c.lr, 0.015);
        assert_eq!(c.weight_decay, 1e-4);
        assert_eq!(c.kind, OptimizerKind::Sgd { momentum: 0.9 });
        assert_eq!(OptimizerConfig::adam_default().lr, 1e-4);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut p = single("w", 0.0);
        let g = GradMap::from([("w".to_string(), Tensor::<f64>::zeros([2]))]);
        assert!(matches!(sgd_step(&mut p, &g, &mut sgd(0.1, 0.9, 0.0)), Err(Error::Dimension(_))));
        assert!(matches!(adam_step(&mut p, &g, &mut adam(0.1)), Err(Error::Dimension(_))));
    }

    #[test]
    fn wrong_kind_is_contract_error() {
        let mut p = single("w", 0.0);
        let g = single("w", 1.0);
        assert!(matches!(adam_step(&mut p, &g, &mut sgd(0.1, 0.9, 0.0)), Err(Error::Contract(_))));
        assert!(matches!(sgd_step(&mut p, &g, &mut adam(0.1)), Err(Error::Contract(_))));
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = single("w", 1.5);
        let mut s = adam(0.1);
        for _ in 0..5 {
            adam_step(&mut p, &single("w", 0.0), &mut s).unwrap();
        }
        assert_eq!(p["w"].item(), 1.5);
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        // m_hat = 1, v_hat = 1 after one step, so the update is lr / (1 + eps).
        let mut p = single("w", 0.0);
        let mut s = adam(0.1);
        adam_step(&mut p, &single("w", 1.0), &mut s).unwrap();
        let expected = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p["w"].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr_sign() {
        let mut p = single("w", 0.0);
        let mut s = adam(0.01);
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p["w"].item();
            adam_step(&mut p, &single("w", -3.0), &mut s).unwrap();
            last = p["w"].item() - before;
        }
        assert!((last - 0.01).abs() < 1e-6, "last step {last}");
    }

    #[test]
    fn rejects_negative_lr() {
        let c = OptimizerConfig { lr: -1.0, ..OptimizerConfig::sgd_default() };
        assert!(OptimizerState::<f32>::new(c).is_err());
    }
}
