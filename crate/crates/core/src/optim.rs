//! AdamW with parameter groups.
//!
//! Under LoRA+ and KronA+ the `B` factors form their own group at `λ·η`;
//! every other trainable parameter, the head included, rides at `η`.

use crate::adapters::ParamKind;
use crate::error::{Error, Result};
use crate::model::VitModel;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning-rate ratio for `B` factors under the "+" methods.
    pub lambda: f64,
    /// Linear warmup length in steps; 0 disables it.
    pub warmup_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            lambda: 1.0,
            warmup_steps: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be positive and weight_decay nonnegative".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 1.0) {
            log::warn!("rejecting lambda {} below 1", self.lambda);
            return Err(Error::Config(format!("lambda must be >= 1, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupRole {
    /// Everything at the base rate.
    Base,
    /// `B` factors of LoRA+ / KronA+.
    Boosted,
}

#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub role: GroupRole,
    pub lr: f64,
    pub weight_decay: f64,
    /// Parameter names in visiting order.
    pub members: Vec<String>,
}

/// Moment state of one parameter, kept in `f64`.
#[derive(Clone, Debug)]
struct Moments {
    group: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// The update AdamW applies to one scalar, given its decayed-and-updated
/// moments and the bias corrections.
#[inline]
pub fn adamw_delta(theta: f64, m: f64, v: f64, lr: f64, wd: f64, eps: f64, bc1: f64, bc2: f64) -> f64 {
    let m_hat = m / bc1;
    let v_hat = v / bc2;
    lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta)
}

#[derive(Clone, Debug)]
pub struct AdamW {
    config: OptimizerConfig,
    groups: Vec<ParamGroup>,
    // One entry per trainable parameter, in visiting order.
    state: Vec<Moments>,
    step: u64,
}

/// Splits the trainable parameters of `model` into groups for `method`.
pub fn build_groups<T: Scalar>(model: &VitModel<T>, config: &OptimizerConfig) -> Result<Vec<ParamGroup>> {
    config.validate()?;
    let method = model.method();
    let mut base = ParamGroup {
        role: GroupRole::Base,
        lr: config.lr,
        weight_decay: config.weight_decay,
        members: Vec::new(),
    };
    let mut boosted = ParamGroup {
        role: GroupRole::Boosted,
        lr: config.lr * config.lambda,
        weight_decay: config.weight_decay,
        members: Vec::new(),
    };
    model.visit(|name, kind, p| {
        if !p.trainable {
            return;
        }
        if method.is_plus() && kind == ParamKind::AdapterB {
            boosted.members.push(name.to_string());
        } else {
            base.members.push(name.to_string());
        }
    });
    if method.is_plus() {
        Ok(vec![base, boosted])
    } else {
        if config.lambda != 1.0 {
            log::warn!("lambda = {} has no effect for method {}", config.lambda, method);
        }
        Ok(vec![base])
    }
}

impl AdamW {
    pub fn new<T: Scalar>(model: &VitModel<T>, config: OptimizerConfig) -> Result<Self> {
        let groups = build_groups(model, &config)?;
        let method = model.method();
        let mut state = Vec::new();
        model.visit(|_, kind, p| {
            if p.trainable {
                let group = usize::from(method.is_plus() && kind == ParamKind::AdapterB);
                state.push(Moments {
                    group,
                    m: vec![0.0; p.len()],
                    v: vec![0.0; p.len()],
                });
            }
        });
        Ok(AdamW {
            config,
            groups,
            state,
            step: 0,
        })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn warmup_factor(&self, step: u64) -> f64 {
        match self.config.warmup_steps {
            0 => 1.0,
            w => (step as f64 / w as f64).min(1.0),
        }
    }

    /// One update of every trainable parameter from its accumulated
    /// gradient. Gradients are checked for non-finite values first, so a
    /// failed step leaves the model untouched.
    pub fn step<T: Scalar>(&mut self, model: &mut VitModel<T>) -> Result<()> {
        let mut bad = None;
        model.visit(|name, _, p| {
            if bad.is_none() && p.trainable && !p.grad.all_finite() {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(Error::Numerical(format!("non-finite gradient in parameter `{name}`")));
        }

        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let warm = self.warmup_factor(self.step);
        let mut idx = 0;
        let (state, groups) = (&mut self.state, &self.groups);
        model.visit_mut(|_, _, p| {
            if !p.trainable {
                return;
            }
            let st = &mut state[idx];
            idx += 1;
            let g = &groups[st.group];
            let lr = g.lr * warm;
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let gi = grads[i].as_f64();
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * gi;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * gi * gi;
                let theta = values[i].as_f64();
                let delta = adamw_delta(theta, st.m[i], st.v[i], lr, g.weight_decay, c.eps, bc1, bc2);
                values[i] = T::lit(theta - delta);
            }
        });
        Ok(())
    }
}
