use super::ModelError;
use crate::graph::{fused_optimizer_step, AdamParams};
use crate::tensor::Tensor;

pub trait Optimizer {
    /// Apply one update. `grads` line up with `params`.
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), ModelError>;
}

fn check(params: &[Tensor], grads: &[Tensor]) -> Result<(), ModelError> {
    if params.len() != grads.len() {
        return Err(ModelError::InvalidConfig(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(ModelError::InvalidConfig(format!("gradient {i} has the wrong shape")));
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteGradient(i));
        }
    }
    Ok(())
}

/// Plain stochastic gradient descent.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), ModelError> {
        check(params, grads)?;
        for (p, g) in params.iter_mut().zip(grads) {
            let lr = self.lr;
            p.update(|w| {
                for (wi, gi) in w.iter_mut().zip(g.data()) {
                    *wi -= lr * gi;
                }
            });
        }
        Ok(())
    }
}

/// Trust-ratio bounds.
pub const LAMB_MAX_RATIO: f32 = 10.0;

/// Layer-wise adaptive moments: each tensor's Adam direction is rescaled by
/// the ratio of the weight norm to the update norm.
#[derive(Debug, Clone)]
pub struct Lamb {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Per-parameter weight-decay switch; `None` decays everything.
    pub decay_mask: Option<Vec<bool>>,
    /// Run the moment update as one fused kernel per tensor.
    pub fused: bool,
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Lamb {
    pub fn new(lr: f32) -> Lamb {
        Lamb {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.0,
            decay_mask: None,
            fused: false,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    fn direction(&self, p: &AdamParams, w: &[f32], g: &[f32], m: &mut [f32], v: &mut [f32]) -> Vec<f32> {
        if self.fused {
            let k = fused_optimizer_step(p);
            let mut out = k.eval(&[w, g, m, v], w.len()).expect("arity matches");
            let u = out.pop().expect("u");
            v.copy_from_slice(&out.pop().expect("v"));
            m.copy_from_slice(&out.pop().expect("m"));
            return u;
        }
        let t = p.step.max(1) as i32;
        let c1 = 1.0 / (1.0 - p.beta1.powi(t));
        let c2 = 1.0 / (1.0 - p.beta2.powi(t));
        let mut u = vec![0f32; w.len()];
        for i in 0..w.len() {
            m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g[i];
            v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * (g[i] * g[i]);
            let mh = c1 * m[i];
            let vh = c2 * v[i];
            u[i] = mh / (vh.sqrt() + p.eps) + p.weight_decay * w[i];
        }
        u
    }
}

fn norm(x: &[f32]) -> f32 {
    x.iter().map(|v| v * v).sum::<f32>().sqrt()
}

/// `‖w‖ / ‖u‖` clipped to `[0, LAMB_MAX_RATIO]`, or 1 when either norm is zero.
pub fn trust_ratio(w_norm: f32, u_norm: f32) -> f32 {
    if w_norm == 0.0 || u_norm == 0.0 {
        1.0
    } else {
        (w_norm / u_norm).clamp(0.0, LAMB_MAX_RATIO)
    }
}

impl Optimizer for Lamb {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), ModelError> {
        check(params, grads)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = self.decay_mask.as_ref().is_none_or(|m| m[i]);
            let hp = AdamParams {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: if decay { self.weight_decay } else { 0.0 },
                step: self.step,
            };
            let mut m = std::mem::take(&mut self.m[i]);
            let mut v = std::mem::take(&mut self.v[i]);
            let u = self.direction(&hp, p.data(), g.data(), &mut m, &mut v);
            self.m[i] = m;
            self.v[i] = v;
            let r = trust_ratio(norm(p.data()), norm(&u));
            let scale = self.lr * r;
            p.update(|w| {
                for (wi, ui) in w.iter_mut().zip(&u) {
                    *wi -= scale * ui;
                }
            });
        }
        Ok(())
    }
}
