//! Sharpness-aware minimization around a base optimizer.
//!
//! A step evaluates the gradient at `θ`, moves to `θ + ε` along it, evaluates
//! the gradient again there, and hands that second gradient to the base
//! optimizer which updates the original `θ`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerturbationRule {
    /// `ε = γ·sign(g)`.
    Sign,
    /// `ε = γ·g / ‖g‖₂` over all parameters jointly.
    L2Normalized,
}

impl fmt::Display for PerturbationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerturbationRule::Sign => "sign",
            PerturbationRule::L2Normalized => "l2_normalized",
        })
    }
}

impl FromStr for PerturbationRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sign" => Ok(PerturbationRule::Sign),
            "l2_normalized" | "l2" => Ok(PerturbationRule::L2Normalized),
            _ => Err(format!("rule must be sign or l2_normalized, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    pub gamma: f64,
    pub rule: PerturbationRule,
    pub enabled: bool,
}

impl Default for SamConfig {
    fn default() -> Self {
        Self {
            gamma: 0.07,
            rule: PerturbationRule::Sign,
            enabled: true,
        }
    }
}

pub fn compute_perturbation(grads: &ParamGrads, gamma: f64, rule: PerturbationRule) -> Result<ParamGrads> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::bad_value("sam.gamma", "must be finite and non-negative"));
    }
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    let out = match rule {
        PerturbationRule::Sign => grads
            .iter()
            .map(|(k, g)| {
                let e = g
                    .iter()
                    .map(|&v| {
                        if v > 0.0 {
                            gamma
                        } else if v < 0.0 {
                            -gamma
                        } else {
                            0.0
                        }
                    })
                    .collect();
                (k.clone(), e)
            })
            .collect(),
        PerturbationRule::L2Normalized => {
            let norm = grads.values().flatten().map(|v| v * v).sum::<f64>().sqrt();
            let s = if norm > 0.0 { gamma / norm } else { 0.0 };
            grads
                .iter()
                .map(|(k, g)| (k.clone(), g.iter().map(|v| v * s).collect()))
                .collect()
        }
    };
    Ok(out)
}

/// Updates parameters in place from a gradient. Only trainable parameters
/// present in `grads` change.
pub trait Optimizer {
    fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<()>;
}

fn check_shapes(params: &ParamStore, grads: &ParamGrads) -> Result<()> {
    for (k, g) in grads {
        match params.get(k) {
            Some(p) if p.data.len() == g.len() => {}
            Some(p) => {
                return Err(Error::Shape(format!(
                    "gradient of `{k}` has {} entries, parameter has {}",
                    g.len(),
                    p.data.len()
                )))
            }
            None => return Err(Error::Shape(format!("gradient for unknown parameter `{k}`"))),
        }
    }
    Ok(())
}

/// Plain gradient descent, `θ ← θ − lr·g`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        check_shapes(params, grads)?;
        for (k, g) in grads {
            let p = params.get_mut(k).expect("checked");
            if p.trainable {
                p.data.iter_mut().zip(g).for_each(|(w, d)| *w -= self.lr * d);
            }
        }
        Ok(())
    }
}

/// Adam with bias correction. Moments are created lazily for parameters the
/// first time they receive a gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState::default(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        check_shapes(params, grads)?;
        let st = &mut self.state;
        st.step += 1;
        let t = st.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, g) in grads {
            let p = params.get_mut(k).expect("checked");
            if !p.trainable {
                continue;
            }
            let m = st.m.entry(k.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = st.v.entry(k.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Outcome of one [`sam_step`]. `aux` carries whatever the objective returns
/// alongside its loss at the unperturbed point.
#[derive(Clone, Debug)]
pub struct SamOutcome<A> {
    pub loss: f64,
    pub perturbed_loss: Option<f64>,
    pub aux: A,
    pub evaluations: usize,
}

/// One sharpness-aware step. `objective` returns the loss, the gradient of
/// every parameter it touched, and auxiliary data. The second evaluation
/// sees a perturbed copy; `params` changes only through the final optimizer
/// update, so any error leaves it untouched.
pub fn sam_step<A>(
    params: &mut ParamStore,
    mut objective: impl FnMut(&ParamStore) -> Result<(f64, ParamGrads, A)>,
    optimizer: &mut dyn Optimizer,
    config: &SamConfig,
) -> Result<SamOutcome<A>> {
    let (loss, grads, aux) = objective(params)?;
    if !config.enabled {
        optimizer.step(params, &grads)?;
        return Ok(SamOutcome {
            loss,
            perturbed_loss: None,
            aux,
            evaluations: 1,
        });
    }
    let eps = compute_perturbation(&grads, config.gamma, config.rule)?;
    let mut perturbed = params.clone();
    for (k, e) in &eps {
        let p = perturbed.get_mut(k).expect("gradient names come from params");
        if p.trainable {
            p.data.iter_mut().zip(e).for_each(|(w, d)| *w += d);
        }
    }
    let (loss2, grads2, _) = objective(&perturbed)?;
    drop(perturbed);
    optimizer.step(params, &grads2)?;
    Ok(SamOutcome {
        loss,
        perturbed_loss: Some(loss2),
        aux,
        evaluations: 2,
    })
}
