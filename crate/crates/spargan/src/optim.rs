//! Named parameter sets and the two optimizers used for training: plain
//! heavy-ball SGD and bias-corrected Adam.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, NodeId};
use crate::tensor::Tensor;

/// One parameter tensor with its optimizer slots. Slot shapes always equal
/// the parameter shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    /// SGD velocity buffer.
    pub momentum: Tensor,
    /// Adam first-moment buffer.
    pub adam_m: Tensor,
    /// Adam second-moment buffer.
    pub adam_v: Tensor,
}

impl ParamEntry {
    fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        ParamEntry {
            value,
            momentum: Tensor::zeros(&shape),
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
        }
    }
}

/// Named parameter tensors plus per-parameter optimizer slots and a step
/// counter that advances by exactly one per optimizer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, ParamEntry>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.entries.insert(name.to_string(), ParamEntry::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(e) => {
                if e.value.shape() != value.shape() {
                    return Err(Error::GradShapeMismatch {
                        name: name.to_string(),
                        param: e.value.shape().to_vec(),
                        grad: value.shape().to_vec(),
                    });
                }
                e.value = value;
                Ok(())
            }
            None => Err(Error::UnknownNode {
                name: name.to_string(),
            }),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Deterministic (sorted-name) iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }

    /// Register every parameter on a graph, prefixed, either as trainable
    /// `Param` nodes or frozen `Input`-like constants.
    pub fn register(&self, graph: &mut Graph, prefix: &str, trainable: bool) -> BTreeMap<String, NodeId> {
        let mut ids = BTreeMap::new();
        for (name, entry) in &self.entries {
            let full = format!("{prefix}{name}");
            let id = if trainable {
                graph.param(&full, entry.value.clone())
            } else {
                graph.constant(entry.value.clone())
            };
            ids.insert(name.clone(), id);
        }
        ids
    }

    /// Restore optimizer slots (used when loading checkpoints).
    pub fn set_slots(
        &mut self,
        name: &str,
        momentum: Tensor,
        adam_m: Tensor,
        adam_v: Tensor,
    ) -> Result<()> {
        let entry = self.entries.get_mut(name).ok_or_else(|| Error::UnknownNode {
            name: name.to_string(),
        })?;
        for slot in [&momentum, &adam_m, &adam_v] {
            if slot.shape() != entry.value.shape() {
                return Err(Error::GradShapeMismatch {
                    name: name.to_string(),
                    param: entry.value.shape().to_vec(),
                    grad: slot.shape().to_vec(),
                });
            }
        }
        entry.momentum = momentum;
        entry.adam_m = adam_m;
        entry.adam_v = adam_v;
        Ok(())
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// True when every parameter tensor is bit-identical to `other`'s.
    pub fn values_bit_equal(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().all(|(name, e)| {
                other
                    .entries
                    .get(name)
                    .is_some_and(|o| o.value.values() == e.value.values())
            })
    }
}

fn grad_for<'a>(set: &ParamSet, grads: &'a Gradients, name: &str) -> Result<&'a Tensor> {
    let grad = grads.get(name).ok_or_else(|| Error::MissingGradient {
        name: name.to_string(),
    })?;
    let param = &set.entries[name].value;
    if grad.shape() != param.shape() {
        return Err(Error::GradShapeMismatch {
            name: name.to_string(),
            param: param.shape().to_vec(),
            grad: grad.shape().to_vec(),
        });
    }
    Ok(grad)
}

/// Heavy-ball SGD: `v <- momentum * v + g; theta <- theta - rate * v`.
pub fn sgd_momentum_step(
    set: &mut ParamSet,
    grads: &Gradients,
    rate: f64,
    momentum: f64,
) -> Result<()> {
    if rate <= 0.0 {
        return Err(Error::InvalidConfig {
            field: "rate".into(),
            reason: format!("must be positive, got {rate}"),
        });
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidConfig {
            field: "momentum".into(),
            reason: format!("must lie in [0, 1), got {momentum}"),
        });
    }
    let names: Vec<String> = set.entries.keys().cloned().collect();
    for name in &names {
        let grad = grad_for(set, grads, name)?.clone();
        let entry = set.entries.get_mut(name).unwrap();
        for ((v, g), p) in entry
            .momentum
            .values_mut()
            .iter_mut()
            .zip(grad.values())
            .zip(entry.value.values_mut())
        {
            *v = momentum * *v + g;
            *p -= rate * *v;
        }
    }
    set.step += 1;
    Ok(())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam with the standard defaults.
pub fn adam_step(set: &mut ParamSet, grads: &Gradients, rate: f64) -> Result<()> {
    adam_step_with(set, grads, rate, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
}

pub fn adam_step_with(
    set: &mut ParamSet,
    grads: &Gradients,
    rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if rate <= 0.0 {
        return Err(Error::InvalidConfig {
            field: "rate".into(),
            reason: format!("must be positive, got {rate}"),
        });
    }
    set.step += 1;
    let t = set.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let names: Vec<String> = set.entries.keys().cloned().collect();
    for name in &names {
        let grad = grad_for(set, grads, name)?.clone();
        let entry = set.entries.get_mut(name).unwrap();
        let m = entry.adam_m.values_mut();
        let v = entry.adam_v.values_mut();
        let p = entry.value.values_mut();
        for (i, &g) in grad.values().iter().enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= rate * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> ParamSet {
        let mut set = ParamSet::new();
        set.insert("theta", Tensor::from_values(&[1], vec![value]).unwrap());
        set
    }

    fn grad_of(value: f64) -> Gradients {
        let mut g = Gradients::default();
        g.insert("theta".into(), Tensor::from_values(&[1], vec![value]).unwrap());
        g
    }

    #[test]
    fn sgd_zero_gradient_leaves_params_unchanged() {
        let mut set = single_param(1.5);
        sgd_momentum_step(&mut set, &grad_of(0.0), 1e-3, 0.5).unwrap();
        assert_eq!(set.value("theta").unwrap().values(), &[1.5]);
        assert_eq!(set.step(), 1);
    }

    #[test]
    fn sgd_matches_hand_evaluated_recurrence() {
        // theta=1, g=2, v0=0, rate=1e-3, momentum=0.5 -> v1=2, theta'=0.998
        let mut set = single_param(1.0);
        sgd_momentum_step(&mut set, &grad_of(2.0), 1e-3, 0.5).unwrap();
        assert_eq!(set.get("theta").unwrap().momentum.values(), &[2.0]);
        assert!((set.value("theta").unwrap().values()[0] - 0.998).abs() < 1e-12);
    }

    #[test]
    fn sgd_velocity_after_two_unit_gradients() {
        let mut set = single_param(0.0);
        sgd_momentum_step(&mut set, &grad_of(1.0), 1e-3, 0.5).unwrap();
        sgd_momentum_step(&mut set, &grad_of(1.0), 1e-3, 0.5).unwrap();
        assert_eq!(set.get("theta").unwrap().momentum.values(), &[1.5]);
        assert_eq!(set.step(), 2);
    }

    #[test]
    fn adam_zero_gradient_with_fresh_buffers_is_identity() {
        let mut set = single_param(0.75);
        adam_step(&mut set, &grad_of(0.0), 0.1).unwrap();
        assert_eq!(set.value("theta").unwrap().values(), &[0.75]);
        assert_eq!(set.step(), 1);
    }

    #[test]
    fn adam_first_step_is_nearly_rate_times_sign() {
        let mut set = single_param(0.0);
        adam_step(&mut set, &grad_of(1.0), 0.1).unwrap();
        let theta = set.value("theta").unwrap().values()[0];
        // bias correction makes the first step -rate/(1+eps')
        assert!((theta + 0.1).abs() < 1e-8, "theta={theta}");
    }

    #[test]
    fn adam_step_opposes_gradient_sign_coordinatewise() {
        let mut set = ParamSet::new();
        set.insert(
            "theta",
            Tensor::from_values(&[4], vec![0.0, 0.0, 0.0, 0.0]).unwrap(),
        );
        let mut grads = Gradients::default();
        grads.insert(
            "theta".into(),
            Tensor::from_values(&[4], vec![3.0, -0.5, 0.0, 1e-3]).unwrap(),
        );
        adam_step(&mut set, &grads, 0.05).unwrap();
        let theta = set.value("theta").unwrap().values();
        assert!(theta[0] < 0.0);
        assert!(theta[1] > 0.0);
        assert_eq!(theta[2], 0.0);
        assert!(theta[3] < 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut set = single_param(0.0);
        let mut grads = Gradients::default();
        grads.insert("theta".into(), Tensor::zeros(&[2]));
        assert!(matches!(
            sgd_momentum_step(&mut set, &grads, 1e-3, 0.5),
            Err(Error::GradShapeMismatch { .. })
        ));
        assert!(matches!(
            adam_step(&mut set, &grads, 1e-3),
            Err(Error::MissingGradient { .. }) | Err(Error::GradShapeMismatch { .. })
        ));
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        let mut set = single_param(0.0);
        assert!(sgd_momentum_step(&mut set, &grad_of(1.0), 0.0, 0.5).is_err());
        assert!(sgd_momentum_step(&mut set, &grad_of(1.0), 1e-3, 1.0).is_err());
        assert!(adam_step(&mut set, &grad_of(1.0), -1.0).is_err());
    }
}
