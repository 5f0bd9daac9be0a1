//! Named parameter storage with gradient buffers and the two update rules.
//!
//! Parameters are registered once, in a fixed order, and updated in place.
//! Each parameter keeps its own moment buffers and step counter so that
//! groups stepped at different cadences still get correct bias correction.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{DllError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerMode {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerMode {
    type Err = DllError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerMode::Sgd),
            "adam" => Ok(OptimizerMode::Adam),
            other => Err(DllError::InvalidConfig(format!(
                "unknown optimizer '{other}' (expected sgd or adam)"
            ))),
        }
    }
}

impl std::fmt::Display for OptimizerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerMode::Sgd => "sgd",
            OptimizerMode::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub steps: u64,
}

/// Ties tape leaves back to the parameters they were cloned from.
#[derive(Default)]
pub struct Bindings {
    pairs: Vec<(Var, usize)>,
}

impl Bindings {
    pub fn push(&mut self, var: Var, param: usize) {
        self.pairs.push((var, param));
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(DllError::InvalidArgument {
                op: "ParameterSet::add",
                detail: format!("duplicate parameter name '{name}'"),
            });
        }
        let idx = self.params.len();
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            steps: 0,
        });
        self.index.insert(name.to_string(), idx);
        Ok(idx)
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight plus zero bias, the
    /// layout every layer in this crate uses.
    pub fn add_affine<R: Rng>(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut w = Tensor::zeros(&[fan_in, fan_out]);
        for v in w.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        self.add(&format!("{prefix}.w"), w)?;
        self.add(&format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        match self.index.get(name) {
            Some(&i) => Some(&mut self.params[i]),
            None => None,
        }
    }

    pub fn idx(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn param(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Insert every parameter value into `tape` as a leaf and record the
    /// leaf-to-parameter correspondence.
    pub fn insert_into_tape(&self, tape: &mut Tape, bindings: &mut Bindings) -> Vec<Var> {
        let mut vars = Vec::with_capacity(self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            let var = tape.leaf(p.value.clone());
            bindings.push(var, i);
            vars.push(var);
        }
        vars
    }

    /// Add the tape gradients of all bound leaves into the parameter gradient
    /// buffers. Call after `tape.backward`.
    pub fn accumulate_grads(&mut self, tape: &Tape, bindings: &Bindings) {
        for &(var, idx) in &bindings.pairs {
            self.params[idx].grad.add_assign(tape.grad(var));
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    /// Apply one optimizer step to every parameter whose name starts with one
    /// of `prefixes` (empty prefix list means all). Returns the names stepped,
    /// in registration order. Errors on a non-finite gradient entry.
    pub fn step_groups(
        &mut self,
        lr: f64,
        mode: OptimizerMode,
        prefixes: &[&str],
    ) -> Result<Vec<String>> {
        let mut touched = Vec::new();
        for p in &mut self.params {
            if !prefixes.is_empty() && !prefixes.iter().any(|pre| p.name.starts_with(pre)) {
                continue;
            }
            if !p.grad.all_finite() {
                return Err(DllError::NonFiniteGradient {
                    name: p.name.clone(),
                });
            }
            match mode {
                OptimizerMode::Sgd => {
                    p.value.add_scaled_assign(&p.grad, -lr);
                }
                OptimizerMode::Adam => {
                    p.steps += 1;
                    let t = p.steps as i32;
                    let bc1 = 1.0 - ADAM_BETA1.powi(t);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t);
                    let (value, grad, m, v) =
                        (p.value.data_mut(), p.grad.data(), p.m.data_mut(), p.v.data_mut());
                    for i in 0..grad.len() {
                        let g = grad[i];
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        value[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
            touched.push(p.name.clone());
        }
        Ok(touched)
    }

    pub fn step_all(&mut self, lr: f64, mode: OptimizerMode) -> Result<Vec<String>> {
        self.step_groups(lr, mode, &[])
    }

    /// Concatenated copy of all values, in registration order. Used by tests
    /// to detect any mutation.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_matches_hand_arithmetic() {
        let mut set = ParameterSet::new();
        set.add("w", Tensor::scalar(1.0)).unwrap();
        set.get_mut("w").unwrap().grad = Tensor::scalar(2.0);
        set.step_all(0.1, OptimizerMode::Sgd).unwrap();
        assert!((set.get("w").unwrap().value.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        for mode in [OptimizerMode::Sgd, OptimizerMode::Adam] {
            let mut set = ParameterSet::new();
            set.add("w", Tensor::scalar(3.5)).unwrap();
            set.step_all(0.5, mode).unwrap();
            assert_eq!(set.get("w").unwrap().value.item(), 3.5);
        }
    }

    #[test]
    fn adam_first_step_is_roughly_lr() {
        // With g = 1 the bias-corrected first step is lr/(1 + eps').
        let mut set = ParameterSet::new();
        set.add("w", Tensor::scalar(0.0)).unwrap();
        set.get_mut("w").unwrap().grad = Tensor::scalar(1.0);
        set.step_all(1e-3, OptimizerMode::Adam).unwrap();
        let moved = -set.get("w").unwrap().value.item();
        assert!((moved - 1e-3).abs() < 1e-9, "moved {moved}");
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut set = ParameterSet::new();
        set.add("enc.w", Tensor::scalar(0.0)).unwrap();
        set.add("bad.w", Tensor::scalar(0.0)).unwrap();
        set.get_mut("bad.w").unwrap().grad = Tensor::scalar(f64::NAN);
        let err = set.step_all(0.1, OptimizerMode::Sgd).unwrap_err();
        assert!(err.to_string().contains("bad.w"));
    }

    #[test]
    fn group_filter_steps_only_matching_names() {
        let mut set = ParameterSet::new();
        set.add("a.w", Tensor::scalar(1.0)).unwrap();
        set.add("b.w", Tensor::scalar(1.0)).unwrap();
        set.get_mut("a.w").unwrap().grad = Tensor::scalar(1.0);
        set.get_mut("b.w").unwrap().grad = Tensor::scalar(1.0);
        let touched = set.step_groups(0.5, OptimizerMode::Sgd, &["a."]).unwrap();
        assert_eq!(touched, vec!["a.w".to_string()]);
        assert_eq!(set.get("a.w").unwrap().value.item(), 0.5);
        assert_eq!(set.get("b.w").unwrap().value.item(), 1.0);
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut set = ParameterSet::new();
        set.add("w", Tensor::scalar(0.0)).unwrap();
        assert!(set.add("w", Tensor::scalar(0.0)).is_err());
    }
}
