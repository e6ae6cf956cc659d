use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

use super::layers::{BnUpdate, ParamDecl, ParamInit, BN_MOMENTUM};

pub const PARAMS_VERSION: u32 = 1;

/// Named parameter tensors in deterministic (sorted) order.
///
/// Names ending in `running_mean` / `running_var` hold batch-norm statistics
/// and are not trained.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    pub version: u32,
    tensors: BTreeMap<String, Tensor>,
}

pub fn is_trainable(name: &str) -> bool {
    !(name.ends_with(".running_mean") || name.ends_with(".running_var"))
}

impl ModelParams {
    pub fn new() -> Self {
        Self {
            version: PARAMS_VERSION,
            tensors: BTreeMap::new(),
        }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            version: PARAMS_VERSION,
            tensors,
        }
    }

    /// Fan-in scaled uniform initialisation, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`
    /// for weights; zero biases; unit batch-norm scale. Each tensor draws from
    /// its own stream keyed by `(seed, name)`.
    pub fn init(decls: &[ParamDecl], seed: u64) -> Self {
        let mut p = Self::new();
        for d in decls {
            let t = match d.init {
                ParamInit::Zeros => Tensor::zeros(&d.shape),
                ParamInit::Ones => Tensor::full(&d.shape, 1.0),
                ParamInit::FanInUniform => {
                    let bound = (6.0 / d.fan_in as f64).sqrt();
                    let mut rng = rng_for(seed, &format!("init/{}", d.name));
                    Tensor::from_fn(&d.shape, |_| rng.random_range(-bound..bound))
                }
            };
            p.tensors.insert(d.name.clone(), t);
        }
        p
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| shape_err(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| shape_err(format!("missing parameter {name}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn map(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| is_trainable(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Check every declared tensor exists with the declared shape.
    pub fn check_against(&self, decls: &[ParamDecl]) -> Result<()> {
        for d in decls {
            let t = self.get(&d.name)?;
            if t.shape() != d.shape.as_slice() {
                return Err(shape_err(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    d.name,
                    t.shape(),
                    d.shape
                )));
            }
        }
        if self.tensors.len() != decls.len() {
            return Err(shape_err(format!(
                "{} parameters present, {} declared",
                self.tensors.len(),
                decls.len()
            )));
        }
        Ok(())
    }

    /// Exponential moving average of batch-norm statistics.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) -> Result<()> {
        for u in updates {
            let rm = self.get_mut(&format!("{}.running_mean", u.name))?;
            for (r, m) in rm.data_mut().iter_mut().zip(&u.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self.get_mut(&format!("{}.running_var", u.name))?;
            for (r, v) in rv.data_mut().iter_mut().zip(&u.var_unbiased) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
        Ok(())
    }

    /// Same names with every value set to zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            version: self.version,
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads {
    tensors: BTreeMap<String, Tensor>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, name: &str, g: Tensor) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(t) => t.add_assign(&g),
            None => {
                self.tensors.insert(name.to_string(), g);
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.values_mut().for_each(|t| t.scale(s));
    }

    pub fn merge(&mut self, other: Grads) -> Result<()> {
        for (n, t) in other.tensors {
            self.accumulate(&n, t)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }
}
