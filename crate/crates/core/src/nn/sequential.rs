use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

use super::layers::{layer_backward, layer_forward, Layer, ParamDecl, Tape};
use super::params::{Grads, ModelParams};

/// A chain of layers applied in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
}

impl Sequential {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let s = Self {
            layers,
            input_shape,
        };
        s.output_shape()?;
        Ok(s)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for l in &self.layers {
            shape = l.output_shape(&shape)?;
        }
        Ok(shape)
    }

    pub fn params(&self) -> Vec<ParamDecl> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() == 0 || x.shape()[1..] != self.input_shape[..] {
            return Err(shape_err(format!(
                "network expects [B, {:?}], got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Forward pass recording a tape for [`Sequential::backward`].
    pub fn forward(
        &self,
        params: &ModelParams,
        x: Tensor,
        train: bool,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, Tape)> {
        self.check_input(&x)?;
        let mut tape = Tape::default();
        let mut h = x;
        for l in &self.layers {
            h = layer_forward(l, params, h, train, &mut rng, Some(&mut tape))?;
        }
        Ok((h, tape))
    }

    /// Forward pass without recording.
    pub fn infer(&self, params: &ModelParams, x: Tensor) -> Result<Tensor> {
        self.check_input(&x)?;
        let mut h = x;
        let mut none = None;
        for l in &self.layers {
            h = layer_forward(l, params, h, false, &mut none, None)?;
        }
        Ok(h)
    }

    /// Returns the gradient w.r.t. the input; parameter gradients are
    /// accumulated into `grads` when given.
    pub fn backward(
        &self,
        params: &ModelParams,
        tape: &Tape,
        grad_out: Tensor,
        mut grads: Option<&mut Grads>,
    ) -> Result<Tensor> {
        if tape.caches.len() != self.layers.len() {
            return Err(shape_err("tape length differs from layer count"));
        }
        let mut g = grad_out;
        for (l, c) in self.layers.iter().zip(&tape.caches).rev() {
            g = layer_backward(l, params, c, g, grads.as_deref_mut())?;
        }
        Ok(g)
    }
}
