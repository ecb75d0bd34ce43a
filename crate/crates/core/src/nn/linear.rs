use rand::Rng;

use super::normal_tensor;
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::params::{ParamGroup, ParamId, ParameterStore};
use crate::tensor::{Graph, Tensor, Var};

/// `y = x·Wᵀ + b`, optionally plus a low-rank adapter term.
#[derive(Clone, Debug)]
pub struct LinearMap {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub group: ParamGroup,
    pub lora: Option<LoraAdapter>,
}

impl LinearMap {
    /// Weight `out×in` drawn from N(0, 1/in), zero bias.
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = normal_tensor(rng, &[out_dim, in_dim], 1.0 / (in_dim as f64).sqrt());
        let weight = store.insert(format!("{name}.weight"), w, group)?;
        let bias = if bias {
            Some(store.insert(format!("{name}.bias"), Tensor::zeros(&[out_dim]), group)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            in_dim,
            out_dim,
            group,
            lora: None,
        })
    }

    /// `x` is `rows × in_dim`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        if g.dims(x).len() != 2 || g.dims(x)[1] != self.in_dim {
            return Err(Error::shape(
                "linear",
                g.dims(x),
                &[self.out_dim, self.in_dim],
            ));
        }
        let w = g.param(self.weight);
        let mut y = g.matmul_bt(x, w)?;
        if let Some(b) = self.bias {
            let b = g.param(b);
            y = g.add_row(y, b)?;
        }
        if let Some(adapter) = &self.lora {
            let delta = adapter.forward(g, x)?;
            y = g.add(y, delta)?;
        }
        Ok(y)
    }

    /// Plain forward on a tensor, outside any graph being differentiated.
    pub fn apply(&self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::with_store(store);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.weight];
        ids.extend(self.bias);
        if let Some(a) = &self.lora {
            ids.extend([a.a, a.b]);
        }
        ids
    }
}
