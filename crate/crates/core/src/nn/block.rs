use rand::Rng;

use super::{AttentionBlock, AttentionMode, LinearMap};
use crate::error::Result;
use crate::params::{ParamGroup, ParamId, ParameterStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        width: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(
                format!("{name}.gamma"),
                Tensor::filled(&[width], 1.0),
                group,
            )?,
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[width]), group)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, ga, be)
    }
}

/// Two-layer GELU MLP, `width → ratio·width → width`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub up: LinearMap,
    pub down: LinearMap,
}

impl Mlp {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        width: usize,
        ratio: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            up: LinearMap::new(
                store,
                &format!("{name}.up"),
                width,
                ratio * width,
                true,
                group,
                rng,
            )?,
            down: LinearMap::new(
                store,
                &format!("{name}.down"),
                ratio * width,
                width,
                true,
                group,
                rng,
            )?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, h)
    }
}

/// Pre-norm residual block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: AttentionBlock,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        mode: AttentionMode,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width, group)?,
            attn: AttentionBlock::new(
                store,
                &format!("{name}.attn"),
                width,
                width,
                width,
                heads,
                mode,
                group,
                rng,
            )?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width, group)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), width, mlp_ratio, group, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, h)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }

    pub fn linear_maps_mut(&mut self) -> Vec<&mut LinearMap> {
        let mut maps = self.attn.linear_maps_mut();
        maps.push(&mut self.mlp.up);
        maps.push(&mut self.mlp.down);
        maps
    }
}
