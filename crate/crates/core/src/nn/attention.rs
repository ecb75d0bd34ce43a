use rand::Rng;

use super::LinearMap;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParameterStore};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    SelfAttn,
    CausalSelf,
    Cross,
}

/// Multi-head scaled dot-product attention with query/key/value/output maps.
///
/// Queries come from inputs of width `q_width`, keys and values from inputs
/// of width `kv_width`; both are projected to `width`, split into `heads`
/// heads of `width / heads` channels, and the concatenated heads go through
/// the output map (`width → q_width`). The key map has no bias: a bias on
/// keys shifts every score in a row equally and softmax discards it.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub heads: usize,
    pub width: usize,
    pub mode: AttentionMode,
    pub q: LinearMap,
    pub k: LinearMap,
    pub v: LinearMap,
    pub o: LinearMap,
}

impl AttentionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        q_width: usize,
        kv_width: usize,
        width: usize,
        heads: usize,
        mode: AttentionMode,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: width {width} not divisible by {heads} heads"
            )));
        }
        if mode != AttentionMode::Cross && q_width != kv_width {
            return Err(Error::Config(format!(
                "{name}: self-attention needs equal widths"
            )));
        }
        Ok(Self {
            heads,
            width,
            mode,
            q: LinearMap::new(
                store,
                &format!("{name}.q"),
                q_width,
                width,
                true,
                group,
                rng,
            )?,
            k: LinearMap::new(
                store,
                &format!("{name}.k"),
                kv_width,
                width,
                false,
                group,
                rng,
            )?,
            v: LinearMap::new(
                store,
                &format!("{name}.v"),
                kv_width,
                width,
                true,
                group,
                rng,
            )?,
            o: LinearMap::new(
                store,
                &format!("{name}.o"),
                width,
                q_width,
                true,
                group,
                rng,
            )?,
        })
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    pub fn forward(&self, g: &mut Graph<'_>, q_in: Var, kv_in: Var) -> Result<Var> {
        self.forward_with_weights(g, q_in, kv_in)
            .map(|(out, _)| out)
    }

    /// Output plus the per-head attention weight matrices (`a×b` each).
    pub fn forward_with_weights(
        &self,
        g: &mut Graph<'_>,
        q_in: Var,
        kv_in: Var,
    ) -> Result<(Var, Vec<Var>)> {
        if self.mode != AttentionMode::Cross && q_in != kv_in {
            return Err(Error::Config(
                "self-attention requires q_in and kv_in to be the same input".into(),
            ));
        }
        let q = self.q.forward(g, q_in)?;
        let k = self.k.forward(g, kv_in)?;
        let v = self.v.forward(g, kv_in)?;
        let hw = self.head_width();
        let scale = 1.0 / (hw as f64).sqrt();

        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * hw, hw)?,
                    g.slice_cols(k, h * hw, hw)?,
                    g.slice_cols(v, h * hw, hw)?,
                )
            };
            let scores = g.matmul_bt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let p = match self.mode {
                AttentionMode::CausalSelf => g.causal_softmax_rows(scores)?,
                _ => g.softmax_rows(scores)?,
            };
            outs.push(g.matmul(p, vh)?);
            weights.push(p);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        Ok((self.o.forward(g, cat)?, weights))
    }

    pub fn linear_maps_mut(&mut self) -> Vec<&mut LinearMap> {
        vec![&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }
}
