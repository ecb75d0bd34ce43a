use rand::Rng;

use super::{normal_tensor, AttentionMode, LayerNorm, LinearMap, TransformerBlock, POS_STD};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParameterStore};
use crate::tensor::{Graph, Tensor, Var};

/// Causal transformer language model over a small word vocabulary. Its input
/// is a sequence of embeddings: a caller-supplied prefix (visual tokens and
/// instruction) followed by embedded target tokens.
#[derive(Clone, Debug)]
pub struct LanguageDecoder {
    pub vocab: usize,
    pub width: usize,
    pub max_context: usize,
    pub tok_embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNorm,
    pub head: LinearMap,
}

impl LanguageDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        vocab: usize,
        width: usize,
        max_context: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let group = ParamGroup::DecoderBase;
        let tok_embed = store.insert(
            "decoder.tok_embed",
            normal_tensor(rng, &[vocab, width], 1.0),
            group,
        )?;
        let pos = store.insert(
            "decoder.pos",
            normal_tensor(rng, &[max_context, width], POS_STD),
            group,
        )?;
        let blocks = (0..depth)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("decoder.block{i}"),
                    width,
                    heads,
                    mlp_ratio,
                    AttentionMode::CausalSelf,
                    group,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(store, "decoder.ln_f", width, group)?;
        let head = LinearMap::new(store, "decoder.head", width, vocab, true, group, rng)?;
        Ok(Self {
            vocab,
            width,
            max_context,
            tok_embed,
            pos,
            blocks,
            ln_f,
            head,
        })
    }

    /// Token embeddings without positions.
    pub fn embed_tokens(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<Var> {
        let table = g.param(self.tok_embed);
        g.gather(table, ids)
    }

    /// Runs the causal stack over an embedding sequence and returns logits
    /// (`L×V`). Row `j` depends only on rows `≤ j` of `x`.
    pub fn forward_embeddings(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        self.forward_embeddings_from(g, x, 0)
    }

    /// As [`forward_embeddings`](Self::forward_embeddings) but only returns
    /// logits for rows `first..`.
    pub fn forward_embeddings_from(&self, g: &mut Graph<'_>, x: Var, first: usize) -> Result<Var> {
        let len = g.dims(x)[0];
        if first >= len {
            return Err(Error::shape("forward_embeddings_from", &[len], &[first]));
        }
        if len > self.max_context {
            return Err(Error::Length {
                len,
                max: self.max_context,
            });
        }
        let pos_table = g.param(self.pos);
        let pos = g.slice_rows(pos_table, 0, len)?;
        let mut h = g.add(x, pos)?;
        for b in &self.blocks {
            h = b.forward(g, h)?;
        }
        if first > 0 {
            h = g.slice_rows(h, first, len - first)?;
        }
        let h = self.ln_f.forward(g, h)?;
        self.head.forward(g, h)
    }

    /// Teacher-forced logits for `prefix ‖ embed(target_ids)`, shape
    /// `(k + |target|) × V`. Row `k − 1 + j` predicts `target_ids[j]`.
    pub fn decode(&self, g: &mut Graph<'_>, prefix: Var, target_ids: &[usize]) -> Result<Var> {
        let k = g.dims(prefix)[0];
        let len = k + target_ids.len();
        if len > self.max_context {
            return Err(Error::Length {
                len,
                max: self.max_context,
            });
        }
        let x = if target_ids.is_empty() {
            prefix
        } else {
            let t = self.embed_tokens(g, target_ids)?;
            g.concat_rows(&[prefix, t])?
        };
        self.forward_embeddings(g, x)
    }

    /// Greedy decoding from a fixed prefix. Appends the argmax token (lowest
    /// id on ties) until `stop_id` is produced or `max_new` tokens exist.
    pub fn greedy_generate(
        &self,
        store: &ParameterStore,
        prefix: &Tensor,
        max_new: usize,
        stop_id: usize,
    ) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        while out.len() < max_new.max(1) {
            if prefix.rows() + out.len() >= self.max_context {
                break;
            }
            let mut g = Graph::with_store(store);
            let p = g.constant(prefix.clone());
            let logits = self.decode(&mut g, p, &out)?;
            let last = g.value(logits).row(prefix.rows() + out.len() - 1);
            let next = argmax(last);
            out.push(next);
            if next == stop_id {
                break;
            }
        }
        Ok(out)
    }

    /// Attention and MLP maps of every block, the LoRA targets.
    pub fn linear_maps_mut(&mut self) -> Vec<&mut LinearMap> {
        let mut maps = Vec::new();
        for b in &mut self.blocks {
            maps.extend(b.linear_maps_mut());
        }
        maps
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
