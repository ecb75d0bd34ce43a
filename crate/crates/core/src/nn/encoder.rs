use rand::Rng;

use super::{normal_tensor, AttentionMode, LayerNorm, LinearMap, TransformerBlock, POS_STD};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParameterStore};
use crate::tensor::{Graph, Tensor, Var};

/// Splits an `H×H×C` image into `(H/P)²` flattened `P·P·C` patches, row-major
/// over the patch grid.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let dims = image.dims();
    if dims.len() != 3 || dims[0] != dims[1] || patch == 0 || !dims[0].is_multiple_of(patch) {
        return Err(Error::shape("patchify", dims, &[patch]));
    }
    let (side, channels) = (dims[0], dims[2]);
    let grid = side / patch;
    let width = patch * patch * channels;
    let px = image.data();
    let mut out = Vec::with_capacity(grid * grid * width);
    for gy in 0..grid {
        for gx in 0..grid {
            for y in 0..patch {
                for x in 0..patch {
                    let base = ((gy * patch + y) * side + gx * patch + x) * channels;
                    out.extend_from_slice(&px[base..base + channels]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![grid * grid, width], out))
}

/// Patch-embedding vision transformer producing `F_v ∈ R^{n×d_v}`.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub side: usize,
    pub patch: usize,
    pub channels: usize,
    pub width: usize,
    pub embed: LinearMap,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNorm,
}

impl VisualEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        side: usize,
        patch: usize,
        channels: usize,
        width: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if patch == 0 || !side.is_multiple_of(patch) {
            return Err(Error::Config(format!(
                "image side {side} not divisible by patch {patch}"
            )));
        }
        let group = ParamGroup::EncoderBase;
        let n = (side / patch).pow(2);
        let embed = LinearMap::new(
            store,
            "encoder.embed",
            patch * patch * channels,
            width,
            true,
            group,
            rng,
        )?;
        let pos = store.insert(
            "encoder.pos",
            normal_tensor(rng, &[n, width], POS_STD),
            group,
        )?;
        let blocks = (0..depth)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("encoder.block{i}"),
                    width,
                    heads,
                    mlp_ratio,
                    AttentionMode::SelfAttn,
                    group,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(store, "encoder.ln_f", width, group)?;
        Ok(Self {
            side,
            patch,
            channels,
            width,
            embed,
            pos,
            blocks,
            ln_f,
        })
    }

    pub fn tokens(&self) -> usize {
        (self.side / self.patch).pow(2)
    }

    /// `embed(patch) + pos` for every patch.
    pub fn patch_embed(&self, g: &mut Graph<'_>, image: &Tensor) -> Result<Var> {
        let dims = image.dims();
        if dims.len() != 3
            || dims[0] != self.side
            || dims[1] != self.side
            || dims[2] != self.channels
        {
            return Err(Error::shape(
                "patch_embed",
                dims,
                &[self.side, self.side, self.channels],
            ));
        }
        let patches = g.constant(patchify(image, self.patch)?);
        let x = self.embed.forward(g, patches)?;
        let pos = g.param(self.pos);
        g.add(x, pos)
    }

    /// Full encoder: patch embedding, self-attention blocks, final norm.
    pub fn encode(&self, g: &mut Graph<'_>, image: &Tensor) -> Result<Var> {
        let mut x = self.patch_embed(g, image)?;
        for b in &self.blocks {
            x = b.forward(g, x)?;
        }
        self.ln_f.forward(g, x)
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
