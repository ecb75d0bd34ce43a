//! Instruction-adaptive visual prompt.
//!
//! The V-T generator mixes learnable queries with the projected instruction
//! embedding (self-attention over `[Q ‖ T]`), lets the query rows read the
//! projected visual tokens (cross-attention) and returns the query rows,
//! `F_vt ∈ R^{m×d}`. The T-V prompter cross-attends from the visual tokens to
//! `F_vt` with a single head and fuses the result back through a sigmoid gate:
//!
//! ```text
//! F̃_tv = CA(F_v, f(F_vt), f(F_vt))
//! σ     = sigmoid(gate([F̃_tv ‖ F_v]))
//! F_tv  = (1 − σ)⊙F̃_tv + σ⊙F_v
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normal_tensor, AttentionBlock, AttentionMode, LayerNorm, LinearMap, Mlp, POS_STD};
use crate::params::{ParamGroup, ParamId, ParameterStore};
use crate::tensor::{Graph, Tensor, Var};

/// Gate bias at construction; σ ≈ 0.88, so the module starts close to a
/// passthrough of `F_v`.
pub const GATE_BIAS_INIT: f64 = 2.0;

/// Token-norm ranges at or below this are treated as a constant map.
pub const PROMPT_MAP_FLAT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorVariant {
    /// Learnable queries; output is the query rows.
    #[default]
    Qformer,
    /// No queries; the instruction rows themselves read the image and are
    /// returned.
    Bert,
}

#[derive(Clone, Debug)]
pub struct PromptDims {
    pub queries: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub text_width: usize,
    pub visual_width: usize,
    pub max_instruction: usize,
    pub variant: GeneratorVariant,
}

#[derive(Clone, Debug)]
pub struct GeneratorBlock {
    pub ln1: LayerNorm,
    pub self_attn: AttentionBlock,
    pub ln_c: LayerNorm,
    pub cross: AttentionBlock,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl GeneratorBlock {
    fn new(
        store: &mut ParameterStore,
        name: &str,
        dims: &PromptDims,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (d, h, group) = (dims.width, dims.heads, ParamGroup::PromptModule);
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, group)?,
            self_attn: AttentionBlock::new(
                store,
                &format!("{name}.self"),
                d,
                d,
                d,
                h,
                AttentionMode::SelfAttn,
                group,
                rng,
            )?,
            ln_c: LayerNorm::new(store, &format!("{name}.ln_c"), d, group)?,
            cross: AttentionBlock::new(
                store,
                &format!("{name}.cross"),
                d,
                d,
                d,
                h,
                AttentionMode::Cross,
                group,
                rng,
            )?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, group)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, dims.mlp_ratio, group, rng)?,
        })
    }

    /// `x` holds `readers` rows that cross-attend to `visual`, followed by
    /// rows that only take part in self-attention.
    fn forward(&self, g: &mut Graph<'_>, x: Var, readers: usize, visual: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.self_attn.forward(g, h, h)?;
        let x = g.add(x, a)?;

        let rows = g.dims(x)[0];
        let q = if readers == rows {
            x
        } else {
            g.slice_rows(x, 0, readers)?
        };
        let hq = self.ln_c.forward(g, q)?;
        let c = self.cross.forward(g, hq, visual)?;
        let q = g.add(q, c)?;
        let x = if readers == rows {
            q
        } else {
            let rest = g.slice_rows(x, readers, rows - readers)?;
            g.concat_rows(&[q, rest])?
        };

        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct VtGenerator {
    pub dims: PromptDims,
    pub queries: Option<ParamId>,
    pub proj_t: LinearMap,
    pub proj_v: LinearMap,
    pub pos: ParamId,
    pub blocks: Vec<GeneratorBlock>,
}

impl VtGenerator {
    pub fn new(store: &mut ParameterStore, dims: &PromptDims, rng: &mut impl Rng) -> Result<Self> {
        let group = ParamGroup::PromptModule;
        let queries = match dims.variant {
            GeneratorVariant::Qformer => Some(store.insert(
                "prompt.gen.queries",
                normal_tensor(rng, &[dims.queries, dims.width], 1.0),
                group,
            )?),
            GeneratorVariant::Bert => None,
        };
        let proj_t = LinearMap::new(
            store,
            "prompt.gen.proj_t",
            dims.text_width,
            dims.width,
            true,
            group,
            rng,
        )?;
        let proj_v = LinearMap::new(
            store,
            "prompt.gen.proj_v",
            dims.visual_width,
            dims.width,
            true,
            group,
            rng,
        )?;
        let pos = store.insert(
            "prompt.gen.pos",
            normal_tensor(rng, &[dims.max_instruction, dims.width], POS_STD),
            group,
        )?;
        let blocks = (0..dims.depth)
            .map(|i| GeneratorBlock::new(store, &format!("prompt.gen.block{i}"), dims, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            dims: dims.clone(),
            queries,
            proj_t,
            proj_v,
            pos,
            blocks,
        })
    }

    /// `F_vt = G(Q, F_t, f(F_v))`. `f_t` is `m_t×d_t`, `f_v` is `n×d_v`.
    pub fn forward(&self, g: &mut Graph<'_>, f_t: Var, f_v: Var) -> Result<Var> {
        let mt = g.dims(f_t)[0];
        if g.dims(f_t)[1] != self.dims.text_width || g.dims(f_v)[1] != self.dims.visual_width {
            return Err(Error::shape("vt_generate", g.dims(f_t), g.dims(f_v)));
        }
        if mt > self.dims.max_instruction {
            return Err(Error::Length {
                len: mt,
                max: self.dims.max_instruction,
            });
        }
        let t = self.proj_t.forward(g, f_t)?;
        let pos_table = g.param(self.pos);
        let pos = g.slice_rows(pos_table, 0, mt)?;
        let t = g.add(t, pos)?;

        let (mut x, readers) = match self.queries {
            Some(q) => {
                let q = g.param(q);
                (g.concat_rows(&[q, t])?, self.dims.queries)
            }
            None => (t, mt),
        };
        if self.blocks.is_empty() {
            return if readers == g.dims(x)[0] {
                Ok(x)
            } else {
                g.slice_rows(x, 0, readers)
            };
        }
        let visual = self.proj_v.forward(g, f_v)?;
        for b in &self.blocks {
            x = b.forward(g, x, readers, visual)?;
        }
        if readers == g.dims(x)[0] {
            Ok(x)
        } else {
            g.slice_rows(x, 0, readers)
        }
    }
}

#[derive(Clone, Debug)]
pub struct TvPrompter {
    /// Single-head cross-attention; its key/value maps (`d → d_v`) play the
    /// role of the projection `f`.
    pub cross: AttentionBlock,
    pub gate: LinearMap,
}

impl TvPrompter {
    pub fn new(store: &mut ParameterStore, dims: &PromptDims, rng: &mut impl Rng) -> Result<Self> {
        let group = ParamGroup::PromptModule;
        let dv = dims.visual_width;
        let cross = AttentionBlock::new(
            store,
            "prompt.tv",
            dv,
            dims.width,
            dv,
            1,
            AttentionMode::Cross,
            group,
            rng,
        )?;
        let gate = LinearMap::new(store, "prompt.gate", 2 * dv, dv, true, group, rng)?;
        store.set_value(
            gate.bias.expect("gate has a bias"),
            Tensor::filled(&[dv], GATE_BIAS_INIT),
        )?;
        Ok(Self { cross, gate })
    }

    pub fn forward(&self, g: &mut Graph<'_>, f_v: Var, f_vt: Var) -> Result<TvOutput> {
        if g.dims(f_v)[1] != self.cross.q.in_dim || g.dims(f_vt)[1] != self.cross.k.in_dim {
            return Err(Error::shape("tv_prompt", g.dims(f_v), g.dims(f_vt)));
        }
        let f_tilde = self.cross.forward(g, f_v, f_vt)?;
        let cat = g.concat_cols(&[f_tilde, f_v])?;
        let z = self.gate.forward(g, cat)?;
        let sigma = g.sigmoid(z)?;
        let diff = g.sub(f_v, f_tilde)?;
        let step = g.mul(sigma, diff)?;
        let f_tv = g.add(f_tilde, step)?;
        Ok(TvOutput {
            f_tv,
            sigma,
            f_tilde,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TvOutput {
    pub f_tv: Var,
    pub sigma: Var,
    pub f_tilde: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct PromptOutput {
    pub f_vt: Var,
    pub f_tv: Var,
    pub sigma: Var,
    pub f_tilde: Var,
}

#[derive(Clone, Debug)]
pub struct PromptModule {
    pub generator: VtGenerator,
    pub prompter: TvPrompter,
}

impl PromptModule {
    pub fn new(store: &mut ParameterStore, dims: &PromptDims, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            generator: VtGenerator::new(store, dims, rng)?,
            prompter: TvPrompter::new(store, dims, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, f_t: Var, f_v: Var) -> Result<PromptOutput> {
        let f_vt = self.generator.forward(g, f_t, f_v)?;
        let tv = self.prompter.forward(g, f_v, f_vt)?;
        Ok(PromptOutput {
            f_vt,
            f_tv: tv.f_tv,
            sigma: tv.sigma,
            f_tilde: tv.f_tilde,
        })
    }

    pub fn set_gate_bias(&self, store: &mut ParameterStore, value: f64) -> Result<()> {
        let b = self.prompter.gate.bias.expect("gate has a bias");
        let dims = store.value(b).dims().to_vec();
        store.set_value(b, Tensor::filled(&dims, value))
    }
}

fn grid_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

fn grid(norms: Vec<f64>, flat: f64) -> Result<Tensor> {
    let side =
        grid_side(norms.len()).ok_or_else(|| Error::shape("prompt_map", &[norms.len()], &[]))?;
    let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = if hi - lo <= flat {
        vec![0.0; norms.len()]
    } else {
        norms.iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    Tensor::new(vec![side, side], data)
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Per-token `‖F_tv − F_v‖₂` on the patch grid, min-max scaled to `[0, 1]`.
/// A (near-)constant map becomes all zeros.
pub fn prompt_map(f_v: &Tensor, f_tv: &Tensor) -> Result<Tensor> {
    if f_v.dims() != f_tv.dims() || f_v.dims().len() != 2 {
        return Err(Error::shape("prompt_map", f_v.dims(), f_tv.dims()));
    }
    let norms = (0..f_v.rows())
        .map(|i| {
            let d: Vec<f64> = f_tv
                .row(i)
                .iter()
                .zip(f_v.row(i))
                .map(|(a, b)| a - b)
                .collect();
            row_norm(&d)
        })
        .collect();
    grid(norms, PROMPT_MAP_FLAT)
}

/// Per-token norm of a feature map on the patch grid, min-max scaled.
pub fn feature_norm_map(f: &Tensor) -> Result<Tensor> {
    if f.dims().len() != 2 {
        return Err(Error::shape("feature_norm_map", f.dims(), &[]));
    }
    grid((0..f.rows()).map(|i| row_norm(f.row(i))).collect(), 0.0)
}
