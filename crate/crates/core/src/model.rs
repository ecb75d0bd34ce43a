//! Full pipeline: visual encoder → optional prompt module → connector →
//! causal decoder, with the next-token loss and greedy answering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LanguageDecoder, LinearMap, VisualEncoder};
use crate::params::{ParamGroup, ParameterStore};
use crate::prompt::{GeneratorVariant, PromptDims, PromptModule, PromptOutput};
use crate::rng::{
    stream, STREAM_CONNECTOR, STREAM_DECODER, STREAM_ENCODER, STREAM_LORA_BASE, STREAM_PROMPT,
};
use crate::synth::{self, TrainingSample, STOP};
use crate::tensor::{Gradients, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_side: usize,
    pub patch: usize,
    pub channels: usize,
    /// `d_v`
    pub visual_width: usize,
    /// `d_t`
    pub text_width: usize,
    /// `d`, the prompt module's internal width.
    pub prompt_width: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub mlp_ratio: usize,
    pub vocab: usize,
    pub max_context: usize,
    /// `m`
    pub queries: usize,
    pub generator_depth: usize,
    pub generator_variant: GeneratorVariant,
    /// Largest instruction length `m_t` the generator accepts.
    pub max_instruction: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_side: 16,
            patch: 4,
            channels: 1,
            visual_width: 32,
            text_width: 32,
            prompt_width: 32,
            heads: 4,
            encoder_depth: 1,
            decoder_depth: 2,
            mlp_ratio: 2,
            vocab: synth::vocab_size(),
            max_context: 96,
            queries: 8,
            generator_depth: 2,
            generator_variant: GeneratorVariant::Qformer,
            max_instruction: 24,
            lora_rank: 4,
            lora_alpha: 8.0,
        }
    }
}

impl ModelConfig {
    pub fn tokens(&self) -> usize {
        (self.image_side / self.patch).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: String| Err(Error::Config(format!("model.{field}: {why}")));
        if self.patch == 0 || !self.image_side.is_multiple_of(self.patch) {
            return fail(
                "patch",
                format!(
                    "image_side {} not divisible by patch {}",
                    self.image_side, self.patch
                ),
            );
        }
        if self.channels != 1 {
            return fail("channels", "synthetic images are single-channel".into());
        }
        if self.heads == 0 {
            return fail("heads", "must be positive".into());
        }
        for (field, w) in [
            ("visual_width", self.visual_width),
            ("text_width", self.text_width),
            ("prompt_width", self.prompt_width),
        ] {
            if w == 0 || w % self.heads != 0 {
                return fail(field, format!("{w} not divisible by heads {}", self.heads));
            }
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio", "must be positive".into());
        }
        if self.vocab != synth::vocab_size() {
            return fail(
                "vocab",
                format!(
                    "must equal the task vocabulary size {}",
                    synth::vocab_size()
                ),
            );
        }
        if self.max_context <= self.tokens() + 1 {
            return fail(
                "max_context",
                format!(
                    "{} leaves no room after {} visual tokens",
                    self.max_context,
                    self.tokens()
                ),
            );
        }
        if self.queries == 0 {
            return fail("queries", "must be positive".into());
        }
        if self.max_instruction == 0 {
            return fail("max_instruction", "must be positive".into());
        }
        let min_width = self.visual_width.min(self.text_width);
        if self.lora_rank == 0 || self.lora_rank > min_width {
            return fail(
                "lora_rank",
                format!("{} outside [1, {min_width}]", self.lora_rank),
            );
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return fail("lora_alpha", "must be positive".into());
        }
        Ok(())
    }

    fn prompt_dims(&self) -> PromptDims {
        PromptDims {
            queries: self.queries,
            width: self.prompt_width,
            depth: self.generator_depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            text_width: self.text_width,
            visual_width: self.visual_width,
            max_instruction: self.max_instruction,
            variant: self.generator_variant,
        }
    }
}

#[derive(Clone, Debug)]
pub struct QAdaptModel {
    pub config: ModelConfig,
    pub seed: u64,
    pub store: ParameterStore,
    pub encoder: VisualEncoder,
    pub decoder: LanguageDecoder,
    /// `f_vt`, `d_v → d_t`.
    pub connector: LinearMap,
    pub prompt: Option<PromptModule>,
    lora_generation: u64,
}

/// Decoder prefix and the intermediate features that produced it.
#[derive(Clone, Copy, Debug)]
pub struct Prefix {
    pub prefix: Var,
    pub f_v: Var,
    pub prompt: Option<PromptOutput>,
}

impl QAdaptModel {
    /// Every component draws from its own RNG stream under `seed`, so the
    /// base model is identical with or without a prompt module. Initial
    /// values are rounded to `f32`, the checkpoint precision.
    pub fn new(config: ModelConfig, seed: u64, with_prompt: bool) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParameterStore::new();
        let encoder = VisualEncoder::new(
            &mut store,
            c.image_side,
            c.patch,
            c.channels,
            c.visual_width,
            c.encoder_depth,
            c.heads,
            c.mlp_ratio,
            &mut stream(seed, STREAM_ENCODER),
        )?;
        let decoder = LanguageDecoder::new(
            &mut store,
            c.vocab,
            c.text_width,
            c.max_context,
            c.decoder_depth,
            c.heads,
            c.mlp_ratio,
            &mut stream(seed, STREAM_DECODER),
        )?;
        let connector = LinearMap::new(
            &mut store,
            "connector",
            c.visual_width,
            c.text_width,
            true,
            ParamGroup::Connector,
            &mut stream(seed, STREAM_CONNECTOR),
        )?;
        let mut model = Self {
            config,
            seed,
            store,
            encoder,
            decoder,
            connector,
            prompt: None,
            lora_generation: 0,
        };
        if with_prompt {
            model.add_prompt_module()?;
        }
        model.store.round_to_f32();
        Ok(model)
    }

    pub fn add_prompt_module(&mut self) -> Result<()> {
        if self.prompt.is_some() {
            return Err(Error::Config("model already has a prompt module".into()));
        }
        let dims = self.config.prompt_dims();
        self.prompt = Some(PromptModule::new(
            &mut self.store,
            &dims,
            &mut stream(self.seed, STREAM_PROMPT),
        )?);
        self.store.round_to_f32();
        Ok(())
    }

    pub fn has_prompt(&self) -> bool {
        self.prompt.is_some()
    }

    fn host_maps(&mut self, group: ParamGroup) -> Result<Vec<&mut LinearMap>> {
        match group {
            ParamGroup::VisionLora => Ok(self.encoder.linear_maps_mut()),
            ParamGroup::LlmLora => Ok(self.decoder.linear_maps_mut()),
            _ => Err(Error::Config(format!("`{group}` is not a LoRA group"))),
        }
    }

    /// Attaches fresh adapters to every map of the encoder (`VisionLora`) or
    /// decoder (`LlmLora`). Returns how many maps were adapted.
    pub fn attach_lora(&mut self, group: ParamGroup) -> Result<usize> {
        let (r, alpha) = (self.config.lora_rank, self.config.lora_alpha);
        let lane = if group == ParamGroup::VisionLora {
            0
        } else {
            1
        };
        let mut rng = stream(
            self.seed,
            STREAM_LORA_BASE + 1000 * self.lora_generation + lane,
        );
        self.lora_generation += 1;
        let mut store = std::mem::take(&mut self.store);
        let result = (|| {
            let maps = self.host_maps(group)?;
            let n = maps.len();
            for m in maps {
                m.attach_lora(&mut store, r, alpha, group, &mut rng)?;
            }
            Ok(n)
        })();
        self.store = store;
        result
    }

    /// Folds every adapter of `group` into its host weight.
    pub fn merge_lora(&mut self, group: ParamGroup) -> Result<usize> {
        let mut store = std::mem::take(&mut self.store);
        let result = (|| {
            let mut n = 0;
            for m in self.host_maps(group)? {
                if m.lora.is_some() {
                    m.merge_lora(&mut store)?;
                    n += 1;
                }
            }
            Ok(n)
        })();
        self.store = store;
        result
    }

    pub fn has_lora(&self, group: ParamGroup) -> bool {
        self.store.has_group(group)
    }

    /// Visual tokens (optionally prompted) through the connector, followed by
    /// the instruction embedding.
    pub fn prefix(
        &self,
        g: &mut Graph<'_>,
        image: &Tensor,
        instruction: &[usize],
        use_prompt: bool,
    ) -> Result<Prefix> {
        if instruction.is_empty() {
            return Err(Error::Config("empty instruction".into()));
        }
        let f_v = self.encoder.encode(g, image)?;
        let instr = self.decoder.embed_tokens(g, instruction)?;
        let (visual, prompt) = if use_prompt {
            let module = self.prompt.as_ref().ok_or_else(|| {
                Error::Config("use_prompt requested on a model without a prompt module".into())
            })?;
            let out = module.forward(g, instr, f_v)?;
            (out.f_tv, Some(out))
        } else {
            (f_v, None)
        };
        let c = self.connector.forward(g, visual)?;
        let prefix = g.concat_rows(&[c, instr])?;
        Ok(Prefix {
            prefix,
            f_v,
            prompt,
        })
    }

    /// Logits for every position of `[connector(F_v′) ‖ instruction ‖ target]`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        image: &Tensor,
        instruction: &[usize],
        target: &[usize],
        use_prompt: bool,
    ) -> Result<Var> {
        let p = self.prefix(g, image, instruction, use_prompt)?;
        self.decoder.decode(g, p.prefix, target)
    }

    /// Mean next-token cross-entropy over the target tokens of one sample.
    /// The prefix positions carry no loss.
    pub fn sample_loss(
        &self,
        g: &mut Graph<'_>,
        image: &Tensor,
        instruction: &[usize],
        target: &[usize],
        use_prompt: bool,
    ) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::DegenerateBatch("sample has no target tokens".into()));
        }
        let p = self.prefix(g, image, instruction, use_prompt)?;
        let k = g.dims(p.prefix)[0];
        let x = if target.len() > 1 {
            let t = self.decoder.embed_tokens(g, &target[..target.len() - 1])?;
            g.concat_rows(&[p.prefix, t])?
        } else {
            p.prefix
        };
        let logits = self.decoder.forward_embeddings_from(g, x, k - 1)?;
        g.cross_entropy(logits, target, &vec![true; target.len()])
    }

    /// Loss value and gradients of one sample, scaled by `weight`.
    pub fn sample_gradients(
        &self,
        sample: &TrainingSample,
        use_prompt: bool,
        weight: f64,
    ) -> Result<(f64, Gradients)> {
        let mut g = Graph::with_store(&self.store);
        let loss = self.sample_loss(
            &mut g,
            sample.image(),
            &sample.instruction_ids,
            &sample.target_ids,
            use_prompt,
        )?;
        let value = g.scalar(loss);
        Ok((value, g.backward(loss, weight)?))
    }

    /// Token-weighted mean loss over a batch.
    pub fn lm_loss(&self, batch: &[&TrainingSample], use_prompt: bool) -> Result<f64> {
        let total: usize = batch.iter().map(|s| s.target_ids.len()).sum();
        if total == 0 {
            return Err(Error::DegenerateBatch("batch has no target tokens".into()));
        }
        let losses = crate::par::map(batch, |s| {
            let mut g = Graph::with_store(&self.store);
            let l = self.sample_loss(
                &mut g,
                s.image(),
                &s.instruction_ids,
                &s.target_ids,
                use_prompt,
            )?;
            Ok::<_, Error>(g.scalar(l) * s.target_ids.len() as f64)
        });
        let mut sum = 0.0;
        for l in losses {
            sum += l?;
        }
        Ok(sum / total as f64)
    }

    /// Greedy answer to `instruction` about `image`, ending at the stop token
    /// or after `max_new` tokens.
    pub fn answer(
        &self,
        image: &Tensor,
        instruction: &[usize],
        use_prompt: bool,
        max_new: usize,
    ) -> Result<Vec<usize>> {
        let prefix = {
            let mut g = Graph::with_store(&self.store);
            let p = self.prefix(&mut g, image, instruction, use_prompt)?;
            g.value(p.prefix).clone()
        };
        self.decoder
            .greedy_generate(&self.store, &prefix, max_new, STOP)
    }

    /// `(F_v, F_tv)` for one image and instruction.
    pub fn prompt_features(
        &self,
        image: &Tensor,
        instruction: &[usize],
    ) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::with_store(&self.store);
        let p = self.prefix(&mut g, image, instruction, true)?;
        let out = p
            .prompt
            .expect("prompt output present when use_prompt is set");
        Ok((g.value(p.f_v).clone(), g.value(out.f_tv).clone()))
    }
}
