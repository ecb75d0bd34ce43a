//! Named parameter tree with per-parameter trainable flags.
//!
//! Frozen base weights (the pretrained model in the original setting) and
//! adapter / connector / prompt weights all live here. Slots are never
//! reused: merging an adapter removes its tensors and leaves a hole, so a
//! [`ParamId`] held elsewhere never silently aliases a different tensor.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    EncoderBase,
    DecoderBase,
    VisionLora,
    LlmLora,
    Connector,
    PromptModule,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::EncoderBase,
        ParamGroup::DecoderBase,
        ParamGroup::VisionLora,
        ParamGroup::LlmLora,
        ParamGroup::Connector,
        ParamGroup::PromptModule,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::EncoderBase => "encoder-base",
            ParamGroup::DecoderBase => "decoder-base",
            ParamGroup::VisionLora => "vision-lora",
            ParamGroup::LlmLora => "llm-lora",
            ParamGroup::Connector => "connector",
            ParamGroup::PromptModule => "prompt-module",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
    pub trainable: bool,
    pub grad: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    slots: Vec<Option<Param>>,
    by_name: HashMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        group: ParamGroup,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.slots.len());
        self.by_name.insert(name.clone(), id);
        self.slots.push(Some(Param {
            name,
            value,
            group,
            trainable: false,
            grad: None,
        }));
        Ok(id)
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Param> {
        let p = self.slots.get_mut(id.0)?.take()?;
        self.by_name.remove(&p.name);
        Some(p)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        self.slots[id.0].as_ref().expect("parameter was removed")
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        self.slots[id.0].as_mut().expect("parameter was removed")
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.slots.get(id.0).is_some_and(Option::is_some)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.get(id).value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = self.get_mut(id);
        if p.value.dims() != value.dims() {
            return Err(Error::shape("set_value", p.value.dims(), value.dims()));
        }
        p.value = value;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.get(id).trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.get_mut(id).trainable = trainable;
    }

    /// Live parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|p| (ParamId(i), p)))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.iter().map(|(id, _)| id).collect()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn has_group(&self, group: ParamGroup) -> bool {
        self.iter().any(|(_, p)| p.group == group)
    }

    pub fn freeze_all(&mut self) {
        for p in self.slots.iter_mut().flatten() {
            p.trainable = false;
        }
    }

    pub fn count_elements(&self, group: ParamGroup) -> usize {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.slots.iter_mut().flatten() {
            p.grad = None;
        }
    }

    /// Adds `grads` into the per-parameter buffers. Accumulation is additive
    /// across calls, so two backward passes sum exactly as their parts do.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.iter() {
            if let Some(p) = self.slots.get_mut(id.0).and_then(Option::as_mut) {
                match &mut p.grad {
                    Some(buf) => {
                        for (b, v) in buf.iter_mut().zip(g) {
                            *b += v;
                        }
                    }
                    None => p.grad = Some(g.to_vec()),
                }
            }
        }
    }

    /// Bytes of every parameter in `group`, keyed by name. Used for the
    /// frozen-group snapshot comparisons.
    pub fn snapshot(&self, group: ParamGroup) -> BTreeMap<String, Vec<u64>> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(_, p)| {
                (
                    p.name.clone(),
                    p.value.data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    }

    /// Rounds every value through `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for p in self.slots.iter_mut().flatten() {
            p.value = p.value.to_f32_precision();
        }
    }
}
