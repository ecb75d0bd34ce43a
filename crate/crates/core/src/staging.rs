//! Staged instruction tuning: freeze plans, task filters, AdamW with a
//! warmup + cosine schedule, and the stage runner.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::QAdaptModel;
use crate::params::{ParamGroup, ParamId, ParameterStore};
use crate::rng::{stream, STREAM_SHUFFLE};
use crate::synth::{Task, TrainingSample};
use crate::tensor::Gradients;

pub const DEFAULT_LR: f64 = 3e-4;
/// The learning rate used when tuning a pretrained 3B-parameter backbone.
pub const PAPER_LR: f64 = 2e-5;

/// Groups a stage may train. The base encoder and decoder are never trained.
pub const TUNABLE: [ParamGroup; 4] = [
    ParamGroup::VisionLora,
    ParamGroup::LlmLora,
    ParamGroup::Connector,
    ParamGroup::PromptModule,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub name: String,
    pub trainable: BTreeSet<ParamGroup>,
    pub tasks: BTreeSet<Task>,
    pub epochs: usize,
    pub lr: f64,
    pub use_prompt: bool,
}

impl StagePlan {
    pub fn new(name: &str, trainable: &[ParamGroup], tasks: &[Task], use_prompt: bool) -> Self {
        Self {
            name: name.to_string(),
            trainable: trainable.iter().copied().collect(),
            tasks: tasks.iter().copied().collect(),
            epochs: 1,
            lr: DEFAULT_LR,
            use_prompt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("stage `{}`: {m}", self.name)));
        if self.trainable.is_empty() {
            return err("no trainable groups".into());
        }
        if let Some(g) = self.trainable.iter().find(|g| !TUNABLE.contains(g)) {
            return err(format!("group `{g}` cannot be trained"));
        }
        if self.trainable.contains(&ParamGroup::PromptModule) && !self.use_prompt {
            return err("prompt-module is trainable but use_prompt is off".into());
        }
        if self.tasks.is_empty() {
            return err("empty task filter".into());
        }
        if self.epochs == 0 {
            return err("epochs must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return err(format!(
                "learning rate {} is not a finite non-negative number",
                self.lr
            ));
        }
        Ok(())
    }

    pub fn accepts(&self, s: &TrainingSample) -> bool {
        self.tasks.contains(&s.task)
    }

    /// Shuffle-stream key of the task filter. Stages with the same filter draw
    /// the same sample order for the same seed and epoch.
    fn filter_key(&self) -> u64 {
        self.tasks.iter().map(|t| 1u64 << (*t as u64)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    MergeLora,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub name: String,
    pub stages: Vec<StagePlan>,
    /// `boundaries[i]` runs between stage `i` and stage `i + 1`.
    pub boundaries: Vec<Boundary>,
}

impl Strategy {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config(format!(
                "strategy `{}` has no stages",
                self.name
            )));
        }
        if self.boundaries.len() + 1 != self.stages.len() {
            return Err(Error::Config(format!(
                "strategy `{}`: {} boundaries for {} stages",
                self.name,
                self.boundaries.len(),
                self.stages.len()
            )));
        }
        for s in &self.stages {
            s.validate()?;
        }
        for (i, b) in self.boundaries.iter().enumerate() {
            let trained_lora = self.stages[i].trainable.iter().any(|g| is_lora(*g));
            if *b == Boundary::MergeLora && !trained_lora {
                return Err(Error::Config(format!(
                    "strategy `{}`: merge-lora after stage `{}`, which trains no adapters",
                    self.name, self.stages[i].name
                )));
            }
        }
        Ok(())
    }

    pub fn uses_prompt(&self) -> bool {
        self.stages.iter().any(|s| s.use_prompt)
    }

    pub fn final_use_prompt(&self) -> bool {
        self.stages.last().is_some_and(|s| s.use_prompt)
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        for s in &mut self.stages {
            s.lr = lr;
        }
        self
    }
}

fn is_lora(g: ParamGroup) -> bool {
    matches!(g, ParamGroup::VisionLora | ParamGroup::LlmLora)
}

/// Every named strategy: `progressive`, `joint`, `two-stage`, and one per
/// row of the stage ablation.
pub fn builtin_strategies() -> BTreeMap<String, Strategy> {
    use ParamGroup::{Connector as C, LlmLora as LL, PromptModule as P, VisionLora as VL};
    use Task::{Answering as A, Explanation as E};

    let stage1 = |name: &str, tasks: &[Task]| StagePlan::new(name, &[VL, LL, C], tasks, false);
    let single = |name: &str, plan: StagePlan| Strategy {
        name: name.into(),
        stages: vec![plan],
        boundaries: vec![],
    };
    let after_explanation = |name: &str, groups: &[ParamGroup], tasks: &[Task]| Strategy {
        name: name.into(),
        stages: vec![
            stage1("stage1", &[E]),
            StagePlan::new("stage2", groups, tasks, groups.contains(&P)),
        ],
        boundaries: vec![Boundary::MergeLora],
    };

    let list = vec![
        after_explanation("progressive", &[C, P], &[E, A]),
        single("joint", stage1("joint", &[E, A])),
        Strategy {
            name: "two-stage".into(),
            stages: vec![
                StagePlan::new("stage1", &[C], &[E], false),
                StagePlan::new("stage2", &[C, LL], &[E, A], false),
            ],
            boundaries: vec![Boundary::None],
        },
        single("stage1-explanation", stage1("stage1", &[E])),
        single("stage1-answering", stage1("stage1", &[A])),
        single("stage1-both-tasks", stage1("stage1", &[E, A])),
        single(
            "stage1-with-prompt",
            StagePlan::new("stage1", &[VL, LL, C, P], &[E, A], true),
        ),
        after_explanation("stage2-explanation-only", &[C, P], &[E]),
        after_explanation("stage2-answering-only", &[C, P], &[A]),
        after_explanation("stage2-no-connector", &[P], &[E, A]),
        after_explanation("stage2-with-llm-lora", &[LL, C, P], &[E, A]),
    ];
    list.into_iter().map(|s| (s.name.clone(), s)).collect()
}

/// The stage-ablation rows in table order.
pub const ABLATION_ROWS: [&str; 9] = [
    "stage1-explanation",
    "stage1-answering",
    "stage1-both-tasks",
    "stage1-with-prompt",
    "progressive",
    "stage2-explanation-only",
    "stage2-answering-only",
    "stage2-no-connector",
    "stage2-with-llm-lora",
];

/// Sets `requires_grad` on exactly the plan's groups. LoRA groups in the plan
/// must already be attached.
pub fn apply_freeze(model: &mut QAdaptModel, plan: &StagePlan) -> Result<()> {
    plan.validate()?;
    if (plan.use_prompt || plan.trainable.contains(&ParamGroup::PromptModule))
        && !model.has_prompt()
    {
        return Err(Error::Config(format!(
            "stage `{}` needs a prompt module the model does not have",
            plan.name
        )));
    }
    if let Some(g) = plan.trainable.iter().find(|g| !model.store.has_group(**g)) {
        return Err(Error::Config(format!(
            "stage `{}`: model has no `{g}` parameters",
            plan.name
        )));
    }
    model.store.freeze_all();
    for &g in &plan.trainable {
        for id in model.store.group_ids(g) {
            model.store.set_trainable(id, true);
        }
    }
    Ok(())
}

/// Attaches fresh adapters for every LoRA group the plan trains that has
/// none, then applies the freeze plan.
pub fn prepare_stage(model: &mut QAdaptModel, plan: &StagePlan) -> Result<()> {
    for &g in &plan.trainable {
        if is_lora(g) && !model.has_lora(g) {
            model.attach_lora(g)?;
        }
    }
    model.store.round_to_f32();
    apply_freeze(model, plan)
}

pub fn apply_boundary(model: &mut QAdaptModel, boundary: Boundary) -> Result<()> {
    if boundary == Boundary::MergeLora {
        for g in [ParamGroup::VisionLora, ParamGroup::LlmLora] {
            model.merge_lora(g)?;
        }
        model.store.round_to_f32();
    }
    Ok(())
}

// ---- optimizer -----------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    /// Zeroed moment buffers for exactly the trainable parameters of `store`.
    pub fn new(store: &ParameterStore, weight_decay: f64) -> Self {
        let moments = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| (id, (vec![0.0; p.value.numel()], vec![0.0; p.value.numel()])))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments,
        }
    }

    pub fn buffer_ids(&self) -> Vec<ParamId> {
        self.moments.keys().copied().collect()
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(&id)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One decoupled-weight-decay update from the gradients held in `store`,
    /// which are then cleared.
    pub fn step(&mut self, store: &mut ParameterStore, lr: f64) -> Result<()> {
        for &id in self.moments.keys() {
            if !store.contains(id) || !store.is_trainable(id) {
                return Err(Error::Contract(format!(
                    "optimizer buffer for non-trainable parameter {id:?}"
                )));
            }
            if store.get(id).grad.is_none() {
                return Err(Error::Contract(format!(
                    "no gradient for trainable `{}`",
                    store.get(id).name
                )));
            }
        }
        if let Some(id) = store
            .trainable_ids()
            .into_iter()
            .find(|id| !self.moments.contains_key(id))
        {
            return Err(Error::Contract(format!(
                "trainable `{}` has no optimizer buffers",
                store.get(id).name
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (&id, (m, v)) in self.moments.iter_mut() {
            let p = store.get_mut(id);
            let grad = p.grad.take().expect("checked above");
            let theta = p.value.data_mut();
            for i in 0..theta.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                theta[i] -= lr * (update + self.weight_decay * theta[i]);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

/// Linear warmup over `ceil(warmup_ratio·total)` steps, then cosine decay
/// reaching 0 at the last step.
pub fn lr_schedule(step: usize, total: usize, base_lr: f64, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total as f64).ceil() as usize;
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(1 + warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

// ---- runner --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epoch_multiplier: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    /// Leave adapters attached (and frozen unless a later stage trains them)
    /// at a merge boundary instead of folding them into the base weights.
    pub keep_lora: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epoch_multiplier: 3,
            warmup_ratio: 0.03,
            weight_decay: 0.0,
            keep_lora: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size: must be positive".into()));
        }
        if self.epoch_multiplier == 0 {
            return Err(Error::Config(
                "train.epoch_multiplier: must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "train.warmup_ratio: {} outside [0, 1)",
                self.warmup_ratio
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "train.weight_decay: {} is invalid",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub index: usize,
    pub name: String,
    pub samples: usize,
    pub steps: Vec<StepRecord>,
    /// Groups whose bytes differ between stage start and end.
    pub changed: Vec<ParamGroup>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub strategy: String,
    pub stages: Vec<StageReport>,
}

impl TrainReport {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.stages.iter().flat_map(|s| s.steps.iter())
    }
}

type Snapshot = BTreeMap<ParamGroup, BTreeMap<String, Vec<u64>>>;

fn snapshot_all(store: &ParameterStore) -> Snapshot {
    ParamGroup::ALL
        .iter()
        .map(|&g| (g, store.snapshot(g)))
        .collect()
}

/// Sums per-sample gradients (already scaled) in sample order.
fn sum_gradients(parts: Vec<Gradients>) -> Option<Gradients> {
    let mut it = parts.into_iter();
    let mut acc = it.next()?;
    for p in it {
        acc.add_assign(&p);
    }
    Some(acc)
}

/// Sample order of one epoch. It depends only on the task filter, the
/// filtered sample count, the seed and the epoch.
pub fn epoch_order(plan: &StagePlan, n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = stream(
        seed,
        STREAM_SHUFFLE + (plan.filter_key() << 16) + epoch as u64,
    );
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains one prepared stage. Each step is a token-weighted mean loss over
/// a batch; per-sample backward passes fan out in parallel and are summed in
/// batch order. Parameters are rounded to `f32` when the stage ends.
pub fn run_stage(
    model: &mut QAdaptModel,
    plan: &StagePlan,
    index: usize,
    train: &[TrainingSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<StageReport> {
    cfg.validate()?;
    let data: Vec<&TrainingSample> = train.iter().filter(|s| plan.accepts(s)).collect();
    if data.is_empty() {
        return Err(Error::DegenerateBatch(format!(
            "stage `{}` has no matching samples",
            plan.name
        )));
    }
    let before = snapshot_all(&model.store);
    let epochs = plan.epochs * cfg.epoch_multiplier;
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = epochs * per_epoch;
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut steps = Vec::with_capacity(total);
    for epoch in 0..epochs {
        let order = epoch_order(plan, data.len(), seed, epoch);
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<&TrainingSample> = batch.iter().map(|&i| data[i]).collect();
            let tokens: usize = samples.iter().map(|s| s.target_ids.len()).sum();
            let m: &QAdaptModel = model;
            let parts = crate::par::map(&samples, |s| {
                m.sample_gradients(
                    s,
                    plan.use_prompt,
                    s.target_ids.len() as f64 / tokens as f64,
                )
            });
            let mut loss = 0.0;
            let mut grads = Vec::with_capacity(parts.len());
            for (s, part) in samples.iter().zip(parts) {
                let (l, g) = part?;
                loss += l * s.target_ids.len() as f64;
                grads.push(g);
            }
            let loss = loss / tokens as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at stage `{}` step {}",
                    plan.name,
                    steps.len()
                )));
            }
            let grads = sum_gradients(grads).expect("batch is non-empty");
            model.store.zero_grads();
            model.store.accumulate(&grads);
            let lr = lr_schedule(steps.len(), total, plan.lr, cfg.warmup_ratio);
            opt.step(&mut model.store, lr)?;
            steps.push(StepRecord {
                stage: index,
                step: steps.len(),
                lr,
                loss,
            });
        }
    }
    model.store.round_to_f32();
    let after = snapshot_all(&model.store);
    let changed = ParamGroup::ALL
        .iter()
        .copied()
        .filter(|g| before[g] != after[g])
        .collect();
    Ok(StageReport {
        index,
        name: plan.name.clone(),
        samples: data.len(),
        steps,
        changed,
    })
}

/// Runs every stage of `strategy` in order, calling `on_stage` after each
/// one (before the boundary action).
pub fn run_strategy_with<F>(
    model: &mut QAdaptModel,
    strategy: &Strategy,
    train: &[TrainingSample],
    cfg: &TrainConfig,
    seed: u64,
    mut on_stage: F,
) -> Result<TrainReport>
where
    F: FnMut(&QAdaptModel, &StagePlan, &StageReport) -> Result<()>,
{
    strategy.validate()?;
    if strategy.uses_prompt() && !model.has_prompt() {
        model.add_prompt_module()?;
    }
    let mut report = TrainReport {
        strategy: strategy.name.clone(),
        stages: Vec::new(),
    };
    for (i, plan) in strategy.stages.iter().enumerate() {
        prepare_stage(model, plan)?;
        let r = run_stage(model, plan, i, train, cfg, seed)?;
        on_stage(model, plan, &r)?;
        report.stages.push(r);
        if let Some(&b) = strategy.boundaries.get(i) {
            if !cfg.keep_lora {
                apply_boundary(model, b)?;
            }
        }
    }
    model.store.freeze_all();
    Ok(report)
}

pub fn run_strategy(
    model: &mut QAdaptModel,
    strategy: &Strategy,
    train: &[TrainingSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    run_strategy_with(model, strategy, train, cfg, seed, |_, _, _| Ok(()))
}
