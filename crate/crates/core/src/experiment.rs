//! The experiment drivers behind the command-line interface.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{self, CheckpointMeta, RunConfig};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{ModelConfig, QAdaptModel};
use crate::params::ParamGroup;
use crate::prompt::{feature_norm_map, prompt_map};
use crate::staging::{run_strategy_with, TrainReport, ABLATION_ROWS};
use crate::synth::{self, build_dataset, Split};
use crate::tensor::{grad_check, Coords, GradCheckOptions};

/// Writes `train.jsonl` and one file per evaluation split. Returns the paths.
pub fn gen_data(cfg: &RunConfig, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    io::create_dir(out)?;
    let data = build_dataset(&cfg.dataset, seed)?;
    let splits = [
        ("train", &data.train),
        ("eval_mcq", &data.eval_mcq),
        ("eval_explanation", &data.eval_explanation),
        ("eval_yesno", &data.eval_yesno),
        ("eval_howwhat", &data.eval_howwhat),
    ];
    let mut paths = Vec::new();
    for (name, set) in splits {
        let mut text = String::new();
        for s in set.iter() {
            text.push_str(&synth::dump_line(s)?);
            text.push('\n');
        }
        let path = out.join(format!("{name}.jsonl"));
        io::write_text(&path, &text)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub eval: EvalReport,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains `strategy` from a fresh model, writing `stage<k>.ckpt` after each
/// stage, the loss curve `train.csv` and a row of `metrics.csv` into `out`.
pub fn train(cfg: &RunConfig, strategy: &str, seed: u64, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let strat = cfg.strategy_named(strategy)?;
    io::create_dir(out)?;
    let data = build_dataset(&cfg.dataset, seed)?;
    let mut model = QAdaptModel::new(cfg.model.clone(), seed, false)?;
    let echo = RunConfig {
        strategy: strategy.to_string(),
        seeds: vec![seed],
        ..cfg.clone()
    };
    let mut checkpoints = Vec::new();
    let report = run_strategy_with(
        &mut model,
        &strat,
        &data.train,
        &cfg.train,
        seed,
        |m, plan, r| {
            let path = out.join(format!("stage{}.ckpt", r.index + 1));
            let meta = CheckpointMeta {
                config: echo.clone(),
                seed,
                stage: r.index + 1,
                use_prompt: plan.use_prompt,
            };
            io::save_checkpoint(&path, m, &meta)?;
            checkpoints.push(path);
            Ok(())
        },
    )?;
    let steps: Vec<_> = report.steps().copied().collect();
    io::write_train_csv(&out.join("train.csv"), &steps)?;
    let eval = evaluate(&model, &data, strat.final_use_prompt(), strategy, seed)?;
    io::append_metrics(&out.join("metrics.csv"), &eval)?;
    Ok(TrainOutcome {
        report,
        eval,
        checkpoints,
    })
}

/// Evaluates a checkpoint on the evaluation splits of `data_cfg`, or of the
/// config the checkpoint echoes.
pub fn eval_checkpoint(path: &Path, data_cfg: Option<&RunConfig>) -> Result<EvalReport> {
    let (model, meta) = io::load_model(path)?;
    let dataset = &data_cfg.unwrap_or(&meta.config).dataset;
    let data = build_dataset(dataset, meta.seed)?;
    evaluate(
        &model,
        &data,
        meta.use_prompt,
        &meta.config.strategy,
        meta.seed,
    )
}

/// Module label used in gradient-check summaries.
pub fn module_of(name: &str) -> &'static str {
    if name.contains(".lora.A") {
        "lora-A"
    } else if name.contains(".lora.B") {
        "lora-B"
    } else if name.starts_with("prompt.gen.queries") {
        "queries"
    } else if name.starts_with("prompt.gen.") {
        "generator"
    } else if name.starts_with("prompt.tv") {
        "prompter"
    } else if name.starts_with("prompt.gate") {
        "gate"
    } else if name.starts_with("connector") {
        "connector"
    } else if name.starts_with("encoder.") {
        "encoder"
    } else {
        "decoder"
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckSummary {
    /// Worst relative error per module.
    pub modules: BTreeMap<String, f64>,
    pub tensors: usize,
    pub coords: usize,
}

impl GradCheckSummary {
    pub fn max_rel_error(&self) -> f64 {
        self.modules.values().copied().fold(0.0, f64::max)
    }
}

/// Central-difference check of every parameter of a full model (adapters
/// attached with random `B`, prompt module on) on one multiple-choice sample.
/// Each tensor is probed at its `k` largest analytic coordinates.
pub fn gradcheck(model_cfg: &ModelConfig, seed: u64, k: usize) -> Result<GradCheckSummary> {
    let mut m = QAdaptModel::new(model_cfg.clone(), seed, true)?;
    m.attach_lora(ParamGroup::VisionLora)?;
    m.attach_lora(ParamGroup::LlmLora)?;
    let mut rng = crate::rng::stream(seed, crate::rng::STREAM_GRADCHECK);
    for id in m.store.ids() {
        if m.store.get(id).name.ends_with("lora.B") {
            let d = m.store.value(id).dims().to_vec();
            m.store
                .set_value(id, crate::nn::normal_tensor(&mut rng, &d, 0.1))?;
        }
        m.store.set_trainable(id, true);
    }
    let s = synth::sample_at(seed, Split::EvalMcq, 0, 0.7);
    let mut store = std::mem::take(&mut m.store);
    let report = grad_check(
        &mut store,
        |g| m.sample_loss(g, s.image(), &s.instruction_ids, &s.target_ids, true),
        &GradCheckOptions {
            coords: Coords::Largest(k),
            seed,
            ..Default::default()
        },
    )?;
    let mut modules = BTreeMap::new();
    for e in &report.entries {
        let slot = modules
            .entry(module_of(&e.name).to_string())
            .or_insert(0.0f64);
        *slot = slot.max(e.max_rel_error);
    }
    Ok(GradCheckSummary {
        modules,
        tensors: report.entries.len(),
        coords: report.entries.iter().map(|e| e.coords_checked).sum(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variant: String,
    pub runs: usize,
    /// `(mean, sample stddev)` per metric; `None` when no run defined it.
    pub stats: Vec<(&'static str, Option<(f64, f64)>)>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

pub const SUMMARY_METRICS: [&str; 6] = [
    "acc_mcq",
    "acc_yesno",
    "acc_howwhat",
    "srocc",
    "plcc",
    "expl_ppl",
];

pub fn summarize(variant: &str, reports: &[EvalReport]) -> SummaryRow {
    let pick = |f: &dyn Fn(&EvalReport) -> Option<f64>| -> Vec<f64> {
        reports.iter().filter_map(f).collect()
    };
    let columns: [Vec<f64>; 6] = [
        pick(&|r| Some(r.acc_mcq)),
        pick(&|r| Some(r.acc_yesno)),
        pick(&|r| Some(r.acc_howwhat)),
        pick(&|r| r.srocc),
        pick(&|r| r.plcc),
        pick(&|r| Some(r.expl_ppl)),
    ];
    SummaryRow {
        variant: variant.to_string(),
        runs: reports.len(),
        stats: SUMMARY_METRICS
            .iter()
            .copied()
            .zip(columns.iter().map(|c| mean_std(c)))
            .collect(),
    }
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["variant".to_string(), "runs".to_string()];
    for m in SUMMARY_METRICS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.variant.clone(), r.runs.to_string()];
        for (_, s) in &r.stats {
            match s {
                Some((m, sd)) => {
                    rec.push(m.to_string());
                    rec.push(sd.to_string());
                }
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains every ablation row for every seed, each cell in
/// `out/<row>/seed<s>`, then writes `metrics.csv` with all rows and the
/// pivoted `summary.csv`.
pub fn ablate(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    io::create_dir(out)?;
    let mut all = Vec::new();
    let mut rows = Vec::new();
    for variant in ABLATION_ROWS {
        let mut reports = Vec::new();
        for &seed in seeds {
            let cell = out.join(variant).join(format!("seed{seed}"));
            reports.push(train(cfg, variant, seed, &cell)?.eval);
        }
        rows.push(summarize(variant, &reports));
        all.extend(reports);
    }
    let merged = out.join("metrics.csv");
    if merged.exists() {
        std::fs::remove_file(&merged).map_err(|e| Error::io(&merged, e))?;
    }
    for r in &all {
        io::append_metrics(&merged, r)?;
    }
    write_summary(&out.join("summary.csv"), &rows)?;
    Ok(rows)
}

/// For the first `k` multiple-choice evaluation items: the feature-norm map
/// of `F_v`, the modulation map `‖F_tv − F_v‖`, and the instruction text.
pub fn dump_prompt_maps(ckpt: &Path, k: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let (model, meta) = io::load_model(ckpt)?;
    if !model.has_prompt() {
        return Err(Error::Config(format!(
            "{}: checkpoint has no prompt module",
            ckpt.display()
        )));
    }
    io::create_dir(out)?;
    let f = meta.config.dataset.answering_fraction;
    let mut written = Vec::new();
    for i in 0..k {
        let s = synth::sample_at(meta.seed, Split::EvalMcq, i as u64, f);
        let (f_v, f_tv) = model.prompt_features(s.image(), &s.instruction_ids)?;
        let files = [
            (format!("sample{i}_feature.pgm"), feature_norm_map(&f_v)?),
            (format!("sample{i}_prompt.pgm"), prompt_map(&f_v, &f_tv)?),
        ];
        for (name, map) in files {
            let path = out.join(name);
            io::write_pgm(&path, &map)?;
            written.push(path);
        }
        let path = out.join(format!("sample{i}.txt"));
        io::write_text(
            &path,
            &format!("{}\n", synth::detokenize(&s.instruction_ids)),
        )?;
        written.push(path);
    }
    Ok(written)
}
