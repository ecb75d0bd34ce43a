//! Answer extraction, rank and linear correlation, and the evaluation pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::QAdaptModel;
use crate::par;
use crate::synth::{self, Dataset, QuestionKind, TrainingSample, ADVERBS, LETTERS, LEVELS};

/// Answer words a question kind accepts.
pub fn valid_answers(kind: QuestionKind) -> &'static [&'static str] {
    match kind {
        QuestionKind::Mcq => &LETTERS,
        QuestionKind::YesNo => &["yes", "no"],
        QuestionKind::HowWhat => &ADVERBS,
    }
}

/// First generated word that is a valid answer for `kind`.
pub fn extract_answer(generated: &[usize], kind: QuestionKind) -> Option<&'static str> {
    let valid = valid_answers(kind);
    generated
        .iter()
        .map(|&t| synth::word(t))
        .find(|w| valid.contains(w))
}

/// `bad → 1 … excellent → 5`; `None` for any other word.
pub fn score_from_level(word: &str) -> Option<f64> {
    LEVELS
        .iter()
        .position(|l| *l == word)
        .map(|i| (i + 1) as f64)
}

/// Score of the last quality-level word in an explanation.
pub fn predicted_score(generated: &[usize]) -> Option<f64> {
    generated
        .iter()
        .rev()
        .find_map(|&t| score_from_level(synth::word(t)))
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape("correlation", &[x.len()], &[y.len()]));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("{} points", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    Ok(())
}

/// Pearson correlation. Errors if either side is constant.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson on average ranks.
pub fn srocc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    plcc(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub mcq: usize,
    pub yesno: usize,
    pub howwhat: usize,
    pub explanation: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    pub seed: u64,
    pub acc_mcq: f64,
    pub acc_yesno: f64,
    pub acc_howwhat: f64,
    /// `None` when every prediction (or every ground truth) is the same.
    pub srocc: Option<f64>,
    pub plcc: Option<f64>,
    pub expl_ppl: f64,
    /// Explanations without a quality-level word.
    pub dropped: usize,
    pub counts: EvalCounts,
}

/// Longest answer the evaluator lets the model generate.
pub const MAX_ANSWER: usize = 4;
pub const MAX_EXPLANATION: usize = 12;

/// Fraction of `set` answered correctly; an unparseable answer is wrong.
pub fn answer_accuracy(
    model: &QAdaptModel,
    set: &[TrainingSample],
    use_prompt: bool,
) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let hits = par::map(set, |s| {
        let kind = s
            .kind
            .ok_or_else(|| Error::Config("answering sample without a question kind".into()))?;
        let out = model.answer(s.image(), &s.instruction_ids, use_prompt, MAX_ANSWER)?;
        Ok::<_, Error>(extract_answer(&out, kind) == Some(s.gold.as_str()))
    });
    let mut n = 0usize;
    for h in hits {
        n += h? as usize;
    }
    Ok(n as f64 / set.len() as f64)
}

/// `exp` of the token-weighted mean loss over the explanation targets.
pub fn perplexity(model: &QAdaptModel, set: &[TrainingSample], use_prompt: bool) -> Result<f64> {
    let refs: Vec<&TrainingSample> = set.iter().collect();
    Ok(model.lm_loss(&refs, use_prompt)?.exp())
}

/// Greedy explanations scored by their quality level, correlated with the
/// ground-truth scores. Returns `(srocc, plcc, dropped)`.
pub fn quality_correlation(
    model: &QAdaptModel,
    set: &[TrainingSample],
    use_prompt: bool,
) -> Result<(Option<f64>, Option<f64>, usize)> {
    let preds = par::map(set, |s| {
        let out = model.answer(s.image(), &s.instruction_ids, use_prompt, MAX_EXPLANATION)?;
        Ok::<_, Error>(predicted_score(&out))
    });
    let (mut x, mut y, mut dropped) = (Vec::new(), Vec::new(), 0);
    for (s, p) in set.iter().zip(preds) {
        match p? {
            Some(v) => {
                x.push(v);
                y.push(s.record.score);
            }
            None => dropped += 1,
        }
    }
    let defined = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedCorrelation(_)) => Ok(None),
        Err(e) => Err(e),
    };
    Ok((defined(srocc(&x, &y))?, defined(plcc(&x, &y))?, dropped))
}

pub fn evaluate(
    model: &QAdaptModel,
    data: &Dataset,
    use_prompt: bool,
    strategy: &str,
    seed: u64,
) -> Result<EvalReport> {
    let (srocc, plcc, dropped) = quality_correlation(model, &data.eval_explanation, use_prompt)?;
    Ok(EvalReport {
        strategy: strategy.to_string(),
        seed,
        acc_mcq: answer_accuracy(model, &data.eval_mcq, use_prompt)?,
        acc_yesno: answer_accuracy(model, &data.eval_yesno, use_prompt)?,
        acc_howwhat: answer_accuracy(model, &data.eval_howwhat, use_prompt)?,
        srocc,
        plcc,
        expl_ppl: perplexity(model, &data.eval_explanation, use_prompt)?,
        dropped,
        counts: EvalCounts {
            mcq: data.eval_mcq.len(),
            yesno: data.eval_yesno.len(),
            howwhat: data.eval_howwhat.len(),
            explanation: data.eval_explanation.len(),
        },
    })
}

#[cfg(test)]
mod tests;
