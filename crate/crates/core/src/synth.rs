//! Procedural explainable-IQA data: distorted 16×16 images with known
//! attribute severities, rendered into two task families through a fixed
//! word vocabulary.
//!
//! * explanation: "describe the quality of this image overall" answered by
//!   every attribute with its severity adverb, then the quality level.
//! * answering: most-severe multiple choice, yes/no and how-severe
//!   questions about one attribute. These never mention the overall score.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{stream, STREAM_DATA};
use crate::tensor::Tensor;

pub const STOP: usize = 0;

pub const VOCAB: [&str; 60] = [
    "<stop>",
    "noise",
    "blur",
    "darkness",
    "contrast",
    "none",
    "slight",
    "moderate",
    "severe",
    "bad",
    "poor",
    "fair",
    "good",
    "excellent",
    "A",
    "B",
    "C",
    "D",
    "yes",
    "no",
    "describe",
    "the",
    "quality",
    "of",
    "this",
    "image",
    "overall",
    "which",
    "attribute",
    "is",
    "most",
    "?",
    "how",
    "what",
    "answer",
    "level",
    "and",
    "with",
    "a",
    "in",
    "picture",
    "rate",
    "please",
    "option",
    "choose",
    "from",
    "tell",
    "me",
    "about",
    "distortion",
    "visible",
    "it",
    "has",
    "score",
    "low",
    "high",
    "detail",
    "sharp",
    "bright",
    "clean",
];

pub fn vocab_size() -> usize {
    VOCAB.len()
}

pub fn word_id(word: &str) -> Option<usize> {
    VOCAB.iter().position(|w| *w == word)
}

pub fn word(id: usize) -> &'static str {
    VOCAB.get(id).copied().unwrap_or("<unk>")
}

/// Space-separated words to ids; every word must be in [`VOCAB`].
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| word_id(w).ok_or_else(|| Error::Config(format!("word `{w}` not in vocabulary"))))
        .collect()
}

pub fn detokenize(ids: &[usize]) -> String {
    ids.iter().map(|&i| word(i)).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attribute {
    Noise,
    Blur,
    Darkness,
    Contrast,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [
        Attribute::Noise,
        Attribute::Blur,
        Attribute::Darkness,
        Attribute::Contrast,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Attribute::Noise => "noise",
            Attribute::Blur => "blur",
            Attribute::Darkness => "darkness",
            Attribute::Contrast => "contrast",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

pub const ADVERBS: [&str; 4] = ["none", "slight", "moderate", "severe"];
pub const LEVELS: [&str; 5] = ["bad", "poor", "fair", "good", "excellent"];
pub const LETTERS: [&str; 4] = ["A", "B", "C", "D"];

/// Severity adverb; bins `[0,.25) [.25,.5) [.5,.75) [.75,1]`.
pub fn adverb(severity: f64) -> &'static str {
    ADVERBS[((severity * 4.0).floor() as usize).min(3)]
}

/// Quality level by uniform binning of the score into fifths.
pub fn level(score: f64) -> &'static str {
    LEVELS[((score * 5.0).floor() as usize).min(4)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeRecord {
    /// Indexed by [`Attribute`] order: noise, blur, darkness, contrast.
    pub severities: [f64; 4],
    pub score: f64,
    pub level: String,
}

impl AttributeRecord {
    pub fn new(severities: [f64; 4]) -> Result<Self> {
        if severities.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Config(format!(
                "severities {severities:?} outside [0, 1]"
            )));
        }
        let score = 1.0 - severities.iter().sum::<f64>() / 4.0;
        Ok(Self {
            severities,
            score,
            level: level(score).to_string(),
        })
    }

    pub fn severity(&self, a: Attribute) -> f64 {
        self.severities[a.index()]
    }

    /// Most severe attribute; ties go to the lexicographically first name.
    pub fn most_severe(&self) -> Attribute {
        let mut best = Attribute::ALL[0];
        for a in Attribute::ALL {
            let (s, b) = (self.severity(a), self.severity(best));
            if s > b || (s == b && a.word() < best.word()) {
                best = a;
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Explanation,
    Answering,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Explanation => "explanation",
            Task::Answering => "answering",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionKind {
    Mcq,
    YesNo,
    HowWhat,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 3] = [
        QuestionKind::Mcq,
        QuestionKind::YesNo,
        QuestionKind::HowWhat,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub seed: u64,
    pub index: u64,
    pub task: Task,
    /// `None` for explanation samples.
    pub kind: Option<QuestionKind>,
    #[serde(skip)]
    pub image: Option<Tensor>,
    pub instruction_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub record: AttributeRecord,
    /// Gold answer word: option letter, yes/no, adverb, or quality level.
    pub gold: String,
    /// For multiple choice, the attribute behind the gold letter.
    pub gold_attribute: Option<Attribute>,
}

impl TrainingSample {
    pub fn image(&self) -> &Tensor {
        self.image.as_ref().expect("sample image present")
    }
}

// ---- images --------------------------------------------------------------

pub const IMAGE_SIDE: usize = 16;

fn base_pattern(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (px, py) = (rng.random_range(0..4usize), rng.random_range(0..4usize));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (c, s) = (angle.cos(), angle.sin());
    let n = IMAGE_SIDE;
    let half = (n - 1) as f64 / 2.0;
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let check = (((x + px) / 2 + (y + py) / 2) % 2) as f64;
            let t = ((x as f64 - half) * c + (y as f64 - half) * s) / (2.0 * half) + 0.5;
            out.push(0.2 + 0.3 * check + 0.4 * t.clamp(0.0, 1.0));
        }
    }
    out
}

fn box_blur(img: &[f64], radius: usize) -> Vec<f64> {
    if radius == 0 {
        return img.to_vec();
    }
    let n = IMAGE_SIDE as isize;
    let r = radius as isize;
    let mut out = vec![0.0; img.len()];
    for y in 0..n {
        for x in 0..n {
            let (mut sum, mut cnt) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if (0..n).contains(&yy) && (0..n).contains(&xx) {
                        sum += img[(yy * n + xx) as usize];
                        cnt += 1.0;
                    }
                }
            }
            out[(y * n + x) as usize] = sum / cnt;
        }
    }
    out
}

/// Renders a `16×16×1` image: checkerboard-plus-gradient base, then additive
/// uniform noise of amplitude `s_noise`, a box blur of fractional radius
/// `2·s_blur`, a pull toward mid-gray by `s_contrast`, dimming by
/// `s_darkness`, and a final clamp to `[0, 1]`.
pub fn render_image(base_seed: u64, severities: &[f64; 4]) -> Result<Tensor> {
    if severities.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::Config(format!(
            "severities {severities:?} outside [0, 1]"
        )));
    }
    let [noise, blur, darkness, contrast] = *severities;
    let mut img = base_pattern(&mut stream(base_seed, 0));
    if noise > 0.0 {
        let mut rng = stream(base_seed, 1);
        for p in &mut img {
            *p += rng.random_range(-noise..=noise);
        }
    }
    if blur > 0.0 {
        let r = 2.0 * blur;
        let (lo, frac) = (r.floor() as usize, r.fract());
        let a = box_blur(&img, lo);
        img = if frac > 0.0 {
            let b = box_blur(&img, lo + 1);
            a.iter()
                .zip(&b)
                .map(|(x, y)| (1.0 - frac) * x + frac * y)
                .collect()
        } else {
            a
        };
    }
    if contrast > 0.0 {
        for p in &mut img {
            *p = 0.5 + (*p - 0.5) * (1.0 - contrast);
        }
    }
    if darkness > 0.0 {
        for p in &mut img {
            *p *= 1.0 - darkness;
        }
    }
    for p in &mut img {
        *p = p.clamp(0.0, 1.0);
    }
    Tensor::new(vec![IMAGE_SIDE, IMAGE_SIDE, 1], img)
}

// ---- samples -------------------------------------------------------------

pub const EXPLANATION_PROMPT: &str = "describe the quality of this image overall";

pub fn make_explanation_sample(record: AttributeRecord, image: Tensor) -> TrainingSample {
    let mut words: Vec<&str> = Vec::with_capacity(11);
    for a in Attribute::ALL {
        words.push(a.word());
        words.push(adverb(record.severity(a)));
    }
    words.extend(["quality", record.level.as_str()]);
    let mut target = tokenize(&words.join(" ")).expect("vocabulary words");
    target.push(STOP);
    TrainingSample {
        seed: 0,
        index: 0,
        task: Task::Explanation,
        kind: None,
        image: Some(image),
        instruction_ids: tokenize(EXPLANATION_PROMPT).expect("vocabulary words"),
        target_ids: target,
        gold: record.level.clone(),
        record,
        gold_attribute: None,
    }
}

/// Builds one answering sample. `option_seed` shuffles the multiple-choice
/// options and picks the attribute asked about in the other two kinds.
pub fn make_answering_sample(
    record: AttributeRecord,
    image: Tensor,
    kind: QuestionKind,
    option_seed: u64,
) -> TrainingSample {
    let mut rng = stream(option_seed, 0);
    let (instruction, answer, gold_attribute) = match kind {
        QuestionKind::Mcq => {
            let mut options = Attribute::ALL;
            options.shuffle(&mut rng);
            let gold = record.most_severe();
            let pos = options
                .iter()
                .position(|&a| a == gold)
                .expect("gold among options");
            let listed: Vec<String> = options
                .iter()
                .zip(LETTERS)
                .map(|(a, l)| format!("{l} {}", a.word()))
                .collect();
            (
                format!("which attribute is most severe ? {}", listed.join(" ")),
                vec![LETTERS[pos], gold.word()],
                Some(gold),
            )
        }
        QuestionKind::YesNo => {
            let a = Attribute::ALL[rng.random_range(0..4)];
            let yes = record.severity(a) >= 0.5;
            (
                format!("is {} severe ?", a.word()),
                vec![if yes { "yes" } else { "no" }],
                None,
            )
        }
        QuestionKind::HowWhat => {
            let a = Attribute::ALL[rng.random_range(0..4)];
            (
                format!("how severe is {} ?", a.word()),
                vec![adverb(record.severity(a))],
                None,
            )
        }
    };
    let mut target = tokenize(&answer.join(" ")).expect("vocabulary words");
    target.push(STOP);
    TrainingSample {
        seed: 0,
        index: 0,
        task: Task::Answering,
        kind: Some(kind),
        image: Some(image),
        instruction_ids: tokenize(&instruction).expect("vocabulary words"),
        target_ids: target,
        gold: answer[0].to_string(),
        record,
        gold_attribute,
    }
}

/// One dominant attribute at U(0.4, 1); the rest at U(0, dominant − 0.2).
fn sample_severities(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let dom = rng.random_range(0..4usize);
    let top = rng.random_range(0.4..1.0);
    let mut s = [0.0; 4];
    for (i, v) in s.iter_mut().enumerate() {
        *v = if i == dom {
            top
        } else {
            rng.random_range(0.0..top - 0.2)
        };
    }
    s
}

/// Which generated stream a sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    EvalMcq,
    EvalExplanation,
    EvalYesNo,
    EvalHowWhat,
}

impl Split {
    fn id(self) -> u64 {
        self as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train_size: usize,
    pub answering_fraction: f64,
    pub eval_mcq: usize,
    pub eval_explanation: usize,
    pub eval_yesno: usize,
    pub eval_howwhat: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_size: 2000,
            answering_fraction: 0.7,
            eval_mcq: 500,
            eval_explanation: 200,
            eval_yesno: 200,
            eval_howwhat: 200,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.answering_fraction) {
            return Err(Error::Config(format!(
                "dataset.answering_fraction = {} outside [0, 1]",
                self.answering_fraction
            )));
        }
        Ok(())
    }
}

const PPM: u64 = 1_000_000;

fn ppm(fraction: f64) -> u64 {
    (fraction * PPM as f64).round() as u64
}

/// Number of answering samples among the first `i` training indices.
fn answering_before(i: u64, fraction_ppm: u64) -> u64 {
    i * fraction_ppm / PPM
}

/// Task and question kind of training index `i`: an even interleave with
/// exactly `⌊size·fraction⌋` answering samples, whose kinds rotate through
/// multiple choice, yes/no, how.
pub fn train_slot(i: u64, answering_fraction: f64) -> (Task, Option<QuestionKind>) {
    let f = ppm(answering_fraction);
    let before = answering_before(i, f);
    if answering_before(i + 1, f) > before {
        (
            Task::Answering,
            Some(QuestionKind::ALL[(before % 3) as usize]),
        )
    } else {
        (Task::Explanation, None)
    }
}

/// Sample `index` of `split`: a pure function of its arguments.
pub fn sample_at(seed: u64, split: Split, index: u64, answering_fraction: f64) -> TrainingSample {
    let mut rng = stream(seed, STREAM_DATA | split.id() << 40 | index);
    let severities = sample_severities(&mut rng);
    let image_seed: u64 = rng.random();
    let option_seed: u64 = rng.random();
    let record = AttributeRecord::new(severities).expect("sampled severities in range");
    let image = render_image(image_seed, &severities).expect("sampled severities in range");
    let (task, kind) = match split {
        Split::Train => train_slot(index, answering_fraction),
        Split::EvalMcq => (Task::Answering, Some(QuestionKind::Mcq)),
        Split::EvalExplanation => (Task::Explanation, None),
        Split::EvalYesNo => (Task::Answering, Some(QuestionKind::YesNo)),
        Split::EvalHowWhat => (Task::Answering, Some(QuestionKind::HowWhat)),
    };
    let mut s = match kind {
        None => make_explanation_sample(record, image),
        Some(k) => make_answering_sample(record, image, k, option_seed),
    };
    s.seed = seed;
    s.index = index;
    debug_assert_eq!(s.task, task);
    s
}

pub fn build_split(
    seed: u64,
    split: Split,
    size: usize,
    answering_fraction: f64,
) -> Vec<TrainingSample> {
    par::map_range(size, |i| {
        sample_at(seed, split, i as u64, answering_fraction)
    })
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<TrainingSample>,
    pub eval_mcq: Vec<TrainingSample>,
    pub eval_explanation: Vec<TrainingSample>,
    pub eval_yesno: Vec<TrainingSample>,
    pub eval_howwhat: Vec<TrainingSample>,
}

pub fn build_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let f = cfg.answering_fraction;
    Ok(Dataset {
        train: build_split(seed, Split::Train, cfg.train_size, f),
        eval_mcq: build_split(seed, Split::EvalMcq, cfg.eval_mcq, f),
        eval_explanation: build_split(seed, Split::EvalExplanation, cfg.eval_explanation, f),
        eval_yesno: build_split(seed, Split::EvalYesNo, cfg.eval_yesno, f),
        eval_howwhat: build_split(seed, Split::EvalHowWhat, cfg.eval_howwhat, f),
    })
}

/// One JSON object per line with the dump fields.
pub fn dump_line(s: &TrainingSample) -> Result<String> {
    let v = serde_json::json!({
        "seed": s.seed,
        "index": s.index,
        "task": s.task,
        "kind": s.kind,
        "instruction_ids": s.instruction_ids,
        "target_ids": s.target_ids,
        "severities": s.record.severities,
        "score": s.record.score,
        "gold": s.gold,
    });
    Ok(serde_json::to_string(&v)?)
}
