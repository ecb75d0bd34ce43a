use proptest::prelude::*;

use super::*;
use crate::model::tests::tiny_config;
use crate::synth::{sample_at, tokenize, Split};

fn ids(text: &str) -> Vec<usize> {
    tokenize(text).unwrap()
}

/// Rank by counting: smaller values plus the mean position among equals.
fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Pearson by the raw-sums formula.
fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

#[test]
fn extraction_rules() {
    assert_eq!(
        extract_answer(&ids("B <stop>"), QuestionKind::Mcq),
        Some("B")
    );
    assert_eq!(
        extract_answer(&ids("the answer is C"), QuestionKind::Mcq),
        Some("C")
    );
    assert_eq!(
        extract_answer(&ids("noise A D"), QuestionKind::Mcq),
        Some("A")
    );
    assert_eq!(extract_answer(&[], QuestionKind::Mcq), None);
    assert_eq!(extract_answer(&ids("yes"), QuestionKind::Mcq), None);
    assert_eq!(
        extract_answer(&ids("A no yes"), QuestionKind::YesNo),
        Some("no")
    );
    assert_eq!(
        extract_answer(&ids("blur moderate"), QuestionKind::HowWhat),
        Some("moderate")
    );
}

#[test]
fn level_scores() {
    assert_eq!(score_from_level("bad"), Some(1.0));
    assert_eq!(score_from_level("fair"), Some(3.0));
    assert_eq!(score_from_level("excellent"), Some(5.0));
    assert_eq!(score_from_level("severe"), None);
    assert_eq!(
        predicted_score(&ids("noise slight quality good <stop>")),
        Some(4.0)
    );
    assert_eq!(predicted_score(&ids("poor quality excellent")), Some(5.0));
    assert_eq!(predicted_score(&ids("noise severe <stop>")), None);
}

#[test]
fn correlation_examples() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    let rev: Vec<f64> = x.iter().rev().copied().collect();
    assert!((srocc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    assert!((srocc(&x, &rev).unwrap() + 1.0).abs() < 1e-12);
    let affine: Vec<f64> = x.iter().map(|v| 3.0 * v + 2.0).collect();
    assert!((plcc(&x, &affine).unwrap() - 1.0).abs() < 1e-12);
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    assert!((plcc(&x, &neg).unwrap() + 1.0).abs() < 1e-12);

    // ranks x = [1, 2.5, 2.5, 4], y = [1, 3, 2, 4]
    let (a, b) = ([1.0, 2.0, 2.0, 3.0], [1.0, 3.0, 2.0, 4.0]);
    assert_eq!(average_ranks(&a), vec![1.0, 2.5, 2.5, 4.0]);
    let want = brute_pearson(&[1.0, 2.5, 2.5, 4.0], &[1.0, 3.0, 2.0, 4.0]);
    assert!((srocc(&a, &b).unwrap() - want).abs() < 1e-12);
    assert!((want - 0.9486832980505138).abs() < 1e-12);

    let p = [0.3, -1.2, 2.5, 0.9, 1.1, -0.4];
    let q = [1.0, 0.2, 3.1, 0.5, 2.2, -0.7];
    assert!((plcc(&p, &q).unwrap() - brute_pearson(&p, &q)).abs() < 1e-12);
}

#[test]
fn correlation_errors() {
    assert!(matches!(
        srocc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
        Err(Error::UndefinedCorrelation(_))
    ));
    assert!(matches!(
        plcc(&[1.0, 2.0], &[4.0, 4.0]),
        Err(Error::UndefinedCorrelation(_))
    ));
    assert!(matches!(
        plcc(&[1.0], &[4.0]),
        Err(Error::UndefinedCorrelation(_))
    ));
    assert!(matches!(
        plcc(&[1.0, 2.0], &[4.0]),
        Err(Error::Shape { .. })
    ));
}

fn tied_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0i32..5).prop_map(|v| v as f64 * 0.5), n)
}

fn pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..=8).prop_flat_map(|n| (tied_vec(n), tied_vec(n)))
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&a| a == v[0])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn correlations_match_brute_force((x, y) in pairs()) {
        if is_constant(&x) || is_constant(&y) {
            prop_assert!(srocc(&x, &y).is_err());
            prop_assert!(plcc(&x, &y).is_err());
        } else {
            prop_assert_eq!(average_ranks(&x), brute_ranks(&x));
            let s = brute_pearson(&brute_ranks(&x), &brute_ranks(&y));
            prop_assert!((srocc(&x, &y).unwrap() - s).abs() < 1e-9);
            prop_assert!((plcc(&x, &y).unwrap() - brute_pearson(&x, &y)).abs() < 1e-9);
        }
    }

    #[test]
    fn srocc_monotone_invariance(x in prop::collection::vec(-3.0f64..3.0, 3..12), y in prop::collection::vec(-3.0f64..3.0, 12)) {
        let y = &y[..x.len()];
        prop_assume!(!is_constant(&x) && !is_constant(y));
        let base = srocc(&x, y).unwrap();
        let cubed: Vec<f64> = x.iter().map(|v| v * v * v).collect();
        let expd: Vec<f64> = y.iter().map(|v| v.exp()).collect();
        prop_assert!((srocc(&cubed, y).unwrap() - base).abs() < 1e-12);
        prop_assert!((srocc(&x, &expd).unwrap() - base).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&base));
    }

    #[test]
    fn plcc_affine_invariance(x in prop::collection::vec(-3.0f64..3.0, 3..12), y in prop::collection::vec(-3.0f64..3.0, 12), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let y = &y[..x.len()];
        prop_assume!(!is_constant(&x) && !is_constant(y));
        let base = plcc(&x, y).unwrap();
        let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let ay: Vec<f64> = y.iter().map(|v| a * v - b).collect();
        prop_assert!((plcc(&ax, y).unwrap() - base).abs() < 1e-9);
        prop_assert!((plcc(&x, &ay).unwrap() - base).abs() < 1e-9);
    }
}

fn small_dataset() -> Dataset {
    let set = |split, n: u64| (0..n).map(|i| sample_at(4, split, i, 0.7)).collect();
    Dataset {
        train: Vec::new(),
        eval_mcq: set(Split::EvalMcq, 6),
        eval_explanation: set(Split::EvalExplanation, 4),
        eval_yesno: set(Split::EvalYesNo, 3),
        eval_howwhat: set(Split::EvalHowWhat, 3),
    }
}

#[test]
fn evaluation_report_shape_and_determinism() {
    let model = QAdaptModel::new(tiny_config(), 2, false).unwrap();
    let data = small_dataset();
    let a = evaluate(&model, &data, false, "untrained", 2).unwrap();
    let b = evaluate(&model, &data, false, "untrained", 2).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    assert_eq!(
        a.counts,
        EvalCounts {
            mcq: 6,
            yesno: 3,
            howwhat: 3,
            explanation: 4
        }
    );
    for acc in [a.acc_mcq, a.acc_yesno, a.acc_howwhat] {
        assert!((0.0..=1.0).contains(&acc));
    }
    for c in [a.srocc, a.plcc].into_iter().flatten() {
        assert!((-1.0..=1.0).contains(&c));
    }
    assert!(a.expl_ppl > 1.0 && a.expl_ppl.is_finite());
    assert!(a.dropped <= 4);
    let loss = model
        .lm_loss(&data.eval_explanation.iter().collect::<Vec<_>>(), false)
        .unwrap();
    assert!((a.expl_ppl.ln() - loss).abs() < 1e-12);
}

#[test]
fn forced_answer_scores_by_gold() {
    // A huge head bias on one letter makes the model answer it every time.
    let mut model = QAdaptModel::new(tiny_config(), 2, false).unwrap();
    let data = small_dataset();
    let c = synth::word_id("C").unwrap();
    let bias = model.store.id("decoder.head.bias").unwrap();
    let mut b = model.store.value(bias).clone();
    b.data_mut()[c] = 1e3;
    model.store.set_value(bias, b).unwrap();
    let acc = answer_accuracy(&model, &data.eval_mcq, false).unwrap();
    let want = data.eval_mcq.iter().filter(|s| s.gold == "C").count() as f64 / 6.0;
    assert_eq!(acc, want);
    assert_eq!(
        answer_accuracy(&model, &data.eval_yesno, false).unwrap(),
        0.0
    );
    let (s, p, dropped) = quality_correlation(&model, &data.eval_explanation, false).unwrap();
    assert_eq!((s, p, dropped), (None, None, 4));
}
