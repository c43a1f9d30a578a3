use leafaug::modeleval::{
    confusion, loss_and_gradient, macro_metrics, topk_accuracy, ConfusionMatrix, ScoreVector,
};
use leafaug::{ClassLabel, SoftLabel};
use proptest::prelude::*;

/// Expands the matrix into individual (truth, prediction) pairs and counts.
fn oracle(cm: &ConfusionMatrix) -> (f64, f64, f64, f64) {
    let pairs: Vec<(usize, usize)> = (0..5)
        .flat_map(|t| (0..5).flat_map(move |p| std::iter::repeat_n((t, p), cm.0[t][p])))
        .collect();
    let (mut ps, mut rs, mut fs) = (0.0, 0.0, 0.0);
    for k in 0..5 {
        let tp = pairs.iter().filter(|&&(t, p)| t == k && p == k).count() as f64;
        let fp = pairs.iter().filter(|&&(t, p)| t != k && p == k).count() as f64;
        let fn_ = pairs.iter().filter(|&&(t, p)| t == k && p != k).count() as f64;
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        ps += p;
        rs += r;
        fs += f;
    }
    let acc = pairs.iter().filter(|(t, p)| t == p).count() as f64 / pairs.len() as f64;
    (acc, ps / 5.0, rs / 5.0, fs / 5.0)
}

fn matrix() -> impl Strategy<Value = ConfusionMatrix> {
    prop::array::uniform5(prop::array::uniform5(0usize..6))
        .prop_filter("non-empty", |m| m.iter().flatten().sum::<usize>() > 0)
        .prop_map(ConfusionMatrix)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn macro_metrics_match_oracle(cm in matrix()) {
        let m = macro_metrics(&cm).unwrap();
        let (acc, p, r, f) = oracle(&cm);
        prop_assert!((m.accuracy - acc).abs() < 1e-12);
        prop_assert!((m.macro_precision - p).abs() < 1e-12);
        prop_assert!((m.macro_recall - r).abs() < 1e-12);
        prop_assert!((m.macro_f1 - f).abs() < 1e-12);
    }

    #[test]
    fn topk_properties(
        raw in prop::collection::vec((prop::array::uniform5(0u8..4), 0usize..5), 1..30)
    ) {
        let scores: Vec<ScoreVector> = raw.iter().map(|(s, _)| ScoreVector(s.map(f64::from))).collect();
        let truths: Vec<ClassLabel> = raw.iter().map(|&(_, t)| ClassLabel::ALL[t]).collect();
        let tops: Vec<f64> = (1..=5).map(|k| topk_accuracy(&scores, &truths, k).unwrap()).collect();
        prop_assert!(tops.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(tops[4], 100.0);
        let preds: Vec<ClassLabel> = scores.iter().map(ScoreVector::argmax).collect();
        let acc = macro_metrics(&confusion(&preds, &truths).unwrap()).unwrap().accuracy;
        prop_assert!((tops[0] - 100.0 * acc).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences(
        w in prop::collection::vec(-1.0f64..1.0, 4 * 5),
        xs in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 6),
        ys in prop::collection::vec(prop::array::uniform5(0.01f64..1.0), 6),
    ) {
        let ys: Vec<SoftLabel> = ys
            .iter()
            .map(|v| {
                let s: f64 = v.iter().sum();
                SoftLabel::new(v.map(|p| p / s)).unwrap()
            })
            .collect();
        let (_, grad) = loss_and_gradient(&w, &xs, &ys);
        let h = 1e-5;
        for k in 0..w.len() {
            let (mut up, mut down) = (w.clone(), w.clone());
            up[k] += h;
            down[k] -= h;
            let numeric = (loss_and_gradient(&up, &xs, &ys).0 - loss_and_gradient(&down, &xs, &ys).0) / (2.0 * h);
            let rel = (grad[k] - numeric).abs() / grad[k].abs().max(numeric.abs()).max(1e-8);
            prop_assert!(rel < 1e-4, "weight {}: analytic {} numeric {}", k, grad[k], numeric);
        }
    }
}
