use std::collections::BTreeMap;

use flowlab_core::metrics::*;
use flowlab_core::synthdata::{AnnotationOptions, AnnotationTable};
use flowlab_core::Error;
use proptest::prelude::*;

fn palette() -> Vec<String> {
    AnnotationOptions::default().palette
}

fn annotations(rows: &[(usize, &str, usize)]) -> AnnotationTable {
    let mut t = AnnotationTable::new(palette());
    for &(i, c, g) in rows {
        t.insert(i, c.to_string(), g).unwrap();
    }
    t
}

fn pred(index: usize, true_class: usize, pred_class: usize) -> Prediction {
    Prediction {
        index,
        true_class,
        pred_class,
    }
}

/// Direct evaluation of the weighted standard deviation in plain loops.
fn oracle_wstd(s: &[f64], w: &[f64]) -> f64 {
    let mut sw = 0.0;
    let mut sws = 0.0;
    for i in 0..s.len() {
        sw += w[i];
        sws += w[i] * s[i];
    }
    let mean = sws / sw;
    let mut num = 0.0;
    for i in 0..s.len() {
        num += w[i] * (s[i] - mean).powi(2);
    }
    (num / (sw - 1.0)).sqrt()
}

/// Table with `cells[c] = [(group, count, correct)]`.
fn table(cells: &[&[(usize, usize, usize)]]) -> SubgroupAccuracyTable {
    let classes = (0..cells.len()).map(|c| c.to_string()).collect();
    let mut t = SubgroupAccuracyTable::new(classes, palette());
    for (c, row) in cells.iter().enumerate() {
        for &(g, n, k) in row.iter() {
            t.set(c, g, n, k).unwrap();
        }
    }
    t
}

#[test]
fn all_correct_predictions_fill_cells_with_one() {
    let ann = annotations(&[(0, "0", 0), (1, "0", 1), (2, "1", 0), (3, "1", 2)]);
    let preds = [pred(0, 0, 0), pred(1, 0, 0), pred(2, 1, 1), pred(3, 1, 1)];
    let t = subgroup_accuracies(&preds, &ann).unwrap();
    for c in 0..2 {
        for (_, s, _) in t.populated(c) {
            assert_eq!(s, 1.0);
        }
    }
    assert_eq!(t.accuracy(0, 2), None);
    assert_eq!(t.total_count(), 4);
}

#[test]
fn hand_counted_cell() {
    // cat = class 0, dog = class 1; both examples are (cat, blue)
    let ann = annotations(&[(0, "cat", 0), (1, "cat", 0)]);
    let t = subgroup_accuracies(&[pred(0, 0, 0), pred(1, 0, 1)], &ann).unwrap();
    let cat = t.classes().iter().position(|c| c == "cat").unwrap();
    assert_eq!(t.cell(cat, 0).count, 2);
    assert_eq!(t.accuracy(cat, 0), Some(0.5));
}

#[test]
fn missing_indices_are_listed() {
    let ann = annotations(&[(0, "0", 0)]);
    let err = subgroup_accuracies(&[pred(0, 0, 0), pred(7, 0, 0), pred(9, 1, 1)], &ann).unwrap_err();
    match err {
        Error::Join(ix) => assert_eq!(ix, vec![7, 9]),
        e => panic!("{e}"),
    }
}

#[test]
fn weighted_std_reference_cases() {
    assert_eq!(weighted_std(&[0.7, 0.7, 0.7], &[3.0, 1.0, 5.0]).unwrap(), 0.0);
    assert!((weighted_std(&[0.9, 0.5], &[3.0, 1.0]).unwrap() - 0.2).abs() < 1e-12);
    assert!((weighted_std(&[0.5, 0.9], &[1.0, 3.0]).unwrap() - 0.2).abs() < 1e-12);
    assert!(matches!(weighted_std(&[0.5], &[1.0]), Err(Error::UndefinedVariance(_))));
    assert!(matches!(weighted_std(&[0.5, 0.2], &[0.5, 0.5]), Err(Error::UndefinedVariance(_))));
    assert!(matches!(weighted_std(&[0.5, 0.2], &[2.0]), Err(Error::InvalidArgument(_))));
    assert!(matches!(weighted_std(&[0.5, 0.2], &[2.0, 0.0]), Err(Error::InvalidArgument(_))));
}

#[test]
fn macro_std_reference_cases() {
    assert!((macro_std(&[0.2, 0.0]).unwrap() - 0.141421).abs() < 1e-6);
    assert_eq!(macro_std(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
    let base = macro_std(&[0.1, 0.3, 0.2]).unwrap();
    let scaled = macro_std(&[0.25, 0.75, 0.5]).unwrap();
    assert!((scaled - 2.5 * base).abs() < 1e-12);
    assert!(macro_std(&[]).is_err());
}

#[test]
fn randomized_instances_match_oracle() {
    use rand::Rng;
    let mut rng = flowlab_core::seed::stream(1, "metric-oracle", 0);
    for _ in 0..200 {
        let k = rng.random_range(2..=12);
        let s: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(1..=100) as f64).collect();
        let got = weighted_std(&s, &w).unwrap();
        assert!((got - oracle_wstd(&s, &w)).abs() < 1e-9);
        let sig: Vec<f64> = s.iter().map(|v| v * 0.3).collect();
        let direct = (sig.iter().map(|v| v * v).sum::<f64>() / k as f64).sqrt();
        assert!((macro_std(&sig).unwrap() - direct).abs() < 1e-9);
    }
}

#[test]
fn overall_weighted_std_cases() {
    let one = table(&[&[(0, 4, 4), (1, 4, 2), (2, 2, 1)]]);
    assert_eq!(overall_weighted_std(&one).unwrap(), class_weighted_std(&one, 0).unwrap());

    let flat = table(&[&[(0, 4, 2), (1, 2, 1)], &[(3, 6, 3)]]);
    assert_eq!(overall_weighted_std(&flat).unwrap(), 0.0);

    let three = table(&[&[(0, 4, 3), (1, 5, 1)], &[(2, 3, 3)]]);
    let direct = weighted_std(&[0.75, 0.2, 1.0], &[4.0, 5.0, 3.0]).unwrap();
    assert!((overall_weighted_std(&three).unwrap() - direct).abs() < 1e-15);
}

#[test]
fn worst_subgroup_cases() {
    let t = table(&[&[(0, 3, 3), (1, 1, 0)], &[(2, 5, 4)], &[(0, 2, 1), (3, 4, 2), (5, 2, 2)]]);
    let w = worst_subgroup(&t);
    assert_eq!(w[0].accuracy, 0.0);
    assert_eq!(w[0].gap, 0.75);
    assert_eq!(w[0].group, "green");
    assert_eq!((w[1].accuracy, w[1].gap), (0.8, 0.0));
    // groups 0 and 3 tie at 0.5; the lower index wins
    assert_eq!(w[2].group_index, 0);
}

#[test]
fn correlation_cases() {
    let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
    let double: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
    let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
    assert!((correlation(&xs, &double, CorrelationKind::Pearson).unwrap() - 1.0).abs() < 1e-12);
    assert!((correlation(&xs, &neg, CorrelationKind::Pearson).unwrap() + 1.0).abs() < 1e-12);

    let ys = [2.0, 1.0, 4.0, 3.0, 5.0];
    let (mx, my) = (3.0, 3.0);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / 4.0;
    let sx = (xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>() / 4.0).sqrt();
    let sy = (ys.iter().map(|y| (y - my) * (y - my)).sum::<f64>() / 4.0).sqrt();
    let r = correlation(&xs, &ys, CorrelationKind::Pearson).unwrap();
    assert!((r - cov / (sx * sy)).abs() < 1e-12);
    assert!((r - 0.8).abs() < 1e-12);

    // ranks of ys equal ys, so Spearman agrees with Pearson here
    assert!((correlation(&xs, &ys, CorrelationKind::Spearman).unwrap() - 0.8).abs() < 1e-12);
    let cubed: Vec<f64> = xs.iter().map(|x| x * x * x).collect();
    assert!((correlation(&xs, &cubed, CorrelationKind::Spearman).unwrap() - 1.0).abs() < 1e-12);

    assert!(matches!(
        correlation(&xs, &[1.0; 5], CorrelationKind::Pearson),
        Err(Error::UndefinedCorrelation(_))
    ));
    assert!(correlation(&xs[..2], &ys[..2], CorrelationKind::Pearson).is_err());
}

#[test]
fn regroup_pools_classes() {
    let t = table(&[&[(0, 4, 4), (1, 4, 2)], &[(0, 4, 2), (1, 4, 4)], &[(0, 2, 2)], &[(1, 6, 0)]]);
    let identity: BTreeMap<String, String> = (0..4).map(|c| (c.to_string(), c.to_string())).collect();
    assert_eq!(t.regroup(&identity).unwrap(), t);

    let map: BTreeMap<String, String> = [("0", "vehicle"), ("1", "vehicle"), ("2", "animal"), ("3", "animal")]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
    let r = t.regroup(&map).unwrap();
    assert_eq!(r.classes(), ["vehicle", "animal"]);
    assert_eq!(r.cell(0, 0).count, 8);
    assert_eq!(r.accuracy(0, 0), Some(0.75));

    // vehicle: (0.75, 0.75) -> 0; animal: (1.0 w=2, 0.0 w=6), mean 0.25, var (2*0.5625 + 6*0.0625)/7
    let animal = ((2.0 * 0.5625 + 6.0 * 0.0625) / 7.0f64).sqrt();
    let report = DiscrepancyReport::from_table(
        &t,
        &EvalOptions {
            grouping: Some(map.clone()),
            ..Default::default()
        },
    )
    .unwrap();
    assert!((report.macro_std - (animal * animal / 2.0).sqrt()).abs() < 1e-12);

    let mut partial = map;
    partial.remove("3");
    assert!(t.regroup(&partial).is_err());
}

#[test]
fn report_fields_and_others_flag() {
    let others = palette().iter().position(|g| g == "others").unwrap();
    let t = table(&[&[(0, 4, 4), (others, 4, 0)], &[(0, 4, 2), (1, 4, 2)]]);
    let with = DiscrepancyReport::from_table(&t, &EvalOptions::default()).unwrap();
    let without = DiscrepancyReport::from_table(
        &t,
        &EvalOptions {
            exclude_others: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(with.per_class_sigma_w[0].sigma_w > 0.0);
    assert_eq!(without.per_class_sigma_w[0].sigma_w, 0.0);
    assert!((with.total_accuracy - 0.5).abs() < 1e-12);
    assert!((without.total_accuracy - 8.0 / 12.0).abs() < 1e-12);

    let json: serde_json::Value = serde_json::to_value(&with).unwrap();
    for key in ["per_class_sigma_w", "macro_std", "overall_weighted_std", "total_accuracy", "worst_subgroup"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    let mut csv = Vec::new();
    with.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("class,group,count,correct,accuracy\n0,blue,4,4,1.000000\n"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn predictions_csv_parses() {
    let rows = read_predictions("index,true_class,pred_class\n0,1,1\n 3 , 2 , 0 \n".as_bytes()).unwrap();
    assert_eq!(rows, vec![pred(0, 1, 1), pred(3, 2, 0)]);
    assert!(matches!(
        read_predictions("index,true_class,pred_class\n0,x,1\n".as_bytes()),
        Err(Error::Parse { row: 1, .. })
    ));
}

fn cells() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0f64..=1.0, 1u32..100), 2..12)
        .prop_map(|v| v.into_iter().map(|(s, w)| (s, w as f64)).collect())
}

proptest! {
    #[test]
    fn zero_std_iff_equal(v in cells(), s0 in 0.0f64..=1.0) {
        let w: Vec<f64> = v.iter().map(|c| c.1).collect();
        prop_assert_eq!(weighted_std(&vec![s0; w.len()], &w).unwrap(), 0.0);
        let s: Vec<f64> = v.iter().map(|c| c.0).collect();
        let all_equal = s.iter().all(|&x| x == s[0]);
        prop_assert_eq!(weighted_std(&s, &w).unwrap() == 0.0, all_equal);
    }

    #[test]
    fn unit_weights_give_sample_std(s in prop::collection::vec(0.0f64..=1.0, 2..12)) {
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let sample = (s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        prop_assert!((weighted_std(&s, &vec![1.0; s.len()]).unwrap() - sample).abs() < 1e-12);
    }

    #[test]
    fn permutation_invariant(v in cells(), rot in 0usize..12) {
        let mut p = v.clone();
        p.rotate_left(rot % v.len());
        p.reverse();
        let split = |v: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) { v.iter().copied().unzip() };
        let (s, w) = split(&v);
        let (ps, pw) = split(&p);
        prop_assert!((weighted_std(&s, &w).unwrap() - weighted_std(&ps, &pw).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn macro_std_between_extremes(sig in prop::collection::vec(0.0f64..1.0, 1..10)) {
        let m = macro_std(&sig).unwrap();
        let lo = sig.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = sig.iter().copied().fold(0.0, f64::max);
        prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
        prop_assert_eq!(m == 0.0, sig.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn affine_correlation_is_sign(xs in prop::collection::vec(-10.0f64..10.0, 3..20), a in -5.0f64..5.0, b in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0]) {
        let spread = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) - xs.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let ys: Vec<f64> = xs.iter().map(|x| a + b * x).collect();
        for kind in [CorrelationKind::Pearson, CorrelationKind::Spearman] {
            prop_assert!((correlation(&xs, &ys, kind).unwrap() - b.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn report_invariant_to_row_order(seed in 0u64..500) {
        use rand::{seq::SliceRandom, Rng};
        let mut rng = flowlab_core::seed::stream(seed, "rows", 0);
        let mut ann = AnnotationTable::new(palette());
        let mut preds = Vec::new();
        for i in 0..60 {
            let c = rng.random_range(0..3);
            ann.insert(i, c.to_string(), rng.random_range(0..4)).unwrap();
            preds.push(pred(i, c, if rng.random::<f64>() < 0.7 { c } else { (c + 1) % 3 }));
        }
        let a = DiscrepancyReport::from_table(&subgroup_accuracies(&preds, &ann).unwrap(), &EvalOptions::default());
        preds.shuffle(&mut rng);
        let b = DiscrepancyReport::from_table(&subgroup_accuracies(&preds, &ann).unwrap(), &EvalOptions::default());
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }
}
