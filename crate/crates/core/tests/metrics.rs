use moecl::metrics::{avg_accuracy, backward_transfer, forward_transfer, mean_std};
use moecl::report::{build_report, RunSummary};
use moecl::{AccuracyMatrix, Error};
use proptest::prelude::*;

mod common;
use common::metric_cases as cases;

#[test]
fn metric_oracles() {
    for (i, c) in cases().into_iter().enumerate() {
        let m = AccuracyMatrix::from_rows(c.order, c.rows).unwrap();
        assert_eq!(avg_accuracy(&m).unwrap(), c.acc, "case {i} acc");
        assert_eq!(backward_transfer(&m).unwrap(), c.bwt, "case {i} bwt");
        assert_eq!(forward_transfer(&m, &c.chance).unwrap(), c.fwt, "case {i} fwt");
    }
}

#[test]
fn worked_example_matches_decimal_values() {
    let c = &cases()[0];
    assert!((c.acc - 0.75).abs() < 1e-15);
    assert!((c.bwt + 0.2).abs() < 1e-15);
    assert!((c.fwt + 0.1).abs() < 1e-15);
}

#[test]
fn metric_errors() {
    let single = AccuracyMatrix::from_rows(vec![0], vec![vec![0.5]]).unwrap();
    assert_eq!(avg_accuracy(&single).unwrap(), 0.5);
    assert!(matches!(backward_transfer(&single), Err(Error::Contract(_))));
    let mut partial = AccuracyMatrix::new(vec![0, 1]);
    partial.push_row(vec![0.5, 0.5]).unwrap();
    assert!(avg_accuracy(&partial).is_err());
    assert!(partial.push_row(vec![0.5]).is_err());
    let full = AccuracyMatrix::from_rows(vec![0, 1], vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
    assert!(matches!(forward_transfer(&full, &[0.5]), Err(Error::Contract(_))));
}

#[test]
fn mean_std_examples() {
    assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    let (m, s) = mean_std(&[0.6, 0.6, 0.6]);
    assert!((m - 0.6).abs() < 1e-15 && s < 1e-15);
    let (m, s) = mean_std(&[0.62, 0.64]);
    assert!((m - 0.63).abs() < 1e-15);
    assert!((s - 0.01).abs() < 1e-15);
}

fn summary(method: &str, order: Vec<usize>, rows: Vec<Vec<f64>>) -> RunSummary {
    RunSummary {
        method: method.into(),
        task_names: vec!["a".into(), "b".into(), "c".into()],
        chance: vec![0.5, 0.25, 1.0 / 3.0],
        matrix: AccuracyMatrix::from_rows(order, rows).unwrap(),
    }
}

#[test]
fn report_avg_rows_match_recomputation() {
    let runs = vec![
        summary("moe-cl", vec![1, 2, 0], vec![vec![0.4, 0.9, 0.3], vec![0.45, 0.8, 0.7], vec![0.9, 0.7, 0.6]]),
        summary("moe-cl", vec![0, 1, 2], vec![vec![0.8, 0.3, 0.2], vec![0.7, 0.9, 0.4], vec![0.6, 0.85, 0.8]]),
        summary("moe-cl", vec![2, 0, 1], vec![vec![0.5, 0.2, 0.9], vec![0.95, 0.3, 0.8], vec![0.9, 0.8, 0.75]]),
        summary("sequential-ft", vec![0, 1, 2], vec![vec![0.8, 0.3, 0.2], vec![0.5, 0.9, 0.4], vec![0.4, 0.6, 0.8]]),
    ];
    let report = build_report(&runs).unwrap();
    assert_eq!(report.methods.len(), 2);
    let moe = &report.methods[0];
    assert_eq!(moe.method, "moe-cl");
    assert_eq!(
        moe.orders.iter().map(|o| o.order.clone()).collect::<Vec<_>>(),
        vec![vec![0, 1, 2], vec![1, 2, 0], vec![2, 0, 1]]
    );

    // Hand recomputation per order, written out element by element.
    let acc = [(0.6 + 0.85 + 0.8) / 3.0, (0.9 + 0.7 + 0.6) / 3.0, (0.9 + 0.8 + 0.75) / 3.0];
    let bwt = [
        ((0.6 - 0.8) + (0.85 - 0.9)) / 2.0,
        ((0.7 - 0.9) + (0.6 - 0.7)) / 2.0,
        ((0.75 - 0.9) + (0.9 - 0.95)) / 2.0,
    ];
    let fwt = [
        ((0.3 - 0.25) + (0.4 - 1.0 / 3.0)) / 2.0,
        ((0.3 - 1.0 / 3.0) + (0.45 - 0.5)) / 2.0,
        ((0.5 - 0.5) + (0.3 - 0.25)) / 2.0,
    ];
    let pop = |v: [f64; 3]| {
        let m = (v[0] + v[1] + v[2]) / 3.0;
        let var = ((v[0] - m).powi(2) + (v[1] - m).powi(2) + (v[2] - m).powi(2)) / 3.0;
        (m, var.sqrt())
    };
    for (got, want) in [(moe.acc, pop(acc)), (moe.bwt, pop(bwt)), (moe.fwt, pop(fwt))] {
        assert!((got.mean - want.0).abs() <= 1e-12, "{got:?} {want:?}");
        assert!((got.std - want.1).abs() <= 1e-12, "{got:?} {want:?}");
    }
    let seq = &report.methods[1];
    assert_eq!(seq.acc.std, 0.0);

    let text = report.to_text();
    assert_eq!(text.lines().filter(|l| l.contains("Avg")).count(), 2);
    assert!(text.contains(&format!("{:.4} ± {:.4}", pop(acc).0, pop(acc).1)));
    let back: moecl::report::Report = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(back, report);
}

#[test]
fn report_rejects_mismatched_task_sets() {
    let a = summary("x", vec![0, 1, 2], vec![vec![0.5; 3]; 3]);
    let mut b = a.clone();
    b.task_names[0] = "z".into();
    assert!(matches!(build_report(&[a, b]), Err(Error::Contract(_))));
    assert!(build_report(&[]).is_err());
}

proptest! {
    #[test]
    fn mean_std_is_permutation_invariant(v in prop::collection::vec(0.0f64..1.0, 1..8), seed in 0u64..1000) {
        let mut w = v.clone();
        moecl::Rng::new(seed).shuffle(&mut w);
        let (m1, s1) = mean_std(&v);
        let (m2, s2) = mean_std(&w);
        prop_assert!((m1 - m2).abs() <= 1e-12);
        prop_assert!((s1 - s2).abs() <= 1e-12);
        prop_assert!(s1 >= 0.0);
    }

    #[test]
    fn metrics_stay_in_range(cells in prop::collection::vec(0.0f64..=1.0, 9)) {
        let rows: Vec<Vec<f64>> = cells.chunks(3).map(|c| c.to_vec()).collect();
        let m = AccuracyMatrix::from_rows(vec![2, 0, 1], rows).unwrap();
        let acc = avg_accuracy(&m).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert!((-1.0..=1.0).contains(&backward_transfer(&m).unwrap()));
    }
}
