use super::*;
use rand::Rng;

/// O(n^2) pairwise oracle, exact integer counting like the production path.
fn auc_brute(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins: u64 = 0;
    let mut ties: u64 = 0;
    let mut pairs: u64 = 0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1;
                if scores[i] > scores[j] {
                    wins += 1;
                } else if scores[i] == scores[j] {
                    ties += 1;
                }
            }
        }
    }
    (2 * wins + ties) as f64 / (2 * pairs) as f64
}

#[test]
fn auc_hand_example() {
    let scores = [0.1, 0.4, 0.35, 0.8];
    let labels = [false, false, true, true];
    assert_eq!(roc_auc(&scores, &labels).unwrap(), 0.75);
}

#[test]
fn auc_tied_scores_count_half() {
    assert_eq!(roc_auc(&[1.0, 1.0], &[true, false]).unwrap(), 0.5);
    // one win, one tie, one loss over three negatives
    let scores = [0.5, 0.9, 0.5, 0.1];
    let labels = [true, false, false, false];
    assert_eq!(roc_auc(&scores, &labels).unwrap(), 0.5);
}

#[test]
fn auc_perfect_and_reversed() {
    let scores = [0.9, 0.8, 0.2, 0.1];
    assert_eq!(roc_auc(&scores, &[true, true, false, false]).unwrap(), 1.0);
    assert_eq!(roc_auc(&scores, &[false, false, true, true]).unwrap(), 0.0);
}

#[test]
fn auc_matches_pairwise_brute_force_exactly() {
    let mut rng = crate::rng::stream(11, "auc-test");
    for _ in 0..5 {
        let n = 200;
        // coarse grid forces plenty of ties
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..20) as f64 / 20.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        if !labels.contains(&true) || !labels.contains(&false) {
            continue;
        }
        let fast = roc_auc(&scores, &labels).unwrap();
        assert_eq!(fast, auc_brute(&scores, &labels));
    }
}

#[test]
fn auc_single_class_is_undefined() {
    let err = roc_auc(&[0.1, 0.2], &[true, true]).unwrap_err();
    assert!(matches!(err, Error::UndefinedMetric(_)));
}

#[test]
fn bootstrap_ci_contains_point_and_is_deterministic() {
    let mut rng = crate::rng::stream(7, "ci-test");
    let scores: Vec<f64> = (0..120).map(|_| rng.gen::<f64>()).collect();
    let labels: Vec<bool> = scores.iter().map(|&s| rng.gen_bool(0.2 + 0.6 * s)).collect();
    let point = roc_auc(&scores, &labels).unwrap();
    let (lo, hi) = auc_bootstrap_ci(&scores, &labels, 500, 0.95, 42).unwrap();
    assert!(lo <= point && point <= hi, "({lo}, {hi}) vs {point}");
    assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
    let again = auc_bootstrap_ci(&scores, &labels, 500, 0.95, 42).unwrap();
    assert_eq!((lo, hi), again);
}

#[test]
fn bootstrap_ci_degenerate_separation_still_contains_point() {
    let scores = [0.9, 0.8, 0.7, 0.2, 0.1, 0.05];
    let labels = [true, true, true, false, false, false];
    let (lo, hi) = auc_bootstrap_ci(&scores, &labels, 200, 0.95, 3).unwrap();
    assert!(lo <= 1.0 && hi >= 1.0);
}

#[test]
fn confusion_metrics_hand_counts() {
    // tp=2, fp=1, fn=1, tn=2
    let assigned = [1, 1, 1, 0, 0, 0];
    let labels = [1, 1, 0, 1, 0, 0];
    let cm = confusion_metrics(&assigned, &labels, 1);
    assert_eq!(cm.sensitivity, Some(2.0 / 3.0));
    assert_eq!(cm.specificity, Some(2.0 / 3.0));
    assert_eq!(cm.precision, Some(2.0 / 3.0));
    assert_eq!(cm.npv, Some(2.0 / 3.0));
}

#[test]
fn confusion_metrics_undefined_cells_are_none() {
    // never predicts the positive class: precision undefined, not zero
    let cm = confusion_metrics(&[0, 0, 0], &[1, 0, 0], 1);
    assert_eq!(cm.precision, None);
    assert_eq!(cm.sensitivity, Some(0.0));
    // no true negatives or positives in labels
    let cm = confusion_metrics(&[1, 1], &[1, 1], 1);
    assert_eq!(cm.specificity, None);
    assert_eq!(cm.npv, None);
}

#[test]
fn brier_hand_values() {
    // (0.8-1)^2 + (0.2-0)^2 = 0.08
    assert!((brier(&[vec![0.8, 0.2]], &[0]) - 0.08).abs() < 1e-12);
    // perfect and maximally wrong
    assert_eq!(brier(&[vec![1.0, 0.0]], &[0]), 0.0);
    assert_eq!(brier(&[vec![0.0, 1.0]], &[0]), 2.0);
    // binary helper agrees with the one-vs-rest column
    assert!((brier_binary(&[0.2], &[false]) - 0.04).abs() < 1e-12);
}

#[test]
fn paired_t_textbook_example() {
    let a = [51.0, 45.0, 33.0, 45.0, 67.0];
    let b = [23.0, 31.0, -4.0, 25.0, 55.0];
    let r = paired_t_test(&a, &b).unwrap();
    // mean diff 22.2, sd 10.3537, t = 22.2 / (10.3537 / sqrt(5))
    assert!((r.statistic - 4.7944).abs() < 1e-3, "t = {}", r.statistic);
    assert!((r.p_value - 0.00872).abs() < 1e-4, "p = {}", r.p_value);
    assert_eq!(r.dof, Some(4.0));
}

#[test]
fn paired_t_zero_variance_is_degenerate() {
    let err = paired_t_test(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]).unwrap_err();
    assert!(matches!(err, Error::DegenerateTest(_)));
}

#[test]
fn chi_square_textbook_example() {
    let r = chi_square(&[vec![10.0, 20.0], vec![30.0, 40.0]]).unwrap();
    // expected counts 12/18/28/42, stat = sum d^2/E = 0.79365
    assert!((r.statistic - 0.79365).abs() < 1e-4, "chi2 = {}", r.statistic);
    assert!((r.p_value - 0.37301).abs() < 1e-4, "p = {}", r.p_value);
    assert_eq!(r.dof, Some(1.0));
}

#[test]
fn anova_textbook_example() {
    let groups = vec![
        vec![6.0, 8.0, 4.0, 5.0, 3.0, 4.0],
        vec![8.0, 12.0, 9.0, 11.0, 6.0, 8.0],
        vec![13.0, 9.0, 11.0, 8.0, 7.0, 12.0],
    ];
    let r = one_way_anova(&groups).unwrap();
    // SS_between = 84 (df 2), SS_within = 68 (df 15)
    assert!((r.statistic - 42.0 / (68.0 / 15.0)).abs() < 1e-9);
    assert!(r.p_value < 0.01 && r.p_value > 0.001, "p = {}", r.p_value);
}

#[test]
fn ovr_auc_absent_class_is_none() {
    let probs = vec![vec![0.7, 0.2, 0.1], vec![0.2, 0.7, 0.1], vec![0.6, 0.3, 0.1]];
    let labels = [0, 1, 0];
    let aucs = multiclass_ovr_auc(&probs, &labels).unwrap();
    assert_eq!(aucs[0], Some(1.0));
    assert_eq!(aucs[1], Some(1.0));
    assert_eq!(aucs[2], None);
}

#[test]
fn metrics_report_is_deterministic_and_well_formed() {
    let mut rng = crate::rng::stream(5, "report-test");
    let n = 80;
    let mut risk_probs = Vec::new();
    let mut risk_labels = Vec::new();
    let mut ds_probs = Vec::new();
    let mut ds_labels = Vec::new();
    for _ in 0..n {
        let raw: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() + 0.05).collect();
        let s: f64 = raw.iter().sum();
        risk_probs.push(raw.iter().map(|x| x / s).collect::<Vec<_>>());
        risk_labels.push(rng.gen_range(0..3));
        let p = rng.gen::<f64>();
        ds_probs.push(vec![1.0 - p, p]);
        ds_labels.push(rng.gen_bool(p) as usize);
    }
    let report = MetricsReport::compute(
        Some((&risk_probs, &risk_labels)),
        Some((&ds_probs, &ds_labels)),
        99,
    )
    .unwrap();
    assert_eq!(report.targets.len(), 4);
    assert_eq!(report.targets[3].target, "invasive test");
    let again = MetricsReport::compute(
        Some((&risk_probs, &risk_labels)),
        Some((&ds_probs, &ds_labels)),
        99,
    )
    .unwrap();
    assert_eq!(
        serde_json::to_string(&report).unwrap(),
        serde_json::to_string(&again).unwrap()
    );
    let table = report.to_text_table();
    assert!(table.contains("invasive test"));
    assert!(table.contains("Brier"));
}
