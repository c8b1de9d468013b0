use super::*;
use crate::encoding::{CatFeature, ContFeature, MissingPolicy};

fn toy_schema() -> FeatureSchema {
    FeatureSchema {
        categorical: vec![CatFeature {
            name: "sex".into(),
            levels: vec!["female".into(), "male".into()],
            group: "demographics".into(),
            missing: MissingPolicy::Impute,
        }],
        continuous: vec![ContFeature {
            name: "age".into(),
            group: "demographics".into(),
            missing: MissingPolicy::Impute,
        }],
    }
}

fn write_csv(contents: &str) -> tempfile::NamedTempFile {
    use std::io::Write;
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(contents.as_bytes()).unwrap();
    f
}

#[test]
fn load_csv_toy_file() {
    let f = write_csv(
        "sex,age,risk,downstream\n\
         female,63.5,low,functional\n\
         male,71.0,high,invasive\n\
         male,58.25,medium,functional\n",
    );
    let t = load_csv(f.path(), &toy_schema()).unwrap();
    assert_eq!(t.n_rows(), 3);
    assert_eq!(t.cat[0][0], Some(0));
    assert_eq!(t.cat[1][0], Some(1));
    assert_eq!(t.cont[2][0], Some(58.25));
    assert_eq!(t.risk[1], RiskLabel::High);
    assert_eq!(t.downstream[2], DownstreamLabel::Functional);
}

#[test]
fn load_csv_na_and_empty_set_missing_flag() {
    let f = write_csv(
        "sex,age,risk,downstream\nNA,,low,functional\nmale,60,high,invasive\n",
    );
    let t = load_csv(f.path(), &toy_schema()).unwrap();
    assert_eq!(t.cat[0][0], None);
    assert_eq!(t.cont[0][0], None);
}

#[test]
fn load_csv_extra_column_is_named() {
    let f = write_csv("sex,age,shoe_size,risk,downstream\nmale,60,9,high,invasive\n");
    let err = load_csv(f.path(), &toy_schema()).unwrap_err();
    assert!(err.to_string().contains("shoe_size"), "{err}");
}

#[test]
fn load_csv_bad_cells_report_coordinates() {
    let f = write_csv(
        "sex,age,risk,downstream\nmale,60,high,invasive\nother,60,high,invasive\n",
    );
    match load_csv(f.path(), &toy_schema()).unwrap_err() {
        Error::Load { row, column, .. } => {
            assert_eq!(row, 2);
            assert_eq!(column, "sex");
        }
        other => panic!("unexpected error {other}"),
    }
    let f = write_csv("sex,age,risk,downstream\nmale,sixty,high,invasive\n");
    match load_csv(f.path(), &toy_schema()).unwrap_err() {
        Error::Load { row, column, .. } => {
            assert_eq!(row, 1);
            assert_eq!(column, "age");
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn load_csv_missing_target_column_errors() {
    let f = write_csv("sex,age,risk\nmale,60,high\n");
    let err = load_csv(f.path(), &toy_schema()).unwrap_err();
    assert!(err.to_string().contains("downstream"), "{err}");
}

#[test]
fn csv_round_trip_preserves_table() {
    let (table, _) = generate_synthetic_cohort(
        &SyntheticConfig {
            rows: 50,
            missing_rate: 0.15,
            ..SyntheticConfig::default()
        },
        7,
    )
    .unwrap();
    let f = tempfile::NamedTempFile::new().unwrap();
    save_csv(&table, f.path()).unwrap();
    let loaded = load_csv(f.path(), &table.schema).unwrap();
    assert_eq!(table, loaded);
}

#[test]
fn drop_sparse_strict_threshold() {
    let schema = FeatureSchema {
        categorical: vec![],
        continuous: vec![
            ContFeature {
                name: "mostly_missing".into(),
                group: String::new(),
                missing: MissingPolicy::Impute,
            },
            ContFeature {
                name: "half_missing".into(),
                group: String::new(),
                missing: MissingPolicy::Impute,
            },
            ContFeature {
                name: "complete".into(),
                group: String::new(),
                missing: MissingPolicy::Impute,
            },
        ],
    };
    let n = 10;
    let table = CohortTable {
        schema,
        cat: vec![vec![]; n],
        cont: (0..n)
            .map(|r| {
                vec![
                    if r < 6 { None } else { Some(1.0) }, // 60% missing
                    if r < 5 { None } else { Some(1.0) }, // exactly 50%
                    Some(r as f64),
                ]
            })
            .collect(),
        risk: vec![RiskLabel::Low; n],
        downstream: vec![DownstreamLabel::Functional; n],
    };
    let (kept, dropped) = drop_sparse_features(&table, 0.5);
    assert_eq!(dropped, vec!["mostly_missing".to_string()]);
    assert_eq!(
        kept.schema.continuous.iter().map(|f| f.name.as_str()).collect::<Vec<_>>(),
        vec!["half_missing", "complete"]
    );

    // no sparse features -> unchanged
    let (same, none) = drop_sparse_features(&kept, 0.5);
    assert_eq!(same, kept);
    assert!(none.is_empty());
}

#[test]
fn impute_no_missing_is_identity_with_zero_iterations() {
    let (table, _) = generate_synthetic_cohort(
        &SyntheticConfig {
            rows: 30,
            ..SyntheticConfig::default()
        },
        3,
    )
    .unwrap();
    let (out, report) = impute_round_robin(&table, 10, 0).unwrap();
    assert_eq!(out, table);
    assert_eq!(report.iterations, 0);
}

#[test]
fn impute_recovers_exact_linear_relation() {
    let schema = FeatureSchema {
        categorical: vec![],
        continuous: vec![
            ContFeature {
                name: "x".into(),
                group: String::new(),
                missing: MissingPolicy::Impute,
            },
            ContFeature {
                name: "y".into(),
                group: String::new(),
                missing: MissingPolicy::Impute,
            },
        ],
    };
    let n = 20;
    let masked = 7;
    let table = CohortTable {
        schema,
        cat: vec![vec![]; n],
        cont: (0..n)
            .map(|r| {
                let x = (r + 1) as f64;
                vec![
                    Some(x),
                    if r == masked { None } else { Some(2.0 * x) },
                ]
            })
            .collect(),
        risk: vec![RiskLabel::Low; n],
        downstream: vec![DownstreamLabel::Functional; n],
    };
    let (out, _) = impute_round_robin(&table, 10, 0).unwrap();
    let expected = 2.0 * (masked + 1) as f64;
    let got = out.cont[masked][1].unwrap();
    assert!((got - expected).abs() < 1e-6, "imputed {got}, wanted {expected}");
    // observed cells untouched
    for r in 0..n {
        assert_eq!(out.cont[r][0], table.cont[r][0]);
        if r != masked {
            assert_eq!(out.cont[r][1], table.cont[r][1]);
        }
    }
}

#[test]
fn impute_all_missing_feature_is_an_error() {
    let schema = FeatureSchema {
        categorical: vec![],
        continuous: vec![
            ContFeature {
                name: "x".into(),
                group: String::new(),
                missing: MissingPolicy::Impute,
            },
            ContFeature {
                name: "gone".into(),
                group: String::new(),
                missing: MissingPolicy::Impute,
            },
        ],
    };
    let table = CohortTable {
        schema,
        cat: vec![vec![]; 4],
        cont: (0..4).map(|r| vec![Some(r as f64), None]).collect(),
        risk: vec![RiskLabel::Low; 4],
        downstream: vec![DownstreamLabel::Functional; 4],
    };
    let err = impute_round_robin(&table, 10, 0).unwrap_err();
    assert!(err.to_string().contains("gone"), "{err}");
}

#[test]
fn impute_deltas_non_increasing_after_second_iteration() {
    let (table, _) = generate_synthetic_cohort(
        &SyntheticConfig {
            rows: 200,
            missing_rate: 0.1,
            ..SyntheticConfig::default()
        },
        11,
    )
    .unwrap();
    let (out, report) = impute_round_robin(&table, 10, 0).unwrap();
    assert!(report.iterations >= 1);
    for w in report.deltas[1..].windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "deltas not settling: {:?}", report.deltas);
    }
    // complete output, observed cells intact
    for r in 0..table.n_rows() {
        for j in 0..table.schema.continuous.len() {
            assert!(out.cont[r][j].is_some());
            if table.cont[r][j].is_some() {
                assert_eq!(out.cont[r][j], table.cont[r][j]);
            }
        }
        for j in 0..table.schema.categorical.len() {
            assert!(out.cat[r][j].is_some());
            if table.cat[r][j].is_some() {
                assert_eq!(out.cat[r][j], table.cat[r][j]);
            }
        }
    }
}

#[test]
fn split_counts_and_determinism() {
    let (table, _) = generate_synthetic_cohort(
        &SyntheticConfig {
            rows: 100,
            ..SyntheticConfig::default()
        },
        5,
    )
    .unwrap();
    let spec = SplitSpec {
        train: 0.6,
        validation: 0.2,
        test: 0.2,
        seed: 9,
    };
    let (train, val, test) = split(&table, &spec).unwrap();
    assert_eq!(train.n_rows() + val.n_rows() + test.n_rows(), 100);
    assert!((train.n_rows() as i64 - 60).abs() <= 2, "{}", train.n_rows());
    assert!((val.n_rows() as i64 - 20).abs() <= 2);
    assert!((test.n_rows() as i64 - 20).abs() <= 2);

    // per-split class counts within one row of the split's share
    for class in 0..RiskLabel::COUNT {
        let total = table.risk.iter().filter(|l| l.index() == class).count() as f64;
        for (part, frac) in [(&train, 0.6), (&val, 0.2), (&test, 0.2)] {
            let got = part.risk.iter().filter(|l| l.index() == class).count() as f64;
            assert!(
                (got - total * frac).abs() <= 1.0,
                "class {class}: {got} vs {}",
                total * frac
            );
        }
    }

    let (train2, val2, test2) = split(&table, &spec).unwrap();
    assert_eq!(train, train2);
    assert_eq!(val, val2);
    assert_eq!(test, test2);
}

#[test]
fn split_partitions_rows_exactly() {
    let (table, _) = generate_synthetic_cohort(
        &SyntheticConfig {
            rows: 97,
            ..SyntheticConfig::default()
        },
        13,
    )
    .unwrap();
    // tag rows uniquely through a continuous column to track identity
    let mut tagged = table.clone();
    for (r, row) in tagged.cont.iter_mut().enumerate() {
        row[0] = Some(r as f64);
    }
    let (train, val, test) = split(&tagged, &SplitSpec::default()).unwrap();
    let mut seen: Vec<f64> = train
        .cont
        .iter()
        .chain(&val.cont)
        .chain(&test.cont)
        .map(|row| row[0].unwrap())
        .collect();
    seen.sort_by(f64::total_cmp);
    let expected: Vec<f64> = (0..97).map(|r| r as f64).collect();
    assert_eq!(seen, expected);
}

#[test]
fn split_small_stratum_errors() {
    let (mut table, _) = generate_synthetic_cohort(
        &SyntheticConfig {
            rows: 30,
            ..SyntheticConfig::default()
        },
        2,
    )
    .unwrap();
    for l in table.risk.iter_mut() {
        *l = RiskLabel::High;
    }
    table.risk[0] = RiskLabel::Low; // stratum of size 1
    let err = split(&table, &SplitSpec::default()).unwrap_err();
    assert!(matches!(err, Error::Split(_)));
}

#[test]
fn generator_is_pure_in_config_and_seed() {
    let config = SyntheticConfig {
        rows: 64,
        missing_rate: 0.05,
        risk_label_noise: 0.1,
        ..SyntheticConfig::default()
    };
    let (t1, g1) = generate_synthetic_cohort(&config, 21).unwrap();
    let (t2, g2) = generate_synthetic_cohort(&config, 21).unwrap();
    assert_eq!(t1, t2);
    assert_eq!(g1, g2);
    let (t3, _) = generate_synthetic_cohort(&config, 22).unwrap();
    assert_ne!(t1, t3);
}

#[test]
fn generator_rho_one_downstream_follows_severity_ordering() {
    let config = SyntheticConfig {
        rows: 500,
        rho: 1.0,
        ..SyntheticConfig::default()
    };
    let (table, truth) = generate_synthetic_cohort(&config, 4).unwrap();
    // sorted by latent severity, labels must be functional then invasive
    let mut order: Vec<usize> = (0..table.n_rows()).collect();
    order.sort_by(|&a, &b| truth.rows[a].z.total_cmp(&truth.rows[b].z));
    let labels: Vec<usize> = order.iter().map(|&r| table.downstream[r].index()).collect();
    let first_invasive = labels.iter().position(|&l| l == 1).unwrap();
    assert!(labels[first_invasive..].iter().all(|&l| l == 1));
    assert!(truth.bayes_auc_downstream > 0.999);
}

#[test]
fn generator_rho_zero_decouples_tasks() {
    let config = SyntheticConfig {
        rows: 10_000,
        rho: 0.0,
        ..SyntheticConfig::default()
    };
    let (table, truth) = generate_synthetic_cohort(&config, 6).unwrap();
    // phi coefficient between high-risk and invasive indicators
    let (mut a, mut b, mut c, mut d) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for r in 0..table.n_rows() {
        let hi = table.risk[r] == RiskLabel::High;
        let inv = table.downstream[r] == DownstreamLabel::Invasive;
        match (hi, inv) {
            (true, true) => a += 1.0,
            (true, false) => b += 1.0,
            (false, true) => c += 1.0,
            (false, false) => d += 1.0,
        }
    }
    let phi = (a * d - b * c)
        / ((a + b) * (c + d) * (a + c) * (b + d)).sqrt();
    assert!(phi.abs() < 0.05, "phi = {phi}");
    assert!((truth.bayes_auc_downstream - 0.5).abs() < 0.01);
}

#[test]
fn generator_priors_match_targets() {
    let config = SyntheticConfig {
        rows: 10_000,
        ..SyntheticConfig::default()
    };
    let (table, _) = generate_synthetic_cohort(&config, 8).unwrap();
    let n = table.n_rows() as f64;
    for (class, &target) in RISK_PRIORS.iter().enumerate() {
        let frac = table.risk.iter().filter(|l| l.index() == class).count() as f64 / n;
        assert!((frac - target).abs() < 0.02, "class {class}: {frac} vs {target}");
    }
    let functional =
        table.downstream.iter().filter(|l| **l == DownstreamLabel::Functional).count() as f64 / n;
    assert!((functional - DOWNSTREAM_PRIORS[0]).abs() < 0.02, "{functional}");
}

#[test]
fn generator_output_is_schema_valid_with_complete_targets() {
    let config = SyntheticConfig {
        rows: 200,
        missing_rate: 0.3,
        ..SyntheticConfig::default()
    };
    let (table, truth) = generate_synthetic_cohort(&config, 17).unwrap();
    table.validate().unwrap();
    assert_eq!(table.risk.len(), 200);
    assert_eq!(truth.rows.len(), 200);
    // missingness close to the configured rate
    let (cat_frac, cont_frac) = table.missing_fractions();
    let mean: f64 = cat_frac.iter().chain(&cont_frac).sum::<f64>()
        / (cat_frac.len() + cont_frac.len()) as f64;
    assert!((mean - 0.3).abs() < 0.05, "missing fraction {mean}");
}

#[test]
fn without_group_removes_exactly_that_modality() {
    let (table, _) = generate_synthetic_cohort(&SyntheticConfig::default(), 1).unwrap();
    let ablated = table.without_group("segment_readings").unwrap();
    assert!(ablated
        .schema
        .continuous
        .iter()
        .all(|f| f.group != "segment_readings"));
    assert_eq!(
        ablated.schema.continuous.len(),
        table.schema.continuous.len() - 8
    );
    assert_eq!(ablated.schema.categorical.len(), table.schema.categorical.len());
    assert!(matches!(table.without_group("no_such_group"), Err(Error::Usage(_))));
}
