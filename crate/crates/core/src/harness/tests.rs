use std::fs;

use tempfile::tempdir;

use super::*;
use crate::model::TaskSpec;
use crate::perceiver::LatentConfig;

fn tiny_experiment() -> ExperimentConfig {
    let mut model = ModelConfig::default();
    model.embed_dim = 8;
    model.latent = LatentConfig {
        num_latents: 2,
        latent_channels: 8,
        self_layers_per_block: 1,
        heads_cross: 2,
        heads_self: 2,
        num_blocks: 1,
    };
    model.bins = 4;
    model.batch_size = 64;
    model.epochs = 2;
    model.patience = 2;
    model.mlp_head_hidden = vec![8];
    model.baseline_hidden = vec![8];
    ExperimentConfig {
        model,
        synthetic: SyntheticConfig {
            rows: 200,
            ..SyntheticConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn variant_parse_and_apply() {
    for v in Variant::ALL {
        assert_eq!(Variant::parse(v.name()).unwrap(), v);
    }
    assert!(matches!(Variant::parse("gbdt"), Err(Error::Usage(_))));

    let mut single = ModelConfig::default();
    Variant::TabperceiverMlp.apply(&mut single).unwrap();
    assert_eq!(single.tasks.len(), 1);
    assert_eq!(single.tasks[0].name, "risk");
    assert_eq!(single.head_type, HeadType::Mlp);
    assert_eq!(single.architecture, Architecture::Perceiver);

    let mut lone = ModelConfig {
        tasks: vec![TaskSpec::new("downstream", 2)],
        ..ModelConfig::default()
    };
    assert!(matches!(
        Variant::MlTabperceiverDecoder.apply(&mut lone),
        Err(Error::Config(_))
    ));

    let mut baseline = ModelConfig::default();
    Variant::MlpBaseline.apply(&mut baseline).unwrap();
    assert_eq!(baseline.architecture, Architecture::MlpBaseline);
    assert_eq!(baseline.tasks.len(), 2);
}

#[test]
fn experiment_config_toml_round_trip() {
    let config = tiny_experiment();
    let text = toml::to_string_pretty(&config).unwrap();
    let back: ExperimentConfig = toml::from_str(&text).unwrap();
    assert_eq!(back, config);

    let dir = tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    fs::write(&path, &text).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), config);

    let bad = ExperimentConfig {
        sparse_threshold: 1.5,
        ..config
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn search_space_sampling_is_deterministic_and_validated() {
    let space = SearchSpace::default();
    space.validate().unwrap();
    let base = ModelConfig::default();
    let a = space.sample(&base, &mut rng::stream(7, "sample"));
    let b = space.sample(&base, &mut rng::stream(7, "sample"));
    assert_eq!(a, b);
    assert!(space.learning_rate.contains(&a.learning_rate));
    assert!(space.num_latents.contains(&a.latent.num_latents));

    let empty = SearchSpace {
        bins: Vec::new(),
        ..SearchSpace::default()
    };
    assert!(matches!(empty.validate(), Err(Error::Config(_))));
}

#[test]
fn generate_writes_deterministic_dataset() {
    let config = SyntheticConfig {
        rows: 60,
        ..SyntheticConfig::default()
    };
    let dir = tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_generate(&config, 11, &a).unwrap();
    cmd_generate(&config, 11, &b).unwrap();

    let csv = fs::read(a.join("cohort.csv")).unwrap();
    assert_eq!(csv, fs::read(b.join("cohort.csv")).unwrap());
    assert_eq!(
        fs::read(a.join("ground_truth.json")).unwrap(),
        fs::read(b.join("ground_truth.json")).unwrap()
    );
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 61);

    let schema: FeatureSchema =
        toml::from_str(&fs::read_to_string(a.join("schema.toml")).unwrap()).unwrap();
    schema.validate().unwrap();
    assert_eq!(schema, SyntheticConfig::schema());

    let other = dir.path().join("c");
    cmd_generate(&config, 12, &other).unwrap();
    assert_ne!(
        fs::read(a.join("cohort.csv")).unwrap(),
        fs::read(other.join("cohort.csv")).unwrap()
    );
}

#[test]
fn train_is_reproducible_and_eval_matches() {
    let config = tiny_experiment();
    let dir = tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let outcome = cmd_train(&config, None, 5, &a).unwrap();
    cmd_train(&config, None, 5, &b).unwrap();

    assert_eq!(
        fs::read(a.join("checkpoint.tabp")).unwrap(),
        fs::read(b.join("checkpoint.tabp")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("report.json")).unwrap(),
        fs::read(b.join("report.json")).unwrap()
    );

    let names: Vec<&str> = outcome.report.targets.iter().map(|t| t.target.as_str()).collect();
    assert_eq!(names, ["low", "medium", "high", "invasive test"]);
    assert!(outcome.state.epochs_run >= 1);

    // Evaluating the checkpoint on the saved test split with the same root
    // seed reproduces the training report exactly.
    let eval_dir = dir.path().join("eval");
    let report = cmd_eval(&outcome.checkpoint, &a.join("test.csv"), 5, &eval_dir).unwrap();
    assert_eq!(report, outcome.report);
    assert_eq!(
        fs::read(a.join("report.json")).unwrap(),
        fs::read(eval_dir.join("report.json")).unwrap()
    );
}

#[test]
fn eval_rejects_mismatched_schema_naming_the_feature() {
    let mut config = tiny_experiment();
    config.variant = Variant::MlpBaseline;
    config.model.epochs = 1;
    let dir = tempdir().unwrap();
    let run = dir.path().join("run");
    let outcome = cmd_train(&config, None, 3, &run).unwrap();

    // Same rows, but a column the checkpoint never saw.
    let text = fs::read_to_string(run.join("test.csv")).unwrap();
    let mut lines = text.lines();
    let mut edited = format!("{},agatston\n", lines.next().unwrap());
    for line in lines {
        edited.push_str(line);
        edited.push_str(",1.0\n");
    }
    let alien = dir.path().join("alien.csv");
    fs::write(&alien, edited).unwrap();
    let err = cmd_eval(&outcome.checkpoint, &alien, 3, &dir.path().join("e")).unwrap_err();
    assert!(err.to_string().contains("agatston"), "{err}");
}

#[test]
fn predict_writes_per_row_probabilities() {
    let config = tiny_experiment();
    let dir = tempdir().unwrap();
    let run = dir.path().join("run");
    let outcome = cmd_train(&config, None, 9, &run).unwrap();
    let out = dir.path().join("pred");
    cmd_predict(&outcome.checkpoint, &run.join("test.csv"), &out).unwrap();

    let text = fs::read_to_string(out.join("predictions.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(
        header,
        [
            "row",
            "p_risk_low",
            "p_risk_medium",
            "p_risk_high",
            "risk_assigned",
            "p_downstream_functional",
            "p_downstream_invasive",
            "downstream_assigned",
        ]
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), outcome.report.n);
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        let risk: Vec<f64> = fields[1..4].iter().map(|f| f.parse().unwrap()).collect();
        assert!((risk.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(["low", "medium", "high"].contains(&fields[4]));
        assert!(["functional", "invasive"].contains(&fields[7]));
    }
}

#[test]
fn tune_is_prefix_stable_and_budget_checked() {
    let mut config = tiny_experiment();
    config.model.epochs = 1;
    config.synthetic.rows = 150;
    let space = SearchSpace {
        learning_rate: vec![1e-3, 3e-3],
        batch_size: vec![64],
        bins: vec![4, 8],
        heads_cross: vec![2],
        heads_self: vec![2],
        num_blocks: vec![1],
        num_latents: vec![2, 4],
        latent_channels: vec![8],
        self_layers_per_block: vec![1],
        weight_decay: vec![0.0, 0.01],
        label_smoothing: vec![0.0, 0.3],
    };
    let dir = tempdir().unwrap();
    assert!(matches!(
        cmd_tune(&config, &space, 0, None, 1, &dir.path().join("z")),
        Err(Error::Usage(_))
    ));

    let one = cmd_tune(&config, &space, 1, None, 1, &dir.path().join("one")).unwrap();
    let three = cmd_tune(&config, &space, 3, None, 1, &dir.path().join("three")).unwrap();
    assert_eq!(one.trials.len(), 1);
    assert_eq!(three.trials.len(), 3);
    // Nested seeds: the first trial is identical and the best score is
    // monotone non-decreasing in the budget.
    assert_eq!(three.trials[0], one.trials[0]);
    assert!(three.best_val_auc >= one.best_val_auc);

    let logged: TuneOutcome = serde_json::from_str(
        &fs::read_to_string(dir.path().join("three").join("trials.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(logged, three);
    let best = ExperimentConfig::load(&dir.path().join("three").join("best_config.toml")).unwrap();
    assert_eq!(best.model, three.best_model);
}

#[test]
fn ablate_empty_is_baseline_and_unknown_group_errors() {
    let mut config = tiny_experiment();
    config.model.epochs = 1;
    config.synthetic.rows = 150;
    let dir = tempdir().unwrap();
    let table = cmd_ablate(&config, &[], None, 2, &dir.path().join("none")).unwrap();
    assert!(table.rows.is_empty());
    assert_eq!(table.baseline_auc.len(), 4);

    let err = cmd_ablate(
        &config,
        &["imaginary".to_string()],
        None,
        2,
        &dir.path().join("bad"),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Usage(_)));

    let one = cmd_ablate(
        &config,
        &["decoy".to_string()],
        None,
        2,
        &dir.path().join("one"),
    )
    .unwrap();
    assert_eq!(one.baseline_auc, table.baseline_auc);
    assert_eq!(one.rows.len(), 1);
    assert_eq!(one.rows[0].excluded, "decoy");
    assert!(one.rows[0].mean_delta.is_some());
    let text = fs::read_to_string(dir.path().join("one").join("ablation.txt")).unwrap();
    assert!(text.contains("decoy"));
}

#[test]
fn compare_same_config_is_not_significant_and_targets_must_match() {
    let mut config = tiny_experiment();
    config.model.epochs = 1;
    config.synthetic.rows = 150;
    config.seeds = vec![4, 6];
    let dir = tempdir().unwrap();
    let report = cmd_compare(&config, &config, None, 0, &dir.path().join("same")).unwrap();
    assert_eq!(report.seeds, vec![4, 6]);
    for t in &report.targets {
        assert!(!t.significant);
        assert_eq!(t.auc_a, t.auc_b);
        // Identical runs give zero paired differences: degenerate test.
        assert!(t.test.is_none());
        assert_eq!(t.ci_overlap, Some(true));
    }
    let text = fs::read_to_string(dir.path().join("same").join("compare.txt")).unwrap();
    assert!(text.contains("not significant"));

    let mut single = config.clone();
    single.variant = Variant::TabperceiverDecoder;
    single.seeds = vec![4];
    let mut multi = config;
    multi.seeds = vec![4];
    let err = cmd_compare(&multi, &single, None, 0, &dir.path().join("bad")).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}
