use fedfsl::config::{parse_ranges, ConfigError, ExperimentConfig, RawConfig};
use fedfsl_core::data::PartitionScheme;
use fedfsl_core::federation::{Algorithm, MiReference};

fn load(text: &str, flags: &[&str]) -> Result<ExperimentConfig, ConfigError> {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("exp.cfg");
    std::fs::write(&p, text).unwrap();
    ExperimentConfig::load(Some(&p), flags)
}

#[test]
fn empty_file_gives_reference_defaults() {
    let c = load("", &[]).unwrap();
    let f = &c.federation;
    assert_eq!(f.local.inner.alpha, 0.01);
    assert_eq!(f.gamma, 0.2);
    assert_eq!(f.adv.eta, 0.1);
    assert_eq!(f.adv.lambda, 0.1);
    assert_eq!(f.local.outer.beta, 1e-3);
    assert_eq!(f.local.shape.n_way, 5);
    assert_eq!(f.local.shape.p_shot, 1);
    assert_eq!(f.mi_reference, MiReference::Global);
    assert_eq!(f.local.local_epochs, 1);
    assert_eq!(c.data.partition, PartitionScheme::Dirichlet { concentration: 1.0 });
    assert_eq!(c.run.seeds, vec![0]);
}

#[test]
fn file_values_apply_and_flags_win() {
    let text = "# comment\n[federation]\ngamma = 0.7\nalgorithm = prox  # trailing\n\n[fsl]\nalpha = 0.05\n";
    let c = load(text, &[]).unwrap();
    assert_eq!(c.federation.gamma, 0.7);
    assert_eq!(c.federation.algorithm, Algorithm::Prox);
    assert_eq!(c.federation.local.inner.alpha, 0.05);

    let c = load(text, &["--gamma", "0.9", "--fsl.alpha=0.02"]).unwrap();
    assert_eq!(c.federation.gamma, 0.9);
    assert_eq!(c.federation.local.inner.alpha, 0.02);
    assert_eq!(c.federation.algorithm, Algorithm::Prox);
}

#[test]
fn errors_name_the_key() {
    let e = load("[federation]\ngamma = -1\n", &[]).unwrap_err();
    assert!(e.to_string().contains("federation.gamma"), "{e}");
    let e = load("[fsl]\nbeta = fast\n", &[]).unwrap_err();
    assert!(e.to_string().contains("fsl.beta"), "{e}");
    let e = load("[federation]\nwhatever = 1\n", &[]).unwrap_err();
    assert!(matches!(e, ConfigError::UnknownKey(ref k) if k == "federation.whatever"), "{e}");
    // a key in the wrong section is unknown there
    let e = load("[fsl]\ngamma = 1\n", &[]).unwrap_err();
    assert!(matches!(e, ConfigError::UnknownKey(_)));
    let e = load("gamma = 1\n", &[]).unwrap_err();
    assert!(matches!(e, ConfigError::Syntax { line: 1, .. }));
    let e = load("[nope]\n", &[]).unwrap_err();
    assert!(matches!(e, ConfigError::Syntax { .. }));
    let e = load("", &["--rounds"]).unwrap_err();
    assert!(e.to_string().contains("missing value"));
    let e = load("[federation]\nalgorithm = fedavg\n", &[]).unwrap_err();
    assert!(e.to_string().contains("federation.algorithm"));
    let e = load("[fsl]\ninner_steps = 3\n", &[]).unwrap_err();
    assert!(e.to_string().contains("fsl.inner_steps"), "{e}");
}

#[test]
fn canonical_text_round_trips() {
    let c = load("[federation]\nrounds = 7\n[run]\nseeds = 0-2,9\n", &["--partition", "iid"]).unwrap();
    assert_eq!(c.run.seeds, vec![0, 1, 2, 9]);
    let again = ExperimentConfig::parse_str(&c.to_text()).unwrap();
    assert_eq!(again, c);
    assert_eq!(RawConfig::defaults().to_text(), ExperimentConfig::parse_str("").unwrap().to_text());
}

#[test]
fn range_lists() {
    assert_eq!(parse_ranges("0-3,7").unwrap(), vec![0, 1, 2, 3, 7]);
    assert_eq!(parse_ranges("").unwrap(), Vec::<u64>::new());
    assert!(parse_ranges("3-1").is_err());
    assert!(parse_ranges("x").is_err());
}

#[test]
fn overlapping_explicit_split_is_rejected() {
    let e = load("[data]\nbase_classes = 0-5\nnovel_classes = 5-9\n", &[]).unwrap_err();
    assert!(e.to_string().contains("data.novel_classes"));
}
