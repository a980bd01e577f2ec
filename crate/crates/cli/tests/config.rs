use uqbench::samplers::InferenceMethod;
use uqbench_cli::config::{MethodConfig, TaskKind};
use uqbench_cli::{CliError, ExperimentConfig};

fn parse(json: &str) -> Result<ExperimentConfig, CliError> {
    ExperimentConfig::from_json(json)
}

fn rejects(json: &str, field: &str) {
    match parse(json) {
        Err(CliError::Validation(msg)) => assert!(msg.contains(field), "`{field}` not named in: {msg}"),
        other => panic!("expected a validation error naming `{field}`, got {other:?}"),
    }
}

#[test]
fn defaults_follow_the_desk_protocol() {
    let cfg = parse(
        r#"{"schema_version": 1, "task": "toy-regression",
            "methods": [{"method": "ensembling"}, {"method": "mc-dropout"}, {"method": "sgld"}, {"method": "sghmc"}]}"#,
    )
    .unwrap();
    assert_eq!(cfg.m_values, [8, 16, 32, 64]);
    assert_eq!(cfg.scale_factor, 64);
    assert_eq!(cfg.grid_resolution(), 1000);
    assert_eq!(cfg.train_size(), 1000);
    assert_eq!(cfg.hidden, [10, 10]);
    assert_eq!(cfg.reference.hmc.num_samples, 1000);
    assert_eq!(cfg.reference.hmc.warmup_steps, 1000);
    let MethodConfig::Ensembling(e) = &cfg.methods[0] else { panic!() };
    assert_eq!(e.pool_size, 64);
    assert_eq!(e.train.epochs, 150);
    assert_eq!(e.train.lr, 1e-3);
    let MethodConfig::McDropout(d) = &cfg.methods[1] else { panic!() };
    assert_eq!(d.repeats, 5);
    assert_eq!(d.train.epochs, 300);
    assert_eq!(cfg.dropout_p(d), 0.2);
    let MethodConfig::Sgld(s) = &cfg.methods[2] else { panic!() };
    assert_eq!(s.repeats, 6);
    assert_eq!(cfg.alpha0(InferenceMethod::Sgld, s), 0.01);
    assert_eq!(cfg.alpha0(InferenceMethod::Sghmc, s), 0.001);
    // 256 * 150 epochs of ceil(1000 / 32) = 32 steps, divided by 64.
    assert_eq!(cfg.total_steps(s), 19_200);
}

#[test]
fn classification_defaults() {
    let cfg = parse(r#"{"schema_version": 1, "task": "toy-classification", "methods": [{"method": "mc-dropout"}, {"method": "sgld"}]}"#)
        .unwrap();
    assert_eq!(cfg.task, TaskKind::ToyClassification);
    assert_eq!(cfg.grid_resolution(), 200);
    assert_eq!(cfg.dataset_len(), 1040);
    let MethodConfig::McDropout(d) = &cfg.methods[0] else { panic!() };
    assert_eq!(cfg.dropout_p(d), 0.1);
    let MethodConfig::Sgld(s) = &cfg.methods[1] else { panic!() };
    assert_eq!(cfg.alpha0(InferenceMethod::Sgld, s), 0.05);
    assert_eq!(cfg.alpha0(InferenceMethod::Sghmc, s), 0.01);
}

#[test]
fn paper_scale_switch() {
    let cfg = parse(r#"{"schema_version": 1, "task": "toy-regression", "methods": [{"method": "ensembling"}, {"method": "mc-dropout"}, {"method": "sghmc"}]}"#)
        .unwrap()
        .paper_scale();
    cfg.validate().unwrap();
    assert_eq!(cfg.scale_factor, 1);
    assert_eq!(cfg.m_values, [8, 16, 32, 64, 128, 256]);
    let MethodConfig::Ensembling(e) = &cfg.methods[0] else { panic!() };
    assert_eq!(e.pool_size, 1024);
    let MethodConfig::McDropout(d) = &cfg.methods[1] else { panic!() };
    assert_eq!(d.repeats, 10);
    let MethodConfig::Sghmc(s) = &cfg.methods[2] else { panic!() };
    assert_eq!(cfg.total_steps(s), 256 * 150 * 32);
}

#[test]
fn json_round_trip() {
    let cfg = parse(r#"{"schema_version": 1, "task": "toy-classification", "seed": 11, "methods": [{"method": "sghmc", "alpha0": 0.02, "eta": 0.05}]}"#)
        .unwrap();
    assert_eq!(parse(&cfg.to_json()).unwrap(), cfg);
}

#[test]
fn invalid_configs_name_their_field() {
    let head = r#""schema_version": 1, "task": "toy-regression""#;
    rejects(r#"{"schema_version": 2, "task": "toy-regression", "methods": [{"method": "sgld"}]}"#, "schema_version");
    rejects(&format!(r#"{{{head}, "m_values": [16, 8], "methods": [{{"method": "sgld"}}]}}"#), "m_values");
    rejects(&format!(r#"{{{head}, "m_values": [8, 8], "methods": [{{"method": "sgld"}}]}}"#), "m_values");
    rejects(&format!(r#"{{{head}, "m_values": [], "methods": [{{"method": "sgld"}}]}}"#), "m_values");
    rejects(&format!(r#"{{{head}, "m_values": [0, 1], "methods": [{{"method": "sgld"}}]}}"#), "m_values");
    rejects(&format!(r#"{{{head}, "scale_factor": 0, "methods": [{{"method": "sgld"}}]}}"#), "scale_factor");
    rejects(&format!(r#"{{{head}, "methods": []}}"#), "methods");
    rejects(&format!(r#"{{{head}, "methods": [{{"method": "sgld", "repeats": 0}}]}}"#), "methods[0].repeats");
    rejects(&format!(r#"{{{head}, "methods": [{{"method": "sgld"}}, {{"method": "mc-dropout", "repeats": 0}}]}}"#), "methods[1].repeats");
    rejects(&format!(r#"{{{head}, "methods": [{{"method": "sgld"}}, {{"method": "sgld"}}]}}"#), "methods[1].method");
    rejects(&format!(r#"{{{head}, "methods": [{{"method": "mc-dropout", "dropout_p": 1.0}}]}}"#), "dropout_p");
    rejects(&format!(r#"{{{head}, "methods": [{{"method": "sghmc", "eta": 0.0}}]}}"#), "eta");
    rejects(&format!(r#"{{{head}, "methods": [{{"method": "sgld", "alpha0": -1.0}}]}}"#), "alpha0");
    rejects(&format!(r#"{{{head}, "methods": [{{"method": "sgld", "epochs": 1}}]}}"#), "methods[0].epochs");
    rejects(&format!(r#"{{{head}, "methods": [{{"method": "ensembling", "train": {{"lr": 0.0}}}}]}}"#), "methods[0].train.lr");
    rejects(&format!(r#"{{{head}, "hidden": [], "methods": [{{"method": "sgld"}}]}}"#), "hidden");
    rejects(&format!(r#"{{{head}, "grid_resolution": 1, "methods": [{{"method": "sgld"}}]}}"#), "grid_resolution");
    rejects(&format!(r#"{{{head}, "reference": {{"hmc": {{"leapfrog_steps": 0}}}}, "methods": [{{"method": "sgld"}}]}}"#), "reference.hmc");
    rejects(&format!(r#"{{{head}, "sed": 1, "methods": [{{"method": "sgld"}}]}}"#), "sed");
    rejects(&format!(r#"{{{head}, "methods": [{{"method": "vi"}}]}}"#), "vi");
    rejects(&format!(r#"{{{head}, "methods": [{{"method": "sgld", "alpha": 0.1}}]}}"#), "alpha");
    rejects(&format!(r#"{{{head}, "methods": [{{"method": "ensembling", "train": {{"epoch": 3}}}}]}}"#), "epoch");
    rejects(r#"{"schema_version": 1, "methods": [{"method": "sgld"}]}"#, "task");
}
