#![no_main]
use libfuzzer_sys::fuzz_target;
use uqbench_cli::ExperimentConfig;

fuzz_target!(|data: &str| {
    if let Ok(cfg) = ExperimentConfig::from_json(data) {
        let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
    }
});
