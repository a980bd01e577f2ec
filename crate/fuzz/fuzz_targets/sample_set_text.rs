#![no_main]
use libfuzzer_sys::fuzz_target;
use uqbench::samplers::PosteriorSampleSet;

fuzz_target!(|data: &str| {
    if let Ok(set) = PosteriorSampleSet::parse_text(data) {
        let again = PosteriorSampleSet::parse_text(&set.to_text()).unwrap();
        assert_eq!(set, again);
    }
});
