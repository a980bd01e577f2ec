#![no_main]
use libfuzzer_sys::fuzz_target;
use uqbench::data::PredictionFixture;

fuzz_target!(|data: &[u8]| {
    if let Ok(fixture) = PredictionFixture::read(data) {
        let mut out = Vec::new();
        fixture.write(&mut out).unwrap();
        let again = PredictionFixture::read(out.as_slice()).unwrap();
        assert_eq!(fixture, again);
    }
});
