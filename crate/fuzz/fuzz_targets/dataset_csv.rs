#![no_main]
use libfuzzer_sys::fuzz_target;
use uqbench::data::Dataset;

// First byte picks the target kind: 0 for real targets, otherwise the class count.
fuzz_target!(|data: &[u8]| {
    let Some((&kind, body)) = data.split_first() else { return };
    let classes = (kind != 0).then_some(kind as usize);
    if let Ok(ds) = Dataset::read_csv(body, classes) {
        let mut out = Vec::new();
        ds.write_csv(&mut out).unwrap();
        assert_eq!(Dataset::read_csv(out.as_slice(), classes).unwrap(), ds);
    }
});
