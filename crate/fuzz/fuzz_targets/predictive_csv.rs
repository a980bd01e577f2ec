#![no_main]
use libfuzzer_sys::fuzz_target;
use uqbench::predictive::{read_predictive_csv, write_predictive_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok((xs, dim, values)) = read_predictive_csv(data) {
        let mut out = Vec::new();
        write_predictive_csv(&mut out, &xs, dim, &values).unwrap();
        let (xs2, dim2, values2) = read_predictive_csv(out.as_slice()).unwrap();
        assert_eq!(dim, dim2);
        assert_eq!(values, values2);
        assert!(xs.iter().zip(&xs2).all(|(a, b)| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan())));
    }
});
