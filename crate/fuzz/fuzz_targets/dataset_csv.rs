#![no_main]

use flowopt::surrogate::Dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = Dataset::read_csv(data) {
        // accepted datasets re-serialize and parse to the same rows
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).expect("writing an accepted dataset");
        let again = Dataset::read_csv(buf.as_slice()).expect("re-reading a written dataset");
        assert_eq!(again.len(), ds.len());
    }
});
