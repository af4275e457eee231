#![no_main]

use hetfx::ingest::{read_cohort, read_pairs, FormatConfig};
use libfuzzer_sys::fuzz_target;

const COHORT: &str = "id,z,y,x1\nt1,1,1.5,0\nc1,0,0.5,0\nt2,1,2,1\nc2,0,1,1\nt3,1,0,1\nc3,0,0,0\n";

fuzz_target!(|data: &[u8]| {
    let cohort = read_cohort(COHORT.as_bytes(), &FormatConfig::default()).expect("fixed cohort parses");
    if let Ok(pairs) = read_pairs(data, &cohort) {
        assert!(pairs.len() <= 3);
    }
});
