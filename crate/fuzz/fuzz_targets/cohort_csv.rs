#![no_main]

use hetfx::ingest::{read_cohort, write_cohort, FormatConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let config = FormatConfig::default();
    if let Ok(table) = read_cohort(data, &config) {
        // Anything accepted must survive a write and reread.
        let mut out = Vec::new();
        write_cohort(&table, &mut out).expect("accepted table writes");
        let again = read_cohort(out.as_slice(), &FormatConfig::for_schema(&table.schema)).expect("rereads");
        assert_eq!(again.rows.len(), table.rows.len());
    }
});
