#![no_main]

use libfuzzer_sys::fuzz_target;
use tsdistill::data::{parse_csv, write_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(table) = parse_csv(text) else {
        return;
    };
    assert_eq!(table.values.rows(), table.timestamps.len());
    assert_eq!(table.values.cols(), table.variate_names.len());
    assert!(table.values.is_finite());

    // Anything accepted must survive a write/parse cycle unchanged.
    let mut buf = Vec::new();
    write_csv(&table, &mut buf).expect("in-memory write");
    let back = parse_csv(std::str::from_utf8(&buf).unwrap()).expect("written table parses");
    assert_eq!(back, table);
});
