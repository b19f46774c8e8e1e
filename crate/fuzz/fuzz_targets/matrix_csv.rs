#![no_main]

use libfuzzer_sys::fuzz_target;
use tsdistill::vocab::{parse_matrix_csv, qr_reduce, QrOptions, VocabEmbedding};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(m) = parse_matrix_csv(text) else {
        return;
    };
    if m.rows() > 32 || m.cols() > 32 || !m.is_finite() {
        return;
    }
    if let Ok(vocab) = VocabEmbedding::new(m) {
        let _ = qr_reduce(&vocab, &QrOptions::default());
    }
});
