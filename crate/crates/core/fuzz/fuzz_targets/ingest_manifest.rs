#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;

fuzz_target!(|data: &[u8]| {
    // Media paths resolve under a directory that never exists, so the
    // target exercises parsing and validation only.
    let _ = hoi_pretrain::data::ingest_manifest_reader(
        std::io::Cursor::new(data),
        Path::new("/nonexistent-fuzz-base"),
    );
});
