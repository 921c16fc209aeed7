#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = hoi_pretrain::captions::NegativeBank::from_reader(std::io::Cursor::new(data));
});
