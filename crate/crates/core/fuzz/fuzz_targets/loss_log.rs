#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = hoi_pretrain::plot::parse_loss_log(std::io::Cursor::new(data));
});
