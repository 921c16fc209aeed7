#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // Must never panic; unparseable captions yield an empty sequence.
        let triplets = hoi_pretrain::captions::parse_caption(text, "fuzz");
        for t in triplets {
            assert!(hoi_pretrain::captions::lexicon::is_person(&t.human));
            assert!(hoi_pretrain::captions::lexicon::verb_lemma(&t.verb).is_some());
        }
    }
});
