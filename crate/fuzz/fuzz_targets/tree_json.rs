#![no_main]

use hetfx::{build_conversion_matrix, EffectTree};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(tree) = EffectTree::from_json(text) {
        let back = EffectTree::from_json(&tree.to_json()).expect("serialized tree parses");
        assert_eq!(back, tree);
        if let Ok(c) = build_conversion_matrix(&tree) {
            assert_eq!(c.rows(), 2 * c.cols() - 2);
        }
    }
});
