//! Shared fixtures for the pipeline benchmarks.

use histokind_core::codebook::{parse_codebook, BinaryCode, Codebook, Scale};
use histokind_core::SlideCode;

pub const RCC_TEXT: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../codebooks/rcc.codebook"));

pub fn rcc() -> Codebook {
    parse_codebook(RCC_TEXT).expect("shipped codebook parses")
}

/// Deterministic pseudo-random slide codes covering the whole RCC space.
pub fn random_codes(cb: &Codebook, n: usize) -> Vec<SlideCode> {
    let mut state = 0x243f6a8885a308d3u64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    (0..n)
        .map(|i| {
            let codes: Vec<BinaryCode> = Scale::ALL
                .iter()
                .map(|&scale| {
                    let width = cb.feature_count(scale);
                    let value = next() & ((1 << width) - 1);
                    let bits = (0..width).map(|b| (value >> (width - 1 - b)) & 1 == 1).collect();
                    BinaryCode::new(scale, bits)
                })
                .collect();
            SlideCode::new(format!("bench-{i}"), codes.try_into().unwrap()).unwrap()
        })
        .collect()
}
