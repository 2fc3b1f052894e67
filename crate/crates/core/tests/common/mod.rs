#![allow(dead_code)]

use emsd::model::tokenizer::encode_prompt;
use emsd::{Model, ModelConfig};

pub const CORPUS: &[&str] = &[
    "the cat sat on the mat and the cat sat on the hat",
    "abcabcabcabc",
    "To be, or not to be: that is the question.",
    "1 2 3 4 1 2 3 4 1 2 3 4",
    "a",
    "",
    "speculative decoding drafts tokens; decoding verifies tokens",
    "xyzzy plugh xyzzy plugh",
    "0101010101010101010101",
    "hello world",
];

pub fn target(seed: u64) -> Model {
    Model::init(ModelConfig { init_seed: seed, ..Default::default() }).unwrap()
}

pub fn draft(seed: u64) -> Model {
    Model::init(ModelConfig::default().draft(seed.wrapping_add(1))).unwrap()
}

/// `b` prompts starting at corpus line `offset`, cycling.
pub fn prompts(b: usize, offset: usize) -> Vec<Vec<u32>> {
    (0..b).map(|i| encode_prompt(CORPUS[(offset + i) % CORPUS.len()].as_bytes())).collect()
}
