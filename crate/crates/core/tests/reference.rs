//! The bundled toy checkpoint against logits recorded by an independent
//! PyTorch implementation when it was trained.

use std::path::Path;

use olica_core::{data, eval_model, load_checkpoint};

#[derive(serde::Deserialize)]
struct Fixture {
    tokens: Vec<u32>,
    logits: Vec<Vec<f64>>,
    heldout_ppl_seq128: f64,
}

fn fixture() -> Fixture {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/reference_logits.json");
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn toy() -> olica_core::Model {
    load_checkpoint(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy_model.olica")).unwrap()
}

#[test]
fn logits_match_the_reference_implementation() {
    let f = fixture();
    let logits = toy().forward(&f.tokens).unwrap();
    assert_eq!(logits.shape(), (f.logits.len(), f.logits[0].len()));
    let mut worst = 0.0f64;
    for (i, row) in f.logits.iter().enumerate() {
        for (j, want) in row.iter().enumerate() {
            worst = worst.max((logits[(i, j)] - want).abs());
        }
    }
    assert!(worst < 1e-4, "max |Δlogit| = {worst}");
}

#[test]
fn heldout_perplexity_matches_the_reference_implementation() {
    let f = fixture();
    let ppl = eval_model(&toy(), &data::heldout_tokens(), 128).unwrap().perplexity;
    assert!((ppl - f.heldout_ppl_seq128).abs() < 1e-6 * f.heldout_ppl_seq128, "{ppl} vs {}", f.heldout_ppl_seq128);
}
