//! Bundled byte-level corpus: system license texts split by
//! paragraph, every tenth paragraph held out.

pub const TRAIN: &[u8] = include_bytes!("../data/corpus_train.txt");
pub const HELDOUT: &[u8] = include_bytes!("../data/corpus_heldout.txt");

pub fn train_tokens() -> Vec<u32> {
    crate::model::tokenize_bytes(TRAIN)
}

pub fn heldout_tokens() -> Vec<u32> {
    crate::model::tokenize_bytes(HELDOUT)
}
