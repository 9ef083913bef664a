//! Character tokenization, input packing, MLM corruption and corpus files.

pub mod corpus;
pub mod mask;
pub mod pack;
pub mod tags;
pub mod vocab;

pub use corpus::{Example, Input, Label, TaskKind};
pub use mask::{apply_mlm_mask, MaskedBatch, MaskingConfig, NO_LABEL};
pub use pack::{pack_classification_input, pack_ner_input, PackedExample, Payload, IGNORE_TAG};
pub use tags::TagSet;
pub use vocab::Vocab;
