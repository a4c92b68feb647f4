//! Architecture-independent input assembly: end-of-sequence framing and
//! label construction. The encoder-decoder feeds `source_block` to the
//! encoder and `decoder_input` to the decoder; the decoder-only stacks
//! concatenate the two blocks into one stream. Labels cover target
//! positions only.

use super::tags::TaggedStreams;
use crate::error::{Error, Result};
use crate::model::forward::ModelInput;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledInput {
    pub input: ModelInput,
    /// Next-token labels for each decoder-input position.
    pub labels: Vec<usize>,
}

pub fn assemble_model_input(tagged: &TaggedStreams, eos_id: usize) -> Result<AssembledInput> {
    if tagged.source.is_empty() {
        return Err(Error::Config("assemble: empty source".into()));
    }
    let mut source_block = tagged.source.clone();
    source_block.push(eos_id);
    let mut decoder_input = Vec::with_capacity(tagged.target.len() + 1);
    decoder_input.push(tagged.trigger);
    decoder_input.extend_from_slice(&tagged.target);
    let mut labels = tagged.target.clone();
    labels.push(eos_id);
    Ok(AssembledInput {
        input: ModelInput {
            source_block,
            decoder_input,
        },
        labels,
    })
}
