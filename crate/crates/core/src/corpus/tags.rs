//! The five instruction-tag placement strategies.
//!
//! 1. target-language tag at the start of the source tokens
//! 2. target-language tag at the start of the target tokens
//! 3. like (2), but the tag replaces the end-of-sequence decoding trigger
//! 4. target-language tag at the start of both sides
//! 5. source-language tag on the source side, target-language tag on the
//!    target side

use super::{TranslationInstance, Vocabulary};
use crate::error::{Error, Result};

/// Token streams after tag placement, before end-of-sequence framing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedStreams {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    /// First decoder input token: eos for every strategy except 3, where
    /// the tag itself triggers decoding.
    pub trigger: usize,
}

pub fn apply_tag_strategy(
    instance: &TranslationInstance,
    strategy: u8,
    vocab: &Vocabulary,
) -> Result<TaggedStreams> {
    let tag_y = instance.tag;
    let tag_x = vocab.tag_ids[instance.src_lang];
    let prepend = |tag: usize, toks: &[usize]| {
        let mut v = Vec::with_capacity(toks.len() + 1);
        v.push(tag);
        v.extend_from_slice(toks);
        v
    };
    let (source, target, trigger) = match strategy {
        1 => (prepend(tag_y, &instance.source), instance.target.clone(), vocab.eos_id),
        2 => (instance.source.clone(), prepend(tag_y, &instance.target), vocab.eos_id),
        3 => (instance.source.clone(), instance.target.clone(), tag_y),
        4 => (
            prepend(tag_y, &instance.source),
            prepend(tag_y, &instance.target),
            vocab.eos_id,
        ),
        5 => (
            prepend(tag_x, &instance.source),
            prepend(tag_y, &instance.target),
            vocab.eos_id,
        ),
        other => return Err(Error::Config(format!("unknown tag strategy {other}"))),
    };
    Ok(TaggedStreams {
        source,
        target,
        trigger,
    })
}
