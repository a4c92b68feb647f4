//! Inference: greedy and length-normalized beam search over a trained
//! model. Scores are sums of token log-probabilities divided by the
//! hypothesis length; among equal scores the lower token id wins so
//! decoding is fully deterministic.

use crate::corpus::tags::TaggedStreams;
use crate::error::{Error, Result};
use crate::model::forward::ModelInput;
use crate::model::Model;
use crate::tape::Tape;
use crate::tensor::Scalar;

/// Top `k` next tokens of one log-probability row, best first; ties go to
/// the lower token id.
pub fn top_k_tokens(log_probs: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut indexed: Vec<(usize, f64)> = log_probs.iter().copied().enumerate().collect();
    indexed.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    indexed.truncate(k);
    indexed
}

fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let lz = max + z.ln();
    logits.iter().map(|&l| l - lz).collect()
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    score: f64,
}

impl Hypothesis {
    fn normalized(&self) -> f64 {
        self.score / self.tokens.len().max(1) as f64
    }
}

/// Next-token log-probabilities for a partial hypothesis.
fn step_log_probs<E: Scalar>(
    model: &Model<E>,
    source_block: &[usize],
    trigger: usize,
    partial: &[usize],
) -> Result<Vec<f64>> {
    let mut decoder_input = Vec::with_capacity(partial.len() + 1);
    decoder_input.push(trigger);
    decoder_input.extend_from_slice(partial);
    let input = ModelInput {
        source_block: source_block.to_vec(),
        decoder_input,
    };
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = model.forward(&mut tape, &bound, &input, None)?;
    let logits = tape.value(out.logits);
    let (rows, vocab) = logits.rows_cols();
    let last: Vec<f64> = logits.data[(rows - 1) * vocab..]
        .iter()
        .map(|&x| x.as_f64())
        .collect();
    Ok(log_softmax_row(&last))
}

/// Length-normalized beam search. `beam == 1` is greedy decoding. Tokens
/// already present in `tagged.target` (a target-side instruction tag left
/// by the tag strategy once the gold content is cleared) are force-decoded
/// first; the returned tokens exclude that forced prefix, the trigger, and
/// the terminal end-of-sequence.
pub fn beam_search<E: Scalar>(
    model: &Model<E>,
    tagged: &TaggedStreams,
    eos_id: usize,
    beam: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    if beam == 0 {
        return Err(Error::Config("beam width must be positive".into()));
    }
    if max_len == 0 {
        return Err(Error::Config("max_len must be positive".into()));
    }
    let mut source_block = tagged.source.clone();
    source_block.push(eos_id);
    let forced = tagged.target.len();

    let mut live = vec![Hypothesis {
        tokens: tagged.target.clone(),
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let log_probs = step_log_probs(model, &source_block, tagged.trigger, &hyp.tokens)?;
            for (token, lp) in top_k_tokens(&log_probs, beam) {
                let mut tokens = hyp.tokens.clone();
                tokens.push(token);
                candidates.push(Hypothesis {
                    tokens,
                    score: hyp.score + lp,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.normalized()
                .partial_cmp(&a.normalized())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(beam);
        live = Vec::new();
        for c in candidates {
            if *c.tokens.last().unwrap() == eos_id {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    finished.extend(live);
    if finished.is_empty() {
        return Err(Error::Domain("beam search produced no hypotheses".into()));
    }
    finished.sort_by(|a, b| {
        b.normalized()
            .partial_cmp(&a.normalized())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    let mut best = finished.remove(0).tokens;
    if best.last() == Some(&eos_id) {
        best.pop();
    }
    best.drain(..forced.min(best.len()));
    Ok(best)
}

/// Greedy decoding: beam search of width one.
pub fn greedy<E: Scalar>(
    model: &Model<E>,
    tagged: &TaggedStreams,
    eos_id: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    beam_search(model, tagged, eos_id, 1, max_len)
}
