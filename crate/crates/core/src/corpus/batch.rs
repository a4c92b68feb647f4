//! Token-budget batching. Instances are shuffled with a seeded generator,
//! bucketed by total length so batches stay homogeneous, and packed
//! greedily until the token budget is reached. Each batch is a list of
//! instances processed independently within one optimizer step, so no
//! padding tokens are introduced.

use super::TranslationInstance;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Indices into the instance list forming one optimizer step.
pub type Batch = Vec<usize>;

fn instance_tokens(inst: &TranslationInstance) -> usize {
    // tag + source + eos on the source side, trigger + target + eos labels
    inst.source.len() + inst.target.len() + 4
}

/// Pack `instances` into batches of at most `token_budget` tokens each.
/// The order of batches and of instances within a batch is deterministic
/// in `seed`.
pub fn plan_batches(
    instances: &[TranslationInstance],
    token_budget: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if token_budget == 0 {
        return Err(Error::Config("batch: token budget must be positive".into()));
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    // stable sort by length keeps same-length instances in shuffled order
    order.sort_by_key(|&i| instance_tokens(&instances[i]));

    let mut batches = Vec::new();
    let mut current: Batch = Vec::new();
    let mut current_tokens = 0usize;
    for i in order {
        let t = instance_tokens(&instances[i]);
        if t > token_budget {
            return Err(Error::Config(format!(
                "batch: instance of {t} tokens exceeds budget {token_budget}"
            )));
        }
        if current_tokens + t > token_budget && !current.is_empty() {
            batches.push(std::mem::take(&mut current));
            current_tokens = 0;
        }
        current.push(i);
        current_tokens += t;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};

    #[test]
    fn batches_cover_every_instance_once() {
        let corpus = generate_corpus(&CorpusConfig::default_toy(11)).unwrap();
        let batches = plan_batches(&corpus.train, 256, 3).unwrap();
        let mut seen = vec![false; corpus.train.len()];
        for b in &batches {
            for &i in b {
                assert!(!seen[i], "instance {i} appears twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn budget_is_respected_and_deterministic() {
        let corpus = generate_corpus(&CorpusConfig::default_toy(11)).unwrap();
        let a = plan_batches(&corpus.train, 200, 7).unwrap();
        let b = plan_batches(&corpus.train, 200, 7).unwrap();
        assert_eq!(a, b);
        for batch in &a {
            let tokens: usize = batch
                .iter()
                .map(|&i| instance_tokens(&corpus.train[i]))
                .sum();
            assert!(tokens <= 200);
        }
        let c = plan_batches(&corpus.train, 200, 8).unwrap();
        assert_ne!(a, c, "different seeds should shuffle differently");
    }

    #[test]
    fn oversized_instance_is_rejected() {
        let corpus = generate_corpus(&CorpusConfig::default_toy(11)).unwrap();
        assert!(plan_batches(&corpus.train, 4, 0).is_err());
    }
}
