//! Evaluation harness: decode a test set, score each translation
//! direction, and aggregate into the three reporting groups — out of
//! English, into English, and zero-shot (neither side English).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::tags::apply_tag_strategy;
use crate::corpus::{Corpus, TranslationInstance, Vocabulary};
use crate::decode::beam_search;
use crate::error::{Error, Result};
use crate::metrics::{bleu, char_f, exact_match, off_target_rate, token_accuracy};
use crate::model::Model;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Metrics {
    pub sentences: usize,
    pub token_accuracy: f64,
    pub exact_match: f64,
    pub bleu: f64,
    pub char_f: f64,
    pub off_target: f64,
}

/// Score hypothesis/reference pairs; `requested[i]` is the language the
/// hypothesis was asked for.
pub fn score_pairs(
    pairs: &[(Vec<usize>, Vec<usize>)],
    requested: &[usize],
    vocab: &Vocabulary,
) -> Result<Metrics> {
    if pairs.is_empty() {
        return Err(Error::Domain("evaluate: empty pair set".into()));
    }
    let hyps: Vec<Vec<usize>> = pairs.iter().map(|(h, _)| h.clone()).collect();
    Ok(Metrics {
        sentences: pairs.len(),
        token_accuracy: token_accuracy(pairs),
        exact_match: exact_match(pairs),
        bleu: bleu(pairs),
        char_f: char_f(pairs, vocab),
        off_target: off_target_rate(&hyps, requested, vocab)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    /// "direction" or "group".
    pub scope: String,
    pub name: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

fn group_of(inst: &TranslationInstance) -> &'static str {
    if inst.src_lang == 0 {
        "en->"
    } else if inst.tgt_lang == 0 {
        "->en"
    } else {
        "zero-shot"
    }
}

/// Decode and score `instances` with the given beam width.
pub fn evaluate<E: Scalar>(
    model: &Model<E>,
    corpus: &Corpus,
    instances: &[TranslationInstance],
    beam: usize,
    max_len: usize,
) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(Error::Domain("evaluate: no instances".into()));
    }
    // (pairs, requested language) keyed by direction and by group
    type Bucket = (Vec<(Vec<usize>, Vec<usize>)>, Vec<usize>);
    let mut directions: BTreeMap<String, Bucket> = BTreeMap::new();
    let mut groups: BTreeMap<String, Bucket> = BTreeMap::new();
    for inst in instances {
        let mut decode_inst = inst.clone();
        decode_inst.target.clear();
        let tagged = apply_tag_strategy(&decode_inst, model.config.tag_strategy, &corpus.vocab)?;
        let hyp = beam_search(model, &tagged, corpus.vocab.eos_id, beam, max_len)?;
        let name = format!(
            "{}->{}",
            corpus.config.languages[inst.src_lang].name,
            corpus.config.languages[inst.tgt_lang].name
        );
        for bucket in [
            directions.entry(name).or_default(),
            groups.entry(group_of(inst).to_string()).or_default(),
        ] {
            bucket.0.push((hyp.clone(), inst.target.clone()));
            bucket.1.push(inst.tgt_lang);
        }
    }
    let mut rows = Vec::new();
    for (name, (pairs, requested)) in &directions {
        rows.push(EvalRow {
            scope: "direction".into(),
            name: name.clone(),
            metrics: score_pairs(pairs, requested, &corpus.vocab)?,
        });
    }
    for (name, (pairs, requested)) in &groups {
        rows.push(EvalRow {
            scope: "group".into(),
            name: name.clone(),
            metrics: score_pairs(pairs, requested, &corpus.vocab)?,
        });
    }
    Ok(EvalReport { rows })
}

pub fn write_eval_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut out =
        String::from("scope,name,sentences,token_accuracy,exact_match,bleu,char_f,off_target\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.scope,
            r.name,
            r.metrics.sentences,
            r.metrics.token_accuracy,
            r.metrics.exact_match,
            r.metrics.bleu,
            r.metrics.char_f,
            r.metrics.off_target
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_eval_json(report: &EvalReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Analysis(format!("eval report encode: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::model::{Architecture, MaskMode, ModelConfig};

    fn tiny() -> (Corpus, Model<f32>) {
        let mut ccfg = CorpusConfig::default_toy(4);
        ccfg.train_per_direction = 4;
        ccfg.valid_per_direction = 2;
        ccfg.test_per_direction = 2;
        ccfg.parallel_set_size = 4;
        let corpus = generate_corpus(&ccfg).unwrap();
        let mcfg = ModelConfig {
            architecture: Architecture::DecoderOnly,
            mask_mode: MaskMode::Prefix,
            n: 1,
            m: 1,
            d: 8,
            ffn_inner_stage1: 0,
            ffn_inner_stage2: 0,
            heads: 1,
            adaptation: false,
            instrucl_layer: None,
            tag_strategy: 1,
            dropout: 0.0,
            label_smoothing: 0.1,
            vocab_size: corpus.vocab.size(),
            pre_norm: false,
        };
        let model = Model::init(mcfg, 2).unwrap();
        (corpus, model)
    }

    #[test]
    fn perfect_pairs_hit_ceiling_scores() {
        let (corpus, _) = tiny();
        let a = corpus.vocab.content_base[1];
        let pairs = vec![
            (vec![a, a + 1, a + 2, a + 3], vec![a, a + 1, a + 2, a + 3]),
            (vec![a + 2, a + 1, a + 3, a], vec![a + 2, a + 1, a + 3, a]),
        ];
        let m = score_pairs(&pairs, &[1, 1], &corpus.vocab).unwrap();
        assert_eq!(m.token_accuracy, 1.0);
        assert_eq!(m.exact_match, 1.0);
        assert!((m.bleu - 1.0).abs() < 1e-12);
        assert_eq!(m.off_target, 0.0);
    }

    #[test]
    fn wrong_alphabet_everywhere_is_fully_off_target() {
        let (corpus, _) = tiny();
        let a = corpus.vocab.content_base[2];
        let pairs = vec![(vec![a, a + 1], vec![a, a + 1])];
        // requested language 1, produced language 2
        let m = score_pairs(&pairs, &[1], &corpus.vocab).unwrap();
        assert_eq!(m.off_target, 1.0);
    }

    #[test]
    fn report_covers_directions_and_groups() {
        let (corpus, model) = tiny();
        let mut instances = corpus.test_supervised.clone();
        instances.extend(corpus.test_zeroshot.iter().cloned());
        let report = evaluate(&model, &corpus, &instances, 1, 6).unwrap();
        let groups: Vec<&str> = report
            .rows
            .iter()
            .filter(|r| r.scope == "group")
            .map(|r| r.name.as_str())
            .collect();
        assert!(groups.contains(&"en->"));
        assert!(groups.contains(&"->en"));
        assert!(groups.contains(&"zero-shot"));
        for r in &report.rows {
            for v in [
                r.metrics.token_accuracy,
                r.metrics.exact_match,
                r.metrics.bleu,
                r.metrics.char_f,
                r.metrics.off_target,
            ] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("eval.csv");
        write_eval_csv(&report, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("scope,name,"));
        assert_eq!(text.lines().count(), report.rows.len() + 1);
    }
}
