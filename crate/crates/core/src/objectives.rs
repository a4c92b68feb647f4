//! Training objectives: label-smoothed cross-entropy over target
//! positions, an instruction-level contrastive loss that pulls the
//! language-tag state of a translation toward the tag state of the
//! matching identity pair while pushing apart other instances in the
//! batch, and their joint sum.

use std::rc::Rc;

use crate::corpus::{TranslationInstance, Vocabulary};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Summed label-smoothed cross-entropy over all non-pad label positions.
///
/// `logits` must be `labels.len() x vocab_size`. With smoothing `eps` the
/// target distribution puts `eps / V` on every class and the remainder on
/// the gold label. Positions whose label equals `pad_id` contribute
/// nothing. Returns the loss node and the number of counted tokens.
pub fn cross_entropy<E: Scalar>(
    tape: &mut Tape<E>,
    logits: Var,
    labels: &[usize],
    pad_id: usize,
    eps: f64,
) -> Result<(Var, usize)> {
    let (rows, vocab) = tape.value(logits).rows_cols();
    if rows != labels.len() {
        return Err(Error::Shape(format!(
            "cross_entropy: {rows} logit rows vs {} labels",
            labels.len()
        )));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label smoothing {eps} outside [0, 1)")));
    }
    let log_probs = tape.log_softmax_rows(logits);
    let uniform = E::of_f64(eps / vocab as f64);
    let gold = E::of_f64(1.0 - eps);
    let mut weights = vec![E::zero(); rows * vocab];
    let mut counted = 0usize;
    for (pos, &label) in labels.iter().enumerate() {
        if label >= vocab {
            return Err(Error::Domain(format!(
                "cross_entropy: label {label} outside vocabulary of {vocab}"
            )));
        }
        if label == pad_id {
            continue;
        }
        counted += 1;
        for k in 0..vocab {
            weights[pos * vocab + k] = uniform;
        }
        weights[pos * vocab + label] = weights[pos * vocab + label] + gold;
    }
    let weighted = tape.mul_const(log_probs, Rc::new(weights));
    let total = tape.sum_all(weighted);
    Ok((tape.scale(total, -E::one()), counted))
}

/// The monolingual twin of a translation instance: translate the target
/// sentence into its own language. Used to produce contrastive positives.
pub fn make_identity_pair(
    instance: &TranslationInstance,
    vocab: &Vocabulary,
) -> TranslationInstance {
    TranslationInstance {
        tag: vocab.tag_ids[instance.tgt_lang],
        source: instance.target.clone(),
        target: instance.target.clone(),
        src_lang: instance.tgt_lang,
        tgt_lang: instance.tgt_lang,
    }
}

/// Contrastive loss over language-tag states. `anchors[i]` is the tag
/// state of translation instance i; `positives[i]` the tag state of its
/// identity pair. Every other anchor in the batch serves as a negative:
///
///   L = sum_i -log softmax([cos(a_i, p_i), cos(a_i, a_j)...])[0]
///
/// With a single instance there are no negatives and the loss is exactly
/// zero.
pub fn instrucl_loss<E: Scalar>(
    tape: &mut Tape<E>,
    anchors: &[Var],
    positives: &[Var],
) -> Result<Var> {
    if anchors.len() != positives.len() {
        return Err(Error::Shape(format!(
            "instrucl: {} anchors vs {} positives",
            anchors.len(),
            positives.len()
        )));
    }
    if anchors.is_empty() {
        return Err(Error::Domain("instrucl: empty batch".into()));
    }
    let mut per_instance = Vec::with_capacity(anchors.len());
    for i in 0..anchors.len() {
        let mut sims = Vec::with_capacity(anchors.len());
        sims.push(tape.cosine_sim(anchors[i], positives[i])?);
        for j in 0..anchors.len() {
            if j != i {
                sims.push(tape.cosine_sim(anchors[i], anchors[j])?);
            }
        }
        let row = tape.concat_cols(&sims);
        let log_probs = tape.log_softmax_rows(row);
        // keep only the positive's log-probability
        let mut pick = vec![E::zero(); sims.len()];
        pick[0] = E::one();
        let picked = tape.mul_const(log_probs, Rc::new(pick));
        per_instance.push(tape.sum_all(picked));
    }
    let stacked = tape.concat_rows(&per_instance);
    let total = tape.sum_all(stacked);
    Ok(tape.scale(total, -E::one()))
}

/// Plain sum of the translation and contrastive losses. Errors if the
/// combined value is not finite.
pub fn joint_loss<E: Scalar>(tape: &mut Tape<E>, ce: Var, ctr: Var) -> Result<Var> {
    let total = tape.add(ce, ctr);
    let v = tape.value(total).item().as_f64();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("joint loss is not finite: {v}")));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusConfig;
    use crate::tensor::Tensor;

    #[test]
    fn cross_entropy_matches_independent_computation() {
        // 2 positions, 3 classes, smoothing 0.1
        let logits = [[0.5, -1.0, 2.0], [0.0, 0.0, 1.0]];
        let labels = [2usize, 0];
        let eps = 0.1;
        let mut expect = 0.0f64;
        for (row, &y) in logits.iter().zip(&labels) {
            let z: f64 = row.iter().map(|&l| (l as f64).exp()).sum();
            for (k, &l) in row.iter().enumerate() {
                let q = eps / 3.0 + if k == y { 1.0 - eps } else { 0.0 };
                expect -= q * ((l as f64) - z.ln());
            }
        }
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::of_f64(
            vec![2, 3],
            &logits.iter().flatten().copied().collect::<Vec<_>>(),
        ));
        let (loss, counted) = cross_entropy(&mut tape, v, &labels, 99, eps).unwrap();
        assert_eq!(counted, 2);
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn pad_positions_are_excluded() {
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::of_f64(vec![2, 3], &[0.3, 0.1, 0.2, 5.0, -2.0, 0.4]));
        let (both, _) = cross_entropy(&mut tape, v, &[1, 2], 0, 0.0).unwrap();
        let both_val = tape.value(both).item();
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::of_f64(vec![2, 3], &[0.3, 0.1, 0.2, 5.0, -2.0, 0.4]));
        let (first, counted) = cross_entropy(&mut tape, v, &[1, 0], 0, 0.0).unwrap();
        let first_val = tape.value(first).item();
        assert_eq!(counted, 1);
        assert!(first_val < both_val);
        // the surviving position alone reproduces the single-row loss
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::of_f64(vec![1, 3], &[0.3, 0.1, 0.2]));
        let (solo, _) = cross_entropy(&mut tape, v, &[1], 0, 0.0).unwrap();
        assert!((tape.value(solo).item() - first_val).abs() < 1e-12);
    }

    #[test]
    fn out_of_vocabulary_label_errors() {
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::of_f64(vec![1, 3], &[0.0, 0.0, 0.0]));
        assert!(cross_entropy(&mut tape, v, &[3], 0, 0.0).is_err());
    }

    #[test]
    fn raising_gold_logit_lowers_loss() {
        let mut last = f64::INFINITY;
        for gold in [0.0, 1.0, 2.0, 4.0] {
            let mut tape = Tape::<f64>::new();
            let v = tape.leaf(Tensor::of_f64(vec![1, 3], &[gold, 0.0, 0.0]));
            let (loss, _) = cross_entropy(&mut tape, v, &[0], 99, 0.1).unwrap();
            let val = tape.value(loss).item();
            assert!(val < last);
            last = val;
        }
    }

    #[test]
    fn instrucl_closed_form_for_opposed_pair() {
        // anchors at +x and -x, positives perfectly aligned with each
        // anchor: per-instance loss is ln(1 + e^{-2}).
        let mut tape = Tape::<f64>::new();
        let a1 = tape.leaf(Tensor::of_f64(vec![1, 2], &[1.0, 0.0]));
        let a2 = tape.leaf(Tensor::of_f64(vec![1, 2], &[-1.0, 0.0]));
        let p1 = tape.leaf(Tensor::of_f64(vec![1, 2], &[2.0, 0.0]));
        let p2 = tape.leaf(Tensor::of_f64(vec![1, 2], &[-3.0, 0.0]));
        let loss = instrucl_loss(&mut tape, &[a1, a2], &[p1, p2]).unwrap();
        let expect = 2.0 * (1.0 + (-2.0f64).exp()).ln();
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn instrucl_single_instance_is_exactly_zero() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::of_f64(vec![1, 3], &[0.3, -0.2, 0.9]));
        let p = tape.leaf(Tensor::of_f64(vec![1, 3], &[-1.0, 0.5, 0.1]));
        let loss = instrucl_loss(&mut tape, &[a], &[p]).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn instrucl_prefers_aligned_positive() {
        // moving the positive closer to its anchor must lower the loss
        let eval = |px: f64| {
            let mut tape = Tape::<f64>::new();
            let a1 = tape.leaf(Tensor::of_f64(vec![1, 2], &[1.0, 0.0]));
            let a2 = tape.leaf(Tensor::of_f64(vec![1, 2], &[0.0, 1.0]));
            let p1 = tape.leaf(Tensor::of_f64(vec![1, 2], &[px, 1.0]));
            let p2 = tape.leaf(Tensor::of_f64(vec![1, 2], &[0.1, 1.0]));
            let loss = instrucl_loss(&mut tape, &[a1, a2], &[p1, p2]).unwrap();
            tape.value(loss).item()
        };
        assert!(eval(3.0) < eval(0.5));
    }

    #[test]
    fn identity_pair_translates_target_into_itself() {
        let cfg = CorpusConfig::default_toy(3);
        let vocab = crate::corpus::Vocabulary::build(&cfg).unwrap();
        let inst = TranslationInstance {
            tag: vocab.tag_ids[2],
            source: vec![vocab.content_base[0]],
            target: vec![vocab.content_base[2] + 1, vocab.content_base[2]],
            src_lang: 0,
            tgt_lang: 2,
        };
        let pair = make_identity_pair(&inst, &vocab);
        assert_eq!(pair.source, inst.target);
        assert_eq!(pair.target, inst.target);
        assert_eq!(pair.tag, vocab.tag_ids[2]);
        assert_eq!(pair.src_lang, 2);
    }

    #[test]
    fn joint_loss_rejects_non_finite() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(f64::INFINITY));
        let b = tape.leaf(Tensor::scalar(1.0));
        assert!(joint_loss(&mut tape, a, b).is_err());
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let b = tape.leaf(Tensor::scalar(1.5));
        let j = joint_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(j).item(), 3.5);
    }
}
