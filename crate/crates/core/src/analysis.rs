//! Layer-wise linguistic-preference analysis. For a translation run
//! (l_y, x, y) we pool the source-position states at every layer and
//! measure, via SVD-reduced canonical correlation, whether they look more
//! like the states of the target-language identity run (l_y, y, y) or the
//! source-language identity run (l_x, x, x). A score above 0.5 means the
//! layer leans toward the target language.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::corpus::tags::apply_tag_strategy;
use crate::corpus::{assemble::assemble_model_input, Corpus, TranslationInstance};
use crate::error::{Error, Result};
use crate::linalg::{cca, svd_reduce, Mat};
use crate::model::Model;
use crate::tape::Tape;
use crate::tensor::Scalar;

/// Minimum number of aligned sentences for a stable correlation.
pub const MIN_SENTENCES: usize = 8;
/// Variance fraction retained by the SVD reduction step.
pub const VARIANCE_RETAINED: f64 = 0.99;

/// Mean over the rows of a states matrix (positions x d).
pub fn sentence_representation(states: &Mat) -> Result<Vec<f64>> {
    if states.rows == 0 {
        return Err(Error::Analysis("sentence_representation: no positions".into()));
    }
    let mut mean = vec![0.0; states.cols];
    for i in 0..states.rows {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += states.get(i, j);
        }
    }
    for m in &mut mean {
        *m /= states.rows as f64;
    }
    Ok(mean)
}

/// SVD-reduce both sides to the directions covering [`VARIANCE_RETAINED`]
/// of their variance, then return the mean canonical correlation.
pub fn svcca_correlation(a: &Mat, b: &Mat) -> Result<f64> {
    if a.rows != b.rows {
        return Err(Error::Analysis(format!(
            "svcca: {} vs {} sentences",
            a.rows, b.rows
        )));
    }
    if a.rows < MIN_SENTENCES {
        return Err(Error::Analysis(format!(
            "svcca: need at least {MIN_SENTENCES} sentences, got {}",
            a.rows
        )));
    }
    let ar = svd_reduce(a, VARIANCE_RETAINED)?;
    let br = svd_reduce(b, VARIANCE_RETAINED)?;
    let k = ar.cols.min(br.cols);
    let c = cca(&ar, &br, k)?;
    if c.correlations.is_empty() {
        return Err(Error::Analysis("svcca: no canonical directions".into()));
    }
    Ok(c.correlations.iter().sum::<f64>() / c.correlations.len() as f64)
}

/// s = ρ_y / (ρ_y + ρ_x); `None` marks the undefined both-zero case,
/// reported as a missing datum.
pub fn preference_score(rho_y: f64, rho_x: f64) -> Result<Option<f64>> {
    if rho_y < 0.0 || rho_x < 0.0 {
        return Err(Error::Analysis(format!(
            "preference_score: negative correlation ({rho_y}, {rho_x})"
        )));
    }
    if rho_y + rho_x == 0.0 {
        return Ok(None);
    }
    Ok(Some(rho_y / (rho_y + rho_x)))
}

#[derive(Debug, Clone, Serialize)]
pub struct PreferenceRow {
    pub layer: usize,
    pub direction: String,
    pub rho_x: f64,
    pub rho_y: f64,
    /// Absent when both correlations vanish.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PreferenceReport {
    pub rows: Vec<PreferenceRow>,
    pub layers: Vec<LayerSummary>,
}

/// Pooled source-position states of one instance at every recorded layer;
/// `out[l]` is the layer-(l+1) representation.
fn pooled_states<E: Scalar>(
    model: &Model<E>,
    corpus: &Corpus,
    instance: &TranslationInstance,
) -> Result<Vec<Vec<f64>>> {
    let tagged = apply_tag_strategy(instance, model.config.tag_strategy, &corpus.vocab)?;
    let asm = assemble_model_input(&tagged, corpus.vocab.eos_id)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = model.forward(&mut tape, &bound, &asm.input, None)?;
    let mut pooled = Vec::with_capacity(out.states.num_layers());
    for l in 1..=out.states.num_layers() {
        let v = out.states.source_states(&mut tape, l)?;
        let t = tape.value(v);
        let (rows, cols) = t.rows_cols();
        let mat = Mat::from_rows(
            &(0..rows)
                .map(|r| t.data[r * cols..(r + 1) * cols].iter().map(|&x| x.as_f64()).collect())
                .collect::<Vec<_>>(),
        );
        pooled.push(sentence_representation(&mat)?);
    }
    Ok(pooled)
}

/// Stack per-sentence layer representations into one matrix per layer.
fn per_layer_matrices(reps: &[Vec<Vec<f64>>]) -> Vec<Mat> {
    let layers = reps[0].len();
    (0..layers)
        .map(|l| Mat::from_rows(&reps.iter().map(|r| r[l].clone()).collect::<Vec<_>>()))
        .collect()
}

/// Run the preference analysis over `directions` (pairs of language
/// indices) using the multi-way parallel set of `corpus`.
pub fn layerwise_preference<E: Scalar>(
    model: &Model<E>,
    corpus: &Corpus,
    directions: &[(usize, usize)],
) -> Result<PreferenceReport> {
    let langs = corpus.vocab.num_languages();
    let sentences = corpus.parallel.renderings.len();
    if sentences == 0 {
        return Err(Error::Analysis("no parallel sentences available".into()));
    }
    let mut rows = Vec::new();
    let mut by_layer: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &(sx, ty) in directions {
        if sx >= langs || ty >= langs {
            return Err(Error::Analysis(format!(
                "direction ({sx}, {ty}) outside the {langs} parallel languages"
            )));
        }
        if sx == ty {
            return Err(Error::Analysis(
                "identity directions are excluded from preference reports".into(),
            ));
        }
        let mut trans_reps = Vec::new();
        let mut tgt_reps = Vec::new();
        let mut src_reps = Vec::new();
        for sent in 0..sentences {
            let x = corpus.parallel.renderings[sent][sx].clone();
            let y = corpus.parallel.renderings[sent][ty].clone();
            let translation = TranslationInstance {
                tag: corpus.vocab.tag_ids[ty],
                source: x.clone(),
                target: y.clone(),
                src_lang: sx,
                tgt_lang: ty,
            };
            let tgt_identity = TranslationInstance {
                tag: corpus.vocab.tag_ids[ty],
                source: y.clone(),
                target: y.clone(),
                src_lang: ty,
                tgt_lang: ty,
            };
            let src_identity = TranslationInstance {
                tag: corpus.vocab.tag_ids[sx],
                source: x.clone(),
                target: x,
                src_lang: sx,
                tgt_lang: sx,
            };
            trans_reps.push(pooled_states(model, corpus, &translation)?);
            tgt_reps.push(pooled_states(model, corpus, &tgt_identity)?);
            src_reps.push(pooled_states(model, corpus, &src_identity)?);
        }
        let trans = per_layer_matrices(&trans_reps);
        let tgt = per_layer_matrices(&tgt_reps);
        let src = per_layer_matrices(&src_reps);
        let direction = format!(
            "{}->{}",
            corpus.config.languages[sx].name, corpus.config.languages[ty].name
        );
        for l in 0..trans.len() {
            let rho_y = svcca_correlation(&trans[l], &tgt[l])?;
            let rho_x = svcca_correlation(&trans[l], &src[l])?;
            let score = preference_score(rho_y, rho_x)?;
            if let Some(s) = score {
                by_layer.entry(l + 1).or_default().push(s);
            }
            rows.push(PreferenceRow {
                layer: l + 1,
                direction: direction.clone(),
                rho_x,
                rho_y,
                score,
            });
        }
    }
    let layers = by_layer
        .into_iter()
        .map(|(layer, scores)| {
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            LayerSummary { layer, mean, min, max }
        })
        .collect();
    Ok(PreferenceReport { rows, layers })
}

pub fn write_report_csv(report: &PreferenceReport, path: &Path) -> Result<()> {
    let mut out = String::from("layer,direction,rho_x,rho_y,score\n");
    for r in &report.rows {
        let score = r.score.map(|s| s.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.layer, r.direction, r.rho_x, r.rho_y, score
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_report_json(report: &PreferenceReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Analysis(format!("report encode: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::model::{Architecture, MaskMode, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_rows(
            &(0..rows)
                .map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect::<Vec<_>>(),
        )
    }

    #[test]
    fn pooling_basics() {
        let single = Mat::from_rows(&[vec![1.0, 2.0, 3.0]]);
        assert_eq!(sentence_representation(&single).unwrap(), vec![1.0, 2.0, 3.0]);
        let opposed = Mat::from_rows(&[vec![1.0, -2.0], vec![-1.0, 2.0]]);
        assert_eq!(sentence_representation(&opposed).unwrap(), vec![0.0, 0.0]);
        let constant = Mat::from_rows(&vec![vec![4.0, 5.0]; 3]);
        assert_eq!(sentence_representation(&constant).unwrap(), vec![4.0, 5.0]);
        assert!(sentence_representation(&Mat::zeros(0, 3)).is_err());
    }

    #[test]
    fn svcca_self_similarity_and_symmetry() {
        let x = random_mat(24, 5, 1);
        let rho = svcca_correlation(&x, &x).unwrap();
        assert!((rho - 1.0).abs() < 1e-6);
        let y = random_mat(24, 5, 2);
        let ab = svcca_correlation(&x, &y).unwrap();
        let ba = svcca_correlation(&y, &x).unwrap();
        assert!((ab - ba).abs() < 1e-6, "asymmetric: {ab} vs {ba}");
    }

    #[test]
    fn svcca_invariant_to_rotation() {
        let x = random_mat(30, 3, 3);
        // rotate by a fixed orthogonal matrix (Givens in first two dims)
        let (c, s) = (0.6f64, 0.8f64);
        let mut r = Mat::eye(3);
        r.set(0, 0, c);
        r.set(0, 1, -s);
        r.set(1, 0, s);
        r.set(1, 1, c);
        let xr = x.matmul(&r);
        let rho = svcca_correlation(&x, &xr).unwrap();
        assert!((rho - 1.0).abs() < 1e-6);
    }

    #[test]
    fn svcca_rejects_small_sets() {
        let x = random_mat(4, 3, 4);
        assert!(svcca_correlation(&x, &x).is_err());
    }

    #[test]
    fn preference_score_formula() {
        assert_eq!(preference_score(0.4, 0.4).unwrap(), Some(0.5));
        assert_eq!(preference_score(0.7, 0.0).unwrap(), Some(1.0));
        assert_eq!(preference_score(0.8, 0.2).unwrap(), Some(0.8));
        assert_eq!(preference_score(0.0, 0.0).unwrap(), None);
        assert!(preference_score(-0.1, 0.5).is_err());
        // monotone in rho_y at fixed rho_x
        let a = preference_score(0.3, 0.5).unwrap().unwrap();
        let b = preference_score(0.6, 0.5).unwrap().unwrap();
        assert!(b > a);
    }

    #[test]
    fn report_covers_layers_and_directions() {
        let mut ccfg = CorpusConfig::default_toy(8);
        ccfg.parallel_set_size = 12;
        ccfg.train_per_direction = 4;
        ccfg.valid_per_direction = 2;
        ccfg.test_per_direction = 2;
        let corpus = generate_corpus(&ccfg).unwrap();
        let mcfg = ModelConfig {
            architecture: Architecture::Tdo,
            mask_mode: MaskMode::Prefix,
            n: 1,
            m: 1,
            d: 16,
            ffn_inner_stage1: 0,
            ffn_inner_stage2: 0,
            heads: 2,
            adaptation: false,
            instrucl_layer: None,
            tag_strategy: 1,
            dropout: 0.0,
            label_smoothing: 0.1,
            vocab_size: corpus.vocab.size(),
            pre_norm: false,
        };
        let model = Model::<f32>::init(mcfg, 5).unwrap();
        let directions = [(1usize, 2usize), (3, 4)];
        let report = layerwise_preference(&model, &corpus, &directions).unwrap();
        // 2N layers x 2 directions
        assert_eq!(report.rows.len(), 2 * 2);
        assert_eq!(report.layers.len(), 2);
        for s in &report.layers {
            assert!(s.min <= s.mean && s.mean <= s.max);
            assert!(s.min >= 0.0 && s.max <= 1.0);
        }
        // untrained model shows no strong preference at the first layer
        let l1 = &report.layers[0];
        assert!(
            l1.mean > 0.35 && l1.mean < 0.65,
            "unexpected layer-1 preference {}",
            l1.mean
        );
        // identity directions are refused
        assert!(layerwise_preference(&model, &corpus, &[(1, 1)]).is_err());
    }

    #[test]
    fn report_files_are_deterministic() {
        let mut ccfg = CorpusConfig::default_toy(9);
        ccfg.parallel_set_size = 10;
        ccfg.train_per_direction = 4;
        ccfg.valid_per_direction = 2;
        ccfg.test_per_direction = 2;
        let corpus = generate_corpus(&ccfg).unwrap();
        let mcfg = ModelConfig {
            architecture: Architecture::DecoderOnly,
            mask_mode: MaskMode::Causal,
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
        let model = Model::<f32>::init(mcfg, 6).unwrap();
        let report = layerwise_preference(&model, &corpus, &[(1, 2)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv1 = dir.path().join("a.csv");
        let csv2 = dir.path().join("b.csv");
        write_report_csv(&report, &csv1).unwrap();
        let report2 = layerwise_preference(&model, &corpus, &[(1, 2)]).unwrap();
        write_report_csv(&report2, &csv2).unwrap();
        assert_eq!(
            std::fs::read_to_string(&csv1).unwrap(),
            std::fs::read_to_string(&csv2).unwrap()
        );
        let json = dir.path().join("a.json");
        write_report_json(&report, &json).unwrap();
        assert!(std::fs::read_to_string(&json).unwrap().contains("\"layers\""));
    }
}
