//! Training loop: Adam with an inverse-square-root learning-rate schedule,
//! token-budget batches, optional contrastive term over language-tag
//! states, per-step loss traces, and periodic checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::batch::plan_batches;
use crate::corpus::tags::apply_tag_strategy;
use crate::corpus::{assemble::assemble_model_input, Corpus};
use crate::error::{Error, Result};
use crate::model::forward::collect_instruction_state;
use crate::model::{checkpoint, Model};
use crate::objectives::{cross_entropy, instrucl_loss, joint_loss, make_identity_pair};
use crate::tape::Tape;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; absent means no clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 5e-4,
            warmup: 400,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch_tokens: usize,
    pub seed: u64,
    /// Steps between checkpoints; absent means final checkpoint only.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 3000,
            batch_tokens: 2048,
            seed: 0,
            checkpoint_every: None,
        }
    }
}

/// Inverse-square-root schedule with linear warmup; peaks at `base` when
/// `step == warmup`. Steps are 1-based.
pub fn learning_rate(base: f64, warmup: usize, step: usize) -> f64 {
    let w = warmup.max(1) as f64;
    let t = step.max(1) as f64;
    base * (t / w).min((w / t).sqrt())
}

/// Adam state for one parameter set, stored in f64 regardless of the
/// training precision.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
    config: OptimizerConfig,
}

impl Adam {
    pub fn new(sizes: &[usize], config: OptimizerConfig) -> Self {
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            config,
        }
    }

    /// One update over all tensors; `grads[i]` pairs with `params[i]`.
    pub fn step<E: Scalar>(
        &mut self,
        params: &mut [crate::tensor::Tensor<E>],
        grads: &[Vec<f64>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "adam: {} tensors vs {} gradients",
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let scale = self.clip_scale(grads)?;
        for (i, tensor) in params.iter_mut().enumerate() {
            for (j, p) in tensor.data.iter_mut().enumerate() {
                let g = grads[i][j] * scale;
                if !g.is_finite() {
                    return Err(Error::Numeric("adam: non-finite gradient".into()));
                }
                self.m[i][j] = b1 * self.m[i][j] + (1.0 - b1) * g;
                self.v[i][j] = b2 * self.v[i][j] + (1.0 - b2) * g * g;
                let m_hat = self.m[i][j] / bc1;
                let v_hat = self.v[i][j] / bc2;
                let mut x = p.as_f64();
                x -= lr * (m_hat / (v_hat.sqrt() + self.config.eps)
                    + self.config.weight_decay * x);
                *p = E::of_f64(x);
            }
        }
        Ok(())
    }

    fn clip_scale(&self, grads: &[Vec<f64>]) -> Result<f64> {
        let Some(limit) = self.config.clip_norm else {
            return Ok(1.0);
        };
        let sq: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&g| g * g)
            .sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric("adam: non-finite gradient norm".into()));
        }
        Ok(if norm > limit { limit / norm } else { 1.0 })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_ctr: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    pub final_ce: f64,
    pub final_ctr: f64,
}

pub fn write_trace_csv(trace: &[TraceRow], path: &Path) -> Result<()> {
    let mut out = String::from("step,lr,loss_ce,loss_ctr\n");
    for row in trace {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.step, row.lr, row.loss_ce, row.loss_ctr
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Train `model` in place on the supervised portion of `corpus`.
///
/// Each step runs the instances of one batch through fresh tapes, sums
/// token-normalized cross-entropy with the batch-normalized contrastive
/// term (when the model's configuration names a contrastive layer), and
/// applies one Adam update. Identity pairs are built on the fly for the
/// contrastive term only; they never contribute translation loss.
pub fn train<E: Scalar>(
    model: &mut Model<E>,
    corpus: &Corpus,
    opt: &OptimizerConfig,
    cfg: &TrainingConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    if cfg.steps == 0 {
        return Err(Error::Config("training steps must be positive".into()));
    }
    let sizes: Vec<usize> = model.params.tensors.iter().map(|t| t.numel()).collect();
    let mut adam = Adam::new(&sizes, opt.clone());
    let mut trace = Vec::with_capacity(cfg.steps);

    let mut batches = Vec::new();
    let mut epoch = 0u64;
    let mut cursor = 0usize;
    for step in 1..=cfg.steps {
        if cursor >= batches.len() {
            batches = plan_batches(&corpus.train, cfg.batch_tokens, cfg.seed ^ epoch)?;
            epoch += 1;
            cursor = 0;
        }
        let batch = &batches[cursor];
        cursor += 1;

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let mut ce_terms = Vec::with_capacity(batch.len());
        let mut tokens = 0usize;
        let mut anchors = Vec::new();
        let mut positives = Vec::new();
        for &idx in batch {
            let inst = &corpus.train[idx];
            let tagged = apply_tag_strategy(inst, model.config.tag_strategy, &corpus.vocab)?;
            let asm = assemble_model_input(&tagged, corpus.vocab.eos_id)?;
            let out = model.forward(&mut tape, &bound, &asm.input, None)?;
            let (ce, counted) = cross_entropy(
                &mut tape,
                out.logits,
                &asm.labels,
                corpus.vocab.pad_id,
                model.config.label_smoothing,
            )?;
            ce_terms.push(ce);
            tokens += counted;
            if let Some(layer) = model.config.instrucl_layer {
                anchors.push(collect_instruction_state(&mut tape, &out.states, layer)?);
                let pair = make_identity_pair(inst, &corpus.vocab);
                let pair_tagged =
                    apply_tag_strategy(&pair, model.config.tag_strategy, &corpus.vocab)?;
                let pair_asm = assemble_model_input(&pair_tagged, corpus.vocab.eos_id)?;
                let pair_out = model.forward(&mut tape, &bound, &pair_asm.input, None)?;
                positives.push(collect_instruction_state(
                    &mut tape,
                    &pair_out.states,
                    layer,
                )?);
            }
        }
        let ce_stack = tape.concat_rows(&ce_terms);
        let ce_sum = tape.sum_all(ce_stack);
        let ce_mean = tape.scale(ce_sum, E::of_f64(1.0 / tokens.max(1) as f64));
        let loss = if anchors.is_empty() {
            ce_mean
        } else {
            let ctr = instrucl_loss(&mut tape, &anchors, &positives)?;
            let ctr_mean = tape.scale(ctr, E::of_f64(1.0 / batch.len() as f64));
            joint_loss(&mut tape, ce_mean, ctr_mean)?
        };
        let loss_ce = tape.value(ce_mean).item().as_f64();
        let loss_ctr = tape.value(loss).item().as_f64() - loss_ce;
        if !tape.value(loss).item().as_f64().is_finite() {
            return Err(Error::Numeric(format!("step {step}: non-finite loss")));
        }

        tape.backward(loss)?;
        let grads: Vec<Vec<f64>> = model
            .param_vars(&bound)
            .iter()
            .zip(&sizes)
            .map(|(&v, &n)| match tape.grad(v) {
                Some(g) => g.iter().map(|&x| x.as_f64()).collect(),
                None => vec![0.0; n],
            })
            .collect();
        drop(tape);

        let lr = learning_rate(opt.lr, opt.warmup, step);
        adam.step(&mut model.params.tensors, &grads, lr)?;
        trace.push(TraceRow {
            step,
            lr,
            loss_ce,
            loss_ctr,
        });

        if let (Some(dir), Some(every)) = (checkpoint_dir, cfg.checkpoint_every) {
            if step % every == 0 {
                checkpoint::save(model, &dir.join(format!("step-{step}")))?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        checkpoint::save(model, &dir.join("final"))?;
    }
    let last = trace.last().unwrap();
    Ok(TrainReport {
        final_ce: last.loss_ce,
        final_ctr: last.loss_ctr,
        trace,
    })
}
