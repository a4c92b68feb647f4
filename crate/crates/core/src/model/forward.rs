//! Forward passes for the three architecture families, built on the tape.
//!
//! Every forward records per-layer hidden states for the source positions
//! so the contrastive objective and the preference analysis can read the
//! tag-position representation at any depth.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::mask::{build_mask, Stage};
use super::positional::{concat_table, table, Role};
use super::{Architecture, Model};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var, VisMask};
use crate::tensor::Scalar;

/// Tape handles for every parameter, in layout order.
pub struct Bound {
    vars: Vec<Var>,
}

/// Streams ready for a forward pass; see `corpus::assemble_model_input`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInput {
    /// Tagged source tokens with terminal end-of-sequence.
    pub source_block: Vec<usize>,
    /// Trigger-shifted target stream.
    pub decoder_input: Vec<usize>,
}

/// Per-layer hidden representations recorded during a forward pass.
pub struct LayerStates {
    /// Output of each recorded layer. Entries for the joint stream carry
    /// source rows first; `source_len` rows belong to the source block.
    layers: Vec<Var>,
    pub source_len: usize,
    pub final_target: Var,
}

impl LayerStates {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Raw output of a 1-based layer index.
    pub fn layer(&self, index: usize) -> Result<Var> {
        if index == 0 || index > self.layers.len() {
            return Err(Error::Domain(format!(
                "layer index {index} not recorded (1..={})",
                self.layers.len()
            )));
        }
        Ok(self.layers[index - 1])
    }

    /// Source-position states of a layer, `source_len` rows.
    pub fn source_states<E: Scalar>(&self, tape: &mut Tape<E>, index: usize) -> Result<Var> {
        let v = self.layer(index)?;
        Ok(tape.slice_rows(v, 0, self.source_len))
    }
}

/// The position-1 (language tag) representation at the given layer.
pub fn collect_instruction_state<E: Scalar>(
    tape: &mut Tape<E>,
    states: &LayerStates,
    layer_index: usize,
) -> Result<Var> {
    let v = states.layer(layer_index)?;
    Ok(tape.slice_rows(v, 0, 1))
}

pub struct ForwardOutput {
    /// Logits over the vocabulary for each target position.
    pub logits: Var,
    pub states: LayerStates,
}

struct Ctx<'a, E: Scalar> {
    tape: &'a mut Tape<E>,
    bound: &'a Bound,
    dropout: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a, E: Scalar> Ctx<'a, E> {
    fn p(&self, model: &Model<E>, name: &str) -> Var {
        self.bound.vars[model.params.index_of(name)]
    }

    fn drop(&mut self, x: Var) -> Var {
        if self.dropout <= 0.0 {
            return x;
        }
        let rng = match self.rng.as_deref_mut() {
            Some(r) => r,
            None => return x,
        };
        let n = self.tape.value(x).numel();
        let keep = 1.0 - self.dropout;
        let scale = E::of_f64(1.0 / keep);
        let mask: Vec<E> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    scale
                } else {
                    E::zero()
                }
            })
            .collect();
        self.tape.mul_const(x, Rc::new(mask))
    }
}

impl<E: Scalar> Model<E> {
    /// Register every parameter on the tape as a leaf, in layout order.
    pub fn bind(&self, tape: &mut Tape<E>) -> Bound {
        Bound {
            vars: self
                .params
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone()))
                .collect(),
        }
    }

    pub fn param_var(&self, bound: &Bound, name: &str) -> Var {
        bound.vars[self.params.index_of(name)]
    }

    pub fn param_vars<'a>(&self, bound: &'a Bound) -> &'a [Var] {
        &bound.vars
    }

    /// Dispatching forward pass.
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        input: &ModelInput,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        match self.config.architecture {
            Architecture::EncoderDecoder => self.forward_encoder_decoder(tape, bound, input, rng),
            Architecture::DecoderOnly => self.forward_decoder_only(tape, bound, input, rng),
            Architecture::Tdo => self.forward_tdo(tape, bound, input, rng),
        }
    }

    pub fn forward_encoder_decoder(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        input: &ModelInput,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        if self.config.architecture != Architecture::EncoderDecoder {
            return Err(Error::Config("forward_encoder_decoder: wrong architecture".into()));
        }
        let mut ctx = Ctx {
            tape,
            bound,
            dropout: self.config.dropout,
            rng,
        };
        let s = input.source_block.len();
        let t = input.decoder_input.len();
        let mut x = self.embed_block(&mut ctx, &input.source_block, Role::Source);
        let mut layers = Vec::with_capacity(self.config.n);
        for l in 0..self.config.n {
            x = self.attn_sublayer(&mut ctx, x, x, &format!("enc.{l}.self"), &format!("enc.{l}.norm1"), None)?;
            x = self.ffn_sublayer(&mut ctx, x, &format!("enc.{l}.ffn"), &format!("enc.{l}.norm2"))?;
            layers.push(x);
        }
        let memory = if self.config.pre_norm {
            let g = ctx.p(self, "enc_final_norm.gain");
            let b = ctx.p(self, "enc_final_norm.bias");
            ctx.tape.layer_norm(x, g, b, E::of_f64(1e-5))
        } else {
            x
        };

        let causal = build_mask(super::MaskMode::Causal, t, 0, Stage::Stage1).to_vis();
        let mut y = self.embed_block(&mut ctx, &input.decoder_input, Role::Target);
        for l in 0..self.config.n {
            y = self.attn_sublayer(
                &mut ctx,
                y,
                y,
                &format!("dec.{l}.self"),
                &format!("dec.{l}.norm1"),
                Some(causal.clone()),
            )?;
            // the same encoder memory feeds every decoder layer
            y = self.attn_sublayer(
                &mut ctx,
                y,
                memory,
                &format!("dec.{l}.cross"),
                &format!("dec.{l}.norm2"),
                None,
            )?;
            y = self.ffn_sublayer(&mut ctx, y, &format!("dec.{l}.ffn"), &format!("dec.{l}.norm3"))?;
        }
        if self.config.pre_norm {
            let g = ctx.p(self, "final_norm.gain");
            let b = ctx.p(self, "final_norm.bias");
            y = ctx.tape.layer_norm(y, g, b, E::of_f64(1e-5));
        }
        let embed = ctx.p(self, "embed");
        let logits = ctx.tape.matmul_nt(y, embed)?;
        Ok(ForwardOutput {
            logits,
            states: LayerStates {
                layers,
                source_len: s,
                final_target: y,
            },
        })
    }

    pub fn forward_decoder_only(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        input: &ModelInput,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        if self.config.architecture != Architecture::DecoderOnly {
            return Err(Error::Config("forward_decoder_only: wrong architecture".into()));
        }
        let mut ctx = Ctx {
            tape,
            bound,
            dropout: self.config.dropout,
            rng,
        };
        let s = input.source_block.len();
        let t = input.decoder_input.len();
        let mut x = self.embed_concat(&mut ctx, &input.source_block, &input.decoder_input);
        let mask = build_mask(self.config.mask_mode, s, t, Stage::Full).to_vis();
        let mut layers = Vec::with_capacity(self.config.total_layers());
        for l in 0..self.config.total_layers() {
            x = self.stack_layer(&mut ctx, x, l, Some(mask.clone()))?;
            layers.push(x);
        }
        if self.config.pre_norm {
            let g = ctx.p(self, "final_norm.gain");
            let b = ctx.p(self, "final_norm.bias");
            x = ctx.tape.layer_norm(x, g, b, E::of_f64(1e-5));
        }
        let tgt = ctx.tape.slice_rows(x, s, t);
        let embed = ctx.p(self, "embed");
        let logits = ctx.tape.matmul_nt(tgt, embed)?;
        Ok(ForwardOutput {
            logits,
            states: LayerStates {
                layers,
                source_len: s,
                final_target: tgt,
            },
        })
    }

    pub fn forward_tdo(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        input: &ModelInput,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        if self.config.architecture != Architecture::Tdo {
            return Err(Error::Config("forward_tdo: wrong architecture".into()));
        }
        let mut ctx = Ctx {
            tape,
            bound,
            dropout: self.config.dropout,
            rng,
        };
        let s = input.source_block.len();
        let t = input.decoder_input.len();

        // Stage 1: the first m layers see the source positions only.
        let mut x = self.embed_block(&mut ctx, &input.source_block, Role::Source);
        let mask1 = build_mask(self.config.mask_mode, s, 0, Stage::Stage1).to_vis();
        let mut layers = Vec::with_capacity(self.config.total_layers());
        for l in 0..self.config.m {
            x = self.stack_layer(&mut ctx, x, l, Some(mask1.clone()))?;
            layers.push(x);
        }
        if self.config.adaptation {
            x = self.ffn_sublayer(&mut ctx, x, "adapt.stage1", "adapt.stage1.norm")?;
        }

        // Stage 2: fuse target tokens in decoder-only manner.
        let y = self.embed_block(&mut ctx, &input.decoder_input, Role::Target);
        let mut z = ctx.tape.concat_rows(&[x, y]);
        let mask2 = build_mask(self.config.mask_mode, s, t, Stage::Stage2).to_vis();
        for l in self.config.m..self.config.total_layers() {
            z = self.stack_layer(&mut ctx, z, l, Some(mask2.clone()))?;
            layers.push(z);
        }
        if self.config.pre_norm {
            let g = ctx.p(self, "final_norm.gain");
            let b = ctx.p(self, "final_norm.bias");
            z = ctx.tape.layer_norm(z, g, b, E::of_f64(1e-5));
        }
        let mut tgt = ctx.tape.slice_rows(z, s, t);
        if self.config.adaptation {
            tgt = self.ffn_sublayer(&mut ctx, tgt, "adapt.final", "adapt.final.norm")?;
        }
        let embed = ctx.p(self, "embed");
        let logits = ctx.tape.matmul_nt(tgt, embed)?;
        Ok(ForwardOutput {
            logits,
            states: LayerStates {
                layers,
                source_len: s,
                final_target: tgt,
            },
        })
    }

    // ---- building blocks ---------------------------------------------

    fn embed_block(&self, ctx: &mut Ctx<'_, E>, ids: &[usize], role: Role) -> Var {
        let embed = ctx.p(self, "embed");
        let g = ctx.tape.gather(embed, Rc::new(ids.to_vec()));
        let scaled = ctx.tape.scale(g, E::of_f64((self.config.d as f64).sqrt()));
        let pos = ctx.tape.leaf(table(role, ids.len(), self.config.d));
        let x = ctx.tape.add(scaled, pos);
        ctx.drop(x)
    }

    /// Concatenated stream embedding: target positions restart at zero.
    fn embed_concat(&self, ctx: &mut Ctx<'_, E>, src: &[usize], tgt: &[usize]) -> Var {
        let embed = ctx.p(self, "embed");
        let mut ids = src.to_vec();
        ids.extend_from_slice(tgt);
        let g = ctx.tape.gather(embed, Rc::new(ids));
        let scaled = ctx.tape.scale(g, E::of_f64((self.config.d as f64).sqrt()));
        let pos = ctx.tape.leaf(concat_table(src.len(), tgt.len(), self.config.d));
        let x = ctx.tape.add(scaled, pos);
        ctx.drop(x)
    }

    /// One decoder-only layer: masked self-attention + FFN.
    fn stack_layer(&self, ctx: &mut Ctx<'_, E>, x: Var, l: usize, mask: Option<VisMask>) -> Result<Var> {
        let x = self.attn_sublayer(ctx, x, x, &format!("layer.{l}.self"), &format!("layer.{l}.norm1"), mask)?;
        self.ffn_sublayer(ctx, x, &format!("layer.{l}.ffn"), &format!("layer.{l}.norm2"))
    }

    fn attn_sublayer(
        &self,
        ctx: &mut Ctx<'_, E>,
        x: Var,
        kv: Var,
        attn_prefix: &str,
        norm_prefix: &str,
        mask: Option<VisMask>,
    ) -> Result<Var> {
        let gain = ctx.p(self, &format!("{norm_prefix}.gain"));
        let bias = ctx.p(self, &format!("{norm_prefix}.bias"));
        let eps = E::of_f64(1e-5);
        if self.config.pre_norm {
            let xn = ctx.tape.layer_norm(x, gain, bias, eps);
            let kvn = if kv == x { xn } else { ctx.tape.layer_norm(kv, gain, bias, eps) };
            let a = self.attention(ctx, xn, kvn, attn_prefix, mask)?;
            let a = ctx.drop(a);
            Ok(ctx.tape.add(x, a))
        } else {
            let a = self.attention(ctx, x, kv, attn_prefix, mask)?;
            let a = ctx.drop(a);
            let sum = ctx.tape.add(x, a);
            Ok(ctx.tape.layer_norm(sum, gain, bias, eps))
        }
    }

    fn attention(
        &self,
        ctx: &mut Ctx<'_, E>,
        x: Var,
        kv: Var,
        prefix: &str,
        mask: Option<VisMask>,
    ) -> Result<Var> {
        let (wq, wk, wv, wo) = (
            ctx.p(self, &format!("{prefix}.wq")),
            ctx.p(self, &format!("{prefix}.wk")),
            ctx.p(self, &format!("{prefix}.wv")),
            ctx.p(self, &format!("{prefix}.wo")),
        );
        let q = ctx.tape.matmul(x, wq)?;
        let k = ctx.tape.matmul(kv, wk)?;
        let v = ctx.tape.matmul(kv, wv)?;
        let dh = self.config.head_dim();
        let inv_sqrt = E::of_f64(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = ctx.tape.slice_cols(q, h * dh, dh);
            let kh = ctx.tape.slice_cols(k, h * dh, dh);
            let vh = ctx.tape.slice_cols(v, h * dh, dh);
            let scores = ctx.tape.matmul_nt(qh, kh)?;
            let scaled = ctx.tape.scale(scores, inv_sqrt);
            let weights = ctx.tape.softmax_rows(scaled, mask.clone());
            heads.push(ctx.tape.matmul(weights, vh)?);
        }
        let merged = ctx.tape.concat_cols(&heads);
        ctx.tape.matmul(merged, wo)
    }

    fn ffn_sublayer(&self, ctx: &mut Ctx<'_, E>, x: Var, ffn_prefix: &str, norm_prefix: &str) -> Result<Var> {
        let w1 = ctx.p(self, &format!("{ffn_prefix}.w1"));
        let w2 = ctx.p(self, &format!("{ffn_prefix}.w2"));
        let gain = ctx.p(self, &format!("{norm_prefix}.gain"));
        let bias = ctx.p(self, &format!("{norm_prefix}.bias"));
        let eps = E::of_f64(1e-5);
        let core = |ctx: &mut Ctx<'_, E>, inp: Var| -> Result<Var> {
            let h = ctx.tape.matmul(inp, w1)?;
            let h = ctx.tape.relu(h);
            ctx.tape.matmul(h, w2)
        };
        if self.config.pre_norm {
            let xn = ctx.tape.layer_norm(x, gain, bias, eps);
            let f = core(ctx, xn)?;
            let f = ctx.drop(f);
            Ok(ctx.tape.add(x, f))
        } else {
            let f = core(ctx, x)?;
            let f = ctx.drop(f);
            let sum = ctx.tape.add(x, f);
            Ok(ctx.tape.layer_norm(sum, gain, bias, eps))
        }
    }
}
