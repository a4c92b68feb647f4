//! Transformer building blocks and the architecture assemblies:
//! encoder-decoder, plain decoder-only (causal or prefix masked), and the
//! two-stage decoder-only stack with optional adaptation FFNs.

pub mod checkpoint;
pub mod forward;
pub mod mask;
pub mod positional;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    EncoderDecoder,
    DecoderOnly,
    Tdo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Causal,
    Prefix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub mask_mode: MaskMode,
    /// Layers per side. Encoder-decoder builds N+N; decoder-only and the
    /// two-stage stack build 2N total.
    pub n: usize,
    /// First-stage depth for the two-stage architecture, 1 <= m < 2n.
    #[serde(default)]
    pub m: usize,
    pub d: usize,
    #[serde(default)]
    pub ffn_inner_stage1: usize,
    #[serde(default)]
    pub ffn_inner_stage2: usize,
    pub heads: usize,
    #[serde(default)]
    pub adaptation: bool,
    /// Layer whose tag-position state feeds the contrastive objective.
    /// 1-based; encoder layer for encoder-decoder, any layer otherwise.
    #[serde(default)]
    pub instrucl_layer: Option<usize>,
    #[serde(default = "default_tag_strategy")]
    pub tag_strategy: u8,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub label_smoothing: f64,
    pub vocab_size: usize,
    /// Post-norm by default; pre-norm mirrors the normalize-before setting.
    #[serde(default)]
    pub pre_norm: bool,
}

fn default_tag_strategy() -> u8 {
    1
}

impl ModelConfig {
    /// Total number of layers in the single stack (decoder-only / two-stage).
    pub fn total_layers(&self) -> usize {
        2 * self.n
    }

    pub fn ffn_inner(&self, layer: usize) -> usize {
        let f1 = if self.ffn_inner_stage1 == 0 { 4 * self.d } else { self.ffn_inner_stage1 };
        let f2 = if self.ffn_inner_stage2 == 0 { 4 * self.d } else { self.ffn_inner_stage2 };
        match self.architecture {
            Architecture::Tdo => {
                if layer < self.m {
                    f1
                } else {
                    f2
                }
            }
            _ => f1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.heads == 0 || self.vocab_size == 0 {
            return Err(Error::Config("n, d, heads, vocab_size must be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} not divisible by head count {}",
                self.d, self.heads
            )));
        }
        if self.architecture == Architecture::Tdo && !(1..self.total_layers()).contains(&self.m) {
            return Err(Error::Config(format!(
                "two-stage split m={} must satisfy 1 <= m < {}",
                self.m,
                self.total_layers()
            )));
        }
        if self.adaptation && self.architecture != Architecture::Tdo {
            return Err(Error::Config(
                "adaptation modules require the two-stage architecture".into(),
            ));
        }
        if let Some(idx) = self.instrucl_layer {
            let max = match self.architecture {
                Architecture::EncoderDecoder => self.n,
                _ => self.total_layers(),
            };
            if idx == 0 || idx > max {
                return Err(Error::Config(format!(
                    "instrucl_layer {idx} out of range 1..={max}"
                )));
            }
        }
        if !(1..=5).contains(&self.tag_strategy) {
            return Err(Error::Config(format!(
                "tag_strategy {} must be in 1..=5",
                self.tag_strategy
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("dropout and label_smoothing must be in [0,1)".into()));
        }
        Ok(())
    }
}

/// Which component a parameter belongs to, for count reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Attention,
    Ffn,
    AdapterFfn,
    Norm,
}

/// Parameter layout derived from the config. Model construction and
/// parameter counting both walk this list, so counts match instantiated
/// tensors exactly.
pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    let d = config.d;
    let mut out: Vec<(String, Vec<usize>, ParamKind)> = Vec::new();
    out.push(("embed".into(), vec![config.vocab_size, d], ParamKind::Embedding));

    let attn = |out: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{prefix}.{w}"), vec![d, d], ParamKind::Attention));
        }
    };
    let norm = |out: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str| {
        out.push((format!("{prefix}.gain"), vec![d], ParamKind::Norm));
        out.push((format!("{prefix}.bias"), vec![d], ParamKind::Norm));
    };
    let ffn = |out: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str, inner: usize, kind: ParamKind| {
        out.push((format!("{prefix}.w1"), vec![d, inner], kind));
        out.push((format!("{prefix}.w2"), vec![inner, d], kind));
    };

    match config.architecture {
        Architecture::EncoderDecoder => {
            for l in 0..config.n {
                attn(&mut out, &format!("enc.{l}.self"));
                norm(&mut out, &format!("enc.{l}.norm1"));
                ffn(&mut out, &format!("enc.{l}.ffn"), config.ffn_inner(l), ParamKind::Ffn);
                norm(&mut out, &format!("enc.{l}.norm2"));
            }
            for l in 0..config.n {
                attn(&mut out, &format!("dec.{l}.self"));
                norm(&mut out, &format!("dec.{l}.norm1"));
                attn(&mut out, &format!("dec.{l}.cross"));
                norm(&mut out, &format!("dec.{l}.norm2"));
                ffn(&mut out, &format!("dec.{l}.ffn"), config.ffn_inner(l), ParamKind::Ffn);
                norm(&mut out, &format!("dec.{l}.norm3"));
            }
        }
        Architecture::DecoderOnly | Architecture::Tdo => {
            for l in 0..config.total_layers() {
                attn(&mut out, &format!("layer.{l}.self"));
                norm(&mut out, &format!("layer.{l}.norm1"));
                ffn(&mut out, &format!("layer.{l}.ffn"), config.ffn_inner(l), ParamKind::Ffn);
                norm(&mut out, &format!("layer.{l}.norm2"));
            }
            if config.adaptation {
                ffn(
                    &mut out,
                    "adapt.stage1",
                    config.ffn_inner(0),
                    ParamKind::AdapterFfn,
                );
                norm(&mut out, "adapt.stage1.norm");
                ffn(
                    &mut out,
                    "adapt.final",
                    config.ffn_inner(config.total_layers() - 1),
                    ParamKind::AdapterFfn,
                );
                norm(&mut out, "adapt.final.norm");
            }
        }
    }
    if config.pre_norm {
        norm(&mut out, "final_norm");
        if config.architecture == Architecture::EncoderDecoder {
            norm(&mut out, "enc_final_norm");
        }
    }
    out
}

/// Per-component learnable parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub embedding: usize,
    pub attention: usize,
    pub ffn: usize,
    pub adapter_ffn: usize,
    pub norms: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.embedding + self.attention + self.ffn + self.adapter_ffn + self.norms
    }

    /// Attention + FFN weights only, the closed-form per-layer budget.
    pub fn core(&self) -> usize {
        self.attention + self.ffn
    }
}

pub fn count_parameters(config: &ModelConfig) -> ParamCount {
    let mut c = ParamCount {
        embedding: 0,
        attention: 0,
        ffn: 0,
        adapter_ffn: 0,
        norms: 0,
    };
    for (_, shape, kind) in layout(config) {
        let n: usize = shape.iter().product();
        match kind {
            ParamKind::Embedding => c.embedding += n,
            ParamKind::Attention => c.attention += n,
            ParamKind::Ffn => c.ffn += n,
            ParamKind::AdapterFfn => c.adapter_ffn += n,
            ParamKind::Norm => c.norms += n,
        }
    }
    c
}

/// Named parameter tensors in layout order.
pub struct ParamStore<E: Scalar> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<E>>,
}

impl<E: Scalar> ParamStore<E> {
    pub fn index_of(&self, name: &str) -> usize {
        self.names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

pub struct Model<E: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<E>,
}

impl<E: Scalar> Model<E> {
    /// Deterministic initialization: fan-in-scaled uniform for matrices,
    /// 1/sqrt(d) uniform for the embedding, unit gains and zero biases for
    /// the norms.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, kind) in layout(&config) {
            let n: usize = shape.iter().product();
            let t = match kind {
                ParamKind::Norm => {
                    if name.ends_with(".gain") {
                        Tensor::new(shape, vec![E::one(); n])?
                    } else {
                        Tensor::zeros(shape)
                    }
                }
                ParamKind::Embedding => {
                    let bound = 1.0 / (config.d as f64).sqrt();
                    let data = (0..n)
                        .map(|_| E::of_f64(rng.gen_range(-bound..bound)))
                        .collect();
                    Tensor::new(shape, data)?
                }
                _ => {
                    let fan_in = shape[0] as f64;
                    let bound = (1.0 / fan_in).sqrt();
                    let data = (0..n)
                        .map(|_| E::of_f64(rng.gen_range(-bound..bound)))
                        .collect();
                    Tensor::new(shape, data)?
                }
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Model {
            config,
            params: ParamStore { names, tensors },
        })
    }

    pub fn map_precision<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            params: ParamStore {
                names: self.params.names.clone(),
                tensors: self.params.tensors.iter().map(|t| t.map_precision()).collect(),
            },
        }
    }
}
