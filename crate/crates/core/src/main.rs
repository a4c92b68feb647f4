//! Command-line harness for the translation laboratory: corpus
//! generation, training, decoding, evaluation, parameter reports,
//! representation analysis, and sweeps over the stage split or the
//! contrastive layer index.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mnmt_lab::analysis::{layerwise_preference, write_report_csv, write_report_json};
use mnmt_lab::corpus::tags::apply_tag_strategy;
use mnmt_lab::corpus::{
    generate_corpus, write_instances, zeroshot_directions, CorpusConfig,
    TranslationInstance,
};
use mnmt_lab::decode::beam_search;
use mnmt_lab::error::{Error, Result};
use mnmt_lab::eval::{evaluate, write_eval_csv, write_eval_json, EvalReport};
use mnmt_lab::model::{checkpoint, count_parameters, Architecture, Model, ModelConfig};
use mnmt_lab::tensor::Scalar;
use mnmt_lab::train::{train, write_trace_csv, OptimizerConfig, TrainingConfig};

/// Environment variable naming the default output directory.
const OUT_ENV: &str = "MNMT_LAB_OUT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub beam: usize,
    pub max_len: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { beam: 4, max_len: 24 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

impl ExperimentConfig {
    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.corpus.validate()?;
        // a zero vocabulary size means "derive from the corpus"
        if cfg.model.vocab_size == 0 {
            let vocab = mnmt_lab::corpus::Vocabulary::build(&cfg.corpus)?;
            cfg.model.vocab_size = vocab.size();
        }
        cfg.model.validate()?;
        if cfg.evaluation.beam == 0 {
            return Err(Error::Config("evaluation.beam must be at least 1".into()));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

#[derive(Parser)]
#[command(name = "mnmt-lab", about = "Desk-scale multilingual translation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a loss trace.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides training.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "32")]
        precision: Precision,
    },
    /// Translate a file of tab-separated `src_lang, tgt_lang, tokens` lines.
    Translate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the supervised and zero-shot test sets.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the parameter breakdown of a configuration.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
    /// Layer-wise linguistic-preference report over zero-shot directions.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train/evaluate one run per axis value; resumable.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["m", "instrucl-layer"])]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic corpus splits as text files.
    GenCorpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
    })
}

fn run_train<E: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let corpus = generate_corpus(&cfg.corpus)?;
    let mut model = Model::<E>::init(cfg.model.clone(), cfg.training.seed)?;
    let report = train(&mut model, &corpus, &cfg.optimizer, &cfg.training, Some(out))?;
    write_trace_csv(&report.trace, &out.join("trace.csv"))?;
    println!(
        "trained {} steps; final ce {:.4}, ctr {:.4}; checkpoint at {}",
        report.trace.len(),
        report.final_ce,
        report.final_ctr,
        out.join("final").display()
    );
    Ok(())
}

fn load_checkpoint_f32(dir: &Path) -> Result<Model<f32>> {
    // verification checkpoints may be stored at higher precision
    match checkpoint::load::<f32>(dir) {
        Ok(m) => Ok(m),
        Err(_) => Ok(checkpoint::load::<f64>(dir)?.map_precision()),
    }
}

fn run_evaluate(cfg: &ExperimentConfig, ckpt: &Path, beam: usize, out: &Path) -> Result<EvalReport> {
    let corpus = generate_corpus(&cfg.corpus)?;
    let model = load_checkpoint_f32(ckpt)?;
    let mut instances = corpus.test_supervised.clone();
    instances.extend(corpus.test_zeroshot.iter().cloned());
    let report = evaluate(&model, &corpus, &instances, beam, cfg.evaluation.max_len)?;
    fs::create_dir_all(out)?;
    write_eval_csv(&report, &out.join("eval.csv"))?;
    write_eval_json(&report, &out.join("eval.json"))?;
    for r in &report.rows {
        println!(
            "{:9} {:12} acc {:.4} em {:.4} bleu {:.4} chrf {:.4} off {:.4}",
            r.scope, r.name, r.metrics.token_accuracy, r.metrics.exact_match, r.metrics.bleu,
            r.metrics.char_f, r.metrics.off_target
        );
    }
    Ok(report)
}

fn run_translate(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    input: &Path,
    beam: usize,
    max_len: usize,
    out: Option<&Path>,
) -> Result<()> {
    let corpus = generate_corpus(&cfg.corpus)?;
    let model = load_checkpoint_f32(ckpt)?;
    let text = fs::read_to_string(input)?;
    let mut lines = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(3, '\t').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "{}:{}: expected src_lang<TAB>tgt_lang<TAB>tokens",
                input.display(),
                ln + 1
            )));
        }
        let lang_index = |name: &str| {
            cfg.corpus
                .languages
                .iter()
                .position(|l| l.name == name)
                .ok_or_else(|| Error::Config(format!("unknown language {name}")))
        };
        let src_lang = lang_index(parts[0])?;
        let tgt_lang = lang_index(parts[1])?;
        let mut source = Vec::new();
        for tok in parts[2].split_whitespace() {
            source.push(
                corpus
                    .vocab
                    .token_id(tok)
                    .ok_or_else(|| Error::Config(format!("unknown token {tok}")))?,
            );
        }
        let inst = TranslationInstance {
            tag: corpus.vocab.tag_ids[tgt_lang],
            source,
            target: Vec::new(),
            src_lang,
            tgt_lang,
        };
        let tagged = apply_tag_strategy(&inst, model.config.tag_strategy, &corpus.vocab)?;
        let hyp = beam_search(&model, &tagged, corpus.vocab.eos_id, beam, max_len)?;
        lines.push(
            hyp.iter()
                .map(|&t| corpus.vocab.token_str(t))
                .collect::<Vec<_>>()
                .join(" "),
        );
    }
    let rendered = lines.join("\n") + "\n";
    match out {
        Some(path) => fs::write(path, rendered)?,
        None => print!("{rendered}"),
    }
    Ok(())
}

fn run_params(cfg: &ExperimentConfig) -> Result<()> {
    let base = cfg.model.clone();
    base.validate()?;
    let mut totals = Vec::new();
    for arch in [Architecture::EncoderDecoder, Architecture::DecoderOnly, Architecture::Tdo] {
        let mut c = base.clone();
        c.architecture = arch;
        if arch != Architecture::Tdo {
            c.adaptation = false;
        }
        let count = count_parameters(&c);
        println!(
            "{arch:?}: total {} (embedding {}, attention {}, ffn {}, adapters {}, norms {})",
            count.total(),
            count.embedding,
            count.attention,
            count.ffn,
            count.adapter_ffn,
            count.norms
        );
        totals.push(count.total());
    }
    println!(
        "decoder-only / encoder-decoder parameter ratio: {:.4}",
        totals[1] as f64 / totals[0] as f64
    );
    Ok(())
}

fn run_analyze(cfg: &ExperimentConfig, ckpt: &Path, out: &Path) -> Result<()> {
    let corpus = generate_corpus(&cfg.corpus)?;
    let model = load_checkpoint_f32(ckpt)?;
    let directions = zeroshot_directions(cfg.corpus.languages.len());
    let report = layerwise_preference(&model, &corpus, &directions)?;
    fs::create_dir_all(out)?;
    write_report_csv(&report, &out.join("preference.csv"))?;
    write_report_json(&report, &out.join("preference.json"))?;
    for s in &report.layers {
        println!(
            "layer {:2}: mean {:.4} min {:.4} max {:.4}",
            s.layer, s.mean, s.min, s.max
        );
    }
    Ok(())
}

fn set_axis(model: &mut ModelConfig, axis: &str, value: usize) -> Result<()> {
    match axis {
        "m" => model.m = value,
        "instrucl-layer" => model.instrucl_layer = Some(value),
        other => return Err(Error::Config(format!("unknown sweep axis {other}"))),
    }
    model.validate()
}

fn run_sweep(cfg: &ExperimentConfig, axis: &str, values: &[usize], out: &Path) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Config("sweep: no axis values given".into()));
    }
    fs::create_dir_all(out)?;
    let mut results: Vec<(usize, EvalReport)> = Vec::new();
    for &value in values {
        let run_dir = out.join(format!("{axis}-{value}"));
        let result_path = run_dir.join("eval.json");
        if result_path.exists() {
            println!("{axis}={value}: already complete, skipping");
        } else {
            let mut run_cfg = cfg.clone();
            set_axis(&mut run_cfg.model, axis, value)?;
            fs::create_dir_all(&run_dir)?;
            // atomic claim so concurrent sweeps never duplicate a run
            match fs::OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(run_dir.join("claim"))
            {
                Ok(_) => {}
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    println!("{axis}={value}: claimed by another process, skipping");
                    continue;
                }
                Err(e) => return Err(e.into()),
            }
            run_train::<f32>(&run_cfg, &run_dir)?;
            run_evaluate(&run_cfg, &run_dir.join("final"), run_cfg.evaluation.beam, &run_dir)?;
        }
        let report: EvalReport = serde_json::from_str(&fs::read_to_string(&result_path)?)
            .map_err(|e| Error::Config(format!("sweep result decode: {e}")))?;
        results.push((value, report));
    }
    let pick = |r: &EvalReport| -> (f64, f64) {
        let mut acc = 0.0;
        let mut bl = 0.0;
        let mut n = 0.0f64;
        for row in r.rows.iter().filter(|r| r.scope == "group") {
            acc += row.metrics.token_accuracy;
            bl += row.metrics.bleu;
            n += 1.0;
        }
        (acc / n.max(1.0), bl / n.max(1.0))
    };
    let (base_acc, base_bleu) = pick(&results[0].1);
    let mut csv = String::from("value,token_accuracy,bleu,delta_accuracy,delta_bleu\n");
    for (value, report) in &results {
        let (acc, bl) = pick(report);
        csv.push_str(&format!(
            "{value},{acc},{bl},{},{}\n",
            acc - base_acc,
            bl - base_bleu
        ));
    }
    fs::write(out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn run_gen_corpus(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let corpus = generate_corpus(&cfg.corpus)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("train.tsv"), write_instances(&corpus.vocab, &corpus.train))?;
    fs::write(out.join("valid.tsv"), write_instances(&corpus.vocab, &corpus.valid))?;
    fs::write(
        out.join("test_supervised.tsv"),
        write_instances(&corpus.vocab, &corpus.test_supervised),
    )?;
    fs::write(
        out.join("test_zeroshot.tsv"),
        write_instances(&corpus.vocab, &corpus.test_zeroshot),
    )?;
    println!(
        "wrote {} train / {} valid / {} supervised test / {} zero-shot test instances to {}",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test_supervised.len(),
        corpus.test_zeroshot.len(),
        out.display()
    );
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, seed, out, precision } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.training.seed = s;
            }
            let out = out_dir(out);
            match precision {
                Precision::F32 => run_train::<f32>(&cfg, &out),
                Precision::F64 => run_train::<f64>(&cfg, &out),
            }
        }
        Command::Translate { config, checkpoint, input, beam, max_len, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let beam = beam.unwrap_or(cfg.evaluation.beam);
            let max_len = max_len.unwrap_or(cfg.evaluation.max_len);
            run_translate(&cfg, &checkpoint, &input, beam, max_len, out.as_deref())
        }
        Command::Evaluate { config, checkpoint, beam, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let beam = beam.unwrap_or(cfg.evaluation.beam);
            run_evaluate(&cfg, &checkpoint, beam, &out_dir(out)).map(|_| ())
        }
        Command::Params { config } => run_params(&ExperimentConfig::load(&config)?),
        Command::Analyze { config, checkpoint, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            run_analyze(&cfg, &checkpoint, &out_dir(out))
        }
        Command::Sweep { config, axis, values, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            run_sweep(&cfg, &axis, &values, &out_dir(out))
        }
        Command::GenCorpus { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            run_gen_corpus(&cfg, &out_dir(out))
        }
    }
}
