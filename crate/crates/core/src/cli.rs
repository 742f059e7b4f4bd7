//! The `untl` command line: data generation, training, evaluation,
//! embedding export, gradient checks and default configs.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::data::{generate_synthetic, load_corpus, Corpus, Split, SyntheticSpec};
use crate::diffcore::{grad_check, GradCheckOptions, GradCheckReport, Graph, Tensor};
use crate::encoder::{classify_graph, encode_graph, EncoderParams, Example, Vocab, CLS};
use crate::keys::{init_adapter, make_prompt_key, prepend_prompt};
use crate::objectives::{
    adapter_ce_loss, ce_loss, dc_loss, mmd_loss, objective, prompt_mmd_loss, Features, HyperParams, Mode,
};
use crate::training::{
    accuracy, checkpoint::write_atomic, train, Checkpoint, EvalReport, TrainConfig, TrainData,
};

#[derive(Debug, Parser)]
#[command(name = "untl", version, about = "Train text classifiers that fail on an unlabeled target domain")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    Mmd,
    Dc,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic source/target corpora and the vocabulary.
    GenData {
        /// TOML corpus parameters; defaults apply to omitted keys
        #[arg(long)]
        config: Option<PathBuf>,
        /// output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write its best checkpoint plus the eval history.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// directory written by gen-data
        #[arg(long)]
        data: PathBuf,
        /// checkpoint path; the history goes to `<out>.history.jsonl`
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Accuracy of a checkpoint on a labeled corpus.
    Eval {
        checkpoint: PathBuf,
        corpus: PathBuf,
        /// apply the secret key (prompt and adapter checkpoints only)
        #[arg(long)]
        with_key: bool,
    },
    /// Write one row per example: domain, label, feature values.
    ExportEmbeddings {
        checkpoint: PathBuf,
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        with_key: bool,
    },
    /// Finite-difference check of every training objective.
    GradCheck {
        /// TOML train config whose [hyper] table overrides the weights
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Print the default config for a mode, or the corpus parameters.
    ShowDefaults {
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        synthetic: bool,
    },
}

/// A command that ran but reported failure.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Failed(pub String);

/// Parses `std::env::args` and runs the command.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let mut stdout = String::new();
    match run(&cli.command, &mut stdout) {
        Ok(()) => {
            print!("{stdout}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            print!("{stdout}");
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for invalid input, 2 for failures while running.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Failed>().is_some() {
        return 2;
    }
    match e.downcast_ref::<crate::Error>() {
        Some(
            crate::Error::Diverged { .. }
            | crate::Error::NonFiniteGradient(_)
            | crate::Error::NonFinite { .. }
            | crate::Error::Io { .. },
        ) => 2,
        _ => 1,
    }
}

/// Runs one command, appending its stdout text to `out`.
pub fn run(cmd: &Command, out: &mut String) -> anyhow::Result<()> {
    match cmd {
        Command::GenData { config, out: dir, seed } => gen_data(config.as_deref(), dir, *seed, out),
        Command::Train {
            config,
            data,
            out: path,
            ablate,
            seed,
        } => cmd_train(config, data, path, ablate, *seed, out),
        Command::Eval {
            checkpoint,
            corpus,
            with_key,
        } => cmd_eval(checkpoint, corpus, *with_key, out),
        Command::ExportEmbeddings {
            checkpoint,
            corpus,
            out: path,
            with_key,
        } => export_embeddings(checkpoint, corpus, path, *with_key, out),
        Command::GradCheck { config, seed, corrupt } => cmd_grad_check(config.as_deref(), *seed, *corrupt, out),
        Command::ShowDefaults { mode, synthetic } => {
            show_defaults(*mode, *synthetic, out);
            Ok(())
        }
    }
}

fn read(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e).into())
}

pub const VOCAB_FILE: &str = "vocab.txt";

pub fn corpus_file(domain: &str, split: Split) -> String {
    format!("{domain}_{split}.jsonl")
}

fn gen_data(config: Option<&Path>, dir: &Path, seed: Option<u64>, out: &mut String) -> anyhow::Result<()> {
    let mut spec = match config {
        Some(p) => toml::from_str::<SyntheticSpec>(&read(p)?)
            .map_err(|e| crate::Error::Config(format!("{}: {e}", p.display())))?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let corpora = generate_synthetic(&spec)?;
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    for (name, splits) in [("source", &corpora.source), ("target", &corpora.target)] {
        for split in Split::ALL {
            let c = splits.get(split);
            let path = dir.join(corpus_file(name, split));
            write_atomic(&path, c.to_jsonl().as_bytes())?;
            let labeled = if c.is_labeled() { "labeled" } else { "unlabeled" };
            writeln!(out, "{:<24} {:>6} examples  {labeled}", corpus_file(name, split), c.len())?;
        }
    }
    write_atomic(&dir.join(VOCAB_FILE), corpora.vocab.to_text().as_bytes())?;
    writeln!(out, "{:<24} {:>6} tokens", VOCAB_FILE, corpora.vocab.len())?;
    Ok(())
}

fn load_data(dir: &Path, config: &TrainConfig) -> anyhow::Result<TrainData> {
    let vocab = Vocab::from_text(&read(&dir.join(VOCAB_FILE))?)?;
    let classes = config.model.classes;
    let load = |name: &str, split: Split| load_corpus(&dir.join(corpus_file(name, split)), classes);
    let optional = |name: &str, split: Split| -> anyhow::Result<Option<Corpus>> {
        let path = dir.join(corpus_file(name, split));
        if config.mode == Mode::Plain && !path.exists() {
            return Ok(None);
        }
        Ok(Some(load_corpus(&path, classes)?))
    };
    Ok(TrainData {
        vocab,
        source_train: load("source", Split::Train)?,
        source_dev: load("source", Split::Dev)?,
        target_train: optional("target", Split::Train)?,
        target_dev: optional("target", Split::Dev)?,
    })
}

/// `<checkpoint>.history.jsonl`
pub fn history_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".history.jsonl");
    PathBuf::from(s)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn report_table(r: &EvalReport, out: &mut String) -> std::fmt::Result {
    writeln!(out, "{:>6} {:>10} {:>10} {:>10} {:>8} {:>8}", "step", "source", "target", "key", "score", "mmd_st")?;
    writeln!(
        out,
        "{:>6} {:>10.4} {:>10} {:>10} {:>8.4} {:>8}",
        r.step,
        r.acc_source,
        fmt_opt(r.acc_target),
        fmt_opt(r.acc_target_with_key),
        r.score,
        fmt_opt(r.mmd_st)
    )
}

fn cmd_train(
    config: &Path,
    data: &Path,
    path: &Path,
    ablate: &[Ablation],
    seed: Option<u64>,
    out: &mut String,
) -> anyhow::Result<()> {
    let mut cfg = TrainConfig::from_toml(&read(config)?).with_context(|| config.display().to_string())?;
    for a in ablate {
        match a {
            Ablation::Mmd => cfg.disable_mmd = true,
            Ablation::Dc => cfg.disable_dc = true,
        }
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = load_data(data, &cfg)?;
    let outcome = train(&cfg, &data)?;
    outcome.checkpoint.save(path)?;
    let hist = history_path(path);
    write_atomic(&hist, outcome.history_jsonl().as_bytes())?;
    let best = outcome.best_report();
    writeln!(out, "mode {}  steps evaluated {}  best step {}", cfg.mode, outcome.history.len(), best.step)?;
    report_table(best, out)?;
    let mut rec = serde_json::to_value(best)?;
    rec["checkpoint"] = json!(path.display().to_string());
    rec["history"] = json!(hist.display().to_string());
    rec["mode"] = json!(cfg.mode.as_str());
    writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    Ok(())
}

fn load_for_eval(checkpoint: &Path, corpus: &Path, with_key: bool) -> anyhow::Result<(Checkpoint, Corpus)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mode = ckpt.model.mode();
    if with_key && !mode.has_key() {
        bail!(crate::Error::Invalid(format!("--with-key needs a prompt or adapter checkpoint, this one is {mode}")));
    }
    let corpus = load_corpus(corpus, ckpt.model.config.model.classes)?;
    Ok((ckpt, corpus))
}

fn cmd_eval(checkpoint: &Path, corpus_path: &Path, with_key: bool, out: &mut String) -> anyhow::Result<()> {
    let (ckpt, corpus) = load_for_eval(checkpoint, corpus_path, with_key)?;
    let acc = accuracy(&ckpt.model, &corpus, with_key)?;
    writeln!(
        out,
        "{}: accuracy {acc:.4} on {} examples{}  (checkpoint {} mode, best score {:.4} at step {})",
        corpus_path.display(),
        corpus.len(),
        if with_key { " with key" } else { "" },
        ckpt.model.mode(),
        ckpt.best_score,
        ckpt.best_step
    )?;
    let rec = json!({
        "checkpoint": checkpoint.display().to_string(),
        "corpus": corpus_path.display().to_string(),
        "mode": ckpt.model.mode().as_str(),
        "with_key": with_key,
        "examples": corpus.len(),
        "accuracy": acc,
        "best_score": ckpt.best_score,
        "best_step": ckpt.best_step,
    });
    writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    Ok(())
}

/// Tab-separated rows: domain, label (`-` when absent), then the features.
pub fn embedding_rows(ckpt: &Checkpoint, corpus: &Corpus, with_key: bool) -> crate::Result<String> {
    let model = &ckpt.model;
    let examples: Vec<Example> = corpus.examples(&model.vocab, model.config.model.max_len);
    let mut s = String::new();
    for chunk in examples.chunks(crate::training::eval::EVAL_CHUNK) {
        let h = model.features(chunk, with_key)?;
        for (i, e) in chunk.iter().enumerate() {
            s.push_str(e.domain.as_str());
            s.push('\t');
            match e.label {
                Some(l) => s.push_str(&l.to_string()),
                None => s.push('-'),
            }
            for v in h.row_slice(i) {
                s.push('\t');
                s.push_str(&v.to_string());
            }
            s.push('\n');
        }
    }
    Ok(s)
}

fn export_embeddings(
    checkpoint: &Path,
    corpus_path: &Path,
    path: &Path,
    with_key: bool,
    out: &mut String,
) -> anyhow::Result<()> {
    let (ckpt, corpus) = load_for_eval(checkpoint, corpus_path, with_key)?;
    let rows = embedding_rows(&ckpt, &corpus, with_key)?;
    write_atomic(path, rows.as_bytes())?;
    writeln!(
        out,
        "wrote {} rows of {} features to {}",
        corpus.len(),
        ckpt.model.encoder.dim(),
        path.display()
    )?;
    Ok(())
}

/// Names of the objectives covered by [`grad_check_suite`], in order.
pub const CHECKED_OBJECTIVES: [&str; 8] = [
    "task-ce",
    "clamped-mmd",
    "domain-classifier",
    "untl",
    "key-mmd",
    "prompt",
    "adapter-ce",
    "adapter",
];

/// Gradient-checks every training objective on a small random model.
/// `hyper` replaces each mode's default weights when given.
pub fn grad_check_suite(
    seed: u64,
    hyper: Option<&HyperParams>,
    corrupt: bool,
) -> crate::Result<Vec<(&'static str, GradCheckReport)>> {
    let (dim, classes, vocab, bottleneck) = (6, 3, 14, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = EncoderParams::init_layers(vocab, dim, classes, 2, 1.0, rng.gen());
    let mut adapter = init_adapter(dim, bottleneck, rng.gen())?;
    for t in [&mut adapter.w_up, &mut adapter.b_down, &mut adapter.b_up] {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    let key_vocab = Vocab::from_tokens((3..vocab).map(|i| format!("t{i}")))?;
    let key = make_prompt_key("t11 t12 t13", &key_vocab, 16)?;
    let seq = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let n = rng.gen_range(2..6);
        std::iter::once(CLS).chain((0..n).map(|_| rng.gen_range(3..11))).collect()
    };
    let source: Vec<Vec<usize>> = (0..4).map(|_| seq(&mut rng)).collect();
    let target: Vec<Vec<usize>> = (0..4).map(|_| seq(&mut rng)).collect();
    let prompted: Vec<Vec<usize>> = target.iter().map(|t| prepend_prompt(&key, t, 16)).collect();
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..classes)).collect();

    let mut inputs: HashMap<String, Tensor> = HashMap::new();
    for (n, t) in encoder.tensors() {
        inputs.insert(n, t.clone());
    }
    for (n, t) in adapter.tensors() {
        inputs.insert(n.to_string(), t.clone());
    }
    let weights = |mode: Mode| hyper.copied().unwrap_or_else(|| HyperParams::defaults(mode));

    let mut reports = Vec::new();
    for (i, name) in CHECKED_OBJECTIVES.iter().enumerate() {
        let mut g = Graph::new();
        let enc = encoder.declare(&mut g, true)?;
        let uses_adapter = matches!(*name, "adapter-ce" | "adapter");
        let avars = if uses_adapter { Some(adapter.declare(&mut g, true)?) } else { None };
        let s = encode_graph(&mut g, &enc, None, &source)?;
        let t = encode_graph(&mut g, &enc, None, &target)?;
        let out = match *name {
            "task-ce" => {
                let logits = classify_graph(&mut g, &enc, s)?;
                ce_loss(&mut g, logits, &labels, weights(Mode::Untl).omega)?
            }
            "clamped-mmd" => mmd_loss(&mut g, s, t, weights(Mode::Untl).c)?,
            "domain-classifier" => dc_loss(&mut g, &enc, &[s], t)?,
            "untl" => {
                let f = Features {
                    source: s,
                    target: Some(t),
                    keyed: None,
                    adapted_source: None,
                };
                objective(Mode::Untl, &mut g, &enc, &f, &labels, &weights(Mode::Untl))?.total
            }
            "key-mmd" | "prompt" => {
                let p = encode_graph(&mut g, &enc, None, &prompted)?;
                let hp = weights(Mode::Prompt);
                if *name == "key-mmd" {
                    prompt_mmd_loss(&mut g, p, s, t, hp.alpha, hp.c)?
                } else {
                    let f = Features {
                        source: s,
                        target: Some(t),
                        keyed: Some(p),
                        adapted_source: None,
                    };
                    objective(Mode::Prompt, &mut g, &enc, &f, &labels, &hp)?.total
                }
            }
            _ => {
                let a = avars.as_ref().expect("adapter declared");
                let sa = encode_graph(&mut g, &enc, Some(a), &source)?;
                let hp = weights(Mode::Adapter);
                if *name == "adapter-ce" {
                    adapter_ce_loss(&mut g, &enc, sa, &labels, hp.omega)?
                } else {
                    let ta = encode_graph(&mut g, &enc, Some(a), &target)?;
                    let f = Features {
                        source: s,
                        target: Some(t),
                        keyed: Some(ta),
                        adapted_source: Some(sa),
                    };
                    objective(Mode::Adapter, &mut g, &enc, &f, &labels, &hp)?.total
                }
            }
        };
        let opts = GradCheckOptions {
            seed: seed.wrapping_add(i as u64),
            corrupt_analytic: corrupt,
            ..GradCheckOptions::default()
        };
        reports.push((*name, grad_check(&mut g, out, &inputs, &opts)?));
    }
    Ok(reports)
}

fn cmd_grad_check(config: Option<&Path>, seed: Option<u64>, corrupt: bool, out: &mut String) -> anyhow::Result<()> {
    let cfg = config
        .map(|p| TrainConfig::from_toml(&read(p)?).with_context(|| p.display().to_string()))
        .transpose()?;
    let hyper = cfg.as_ref().map(|c| c.effective_hyper());
    let seed = seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
    let reports = grad_check_suite(seed, hyper.as_ref(), corrupt)?;
    let tol = GradCheckOptions::default().tolerance;
    writeln!(out, "{:<18} {:>14} {:>8}  status", "objective", "max_rel_error", "checked")?;
    let mut failed = Vec::new();
    for (name, r) in &reports {
        let status = if r.passed { "ok" } else { "FAIL" };
        writeln!(out, "{name:<18} {:>14.3e} {:>8}  {status}", r.max_rel_error, r.checked)?;
        if !r.passed {
            failed.push(*name);
        }
    }
    if !failed.is_empty() {
        return Err(Failed(format!("gradient check above {tol:e} for {}", failed.join(", "))).into());
    }
    Ok(())
}

fn show_defaults(mode: Option<Mode>, synthetic: bool, out: &mut String) {
    if synthetic {
        out.push_str(&toml::to_string(&SyntheticSpec::default()).expect("spec serializes"));
        return;
    }
    let modes = match mode {
        Some(m) => vec![m],
        None => vec![Mode::Plain, Mode::Untl, Mode::Prompt, Mode::Adapter],
    };
    for (i, m) in modes.iter().enumerate() {
        if i > 0 {
            out.push_str("\n# ----\n\n");
        }
        out.push_str(&TrainConfig::defaults_toml(*m));
    }
}
