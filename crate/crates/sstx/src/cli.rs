//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
//! failure.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::tasks::{
    self, generate_task, load_corpus, ParallelCorpus, TaskKind, TaskSplits, Vocabulary,
};
use crate::trainer::{evaluate, load_checkpoint, train_loop, RunReport, TrainState};
use crate::transformer::Model;
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "sstx",
    about = "Two-pass scheduled-sampling training for toy transformer seq2seq models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (synthetic task or text files) and write metrics,
    /// checkpoints and a report into the output directory.
    Train {
        /// Config file; defaults to the built-in desk-scale copy preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Dotted-path overrides, e.g. --set mix.kind=gumbel
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Resume from a checkpoint written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against a parallel text corpus.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Config file; defaults to config.toml next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Greedy-decode a source file and write the hypotheses.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        src: PathBuf,
        /// Output hypothesis file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic task corpus as text files.
    GenTask {
        /// copy | reverse | sort
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 16)]
        vocab: usize,
        #[arg(long, default_value_t = 4)]
        min_len: usize,
        #[arg(long, default_value_t = 12)]
        max_len: usize,
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
        #[arg(long, default_value_t = 200)]
        n_dev: usize,
        #[arg(long, default_value_t = 200)]
        n_test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite and print max errors.
    GradCheck {
        /// Number of random seeds per primitive.
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Central-difference step size.
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

pub fn run(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with success status
            if e.use_stderr() {
                eprint!("{}", e);
                return 1;
            }
            print!("{}", e);
            return 0;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            set,
            resume,
        } => cmd_train(config.as_deref(), seed, &out, &set, resume.as_deref()),
        Command::Evaluate {
            checkpoint,
            src,
            reference,
            config,
        } => cmd_evaluate(&checkpoint, &src, &reference, config.as_deref()),
        Command::Decode {
            checkpoint,
            src,
            out,
            config,
        } => cmd_decode(&checkpoint, &src, &out, config.as_deref()),
        Command::GenTask {
            kind,
            vocab,
            min_len,
            max_len,
            n_train,
            n_dev,
            n_test,
            seed,
            out,
        } => cmd_gen_task(
            &kind, vocab, min_len, max_len, n_train, n_dev, n_test, seed, &out,
        ),
        Command::GradCheck { seeds, step } => cmd_grad_check(seeds, step),
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {}", p.display(), e)))?;
            Config::from_str_with_overrides(&text, overrides)
        }
        None => Config::with_overrides(overrides),
    }
}

fn load_data(config: &Config) -> Result<TaskSplits> {
    match config.task_kind()? {
        Some(kind) => generate_task(
            kind,
            config.task.vocab,
            config.task.min_len,
            config.task.max_len,
            config.task.n_train,
            config.task.n_dev,
            config.task.n_test,
            config.seed,
        ),
        None => {
            let d = &config.data;
            for (field, value) in [
                ("data.train_src", &d.train_src),
                ("data.train_tgt", &d.train_tgt),
                ("data.dev_src", &d.dev_src),
                ("data.dev_tgt", &d.dev_tgt),
                ("data.test_src", &d.test_src),
                ("data.test_tgt", &d.test_tgt),
            ] {
                if value.is_empty() {
                    return Err(Error::Config(format!(
                        "task.kind = \"files\" requires {}",
                        field
                    )));
                }
            }
            let joint = config.model.share_embeddings;
            let min_freq = d.min_freq.unwrap_or(1);
            let train = load_corpus(
                Path::new(&d.train_src),
                Path::new(&d.train_tgt),
                joint,
                min_freq,
                None,
            )?;
            let vocabs = (&train.src_vocab, &train.tgt_vocab);
            let dev = load_corpus(
                Path::new(&d.dev_src),
                Path::new(&d.dev_tgt),
                joint,
                min_freq,
                Some(vocabs),
            )?;
            let test = load_corpus(
                Path::new(&d.test_src),
                Path::new(&d.test_tgt),
                joint,
                min_freq,
                Some(vocabs),
            )?;
            Ok(TaskSplits { train, dev, test })
        }
    }
}

fn print_report(report: &RunReport) {
    println!(
        "steps_run={} stopped_early={} best_step={} best_dev_bleu={:.4}",
        report.steps_run, report.stopped_early, report.best_step, report.best_dev.bleu
    );
    println!(
        "best dev: loss={:.6} token_acc={:.6} bleu={:.4}",
        report.best_dev.loss, report.best_dev.token_acc, report.best_dev.bleu
    );
    println!(
        "test (best checkpoint): loss={:.6} token_acc={:.6} bleu={:.4}",
        report.test.loss, report.test.token_acc, report.test.bleu
    );
    println!("mean_step_seconds={:.4}", report.mean_step_seconds);
}

fn cmd_train(
    config_path: Option<&Path>,
    seed_flag: Option<u64>,
    out: &Path,
    overrides: &[String],
    resume: Option<&Path>,
) -> Result<i32> {
    let mut config = load_config(config_path, overrides)?;
    if let Some(seed) = seed_flag {
        config.seed = seed;
    }
    let data = load_data(&config)?;
    let tconfig = config.transformer_config(data.train.model_vocab_size());
    tconfig.validate()?;

    let resume_from_config = (!config.train.resume_from.is_empty())
        .then(|| PathBuf::from(&config.train.resume_from));
    let resume = resume.map(Path::to_path_buf).or(resume_from_config);
    let mut state = match resume {
        Some(path) => load_checkpoint(&path, &tconfig)?,
        None => TrainState::new(Model::new(tconfig.clone(), config.seed)?, config.seed),
    };

    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), config.to_toml_string()?)?;
    data.train.src_vocab.save(&out.join("vocab.src.txt"))?;
    data.train.tgt_vocab.save(&out.join("vocab.tgt.txt"))?;

    let mode = config.train_mode()?;
    let optim = config.optim_config();
    let loop_cfg = config.loop_config(Some(out.to_path_buf()));
    let report = train_loop(&mut state, &mode, &optim, &data, &loop_cfg)?;

    let mut report_text = String::new();
    report_text.push_str(&format!(
        "steps_run={}\nstopped_early={}\nbest_step={}\nbest_dev_loss={}\nbest_dev_token_acc={}\nbest_dev_bleu={}\ntest_loss={}\ntest_token_acc={}\ntest_bleu={}\nmean_step_seconds={}\n",
        report.steps_run,
        report.stopped_early,
        report.best_step,
        report.best_dev.loss,
        report.best_dev.token_acc,
        report.best_dev.bleu,
        report.test.loss,
        report.test.token_acc,
        report.test.bleu,
        report.mean_step_seconds,
    ));
    std::fs::write(out.join("report.txt"), report_text)?;
    print_report(&report);
    Ok(0)
}

/// Sidecar files written by `train` next to its checkpoints.
fn sidecar_config(checkpoint: &Path, explicit: Option<&Path>) -> Result<Config> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .map(|d| d.join("config.toml"))
            .filter(|p| p.exists())
            .ok_or_else(|| {
                Error::Config(
                    "no --config given and no config.toml next to the checkpoint".to_string(),
                )
            })?,
    };
    Config::from_file(&path)
}

fn sidecar_vocabs(checkpoint: &Path) -> Result<(Vocabulary, Vocabulary)> {
    let dir = checkpoint
        .parent()
        .ok_or_else(|| Error::Data("checkpoint has no parent directory".to_string()))?;
    let src = Vocabulary::load(&dir.join("vocab.src.txt"))?;
    let tgt = Vocabulary::load(&dir.join("vocab.tgt.txt"))?;
    Ok((src, tgt))
}

fn cmd_evaluate(
    checkpoint: &Path,
    src: &Path,
    reference: &Path,
    config_path: Option<&Path>,
) -> Result<i32> {
    let config = sidecar_config(checkpoint, config_path)?;
    let (src_vocab, tgt_vocab) = sidecar_vocabs(checkpoint)?;
    let corpus = load_corpus(
        src,
        reference,
        config.model.share_embeddings,
        1,
        Some((&src_vocab, &tgt_vocab)),
    )?;
    let vocab_size = src_vocab.len().max(tgt_vocab.len());
    let state = load_checkpoint(checkpoint, &config.transformer_config(vocab_size))?;
    let metrics = evaluate(&state.model, &corpus, config.train.batch_size)?;
    println!(
        "loss={:.6} token_acc={:.6} bleu={:.4}",
        metrics.loss, metrics.token_acc, metrics.bleu
    );
    Ok(0)
}

fn cmd_decode(
    checkpoint: &Path,
    src: &Path,
    out: &Path,
    config_path: Option<&Path>,
) -> Result<i32> {
    let config = sidecar_config(checkpoint, config_path)?;
    let (src_vocab, tgt_vocab) = sidecar_vocabs(checkpoint)?;
    let vocab_size = src_vocab.len().max(tgt_vocab.len());
    let state = load_checkpoint(checkpoint, &config.transformer_config(vocab_size))?;

    let text = std::fs::read_to_string(src)
        .map_err(|e| Error::Data(format!("cannot read {}: {}", src.display(), e)))?;
    let mut hyps = String::new();
    for (i, line) in text.lines().enumerate() {
        let ids = src_vocab.encode_line(line);
        if ids.is_empty() {
            return Err(Error::Data(format!("empty source at line {}", i + 1)));
        }
        let out_ids = state
            .model
            .greedy_decode(&ids, state.model.config.max_len - 1)?;
        hyps.push_str(&tgt_vocab.decode_ids(&out_ids));
        hyps.push('\n');
    }
    std::fs::write(out, hyps)?;
    println!("decoded {} to {}", src.display(), out.display());
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_task(
    kind: &str,
    vocab: usize,
    min_len: usize,
    max_len: usize,
    n_train: usize,
    n_dev: usize,
    n_test: usize,
    seed: u64,
    out: &Path,
) -> Result<i32> {
    let kind = match kind {
        "copy" => TaskKind::Copy,
        "reverse" => TaskKind::Reverse,
        "sort" => TaskKind::Sort,
        other => {
            return Err(Error::Config(format!(
                "gen-task kind must be copy, reverse or sort, got {}",
                other
            )))
        }
    };
    let splits = generate_task(kind, vocab, min_len, max_len, n_train, n_dev, n_test, seed)?;
    std::fs::create_dir_all(out)?;
    let write = |name: &str, corpus: &ParallelCorpus| -> Result<()> {
        tasks::write_corpus_side(
            &out.join(format!("{name}.src")),
            &corpus.pairs,
            &corpus.src_vocab,
            true,
        )?;
        tasks::write_corpus_side(
            &out.join(format!("{name}.tgt")),
            &corpus.pairs,
            &corpus.tgt_vocab,
            false,
        )?;
        Ok(())
    };
    write("train", &splits.train)?;
    write("dev", &splits.dev)?;
    write("test", &splits.test)?;
    splits.train.src_vocab.save(&out.join("vocab.txt"))?;
    println!(
        "wrote {} train / {} dev / {} test pairs to {}",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        out.display()
    );
    Ok(0)
}

fn cmd_grad_check(seeds: u64, step: f64) -> Result<i32> {
    let mut worst_by_op: std::collections::BTreeMap<&'static str, f64> = Default::default();
    for seed in 0..seeds {
        for check in crate::autodiff::check::primitive_suite(seed, 1, step)? {
            let w = worst_by_op.entry(check.name).or_insert(0.0);
            *w = w.max(check.max_rel_err);
        }
    }
    let mut failed = false;
    for (name, err) in &worst_by_op {
        let status = if *err <= 1e-5 { "ok" } else { "FAIL" };
        if *err > 1e-5 {
            failed = true;
        }
        println!("{:<22} max_rel_err={:.3e} {}", name, err, status);
    }
    if failed {
        return Err(Error::numeric(
            "grad-check",
            "a primitive exceeded 1e-5".to_string(),
        ));
    }
    Ok(0)
}

/// Library entry used by the binary; returns the process exit code.
pub fn main_with_args() -> i32 {
    let args: Vec<String> = std::env::args().collect();
    run(&args)
}
