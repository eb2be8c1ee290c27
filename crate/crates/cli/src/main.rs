//! `medisee`: data generation, training, evaluation and gradient checks.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use medisee_core::datagen::{
    dataset_stats, generate_pipeline, read_jsonl, record_to_json, split_dataset, synth_records,
    MockOracle, PipelineConfig,
};
use medisee_core::eval::{evaluate, BoxSource, EvalOptions};
use medisee_core::gradsuite::run_gradient_suite;
use medisee_core::metrics::DEFAULT_ACC_THRESHOLD;
use medisee_core::model::Model;
use medisee_core::trainer::{
    inspect_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, TrainConfig, TrainMode,
    Trainer,
};
use medisee_core::Error;

#[derive(Parser)]
#[command(
    name = "medisee",
    version,
    about = "Reasoning segmentation and detection toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with train/val/test splits.
    Datagen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = OracleKind::Mock)]
        oracle: OracleKind,
        /// Side length of the square images.
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
    /// Train a model and write a checkpoint plus a JSONL loss log.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON training configuration; fields not given take defaults.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// `default`, `overfit` or `finetune`.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Checkpoint to continue from (required for finetune).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss log path; defaults to `<out>` with its extension replaced by `log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Evaluate a checkpoint on a split and write a metric report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "oracle")]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        #[arg(long)]
        report: PathBuf,
        /// Score ground truth as the prediction.
        #[arg(long)]
        oracle: bool,
        /// Per-sample JSONL dump.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_ACC_THRESHOLD)]
        acc_threshold: f64,
        #[arg(long, value_enum, default_value_t = BoxSourceArg::Decoder)]
        box_source: BoxSourceArg,
    },
    /// Finite-difference check of every differentiable module.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// List the tensors stored in a checkpoint.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleKind {
    Mock,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    End2end,
    Finetune,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl SplitArg {
    fn file(self) -> &'static str {
        match self {
            SplitArg::Train => "train.jsonl",
            SplitArg::Val => "val.jsonl",
            SplitArg::Test => "test.jsonl",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BoxSourceArg {
    Decoder,
    Mask2box,
}

#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg.into()))
}

fn data<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Data(e.into())
}

/// Numeric errors exit 3; everything else from a running computation is a
/// data error.
fn classify(e: Error) -> Failure {
    match e {
        Error::NonFinite { .. } => Failure::Numeric(e.into()),
        other => Failure::Data(other.into()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    let result = match cli.cmd {
        Command::Datagen {
            out,
            num_samples,
            seed,
            oracle: OracleKind::Mock,
            image_size,
        } => cmd_datagen(&out, num_samples, seed, image_size),
        Command::Train {
            data,
            config,
            preset,
            mode,
            init,
            out,
            log,
            seed,
            iters,
        } => cmd_train(TrainArgs {
            data,
            config,
            preset,
            mode,
            init,
            log: log.unwrap_or_else(|| out.with_extension("log.jsonl")),
            out,
            seed,
            iters,
        }),
        Command::Eval {
            data,
            ckpt,
            split,
            report,
            oracle,
            dump,
            acc_threshold,
            box_source,
        } => cmd_eval(
            &data,
            ckpt.as_deref(),
            split,
            &report,
            oracle,
            dump.as_deref(),
            acc_threshold,
            box_source,
        ),
        Command::Gradcheck { seed, tolerance } => cmd_gradcheck(seed, tolerance),
        Command::Inspect { ckpt } => cmd_inspect(&ckpt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Data(e) | Failure::Numeric(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("MEDISEE_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).context(format!(
        "MEDISEE_THREADS must be a positive integer, got `{v}`"
    ))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

/// Writes every file to a temporary sibling first and renames only after
/// all writes succeeded.
fn write_all_or_nothing(files: &[(PathBuf, Vec<u8>)]) -> Outcome {
    let tmp = |p: &Path| {
        let mut s = p.as_os_str().to_owned();
        s.push(".partial");
        PathBuf::from(s)
    };
    let mut written = Vec::new();
    for (path, bytes) in files {
        let t = tmp(path);
        let res = fs::File::create(&t).and_then(|mut f| f.write_all(bytes));
        written.push(t.clone());
        if let Err(e) = res {
            for w in &written {
                let _ = fs::remove_file(w);
            }
            return Err(data(
                anyhow::Error::new(e).context(format!("writing {}", path.display())),
            ));
        }
    }
    for (path, _) in files {
        fs::rename(tmp(path), path)
            .with_context(|| format!("renaming into {}", path.display()))
            .map_err(data)?;
    }
    Ok(())
}

fn cmd_datagen(out: &Path, n: usize, seed: u64, size: usize) -> Outcome {
    if n == 0 {
        return Err(usage("--num-samples must be at least 1"));
    }
    let base = synth_records(n, seed, size, size).map_err(|e| usage(e.to_string()))?;
    let generated = generate_pipeline(&base, &MockOracle::new(seed), &PipelineConfig::default())
        .map_err(classify)?;
    let splits = split_dataset(&generated.records, (0.8, 0.1, 0.1), seed)
        .map_err(|e| usage(e.to_string()))?;

    let jsonl =
        |records: &[medisee_core::datagen::ImageRecord]| -> std::result::Result<Vec<u8>, Failure> {
            let mut buf = Vec::new();
            for r in records {
                buf.extend_from_slice(record_to_json(r).map_err(classify)?.as_bytes());
                buf.push(b'\n');
            }
            Ok(buf)
        };
    let stats = serde_json::json!({
        "seed": seed,
        "num_samples": n,
        "image_size": size,
        "skipped": generated.skipped,
        "without_qa": generated.empty,
        "overall": dataset_stats(&generated.records),
        "train": dataset_stats(&splits.train),
        "val": dataset_stats(&splits.val),
        "test": dataset_stats(&splits.test),
    });
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(data)?;
    let files = vec![
        (out.join("train.jsonl"), jsonl(&splits.train)?),
        (out.join("val.jsonl"), jsonl(&splits.val)?),
        (out.join("test.jsonl"), jsonl(&splits.test)?),
        (
            out.join("stats.json"),
            serde_json::to_vec_pretty(&stats).map_err(data)?,
        ),
    ];
    write_all_or_nothing(&files)?;
    log::info!(
        "wrote {} train, {} val, {} test records to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        out.display()
    );
    Ok(())
}

struct TrainArgs {
    data: PathBuf,
    config: Option<PathBuf>,
    preset: Option<String>,
    mode: Option<ModeArg>,
    init: Option<PathBuf>,
    out: PathBuf,
    log: PathBuf,
    seed: Option<u64>,
    iters: Option<usize>,
}

fn train_config(a: &TrainArgs) -> std::result::Result<TrainConfig, Failure> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(data)?;
            TrainConfig::from_json(&text)
                .map_err(|e| usage(format!("config {}: {e}", path.display())))?
        }
        (None, Some(name)) => TrainConfig::preset(name).map_err(|e| usage(e.to_string()))?,
        (None, None) => TrainConfig::default(),
    };
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::End2end => TrainMode::End2end,
            ModeArg::Finetune => TrainMode::Finetune,
        };
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iters {
        cfg.total_iters = n;
        cfg.warmup_iters = cfg.warmup_iters.min(n);
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Outcome {
    let cfg = train_config(&a)?;
    if cfg.mode == TrainMode::Finetune && a.init.is_none() {
        return Err(usage(
            "finetune mode needs an end-to-end checkpoint via --init",
        ));
    }
    let records = read_jsonl(&a.data.join("train.jsonl")).map_err(classify)?;
    let model = match &a.init {
        Some(path) => {
            let ck = load_checkpoint(path).map_err(classify)?;
            if ck.model.cfg != cfg.model_config() {
                return Err(usage(format!(
                    "{} holds a model whose architecture differs from the configuration",
                    path.display()
                )));
            }
            ck.model
        }
        None => Model::init(cfg.model_config(), cfg.seed).map_err(|e| usage(e.to_string()))?,
    };
    let mut trainer = Trainer::new(cfg.clone(), model, &records).map_err(classify)?;
    let mut log = std::io::BufWriter::new(
        fs::File::create(&a.log)
            .with_context(|| format!("creating {}", a.log.display()))
            .map_err(data)?,
    );
    while !trainer.done() {
        let line = trainer.step().map_err(classify)?;
        writeln!(log, "{}", serde_json::to_string(&line).map_err(data)?).map_err(data)?;
        if line.iteration % 100 == 0 || trainer.done() {
            log::info!(
                "iter {} lr {:.2e} loss {:.4}",
                line.iteration,
                line.lr,
                line.loss.total
            );
        }
    }
    log.flush().map_err(data)?;
    let ck = Checkpoint {
        iteration: trainer.iteration,
        opt: Some(trainer.opt),
        model: trainer.model,
        train: Some(cfg),
    };
    save_checkpoint(&a.out, &ck).map_err(classify)?;
    log::info!("saved {}", a.out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    data_dir: &Path,
    ckpt: Option<&Path>,
    split: SplitArg,
    report: &Path,
    oracle: bool,
    dump: Option<&Path>,
    acc_threshold: f64,
    box_source: BoxSourceArg,
) -> Outcome {
    if !(acc_threshold > 0.0 && acc_threshold < 1.0) {
        return Err(usage("--acc-threshold must lie in (0, 1)"));
    }
    let path = data_dir.join(split.file());
    if !path.exists() {
        return Err(data(anyhow::anyhow!(
            "split file {} not found",
            path.display()
        )));
    }
    let records = read_jsonl(&path).map_err(classify)?;
    let model = match ckpt {
        Some(p) => load_checkpoint(p).map_err(classify)?.model,
        None => Model::init(Default::default(), 0).map_err(classify)?,
    };
    let opts = EvalOptions {
        oracle,
        box_source: match box_source {
            BoxSourceArg::Decoder => BoxSource::Decoder,
            BoxSourceArg::Mask2box => BoxSource::Mask2box,
        },
        acc_threshold,
    };
    let ev = evaluate(&model, &records, &opts).map_err(classify)?;
    if ev.missing_candidates > 0 {
        log::warn!(
            "{} answers lacked candidate tokens and scored as empty",
            ev.missing_candidates
        );
    }
    let mut files = vec![(
        report.to_path_buf(),
        serde_json::to_vec_pretty(&ev.report).map_err(data)?,
    )];
    if let Some(d) = dump {
        let mut buf = Vec::new();
        for line in &ev.dump {
            buf.extend_from_slice(serde_json::to_string(line).map_err(data)?.as_bytes());
            buf.push(b'\n');
        }
        files.push((d.to_path_buf(), buf));
    }
    write_all_or_nothing(&files)?;
    let o = &ev.report.overall;
    println!(
        "n={} dice={:.2} giou={:.2} ciou={:.2} box_iou={:.2} acc={:.2}",
        o.count, o.dice, o.giou, o.ciou, o.box_iou, o.acc
    );
    Ok(())
}

fn cmd_gradcheck(seed: u64, tolerance: f64) -> Outcome {
    if !(tolerance >= 0.0) {
        return Err(usage("--tolerance must be nonnegative"));
    }
    let r = run_gradient_suite(seed, tolerance).map_err(classify)?;
    println!(
        "{:<22} {:>9} {:>8} {:>12}  status",
        "module", "instances", "coords", "max_rel_err"
    );
    for e in &r.entries {
        println!(
            "{:<22} {:>9} {:>8} {:>12.3e}  {}",
            e.name,
            e.instances,
            e.coords,
            e.max_rel_error,
            if e.passed { "pass" } else { "FAIL" }
        );
    }
    if r.passed() {
        Ok(())
    } else {
        Err(Failure::Numeric(anyhow::anyhow!(
            "max relative error {:.3e} is not below tolerance {tolerance:e}",
            r.max_rel_error()
        )))
    }
}

fn cmd_inspect(ckpt: &Path) -> Outcome {
    let entries = inspect_checkpoint(ckpt).map_err(classify)?;
    for (name, shape) in &entries {
        println!("{name} {shape:?}");
    }
    println!("{} tensors", entries.len());
    Ok(())
}
