//! Operator surface: data generation, training, evaluation, decoding,
//! gradient checking, and attention dumping.
//!
//! Every command resolves one effective configuration (defaults, then the
//! `--config` file, then flags), validates it before any compute, echoes it
//! to the output directory, and writes all outputs atomically. Exit codes:
//! 0 success, 1 failed gradient check, 2 invalid configuration or usage,
//! 3 missing file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dqpsa_core::config::RunConfig;
use dqpsa_core::data::{self, Dataset, Task};
use dqpsa_core::metrics::{metrics_csv, MetricsRow};
use dqpsa_core::model::{self, DqpsaModel, Mode, Variant};
use dqpsa_core::{checkpoint, gradcheck, write_atomic, Error, Result};

const GRAD_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "dqpsa", about = "Span-based multimodal sentiment model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured variant: full, no-pdq, no-epe, or psa.
    #[arg(long)]
    variant: Option<String>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured data directory.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generates the synthetic corpora into the data directory.
    GenData(Common),
    /// Runs both pretraining stages, writing a checkpoint and metrics.
    Pretrain(Common),
    /// Finetunes with development-set selection, from a checkpoint if given.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint to start from (fresh parameters if absent).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluates a checkpoint on one dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to evaluate: train, dev, test, or pretrain.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Writes per-example span predictions for one split.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Checks analytic gradients against central finite differences.
    Gradcheck(Common),
    /// Dumps prompt-to-image attention matrices for one split.
    DumpAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Dumps at most this many examples.
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::MissingFile(_) | Error::Io { .. } => 3,
                _ => 2,
            }
        }
    };
    std::process::exit(code);
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::GenData(c) => cmd_gen_data(&effective(&c)?),
        Command::Pretrain(c) => cmd_pretrain(&effective(&c)?),
        Command::Finetune { common, checkpoint } => {
            cmd_finetune(&effective(&common)?, checkpoint.as_deref())
        }
        Command::Eval { common, checkpoint, split } => {
            cmd_eval(&effective(&common)?, &checkpoint, &split)
        }
        Command::Decode { common, checkpoint, split } => {
            cmd_decode(&effective(&common)?, &checkpoint, &split)
        }
        Command::Gradcheck(c) => cmd_gradcheck(&effective(&c)?),
        Command::DumpAttention { common, checkpoint, split, limit } => {
            cmd_dump_attention(&effective(&common)?, &checkpoint, &split, limit)
        }
    }
}

/// Defaults, then the config file, then flags; validated before any compute.
fn effective(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(v) = &common.variant {
        cfg.apply("variant", v)?;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.display().to_string();
    }
    if let Some(dir) = &common.data {
        cfg.data_dir = dir.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn threads() -> Result<usize> {
    match std::env::var("DQPSA_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config("DQPSA_THREADS", format!("expected a positive integer, got `{v}`"))),
        Err(_) => Ok(1),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_atomic(&dir.join("config_effective.txt"), cfg.echo().as_bytes())?;
    Ok(dir)
}

fn split_dir(cfg: &RunConfig, split: &str) -> Result<PathBuf> {
    match split {
        "pretrain" | "train" | "dev" | "test" => Ok(Path::new(&cfg.data_dir).join(split)),
        _ => Err(Error::config("split", format!("expected pretrain|train|dev|test, got `{split}`"))),
    }
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Dataset> {
    data::load_dataset(&split_dir(cfg, split)?)
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<i32> {
    out_dir(cfg)?;
    let world = cfg.world();
    let label = data::gen_label_choice(&world, cfg.n_label, "label")?;
    let mut pretrain = data::gen_description_choice(&world, cfg.n_desc, "desc")?;
    pretrain.examples.splice(0..0, label.examples);
    pretrain.images.extend(label.images);
    let splits = [
        ("pretrain", pretrain),
        ("train", data::gen_mabsa(&world, cfg.n_train, "train")?),
        ("dev", data::gen_mabsa(&world, cfg.n_dev, "dev")?),
        ("test", data::gen_mabsa(&world, cfg.n_test, "test")?),
    ];
    for (name, ds) in &splits {
        let dir = split_dir(cfg, name)?;
        data::save_dataset(ds, &dir)?;
        println!("{}: {} records, {} images", dir.display(), ds.examples.len(), ds.images.len());
    }
    Ok(0)
}

fn cmd_pretrain(cfg: &RunConfig) -> Result<i32> {
    let out = out_dir(cfg)?;
    let ds = load_split(cfg, "pretrain")?;
    let mut m = DqpsaModel::new(cfg.geometry(), cfg.variant, cfg.seed)?;
    let plan = cfg.plan();
    let mut rows: Vec<MetricsRow> = Vec::new();
    model::train_stage(&mut m, &ds, &plan.pretrain1, 0, &mut rows)?;
    model::train_stage(&mut m, &ds, &plan.pretrain2, plan.pretrain1.epochs, &mut rows)?;
    checkpoint::save(&m, &out.join("pretrained.ckpt"))?;
    write_atomic(&out.join("metrics_pretrain.csv"), metrics_csv(&rows).as_bytes())?;
    println!(
        "pretrained {} epochs over {} records -> {}",
        plan.pretrain1.epochs + plan.pretrain2.epochs,
        ds.examples.len(),
        out.join("pretrained.ckpt").display()
    );
    Ok(0)
}

fn cmd_finetune(cfg: &RunConfig, ckpt: Option<&Path>) -> Result<i32> {
    let out = out_dir(cfg)?;
    let train = load_split(cfg, "train")?;
    let dev = load_split(cfg, "dev")?;
    let mut m = match ckpt {
        Some(path) => checkpoint::load(path)?,
        None => DqpsaModel::new(cfg.geometry(), cfg.variant, cfg.seed)?,
    };
    let mut rows: Vec<MetricsRow> = Vec::new();
    model::finetune_with_selection(&mut m, &train, &dev, &cfg.plan().finetune, 0, threads()?, &mut rows)?;
    checkpoint::save(&m, &out.join("model.ckpt"))?;
    write_atomic(&out.join("metrics_finetune.csv"), metrics_csv(&rows).as_bytes())?;
    let best = rows
        .iter()
        .filter(|r| r.split == "dev" && r.task == "jmasa")
        .filter_map(|r| r.f1)
        .fold(f64::NEG_INFINITY, f64::max);
    println!("finetuned: best dev jmasa F1 {best:.4} -> {}", out.join("model.ckpt").display());
    Ok(0)
}

fn cmd_eval(cfg: &RunConfig, ckpt: &Path, split: &str) -> Result<i32> {
    let out = out_dir(cfg)?;
    let m = checkpoint::load(ckpt)?;
    let ds = load_split(cfg, split)?;
    let threads = threads()?;
    let mut rows: Vec<MetricsRow> = Vec::new();
    if !ds.task_indices(Task::Mate).is_empty() {
        rows.push(MetricsRow::report(0, split, "mate", &m.eval_mate(&ds, threads)?));
    }
    if !ds.task_indices(Task::Masc).is_empty() {
        rows.push(MetricsRow::accuracy(0, split, "masc", m.eval_masc(&ds, threads)?));
    }
    if !ds.task_indices(Task::Jmasa).is_empty() {
        rows.push(MetricsRow::report(0, split, "jmasa", &m.eval_jmasa(&ds, threads)?));
    }
    if rows.is_empty() {
        return Err(Error::Usage(format!("split `{split}` holds no evaluable records")));
    }
    let csv = metrics_csv(&rows);
    write_atomic(&out.join(format!("eval_{split}.csv")), csv.as_bytes())?;
    print!("{csv}");
    Ok(0)
}

fn cmd_decode(cfg: &RunConfig, ckpt: &Path, split: &str) -> Result<i32> {
    let out = out_dir(cfg)?;
    let m = checkpoint::load(ckpt)?;
    let ds = load_split(cfg, split)?;
    let mut text = String::new();
    for ex in &ds.examples {
        let spans = match ex.task()? {
            Task::Jmasa => m.run_jmasa(ex, ds.image(ex), &ds.vocab)?,
            _ => m.predict_spans(ex, ds.image(ex))?,
        };
        let _ = writeln!(text, "{}\t{}", ex.id, data::span_field(&spans));
    }
    let path = out.join(format!("decode_{split}.txt"));
    write_atomic(&path, text.as_bytes())?;
    println!("decoded {} examples -> {}", ds.examples.len(), path.display());
    Ok(0)
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<i32> {
    let out = out_dir(cfg)?;
    let mut report = String::new();
    let mut worst: f64 = 0.0;
    for case in gradcheck::op_gradient_suite(cfg.seed) {
        let _ = writeln!(report, "{}\t{}", case.name, case.max_rel_err);
        worst = worst.max(case.max_rel_err);
    }
    let combined = model::reference_gradcheck(cfg.seed, 1)?;
    let _ = writeln!(
        report,
        "combined-loss\t{}\t({} entries)",
        combined.max_rel_err, combined.entries
    );
    worst = worst.max(combined.max_rel_err);
    let pass = worst < GRAD_TOL;
    let _ = writeln!(
        report,
        "max relative error {worst} {} tolerance {GRAD_TOL}: {}",
        if pass { "<" } else { ">=" },
        if pass { "pass" } else { "FAIL" }
    );
    write_atomic(&out.join("gradcheck.txt"), report.as_bytes())?;
    print!("{report}");
    Ok(if pass { 0 } else { 1 })
}

fn pgm(rows: usize, cols: usize, data: &[f64]) -> String {
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut s = format!("P2\n{cols} {rows}\n255\n");
    for r in 0..rows {
        let line: Vec<String> = (0..cols)
            .map(|c| format!("{}", ((data[r * cols + c] - lo) * scale).round() as u32))
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

fn cmd_dump_attention(cfg: &RunConfig, ckpt: &Path, split: &str, limit: usize) -> Result<i32> {
    let out = out_dir(cfg)?;
    let m = checkpoint::load(ckpt)?;
    if matches!(m.variant, Variant::Psa | Variant::NoPdq) {
        return Err(Error::Usage(format!(
            "variant `{}` produces no image attention maps",
            m.variant.as_str()
        )));
    }
    let attn_dir = out.join("attn");
    std::fs::create_dir_all(&attn_dir).map_err(|e| Error::io(&attn_dir, e))?;
    let ds = load_split(cfg, split)?;
    let mut dumped = 0;
    for ex in &ds.examples {
        if dumped == limit {
            break;
        }
        let Some(img) = ds.image(ex) else { continue };
        let fwd = m.forward(ex, Some(img), Mode::SpanTask)?;
        let w = fwd.cross_weights.ok_or_else(|| {
            Error::Contract("image-bearing forward produced no attention weights".into())
        })?;
        let (rows, cols, values) = (w.rows(), w.cols(), w.value());
        let mut csv = String::new();
        for r in 0..rows {
            let line: Vec<String> =
                (0..cols).map(|c| format!("{}", values[r * cols + c])).collect();
            let _ = writeln!(csv, "{}", line.join(","));
        }
        write_atomic(&attn_dir.join(format!("{}.csv", ex.id)), csv.as_bytes())?;
        if cfg.dump_pgm {
            write_atomic(
                &attn_dir.join(format!("{}.pgm", ex.id)),
                pgm(rows, cols, &values).as_bytes(),
            )?;
        }
        dumped += 1;
    }
    println!("dumped {dumped} attention maps -> {}", attn_dir.display());
    Ok(0)
}
