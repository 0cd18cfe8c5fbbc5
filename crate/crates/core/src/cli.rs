//! Command-line front end. Flags override values from `--config`.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::data::{synth_generate, Dataset, Manifest, SynthSpec};
use crate::error::{PcrpError, Result};
use crate::eval::{extract_encodings, probe_eval, probe_train, stratified_split, EvalReport, ProbeConfig};
use crate::preprocess::preprocess_dataset;
use crate::trainer::{train, EpochRecord, TrainConfig, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "pcrp", version, about = "Prototype-contrast skeleton encoder: data, pretraining and linear evaluation")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a labeled synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Map every sequence into its first-frame body coordinates.
    Preprocess(PreprocessArgs),
    /// Train the encoder with alternating clustering and gradient steps.
    Pretrain(PretrainArgs),
    /// Dump final-step encodings of a dataset as JSONL.
    Encode(EncodeArgs),
    /// Train and evaluate a linear probe on frozen encodings.
    Probe(ProbeArgs),
    /// Turn a training log and an evaluation report into CSV series.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset in JSONL form.
    #[arg(long)]
    pub data: PathBuf,
    /// Manifest JSON; defaults to the data path with extension `manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let manifest = Manifest::load(self.manifest.clone().unwrap_or_else(|| default_manifest(&self.data)))?;
        Dataset::load_jsonl(&self.data, manifest)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output JSONL path.
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest output; defaults to `<out>` with extension `manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 20)]
    pub frames: usize,
    #[arg(long, default_value_t = 5)]
    pub joints: usize,
    /// Standard deviation of the additive coordinate noise.
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub input: DataArgs,
    /// Output JSONL path; the manifest is copied next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// JSON training config; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub input: DataArgs,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Disable the prototype contrast term.
    #[arg(long)]
    pub no_pc: bool,
    /// Predict the sequence in forward order instead of reversed.
    #[arg(long)]
    pub no_rp: bool,
    /// Per-epoch JSONL training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Directory for per-epoch clustering dumps.
    #[arg(long)]
    pub cluster_dir: Option<PathBuf>,
    /// Also write `<out>.epoch<N>` after every epoch.
    #[arg(long)]
    pub checkpoint_every_epoch: bool,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub input: DataArgs,
    /// Output JSONL, one `{id, label, encoding}` per line.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub input: DataArgs,
    /// Separate test set; without it `--data` is split by `--train-fraction`.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// EvalReport JSON output; the confusion matrix goes to `<out>` with extension `confusion.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.7)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Training log written by `pretrain --log`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// EvalReport JSON written by `probe`.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Output directory for the CSV files.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn default_manifest(data: &Path) -> PathBuf {
    data.with_extension("manifest.json")
}

/// Config file (if any) with flag overrides applied.
pub fn resolve_config(args: &PretrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    if let Some(e) = args.epochs {
        cfg.pretrain_epochs = e;
    }
    if args.no_pc {
        cfg.use_pc = false;
    }
    if args.no_rp {
        cfg.use_rp = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| PcrpError::Param(format!("cannot build thread pool: {e}")))?
        .install(f)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| PcrpError::io(path, e))?))
}

fn synth(a: &SynthArgs) -> Result<()> {
    let ds = synth_generate(&SynthSpec {
        n_per_class: a.n_per_class,
        classes: a.classes,
        frames: a.frames,
        joints: a.joints,
        noise_sigma: a.noise,
        seed: a.seed,
    })?;
    ds.save_jsonl(&a.out)?;
    ds.manifest().save(a.manifest.clone().unwrap_or_else(|| default_manifest(&a.out)))
}

fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let ds = preprocess_dataset(&a.input.load()?)?;
    ds.save_jsonl(&a.out)?;
    ds.manifest().save(default_manifest(&a.out))
}

fn pretrain(a: &PretrainArgs) -> Result<()> {
    let cfg = resolve_config(a)?;
    let ds = a.input.load()?;
    if let Some(dir) = &a.cluster_dir {
        fs::create_dir_all(dir).map_err(|e| PcrpError::io(dir, e))?;
    }
    let report = train(
        &ds,
        &cfg,
        &TrainOptions {
            checkpoint: a.out.clone(),
            log: a.log.clone(),
            checkpoint_every_epoch: a.checkpoint_every_epoch,
            cluster_dir: a.cluster_dir.clone(),
        },
    )?;
    if let Some(last) = report.epochs.last() {
        log::info!("final mean loss {:.6}", last.mean_loss);
    }
    Ok(())
}

#[derive(Serialize)]
struct EncodingRecord<'a> {
    id: &'a str,
    label: Option<usize>,
    encoding: &'a [f64],
}

fn encode(a: &EncodeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let ds = a.input.load()?;
    let cfg = ckpt.config()?;
    let fixed = ds.fix_length(cfg.t_fixed)?;
    let data = with_threads(a.threads, || match cfg.precision {
        crate::trainer::Precision::F32 => crate::trainer::encode_dataset(&fixed, &ckpt.models::<f32>()?.0),
        crate::trainer::Precision::F64 => crate::trainer::encode_dataset(&fixed, &ckpt.models::<f64>()?.0),
    })?;
    let mut w = create(&a.out)?;
    for (s, row) in ds.sequences.iter().zip(data.chunks(cfg.hidden_dim)) {
        let rec = EncodingRecord {
            id: &s.id,
            label: s.label,
            encoding: row,
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w).map_err(|e| PcrpError::io(&a.out, e))?;
    }
    w.flush().map_err(|e| PcrpError::io(&a.out, e))
}

fn probe(a: &ProbeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let ds = a.input.load()?;
    let cfg = ProbeConfig {
        lr: a.lr,
        epochs: a.epochs,
        seed: a.seed,
    };
    let report = with_threads(a.threads, || {
        let feats = extract_encodings(&ds, &ckpt)?;
        let (train_set, test_set) = match &a.test_data {
            Some(p) => {
                let test = Dataset::load_jsonl(p, ds.manifest())?;
                (feats, extract_encodings(&test, &ckpt)?)
            }
            None => {
                let (tr, te) = stratified_split(&feats.labels, a.train_fraction, a.seed)?;
                (feats.subset(&tr), feats.subset(&te))
            }
        };
        let model = probe_train(&train_set, &cfg)?;
        probe_eval(&model, &test_set)
    })?;
    report.save_json(&a.out)?;
    report.save_confusion_csv(a.out.with_extension("confusion.csv"))?;
    println!("accuracy {:.4}", report.accuracy);
    Ok(())
}

fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let file = File::open(path).map_err(|e| PcrpError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PcrpError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PcrpError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn report(a: &ReportArgs) -> Result<()> {
    if a.log.is_none() && a.eval.is_none() {
        return Err(PcrpError::Param("report needs --log, --eval or both".into()));
    }
    fs::create_dir_all(&a.out).map_err(|e| PcrpError::io(&a.out, e))?;
    if let Some(log) = &a.log {
        let path = a.out.join("loss.csv");
        let mut w = create(&path)?;
        let io = |e| PcrpError::io(&path, e);
        writeln!(w, "epoch,mean_loss,mean_mae,mean_contrast,e_step_seconds,m_step_seconds").map_err(io)?;
        for r in read_log(log)? {
            let contrast = r.mean_contrast.map(|c| c.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.epoch, r.mean_loss, r.mean_mae, contrast, r.e_step_seconds, r.m_step_seconds
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    if let Some(eval) = &a.eval {
        let rep = EvalReport::load_json(eval)?;
        rep.save_confusion_csv(a.out.join("confusion.csv"))?;
        let path = a.out.join("per_class.csv");
        let mut body = String::from("class,accuracy\n");
        for (c, acc) in rep.per_class_accuracy.iter().enumerate() {
            body.push_str(&format!("{c},{acc}\n"));
        }
        body.push_str(&format!("overall,{}\n", rep.accuracy));
        fs::write(&path, body).map_err(|e| PcrpError::io(&path, e))?;
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Encode(a) => encode(a),
        Command::Probe(a) => probe(a),
        Command::Report(a) => report(a),
    }
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 2 on usage errors, 1 on runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("cfg.json");
        fs::write(&cfg_path, r#"{"seed": 3, "pretrain_epochs": 4, "hidden_dim": 16}"#).unwrap();
        let parse = |extra: &[&str]| {
            let mut argv = vec!["pcrp", "pretrain", "--data", "d.jsonl", "--out", "c.bin", "--config"];
            argv.push(cfg_path.to_str().unwrap());
            argv.extend_from_slice(extra);
            match Cli::try_parse_from(argv).unwrap().command {
                Command::Pretrain(a) => resolve_config(&a).unwrap(),
                _ => unreachable!(),
            }
        };
        let base = parse(&[]);
        assert_eq!((base.seed, base.pretrain_epochs, base.hidden_dim), (3, 4, 16));
        assert!(base.use_pc && base.use_rp);
        let over = parse(&["--seed", "9", "--epochs", "1", "--no-pc", "--no-rp", "--threads", "2"]);
        assert_eq!((over.seed, over.pretrain_epochs, over.threads), (9, 1, 2));
        assert!(!over.use_pc && !over.use_rp);
        assert_eq!(over.hidden_dim, 16);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["pcrp", "synth", "--bogus"]), 2);
        assert_eq!(run(["pcrp"]), 2);
        assert_eq!(run(["pcrp", "preprocess", "--data", "/nonexistent/x.jsonl", "--out", "/tmp/y"]), 1);
    }

    #[test]
    fn default_manifest_path() {
        assert_eq!(default_manifest(Path::new("a/b.jsonl")), PathBuf::from("a/b.manifest.json"));
    }
}
