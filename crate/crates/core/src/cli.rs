//! Command-line front end over [`crate::pipeline`].

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::asr::ContextMode;
use crate::checkpoint::{file_sha256, FORMAT_VERSION};
use crate::corpus::{load_corpus, save_corpus, Split};
use crate::error::{Error, Result};
use crate::extractor::write_extractor_log;
use crate::pipeline::{
    evaluate, pretrain, synthesize, train_recognizer, write_asr_log, write_decode_jsonl, Config, TrainedAsr,
    TrainedExtractor,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "ctxasr", version, about = "Context-conditioned speech recognition on synthetic conversations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed (and the corpus seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus and its train/dev/test split.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the context extractor on the training split.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.jsonl and dev.jsonl.
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train the context-free recognizer, or continue one with --init-from.
    TrainBaseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Fine-tune a baseline checkpoint with extracted context.
    TrainContextual {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        init_from: Option<PathBuf>,
        #[arg(long)]
        extractor: Option<PathBuf>,
        #[arg(long, default_value = "con_one")]
        context_mode: ContextMode,
    },
    /// Decode a split with one or more recognizers and write a CER report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Recognizer checkpoint, optionally prefixed `MODE=`; repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long)]
        extractor: Option<PathBuf>,
        /// Restrict to these modes; repeatable.
        #[arg(long)]
        context_mode: Vec<ContextMode>,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Failures print one `error[code]: message` line.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            if matches!(e, Error::Usage(_)) {
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}

pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error[{}]: {msg}", e.code())
}

fn load_config(common: &Common) -> Result<Config> {
    let cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let cfg = match common.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

struct Run {
    command: &'static str,
    config: Config,
    inputs: BTreeMap<String, String>,
    out: PathBuf,
}

impl Run {
    fn new(command: &'static str, common: &Common) -> Result<Self> {
        let config = load_config(common)?;
        std::fs::create_dir_all(&common.out)?;
        Ok(Self {
            command,
            config,
            inputs: BTreeMap::new(),
            out: common.out.clone(),
        })
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let digest = file_sha256(path).map_err(|e| io_error(path, e))?;
        self.inputs.insert(role.into(), digest);
        Ok(())
    }

    fn corpus(&mut self, dir: &Path, part: &str) -> Result<Vec<crate::corpus::Conversation>> {
        let path = dir.join(format!("{part}.jsonl"));
        self.input(&format!("corpus.{part}"), &path)?;
        load_corpus(&path)
    }

    fn metadata(&self) -> serde_json::Value {
        json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "checkpoint_format": FORMAT_VERSION,
            "command": self.command,
            "seed": self.config.seed,
            "inputs": self.inputs,
            "config": self.config,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn finish(&self) -> Result<()> {
        write_json(&self.path("metadata.json"), &self.metadata())
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| io_error(path, e))?))
}

fn training_split(run: &mut Run, dir: &Path) -> Result<Split> {
    Ok(Split {
        train: run.corpus(dir, "train")?,
        dev: run.corpus(dir, "dev")?,
        test: Vec::new(),
    })
}

fn require(path: Option<PathBuf>, flag: &str, command: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::Usage(format!("{command} requires {flag}")))
}

fn load_extractor(run: &mut Run, path: &Path) -> Result<TrainedExtractor> {
    run.input("extractor", path)?;
    let ext = TrainedExtractor::load(path)?;
    if ext.model.d_model() != run.config.asr.context_dim {
        return Err(Error::InvalidConfig(format!(
            "extractor width {} differs from asr.context_dim {}",
            ext.model.d_model(),
            run.config.asr.context_dim
        )));
    }
    Ok(ext)
}

fn progress_asr(e: &crate::asr::AsrEpoch) {
    eprintln!("epoch {:>3}  train {:.4}  dev {:.4}", e.epoch, e.train_loss, e.dev_loss);
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { common } => {
            let run = Run::new("synth", &common)?;
            let split = synthesize(&run.config)?;
            save_corpus(&run.path("train.jsonl"), &split.train)?;
            save_corpus(&run.path("dev.jsonl"), &split.dev)?;
            save_corpus(&run.path("test.jsonl"), &split.test)?;
            run.finish()
        }
        Command::Pretrain { common, corpus } => {
            let mut run = Run::new("pretrain", &common)?;
            let train = run.corpus(&corpus, "train")?;
            let (ext, log) = pretrain(&run.config, &train, |e| {
                eprintln!(
                    "epoch {:>3}  ctc {:.4}  mlm {:.4}  mam {:.4}  total {:.4}",
                    e.epoch, e.ctc, e.mlm, e.mam, e.total
                )
            })?;
            ext.save(&run.path("extractor.ckpt"))?;
            write_extractor_log(create(&run.path("extractor_log.csv"))?, &log)?;
            run.finish()
        }
        Command::TrainBaseline {
            common,
            corpus,
            init_from,
        } => {
            let mut run = Run::new("train-baseline", &common)?;
            let split = training_split(&mut run, &corpus)?;
            let init = match &init_from {
                Some(path) => {
                    run.input("init_from", path)?;
                    Some(TrainedAsr::load(path)?)
                }
                None => None,
            };
            let training = if init.is_some() {
                run.config.finetune_training.clone()
            } else {
                run.config.baseline_training.clone()
            };
            let (asr, log) = train_recognizer(
                &run.config,
                &split,
                ContextMode::None,
                None,
                init.as_ref().map(|m| &m.params),
                &training,
                progress_asr,
            )?;
            asr.save(&run.path("asr.ckpt"))?;
            write_asr_log(create(&run.path("asr_log.csv"))?, &log)?;
            run.finish()
        }
        Command::TrainContextual {
            common,
            corpus,
            init_from,
            extractor,
            context_mode,
        } => {
            let init_from = require(init_from, "--init-from", "train-contextual")?;
            let extractor = require(extractor, "--extractor", "train-contextual")?;
            let mut run = Run::new("train-contextual", &common)?;
            let ext = load_extractor(&mut run, &extractor)?;
            run.input("init_from", &init_from)?;
            let init = TrainedAsr::load(&init_from)?;
            let split = training_split(&mut run, &corpus)?;
            let banks = (ext.extract_all(&split.train)?, ext.extract_all(&split.dev)?);
            let training = run.config.finetune_training.clone();
            let (asr, log) = train_recognizer(
                &run.config,
                &split,
                context_mode,
                Some((&banks.0, &banks.1)),
                Some(&init.params),
                &training,
                progress_asr,
            )?;
            asr.save(&run.path("asr.ckpt"))?;
            write_asr_log(create(&run.path("asr_log.csv"))?, &log)?;
            run.finish()
        }
        Command::Evaluate {
            common,
            corpus,
            models,
            extractor,
            context_mode,
            split,
        } => {
            if !["train", "dev", "test"].contains(&split.as_str()) {
                return Err(Error::Usage(format!("unknown split '{split}' (train, dev or test)")));
            }
            let mut run = Run::new("evaluate", &common)?;
            let convs = run.corpus(&corpus, &split)?;
            let mut loaded = Vec::new();
            for spec in &models {
                let (mode, path) = parse_model_arg(spec)?;
                let mut asr = TrainedAsr::load(&path)?;
                if let Some(mode) = mode {
                    asr.mode = mode;
                }
                if !context_mode.is_empty() && !context_mode.contains(&asr.mode) {
                    continue;
                }
                if loaded.iter().any(|m: &TrainedAsr| m.mode == asr.mode) {
                    return Err(Error::InvalidInput(format!("two models given for mode {}", asr.mode)));
                }
                run.input(&format!("model.{}", asr.mode), &path)?;
                loaded.push(asr);
            }
            if loaded.is_empty() {
                return Err(Error::InvalidInput("no model matches the requested context modes".into()));
            }
            let ext = match extractor {
                Some(path) => Some(load_extractor(&mut run, &path)?),
                None => {
                    if let Some(m) = loaded.iter().find(|m| m.mode != ContextMode::None) {
                        return Err(Error::Usage(format!("mode {} needs --extractor", m.mode)));
                    }
                    None
                }
            };
            let refs: Vec<&TrainedAsr> = loaded.iter().collect();
            let (report, records) = evaluate(&convs, &split, &refs, ext.as_ref(), &run.config.decode, run.metadata())?;
            std::fs::write(run.path("report.json"), report.to_json())?;
            std::fs::write(run.path("report.txt"), report.to_table())?;
            for (m, recs) in loaded.iter().zip(&records) {
                write_decode_jsonl(create(&run.path(&format!("decode_{}.jsonl", m.mode)))?, recs)?;
            }
            print!("{}", report.to_table());
            run.finish()
        }
    }
}

/// `MODE=PATH` or a bare `PATH` whose mode is read from the checkpoint.
fn parse_model_arg(spec: &str) -> Result<(Option<ContextMode>, PathBuf)> {
    if let Some((mode, path)) = spec.split_once('=') {
        if let Ok(mode) = mode.parse::<ContextMode>() {
            return Ok((Some(mode), PathBuf::from(path)));
        }
    }
    Ok((None, PathBuf::from(spec)))
}
