//! Command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure during training.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::data::{prepare, ActionEvent, Dataset, Instance, Manifest, NUM_DOW, NUM_HOUR_BINS};
use crate::error::{Error, Result};
use crate::eval::{top_k, EvalReport, PopBaseline};
use crate::model::analysis::{
    embedding_similarity, export_action_attention, hour_similarity_by_gap, sequence_attention_weights,
};
use crate::model::{predict_eval, Ablations, ModelConfig};
use crate::scalar::Scalar;
use crate::synth::{generate, SynthSpec};
use crate::tensor::Matrix;
use crate::train::{evaluate_params, train, TrainSettings};
use crate::vocab::Vocabulary;

#[derive(Debug, Parser)]
#[command(name = "smartsense", version, about = "Context-aware next-action recommendation for smart homes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a raw log and routine file into windowed train/val/test splits.
    Prepare {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        routines: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a prepared dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON file with model and training settings; missing keys take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Remove a component: act, seq, reg or all. Repeatable.
        #[arg(long)]
        ablate: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        verbose: bool,
    },
    /// Score a checkpoint (or the popularity baseline) on a dataset split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        /// Also write the report as JSON to this path.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Rank next controls for one history window.
    Recommend {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON array of `{device, control, dow, hour_bin}` objects, oldest first.
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        dow: usize,
        #[arg(long)]
        hour: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Export attention maps and embedding similarities as CSV.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: AnalyzeMode,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dow: Option<usize>,
        #[arg(long)]
        hour: Option<usize>,
        #[arg(long)]
        device: Option<String>,
        #[arg(long)]
        control: Option<String>,
        /// Prepared dataset for `seq-attention`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        /// Maximum number of instances for `seq-attention`.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Generate a synthetic log, routines and Bayes-optimal ceiling.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    Pop,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AnalyzeMode {
    Attention,
    SeqAttention,
    DeviceSim,
    HourSim,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DtypeChoice {
    F32,
    #[default]
    F64,
}

/// Contents of the `train --config` file: model hyperparameters and
/// training settings side by side.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainConfigFile {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub train: TrainSettings,
    #[serde(default)]
    pub dtype: DtypeChoice,
}

pub const REPORT_FILE: &str = "train_report.json";
pub const EFFECTIVE_CONFIG_FILE: &str = "config.json";

/// Runs the CLI with process standard streams.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

/// Runs the CLI, writing results to `out` and diagnostics to `err`.
pub fn run_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Prepare {
            log,
            routines,
            manifest,
            out: dir,
            seed,
        } => {
            let manifest = Manifest::load(&manifest)?;
            let dataset = prepare(&log, routines.as_deref(), manifest, seed)?;
            dataset.save(&dir)?;
            emit(
                out,
                &format!(
                    "devices={} controls={} routines={} train={} val={} test={}\n",
                    dataset.vocab.num_devices(),
                    dataset.vocab.num_controls(),
                    dataset.routines.len(),
                    dataset.split.train.len(),
                    dataset.split.val.len(),
                    dataset.split.test.len()
                ),
            )
        }
        Command::Train {
            data,
            config,
            out: dir,
            ablate,
            seed,
            max_epochs,
            patience,
            verbose,
        } => {
            let mut file = match config {
                Some(path) => read_json::<TrainConfigFile>(&path)?,
                None => TrainConfigFile::default(),
            };
            for name in &ablate {
                file.model.ablations = file.model.ablations.union(Ablations::parse(name)?);
            }
            if let Some(s) = seed {
                file.train.seed = s;
            }
            if let Some(e) = max_epochs {
                file.train.max_epochs = e;
            }
            if let Some(p) = patience {
                file.train.patience = p;
            }
            file.train.verbose |= verbose;
            file.train.checkpoint_dir = Some(dir.clone());
            let dataset = Dataset::load(&data)?;
            file.model.num_devices = dataset.vocab.num_devices();
            file.model.num_controls = dataset.vocab.num_controls();
            file.model.window = dataset.manifest.window_length;
            match file.dtype {
                DtypeChoice::F64 => train_command::<f64>(&dataset, &file, &dir, out),
                DtypeChoice::F32 => train_command::<f32>(&dataset, &file, &dir, out),
            }
        }
        Command::Evaluate {
            checkpoint,
            data,
            baseline,
            split,
            json,
        } => {
            let dataset = Dataset::load(&data)?;
            let set = split_of(&dataset, split);
            let report = match (baseline, checkpoint) {
                (Some(Baseline::Pop), _) => {
                    let pop = PopBaseline::fit(&dataset.split.train, dataset.vocab.num_controls())?;
                    crate::eval::evaluate_model("pop", |i| pop.score(i), set)?
                }
                (None, Some(path)) => {
                    let ckpt = checkpoint::load::<f64>(&path)?;
                    check_compatible(&ckpt, &dataset.vocab)?;
                    evaluate_params(&model_name(&ckpt.config.ablations), &ckpt.params, &ckpt.config, set)?
                }
                (None, None) => return Err(Error::Usage("evaluate needs --checkpoint or --baseline".into())),
            };
            if let Some(path) = json {
                write_file(&path, &serde_json::to_string_pretty(&report)?)?;
            }
            emit(out, &format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()))
        }
        Command::Recommend {
            checkpoint,
            history,
            dow,
            hour,
            k,
        } => {
            let ckpt = checkpoint::load::<f64>(&checkpoint)?;
            let events: Vec<HistoryEvent> = read_json(&history)?;
            let text = recommend_text(&ckpt, &events, dow, hour, k)?;
            emit(out, &text)
        }
        Command::Analyze {
            checkpoint,
            mode,
            out: path,
            dow,
            hour,
            device,
            control,
            data,
            split,
            limit,
        } => {
            let ckpt = checkpoint::load::<f64>(&checkpoint)?;
            let text = match mode {
                AnalyzeMode::Attention => {
                    let (Some(dow), Some(hour), Some(device), Some(control)) = (dow, hour, device, control) else {
                        return Err(Error::Usage(
                            "attention mode needs --dow, --hour, --device and --control".into(),
                        ));
                    };
                    let event = resolve_event(
                        &ckpt,
                        &HistoryEvent {
                            device: key_of(&device),
                            control: key_of(&control),
                            dow,
                            hour_bin: hour,
                        },
                    )?;
                    attention_csv(&export_action_attention(&event, &ckpt.params, &ckpt.config)?)
                }
                AnalyzeMode::SeqAttention => {
                    let data = data.ok_or_else(|| Error::Usage("seq-attention mode needs --data".into()))?;
                    let dataset = Dataset::load(&data)?;
                    check_compatible(&ckpt, &dataset.vocab)?;
                    let set = split_of(&dataset, split);
                    let n = limit.unwrap_or(set.len()).min(set.len());
                    seq_attention_csv(&set[..n], &ckpt)?
                }
                AnalyzeMode::DeviceSim => {
                    let names: Vec<String> = (0..ckpt.config.num_devices)
                        .map(|i| device_label(ckpt.vocabulary.as_ref(), i))
                        .collect();
                    similarity_csv(&embedding_similarity(&ckpt.params.e_dev), &names)
                }
                AnalyzeMode::HourSim => {
                    let mut s = String::from("gap_bins,gap_hours,mean_cosine\n");
                    for (gap, c) in hour_similarity_by_gap(&ckpt.params.e_hour) {
                        writeln!(s, "{gap},{},{c:.6}", gap * 3).unwrap();
                    }
                    s
                }
            };
            match path {
                Some(p) => write_file(&p, &text),
                None => emit(out, &text),
            }
        }
        Command::Synth { spec, out: dir } => {
            let spec: SynthSpec = read_json(&spec)?;
            let output = generate(&spec)?;
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_file(&dir.join("log.csv"), &output.log_csv)?;
            write_file(&dir.join("routines.csv"), &output.routine_csv)?;
            let manifest = Manifest {
                tz_offset_minutes: 0,
                window_length: spec.window_length,
            };
            write_file(&dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
            write_file(&dir.join("synth.json"), &serde_json::to_string_pretty(&output.sidecar(&spec))?)?;
            emit(
                out,
                &format!("{}\n{}\n", EvalReport::CSV_HEADER, output.bayes_optimal.csv_row()),
            )
        }
    }
}

fn train_command<T: Scalar>(dataset: &Dataset, file: &TrainConfigFile, dir: &Path, out: &mut dyn Write) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(EFFECTIVE_CONFIG_FILE), &serde_json::to_string_pretty(file)?)?;
    let outcome = train::<T>(
        &dataset.split.train,
        &dataset.split.val,
        &dataset.routines,
        &file.model,
        &file.train,
        Some(&dataset.vocab),
    )?;
    write_file(&dir.join(REPORT_FILE), &serde_json::to_string_pretty(&outcome.report)?)?;
    let mut text = format!(
        "best_epoch={} val_map1={:.4} epochs_run={}\n",
        outcome.report.best_epoch,
        outcome.report.best_val_map1,
        outcome.report.epochs.len()
    );
    if !dataset.split.test.is_empty() {
        let name = model_name(&file.model.ablations);
        let report = evaluate_params(&name, &outcome.params, &file.model, &dataset.split.test)?;
        writeln!(text, "{}\n{}", EvalReport::CSV_HEADER, report.csv_row()).unwrap();
    }
    emit(out, &text)
}

fn model_name(a: &Ablations) -> String {
    if *a == Ablations::ALL {
        return "smartsense-all".into();
    }
    let mut name = String::from("smartsense");
    for (on, tag) in [(a.act_off, "act"), (a.seq_off, "seq"), (a.reg_off, "reg")] {
        if on {
            name.push('-');
            name.push_str(tag);
        }
    }
    name
}

fn split_of(dataset: &Dataset, split: SplitName) -> &[Instance] {
    match split {
        SplitName::Train => &dataset.split.train,
        SplitName::Val => &dataset.split.val,
        SplitName::Test => &dataset.split.test,
    }
}

fn check_compatible<T>(ckpt: &Checkpoint<T>, vocab: &Vocabulary) -> Result<()> {
    if ckpt.config.num_devices != vocab.num_devices() || ckpt.config.num_controls != vocab.num_controls() {
        return Err(Error::Config(format!(
            "checkpoint expects {} devices and {} controls, dataset has {} and {}",
            ckpt.config.num_devices,
            ckpt.config.num_controls,
            vocab.num_devices(),
            vocab.num_controls()
        )));
    }
    Ok(())
}

/// A device or control given either by name or by vocabulary index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Key {
    Index(usize),
    Name(String),
}

fn key_of(text: &str) -> Key {
    text.parse().map(Key::Index).unwrap_or_else(|_| Key::Name(text.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub device: Key,
    pub control: Key,
    pub dow: usize,
    pub hour_bin: usize,
}

fn resolve_event<T>(ckpt: &Checkpoint<T>, e: &HistoryEvent) -> Result<ActionEvent> {
    let config = &ckpt.config;
    let vocab = ckpt.vocabulary.as_ref();
    let no_vocab = || Error::Config("checkpoint carries no vocabulary; use numeric indices".into());
    let device_id = match &e.device {
        Key::Index(i) => *i,
        Key::Name(n) => vocab
            .ok_or_else(no_vocab)?
            .device_id(n)
            .ok_or_else(|| Error::Config(format!("unknown device {n:?}")))?,
    };
    let control_id = match &e.control {
        Key::Index(i) => *i,
        Key::Name(n) => {
            let v = vocab.ok_or_else(no_vocab)?;
            let device = v
                .device_name(device_id)
                .ok_or(Error::IndexOutOfRange {
                    kind: "device",
                    index: device_id,
                    size: v.num_devices(),
                })?;
            v.control_id(device, n)
                .ok_or_else(|| Error::Config(format!("unknown control {n:?} for device {device:?}")))?
        }
    };
    let event = ActionEvent {
        device_id,
        control_id,
        dow: e.dow,
        hour_bin: e.hour_bin,
    };
    for (kind, index, size) in [
        ("device", device_id, config.num_devices),
        ("control", control_id, config.num_controls),
        ("day-of-week", e.dow, NUM_DOW),
        ("hour bin", e.hour_bin, NUM_HOUR_BINS),
    ] {
        if index >= size {
            return Err(Error::IndexOutOfRange { kind, index, size });
        }
    }
    if let Some(v) = vocab {
        if v.control_device(control_id) != Some(device_id) {
            return Err(Error::Config(format!(
                "control {} does not belong to device {}",
                v.control_label(control_id),
                device_label(Some(v), device_id)
            )));
        }
    }
    Ok(event)
}

/// Top-`k` recommendations as `rank,control,probability` CSV.
pub fn recommend_text<T: Scalar>(
    ckpt: &Checkpoint<T>,
    events: &[HistoryEvent],
    dow: usize,
    hour: usize,
    k: usize,
) -> Result<String> {
    let config = &ckpt.config;
    if events.len() != config.history_len() {
        return Err(Error::Usage(format!(
            "history has {} events; expected {} (window length minus one)",
            events.len(),
            config.history_len()
        )));
    }
    if k == 0 || k > config.num_controls {
        return Err(Error::Usage(format!("k must be between 1 and {}", config.num_controls)));
    }
    if dow >= NUM_DOW || hour >= NUM_HOUR_BINS {
        return Err(Error::Usage(format!(
            "--dow must be below {NUM_DOW} and --hour below {NUM_HOUR_BINS}"
        )));
    }
    let history = events.iter().map(|e| resolve_event(ckpt, e)).collect::<Result<Vec<_>>>()?;
    let instance = Instance {
        history,
        target_dow: dow,
        target_hour_bin: hour,
        target_control_id: 0,
    };
    let probs = predict_eval(&instance, &ckpt.params, config)?;
    let mut text = String::from("rank,control,probability\n");
    for (rank, c) in top_k(&probs, k).into_iter().enumerate() {
        writeln!(
            text,
            "{},{},{:.6}",
            rank + 1,
            control_label(ckpt.vocabulary.as_ref(), c),
            probs[c].to_f64_lossy()
        )
        .unwrap();
    }
    Ok(text)
}

fn device_label(vocab: Option<&Vocabulary>, i: usize) -> String {
    vocab
        .and_then(|v| v.device_name(i))
        .map_or_else(|| format!("device{i}"), str::to_string)
}

fn control_label(vocab: Option<&Vocabulary>, i: usize) -> String {
    match vocab {
        Some(v) if i < v.num_controls() => v.control_label(i),
        _ => format!("control{i}"),
    }
}

fn attention_csv<T: Scalar>(m: &Matrix<T>) -> String {
    let names = ["device", "control", "dow", "hour"];
    let mut s = String::from("query,device,control,dow,hour\n");
    for (name, row) in names.iter().zip(m.iter_rows()) {
        s.push_str(name);
        for v in row {
            write!(s, ",{:.6}", v.to_f64_lossy()).unwrap();
        }
        s.push('\n');
    }
    s
}

fn seq_attention_csv<T: Scalar>(set: &[Instance], ckpt: &Checkpoint<T>) -> Result<String> {
    let w = ckpt.config.history_len();
    let mut s = String::from("instance");
    for i in 0..w {
        write!(s, ",a{i}").unwrap();
    }
    s.push('\n');
    for (n, inst) in set.iter().enumerate() {
        write!(s, "{n}").unwrap();
        for a in sequence_attention_weights(inst, &ckpt.params, &ckpt.config)? {
            write!(s, ",{:.6}", a.to_f64_lossy()).unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

fn similarity_csv<T: Scalar>(m: &Matrix<T>, names: &[String]) -> String {
    let mut s = String::from("device");
    for n in names {
        write!(s, ",{n}").unwrap();
    }
    s.push('\n');
    for (n, row) in names.iter().zip(m.iter_rows()) {
        s.push_str(n);
        for v in row {
            write!(s, ",{:.6}", v.to_f64_lossy()).unwrap();
        }
        s.push('\n');
    }
    s
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}
