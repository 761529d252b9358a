//! Log and routine ingestion, temporal binning, windowing and splitting.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub const NUM_DOW: usize = 7;
pub const NUM_HOUR_BINS: usize = 8;
pub const HOURS_PER_BIN: i64 = 3;

/// One device-control event with its temporal context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionEvent {
    pub device_id: usize,
    pub control_id: usize,
    pub dow: usize,
    pub hour_bin: usize,
}

impl ActionEvent {
    pub fn check(&self, vocab: &Vocabulary) -> Result<()> {
        check_index("device", self.device_id, vocab.num_devices())?;
        check_index("control", self.control_id, vocab.num_controls())?;
        check_index("day-of-week", self.dow, NUM_DOW)?;
        check_index("hour bin", self.hour_bin, NUM_HOUR_BINS)?;
        if vocab.control_device(self.control_id) != Some(self.device_id) {
            return Err(Error::Config(format!(
                "control {} does not belong to device {}",
                self.control_id, self.device_id
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_index(kind: &'static str, index: usize, size: usize) -> Result<()> {
    if index < size {
        Ok(())
    } else {
        Err(Error::IndexOutOfRange { kind, index, size })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub session_id: String,
    /// `(timestamp seconds, event)` in non-decreasing timestamp order.
    pub events: Vec<(i64, ActionEvent)>,
}

/// A fixed-length window: `W - 1` history events plus the target context and label.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instance {
    pub history: Vec<ActionEvent>,
    pub target_dow: usize,
    pub target_hour_bin: usize,
    pub target_control_id: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Routine {
    pub routine_id: String,
    pub devices: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tz_offset_minutes: i32,
    pub window_length: usize,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.window_length < 2 {
            return Err(Error::Config("window_length must be at least 2".into()));
        }
        Ok(manifest)
    }
}

/// Day-of-week (Monday = 0) and three-hour bin of a timestamp in local time.
pub fn bin_timestamp(timestamp: i64, tz_offset_minutes: i32) -> (usize, usize) {
    let local = timestamp + i64::from(tz_offset_minutes) * 60;
    let days = local.div_euclid(86_400);
    let seconds = local.rem_euclid(86_400);
    // 1970-01-01 was a Thursday.
    let dow = (days + 3).rem_euclid(7) as usize;
    let hour_bin = (seconds / 3_600 / HOURS_PER_BIN) as usize;
    (dow, hour_bin)
}

#[derive(Clone, Debug)]
pub struct ParsedLog {
    pub sessions: Vec<Session>,
    pub vocab: Vocabulary,
    /// Rows rejected because a name was missing from a frozen vocabulary.
    pub skipped: usize,
}

pub fn parse_log_csv(path: &Path, tz_offset_minutes: i32, vocab: Option<&Vocabulary>) -> Result<ParsedLog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_log_reader(file, &path.display().to_string(), tz_offset_minutes, vocab)
}

/// Parses log rows `session_id,timestamp,device,control`.
///
/// With `vocab = None` a fresh vocabulary is built. Otherwise the given
/// vocabulary is frozen and rows naming unknown devices or controls are
/// skipped and counted.
pub fn parse_log_reader<R: Read>(
    reader: R,
    source: &str,
    tz_offset_minutes: i32,
    vocab: Option<&Vocabulary>,
) -> Result<ParsedLog> {
    let frozen = vocab.is_some();
    let mut vocab = vocab.cloned().unwrap_or_default();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let parse_err = |line: u64, message: String| Error::Parse {
        file: source.to_string(),
        line,
        message,
    };

    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, Vec<(i64, ActionEvent)>> = HashMap::new();
    let mut skipped = 0;
    let mut saw_header = false;

    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if !saw_header {
            let header: Vec<&str> = record.iter().collect();
            if header != ["session_id", "timestamp", "device", "control"] {
                return Err(parse_err(
                    line,
                    format!("expected header session_id,timestamp,device,control, found {}", header.join(",")),
                ));
            }
            saw_header = true;
            continue;
        }
        if record.len() != 4 {
            return Err(parse_err(line, format!("expected 4 fields, found {}", record.len())));
        }
        let session_id = &record[0];
        let timestamp: i64 = record[1]
            .parse()
            .map_err(|_| parse_err(line, format!("invalid timestamp {:?}", &record[1])))?;
        let (device, control) = (&record[2], &record[3]);
        if session_id.is_empty() || device.is_empty() || control.is_empty() {
            return Err(parse_err(line, "empty field".into()));
        }

        let (device_id, control_id) = if frozen {
            match (vocab.device_id(device), vocab.control_id(device, control)) {
                (Some(d), Some(c)) => (d, c),
                _ => {
                    skipped += 1;
                    continue;
                }
            }
        } else {
            let c = vocab.insert_control(device, control);
            (vocab.control_device(c).unwrap(), c)
        };

        let (dow, hour_bin) = bin_timestamp(timestamp, tz_offset_minutes);
        let event = ActionEvent {
            device_id,
            control_id,
            dow,
            hour_bin,
        };
        grouped
            .entry(session_id.to_string())
            .or_insert_with(|| {
                order.push(session_id.to_string());
                Vec::new()
            })
            .push((timestamp, event));
    }

    let sessions = order
        .into_iter()
        .map(|id| {
            let mut events = grouped.remove(&id).unwrap_or_default();
            events.sort_by_key(|(ts, _)| *ts);
            Session { session_id: id, events }
        })
        .collect();
    Ok(ParsedLog {
        sessions,
        vocab,
        skipped,
    })
}

/// Stride-1 windows of `window` events; sessions shorter than the window yield nothing.
pub fn make_windows(session: &Session, window: usize) -> Vec<Instance> {
    assert!(window >= 2, "window length must be at least 2");
    session
        .events
        .windows(window)
        .map(|w| {
            let (_, target) = w[window - 1];
            Instance {
                history: w[..window - 1].iter().map(|(_, e)| *e).collect(),
                target_dow: target.dow,
                target_hour_bin: target.hour_bin,
                target_control_id: target.control_id,
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<Instance>,
    pub val: Vec<Instance>,
    pub test: Vec<Instance>,
}

/// Seeded shuffle followed by a 7:1:2 cut at `floor(0.7 n)` and `floor(0.8 n)`.
pub fn split_instances(mut instances: Vec<Instance>, seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    instances.shuffle(&mut rng);
    let n = instances.len();
    let train_end = n * 7 / 10;
    let val_end = n * 8 / 10;
    let test = instances.split_off(val_end);
    let val = instances.split_off(train_end);
    Split {
        train: instances,
        val,
        test,
    }
}

pub fn parse_routines(path: &Path, vocab: &Vocabulary) -> Result<Vec<Routine>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_routines_reader(file, &path.display().to_string(), vocab)
}

/// Parses `routine_id,devices` rows with `|`-separated device names.
/// Unknown devices are dropped; routines left with fewer than two devices are discarded.
pub fn parse_routines_reader<R: Read>(reader: R, source: &str, vocab: &Vocabulary) -> Result<Vec<Routine>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let parse_err = |line: u64, message: String| Error::Parse {
        file: source.to_string(),
        line,
        message,
    };
    let mut routines = Vec::new();
    let mut saw_header = false;
    for record in rdr.records() {
        let record = record.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if !saw_header {
            let header: Vec<&str> = record.iter().collect();
            if header != ["routine_id", "devices"] {
                return Err(parse_err(
                    line,
                    format!("expected header routine_id,devices, found {}", header.join(",")),
                ));
            }
            saw_header = true;
            continue;
        }
        if record.len() != 2 {
            return Err(parse_err(line, format!("expected 2 fields, found {}", record.len())));
        }
        if record[0].is_empty() {
            return Err(parse_err(line, "empty routine_id".into()));
        }
        let devices: Vec<usize> = record[1]
            .split('|')
            .filter_map(|name| vocab.device_id(name.trim()))
            .collect();
        if devices.len() >= 2 {
            routines.push(Routine {
                routine_id: record[0].to_string(),
                devices,
            });
        }
    }
    Ok(routines)
}

const VOCAB_FILE: &str = "vocab.json";
const MANIFEST_FILE: &str = "manifest.json";
const ROUTINES_FILE: &str = "routines.json";
const SPLITS: [&str; 3] = ["train", "val", "test"];

/// A prepared dataset directory: vocabulary, manifest, routines and the three splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub manifest: Manifest,
    pub routines: Vec<Routine>,
    pub split: Split,
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(VOCAB_FILE), &self.vocab)?;
        write_json(&dir.join(MANIFEST_FILE), &self.manifest)?;
        write_json(&dir.join(ROUTINES_FILE), &self.routines)?;
        for (name, set) in SPLITS.iter().zip([&self.split.train, &self.split.val, &self.split.test]) {
            write_instances(&dir.join(format!("{name}.csv")), set, self.manifest.window_length)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocab: Vocabulary = read_json(&dir.join(VOCAB_FILE))?;
        let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
        let routines: Vec<Routine> = read_json(&dir.join(ROUTINES_FILE))?;
        let w = manifest.window_length;
        let mut sets = SPLITS
            .iter()
            .map(|name| read_instances(&dir.join(format!("{name}.csv")), w, &vocab))
            .collect::<Result<Vec<_>>>()?;
        for r in &routines {
            for &d in &r.devices {
                check_index("device", d, vocab.num_devices())?;
            }
        }
        let test = sets.pop().unwrap();
        let val = sets.pop().unwrap();
        let train = sets.pop().unwrap();
        Ok(Self {
            vocab,
            manifest,
            routines,
            split: Split { train, val, test },
        })
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn instance_header(window: usize) -> Vec<String> {
    let mut header = Vec::new();
    for i in 0..window - 1 {
        for field in ["device", "control", "dow", "hour"] {
            header.push(format!("h{i}_{field}"));
        }
    }
    header.extend(["target_dow", "target_hour", "target_control"].map(String::from));
    header
}

pub fn write_instances(path: &Path, instances: &[Instance], window: usize) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let csv_err = |e: csv::Error| Error::Parse {
        file: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    };
    wtr.write_record(instance_header(window)).map_err(csv_err)?;
    for inst in instances {
        let mut row = Vec::with_capacity(4 * (window - 1) + 3);
        for e in &inst.history {
            row.extend([e.device_id, e.control_id, e.dow, e.hour_bin]);
        }
        row.extend([inst.target_dow, inst.target_hour_bin, inst.target_control_id]);
        wtr.write_record(row.iter().map(usize::to_string)).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

pub fn read_instances(path: &Path, window: usize, vocab: &Vocabulary) -> Result<Vec<Instance>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    let width = 4 * (window - 1) + 3;
    let mut out = Vec::new();
    for record in rdr.records() {
        let parse_err = |line: u64, message: String| Error::Parse {
            file: path.display().to_string(),
            line,
            message,
        };
        let record = record.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(parse_err(line, format!("expected {width} fields, found {}", record.len())));
        }
        let values = record
            .iter()
            .map(|v| v.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(line, e.to_string()))?;
        let history = values[..4 * (window - 1)]
            .chunks_exact(4)
            .map(|c| ActionEvent {
                device_id: c[0],
                control_id: c[1],
                dow: c[2],
                hour_bin: c[3],
            })
            .collect::<Vec<_>>();
        for e in &history {
            e.check(vocab).map_err(|e| parse_err(line, e.to_string()))?;
        }
        let tail = &values[4 * (window - 1)..];
        let inst = Instance {
            history,
            target_dow: tail[0],
            target_hour_bin: tail[1],
            target_control_id: tail[2],
        };
        check_index("day-of-week", inst.target_dow, NUM_DOW)
            .and(check_index("hour bin", inst.target_hour_bin, NUM_HOUR_BINS))
            .and(check_index("control", inst.target_control_id, vocab.num_controls()))
            .map_err(|e| parse_err(line, e.to_string()))?;
        out.push(inst);
    }
    Ok(out)
}

/// Full preparation pipeline: parse logs, window every session, split, attach routines.
/// The vocabulary's count table is filled from training-split labels.
pub fn prepare(log: &Path, routines: Option<&Path>, manifest: Manifest, seed: u64) -> Result<Dataset> {
    let parsed = parse_log_csv(log, manifest.tz_offset_minutes, None)?;
    let instances: Vec<Instance> = parsed
        .sessions
        .iter()
        .flat_map(|s| make_windows(s, manifest.window_length))
        .collect();
    let split = split_instances(instances, seed);
    let mut vocab = parsed.vocab;
    vocab.set_counts_from_labels(split.train.iter().map(|i| i.target_control_id));
    let routines = match routines {
        Some(path) => parse_routines(path, &vocab)?,
        None => Vec::new(),
    };
    Ok(Dataset {
        vocab,
        manifest,
        routines,
        split,
    })
}
