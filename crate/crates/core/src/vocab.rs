use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Device and device-control name tables with dense indices.
///
/// A device control is identified by its (device name, control name) pair, so
/// the control index also determines the device.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    devices: Vec<String>,
    device_index: HashMap<String, usize>,
    controls: Vec<(usize, String)>,
    control_index: HashMap<(usize, String), usize>,
    counts: Vec<u64>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn num_controls(&self) -> usize {
        self.controls.len()
    }

    pub fn device_id(&self, name: &str) -> Option<usize> {
        self.device_index.get(name).copied()
    }

    pub fn device_name(&self, id: usize) -> Option<&str> {
        self.devices.get(id).map(String::as_str)
    }

    pub fn control_id(&self, device: &str, control: &str) -> Option<usize> {
        let dev = self.device_id(device)?;
        self.control_index.get(&(dev, control.to_string())).copied()
    }

    /// Device index that owns control `id`.
    pub fn control_device(&self, id: usize) -> Option<usize> {
        self.controls.get(id).map(|(d, _)| *d)
    }

    /// `(device name, control name)` of control `id`.
    pub fn control_name(&self, id: usize) -> Option<(&str, &str)> {
        let (dev, name) = self.controls.get(id)?;
        Some((self.devices[*dev].as_str(), name.as_str()))
    }

    /// Human-readable `device:control` label.
    pub fn control_label(&self, id: usize) -> String {
        match self.control_name(id) {
            Some((d, c)) => format!("{d}:{c}"),
            None => format!("#{id}"),
        }
    }

    pub fn devices(&self) -> &[String] {
        &self.devices
    }

    pub fn insert_device(&mut self, name: &str) -> usize {
        if let Some(id) = self.device_id(name) {
            return id;
        }
        let id = self.devices.len();
        self.devices.push(name.to_string());
        self.device_index.insert(name.to_string(), id);
        id
    }

    /// Adds a control (and its device if needed); returns the control index.
    pub fn insert_control(&mut self, device: &str, control: &str) -> usize {
        let dev = self.insert_device(device);
        let key = (dev, control.to_string());
        if let Some(&id) = self.control_index.get(&key) {
            return id;
        }
        let id = self.controls.len();
        self.controls.push(key.clone());
        self.control_index.insert(key, id);
        self.counts.push(0);
        id
    }

    /// Training-frequency table indexed by control.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn set_counts_from_labels(&mut self, labels: impl IntoIterator<Item = usize>) {
        self.counts = vec![0; self.controls.len()];
        for label in labels {
            if let Some(c) = self.counts.get_mut(label) {
                *c += 1;
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ControlEntry {
    device: String,
    control: String,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    devices: Vec<String>,
    controls: Vec<ControlEntry>,
    #[serde(default)]
    counts: Vec<u64>,
}

impl From<VocabularyFile> for Vocabulary {
    fn from(file: VocabularyFile) -> Self {
        let mut vocab = Vocabulary::new();
        for d in &file.devices {
            vocab.insert_device(d);
        }
        for c in &file.controls {
            vocab.insert_control(&c.device, &c.control);
        }
        if file.counts.len() == vocab.controls.len() {
            vocab.counts = file.counts;
        }
        vocab
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(vocab: Vocabulary) -> Self {
        let controls = vocab
            .controls
            .iter()
            .map(|(d, c)| ControlEntry {
                device: vocab.devices[*d].clone(),
                control: c.clone(),
            })
            .collect();
        VocabularyFile {
            devices: vocab.devices,
            controls,
            counts: vocab.counts,
        }
    }
}
