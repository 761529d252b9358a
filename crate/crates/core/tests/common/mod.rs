#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smartsense::data::{ActionEvent, Instance, Routine};
use smartsense::{Matrix, ModelConfig, ModelParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// d=8, h=2, L=1, W=4, 6 devices, 8 controls, m=2, λ=1.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        layers: 1,
        heads: 2,
        window: 4,
        dropout: 0.1,
        num_devices: 6,
        num_controls: 8,
        negatives: 2,
        lambda_reg: 1.0,
        ..ModelConfig::default()
    }
}

pub fn tiny_routines() -> Vec<Routine> {
    vec![
        Routine {
            routine_id: "morning".into(),
            devices: vec![0, 1, 2],
        },
        Routine {
            routine_id: "night".into(),
            devices: vec![3, 4],
        },
    ]
}

/// Control `c` belongs to device `c % num_devices`.
pub fn random_event<R: Rng>(config: &ModelConfig, rng: &mut R) -> ActionEvent {
    let control_id = rng.gen_range(0..config.num_controls);
    ActionEvent {
        device_id: control_id % config.num_devices,
        control_id,
        dow: rng.gen_range(0..7),
        hour_bin: rng.gen_range(0..8),
    }
}

pub fn random_instance<R: Rng>(config: &ModelConfig, rng: &mut R) -> Instance {
    Instance {
        history: (0..config.history_len()).map(|_| random_event(config, rng)).collect(),
        target_dow: rng.gen_range(0..7),
        target_hour_bin: rng.gen_range(0..8),
        target_control_id: rng.gen_range(0..config.num_controls),
    }
}

/// Parameters with every entry (biases and layer-norm terms included)
/// drawn away from its initial value, so no gradient is trivially zero.
pub fn scrambled_params(config: &ModelConfig, seed: u64, scale: f64) -> ModelParams<f64> {
    let mut r = rng(seed);
    let mut p = ModelParams::<f64>::init(config, &mut r).unwrap();
    for (name, m) in p.named_tensors_mut() {
        let gain = name.contains("gain");
        for v in m.as_mut_slice() {
            let u: f64 = r.gen_range(-scale..scale);
            *v = if gain { 1.0 + 0.5 * u } else { u };
        }
    }
    p
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn row_sums(m: &Matrix<f64>) -> Vec<f64> {
    m.iter_rows().map(|r| r.iter().sum()).collect()
}

#[derive(Debug)]
pub struct TensorCheck {
    pub name: String,
    /// `max |analytic − numeric| / max(max |analytic|, max |numeric|)` over the tensor.
    pub rel_err: f64,
    pub scale: f64,
}

/// Compares the analytic gradient of the full objective against central
/// differences. The generator is reseeded for every evaluation so dropout
/// masks and negative samples stay frozen.
pub fn check_full_gradient(
    config: &ModelConfig,
    params: &ModelParams<f64>,
    batch: &[Instance],
    routines: &[Routine],
    eps: f64,
    seed: u64,
) -> Vec<TensorCheck> {
    use smartsense::train::{compute_gradients, total_loss};
    use smartsense::Mode;

    let (_, grads) = compute_gradients(batch, routines, params, config, Mode::Train, &mut rng(seed)).unwrap();
    let loss = |p: &ModelParams<f64>| {
        total_loss(batch, routines, p, config, Mode::Train, &mut rng(seed))
            .unwrap()
            .total
    };
    let analytic: Vec<(String, Vec<f64>)> = grads
        .named_tensors()
        .into_iter()
        .map(|(n, m)| (n, m.as_slice().to_vec()))
        .collect();
    let mut probe = params.clone();
    let mut out = Vec::new();
    for (t, (name, a)) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for i in 0..a.len() {
            let original = probe.named_tensors()[t].1.as_slice()[i];
            set_entry(&mut probe, t, i, original + eps);
            let up = loss(&probe);
            set_entry(&mut probe, t, i, original - eps);
            let down = loss(&probe);
            set_entry(&mut probe, t, i, original);
            numeric.push((up - down) / (2.0 * eps));
        }
        let scale = a.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs()));
        let rel_err = if scale == 0.0 { 0.0 } else { max_abs_diff(a, &numeric) / scale };
        out.push(TensorCheck {
            name: name.clone(),
            rel_err,
            scale,
        });
    }
    out
}

fn set_entry(p: &mut ModelParams<f64>, tensor: usize, index: usize, value: f64) {
    p.named_tensors_mut()[tensor].1.as_mut_slice()[index] = value;
}

/// Like [`scrambled_params`], but every feed-forward pre-activation stays at
/// least ~0.4 away from the ReLU kink: hidden biases alternate ±2 and the
/// input weights are small. Half the units are always active, half never,
/// so central differences with a coarse step never straddle a kink.
pub fn kink_free_params(config: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut p = scrambled_params(config, seed, 0.5);
    let mut r = rng(seed ^ 0xfeed);
    for (name, m) in p.named_tensors_mut() {
        if name.ends_with(".w1") {
            for v in m.as_mut_slice() {
                *v = r.gen_range(-0.1..0.1);
            }
        } else if name.ends_with(".b1") {
            for (j, v) in m.as_mut_slice().iter_mut().enumerate() {
                *v = if j % 2 == 0 { 2.0 } else { -2.0 };
            }
        }
    }
    p
}

/// Generates a synthetic log, writes it to `dir` and prepares it.
pub fn synthetic_dataset(spec: &smartsense::synth::SynthSpec, dir: &std::path::Path, split_seed: u64) -> smartsense::Dataset {
    let out = smartsense::synth::generate(spec).unwrap();
    std::fs::write(dir.join("log.csv"), &out.log_csv).unwrap();
    std::fs::write(dir.join("routines.csv"), &out.routine_csv).unwrap();
    let manifest = smartsense::Manifest {
        tz_offset_minutes: 0,
        window_length: spec.window_length,
    };
    smartsense::data::prepare(&dir.join("log.csv"), Some(&dir.join("routines.csv")), manifest, split_seed).unwrap()
}

pub fn small_model(dataset: &smartsense::Dataset) -> ModelConfig {
    ModelConfig {
        d: 8,
        layers: 1,
        heads: 2,
        window: dataset.manifest.window_length,
        num_devices: dataset.vocab.num_devices(),
        num_controls: dataset.vocab.num_controls(),
        lr: 0.01,
        batch_size: 32,
        ..ModelConfig::default()
    }
}
