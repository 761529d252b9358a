//! Synthetic smart-home logs with planted sequential, contextual and
//! routine structure, plus the exact Bayes-optimal ranking ceiling.
//!
//! Each session is a first-order process over device controls. Given the
//! previous control and the next event's temporal context, the next control
//! is drawn from
//!
//! ```text
//! (1 − c) · [f · δ(rule.next) + (1 − f) · base(ctx)] + c · U(off-rule controls)
//! ```
//!
//! when a rule matches (`c` = capricious probability, `f` = rule fire
//! probability), and from `(1 − c) · base(ctx) + c · U(all)` otherwise.
//! Event gaps are independent of controls, so this conditional is also the
//! exact posterior given a whole history window.

use std::fmt::Write as _;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{bin_timestamp, Instance, NUM_DOW, NUM_HOUR_BINS};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, CUTOFFS};
use crate::vocab::Vocabulary;

/// Monday 2021-11-22 00:00:00 UTC.
pub const BASE_TIMESTAMP: i64 = 1_637_539_200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextCondition {
    pub dows: Vec<usize>,
    pub hour_bins: Vec<usize>,
}

impl ContextCondition {
    pub fn matches(&self, dow: usize, hour_bin: usize) -> bool {
        self.dows.contains(&dow) && self.hour_bins.contains(&hour_bin)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternRule {
    pub trigger_control: usize,
    #[serde(default)]
    pub context: Option<ContextCondition>,
    pub next_control: usize,
    pub fire_p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutineSpec {
    pub devices: Vec<usize>,
    /// Relative frequency of this group among emitted routine rows.
    pub trigger_p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_devices: usize,
    pub n_controls_per_device: usize,
    pub n_sessions: usize,
    pub session_len: usize,
    pub rules: Vec<PatternRule>,
    #[serde(default)]
    pub routine_specs: Vec<RoutineSpec>,
    #[serde(default)]
    pub n_routines: usize,
    pub capricious_p: f64,
    /// Sharpness of the context-conditioned base distribution; 0 is uniform.
    #[serde(default = "default_skew")]
    pub context_skew: f64,
    #[serde(default = "default_window")]
    pub window_length: usize,
    #[serde(default = "default_gap")]
    pub gap_minutes: (u32, u32),
    pub seed: u64,
}

fn default_skew() -> f64 {
    2.0
}

fn default_window() -> usize {
    10
}

fn default_gap() -> (u32, u32) {
    (5, 180)
}

impl SynthSpec {
    pub fn num_controls(&self) -> usize {
        self.n_devices * self.n_controls_per_device
    }

    pub fn control_device(&self, control: usize) -> usize {
        control / self.n_controls_per_device
    }

    pub fn device_name(device: usize) -> String {
        format!("dev{device:02}")
    }

    pub fn control_name(&self, control: usize) -> String {
        format!("c{}", control % self.n_controls_per_device)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_devices == 0 || self.n_controls_per_device == 0 {
            problems.push("n_devices and n_controls_per_device must be positive".to_string());
        }
        if self.n_sessions == 0 {
            problems.push("n_sessions must be positive".to_string());
        }
        if self.window_length < 2 {
            problems.push("window_length must be at least 2".to_string());
        }
        if self.session_len < self.window_length {
            problems.push(format!(
                "session_len {} is shorter than window_length {}",
                self.session_len, self.window_length
            ));
        }
        if !(0.0..=1.0).contains(&self.capricious_p) {
            problems.push(format!("capricious_p {} outside [0, 1]", self.capricious_p));
        }
        if !(self.context_skew >= 0.0) {
            problems.push("context_skew must be non-negative".to_string());
        }
        if self.gap_minutes.0 > self.gap_minutes.1 {
            problems.push("gap_minutes lower bound exceeds upper bound".to_string());
        }
        let nc = self.num_controls();
        for (i, r) in self.rules.iter().enumerate() {
            if r.trigger_control >= nc || r.next_control >= nc {
                problems.push(format!("rule {i} references a control outside 0..{nc}"));
            }
            if !(0.0..=1.0).contains(&r.fire_p) {
                problems.push(format!("rule {i} fire_p {} outside [0, 1]", r.fire_p));
            }
            if let Some(c) = &r.context {
                if c.dows.iter().any(|&d| d >= NUM_DOW) || c.hour_bins.iter().any(|&h| h >= NUM_HOUR_BINS) {
                    problems.push(format!("rule {i} has an out-of-range context condition"));
                }
            }
        }
        for (i, r) in self.routine_specs.iter().enumerate() {
            if r.devices.len() < 2 {
                problems.push(format!("routine spec {i} has fewer than 2 devices"));
            }
            if r.devices.iter().any(|&d| d >= self.n_devices) {
                problems.push(format!("routine spec {i} references a device outside 0..{}", self.n_devices));
            }
            if !(r.trigger_p >= 0.0) {
                problems.push(format!("routine spec {i} has a negative trigger_p"));
            }
        }
        if self.n_routines > 0 && self.routine_specs.iter().all(|r| r.trigger_p <= 0.0) {
            problems.push("n_routines > 0 needs a routine spec with positive trigger_p".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::SynthSpec(problems))
        }
    }

    /// Ten devices in three intention groups, four controls each, with a
    /// day/night rule for every control that chains to the next device of
    /// its group.
    pub fn grouped_example(n_sessions: usize, session_len: usize, fire_p: f64, capricious_p: f64, seed: u64) -> Self {
        let groups: Vec<Vec<usize>> = vec![vec![0, 1, 2, 3], vec![4, 5, 6], vec![7, 8, 9]];
        let cpd = 4;
        let all_dows: Vec<usize> = (0..NUM_DOW).collect();
        let day = ContextCondition {
            dows: all_dows.clone(),
            hour_bins: vec![2, 3, 4, 5],
        };
        let night = ContextCondition {
            dows: all_dows,
            hour_bins: vec![0, 1, 6, 7],
        };
        let mut rules = Vec::new();
        for group in &groups {
            for (pos, &device) in group.iter().enumerate() {
                let next_device = group[(pos + 1) % group.len()];
                for local in 0..cpd {
                    let trigger = device * cpd + local;
                    rules.push(PatternRule {
                        trigger_control: trigger,
                        context: Some(day.clone()),
                        next_control: next_device * cpd + local,
                        fire_p,
                    });
                    rules.push(PatternRule {
                        trigger_control: trigger,
                        context: Some(night.clone()),
                        next_control: next_device * cpd + (local + 1) % cpd,
                        fire_p,
                    });
                }
            }
        }
        let routine_specs = groups
            .iter()
            .map(|g| RoutineSpec {
                devices: g.clone(),
                trigger_p: 1.0,
            })
            .collect();
        SynthSpec {
            n_devices: 10,
            n_controls_per_device: cpd,
            n_sessions,
            session_len,
            rules,
            routine_specs,
            n_routines: 300,
            capricious_p,
            context_skew: default_skew(),
            window_length: default_window(),
            gap_minutes: default_gap(),
            seed,
        }
    }
}

/// The generator's exact next-control distribution.
#[derive(Clone, Debug)]
pub struct SynthOracle {
    spec: SynthSpec,
    /// `base[dow][hour]` is a distribution over controls.
    base: Vec<Vec<Vec<f64>>>,
}

impl SynthOracle {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        // Separate stream so the base table does not shift when sampling changes.
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_ba5e);
        let nc = spec.num_controls();
        let base = (0..NUM_DOW)
            .map(|_| {
                (0..NUM_HOUR_BINS)
                    .map(|_| {
                        let w: Vec<f64> = (0..nc).map(|_| (spec.context_skew * rng.gen::<f64>()).exp()).collect();
                        let total: f64 = w.iter().sum();
                        w.into_iter().map(|x| x / total).collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            base,
        })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn base_distribution(&self, dow: usize, hour_bin: usize) -> &[f64] {
        &self.base[dow][hour_bin]
    }

    pub fn active_rule(&self, prev: Option<usize>, dow: usize, hour_bin: usize) -> Option<&PatternRule> {
        let prev = prev?;
        self.spec.rules.iter().find(|r| {
            r.trigger_control == prev && r.context.as_ref().is_none_or(|c| c.matches(dow, hour_bin))
        })
    }

    /// `P(next control | previous control, next context)` over generator control indices.
    pub fn next_distribution(&self, prev: Option<usize>, dow: usize, hour_bin: usize) -> Vec<f64> {
        let spec = &self.spec;
        let nc = spec.num_controls();
        let cap = spec.capricious_p;
        let base = &self.base[dow][hour_bin];
        let rule = self.active_rule(prev, dow, hour_bin);

        let mut p: Vec<f64> = match rule {
            Some(r) => {
                let mut p: Vec<f64> = base.iter().map(|b| (1.0 - cap) * (1.0 - r.fire_p) * b).collect();
                p[r.next_control] += (1.0 - cap) * r.fire_p;
                p
            }
            None => base.iter().map(|b| (1.0 - cap) * b).collect(),
        };

        let allowed: Vec<usize> = match rule {
            Some(r) => {
                let excluded = [spec.control_device(r.trigger_control), spec.control_device(r.next_control)];
                let outside: Vec<usize> = (0..nc)
                    .filter(|&c| !excluded.contains(&spec.control_device(c)))
                    .collect();
                if outside.is_empty() {
                    (0..nc).collect()
                } else {
                    outside
                }
            }
            None => (0..nc).collect(),
        };
        let share = cap / allowed.len() as f64;
        for c in allowed {
            p[c] += share;
        }
        p
    }
}

/// Expected HR@k and mAP@k of ranking by the true distribution, which is
/// the best any scorer can achieve in expectation.
pub fn expected_metrics(p: &[f64]) -> ([f64; 3], [f64; 3]) {
    let mut sorted: Vec<(usize, f64)> = p.iter().copied().enumerate().collect();
    sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut map = [0.0; 3];
    let mut hr = [0.0; 3];
    for (i, &k) in CUTOFFS.iter().enumerate() {
        for (r, (_, pr)) in sorted.iter().take(k).enumerate() {
            hr[i] += pr;
            map[i] += pr / (r + 1) as f64;
        }
    }
    (map, hr)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSidecar {
    pub bayes_optimal: EvalReport,
    pub spec: SynthSpec,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub log_csv: String,
    pub routine_csv: String,
    pub bayes_optimal: EvalReport,
}

impl SynthOutput {
    pub fn sidecar(&self, spec: &SynthSpec) -> SynthSidecar {
        SynthSidecar {
            bayes_optimal: self.bayes_optimal.clone(),
            spec: spec.clone(),
        }
    }
}

/// Samples the log and routine CSVs and computes the Bayes-optimal ceiling
/// averaged over every window target in the generated log.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    let oracle = SynthOracle::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let nc = spec.num_controls();
    let mut log_csv = String::from("session_id,timestamp,device,control\n");
    let mut map = [0.0; 3];
    let mut hr = [0.0; 3];
    let mut windows = 0usize;
    let span = 28 * 86_400;
    let (gap_lo, gap_hi) = (i64::from(spec.gap_minutes.0) * 60, i64::from(spec.gap_minutes.1) * 60);

    for s in 0..spec.n_sessions {
        let mut ts = BASE_TIMESTAMP + rng.gen_range(0..span);
        let mut prev: Option<usize> = None;
        for i in 0..spec.session_len {
            if i > 0 {
                ts += rng.gen_range(gap_lo..=gap_hi);
            }
            let (dow, hour_bin) = bin_timestamp(ts, 0);
            let p = oracle.next_distribution(prev, dow, hour_bin);
            if i + 1 >= spec.window_length {
                let (m, h) = expected_metrics(&p);
                for j in 0..3 {
                    map[j] += m[j];
                    hr[j] += h[j];
                }
                windows += 1;
            }
            let control = WeightedIndex::new(&p)
                .map_err(|e| Error::SynthSpec(vec![e.to_string()]))?
                .sample(&mut rng);
            debug_assert!(control < nc);
            writeln!(
                log_csv,
                "s{s:05},{ts},{},{}",
                SynthSpec::device_name(spec.control_device(control)),
                spec.control_name(control)
            )
            .unwrap();
            prev = Some(control);
        }
    }

    let mut routine_csv = String::from("routine_id,devices\n");
    if spec.n_routines > 0 {
        let weights = WeightedIndex::new(spec.routine_specs.iter().map(|r| r.trigger_p))
            .map_err(|e| Error::SynthSpec(vec![e.to_string()]))?;
        for r in 0..spec.n_routines {
            let group = &spec.routine_specs[weights.sample(&mut rng)];
            let names: Vec<String> = group.devices.iter().map(|&d| SynthSpec::device_name(d)).collect();
            writeln!(routine_csv, "r{r:05},{}", names.join("|")).unwrap();
        }
    }

    let n = windows.max(1) as f64;
    let bayes_optimal = EvalReport {
        model: "bayes_optimal".into(),
        instances: windows,
        map1: map[0] / n,
        map3: map[1] / n,
        map5: map[2] / n,
        hr1: hr[0] / n,
        hr3: hr[1] / n,
        hr5: hr[2] / n,
    };
    Ok(SynthOutput {
        log_csv,
        routine_csv,
        bayes_optimal,
    })
}

impl SynthOracle {
    /// Maps vocabulary control indices to generator indices.
    pub fn control_mapping(&self, vocab: &Vocabulary) -> Result<Vec<usize>> {
        let cpd = self.spec.n_controls_per_device;
        (0..vocab.num_controls())
            .map(|id| {
                let (device, control) = vocab.control_name(id).unwrap();
                let d: Option<usize> = device
                    .strip_prefix("dev")
                    .and_then(|s| s.parse().ok())
                    .filter(|&d| d < self.spec.n_devices);
                let c: Option<usize> = control.strip_prefix('c').and_then(|s| s.parse().ok()).filter(|&c| c < cpd);
                match (d, c) {
                    (Some(d), Some(c)) => Ok(d * cpd + c),
                    _ => Err(Error::Config(format!("control {device}:{control} is not a generator name"))),
                }
            })
            .collect()
    }

    /// True next-control probabilities for an instance, in vocabulary order.
    pub fn score_instance(&self, instance: &Instance, mapping: &[usize]) -> Vec<f64> {
        let prev = instance.history.last().map(|e| mapping[e.control_id]);
        let p = self.next_distribution(prev, instance.target_dow, instance.target_hour_bin);
        mapping.iter().map(|&g| p[g]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_rule_spec(fire_p: f64, cap: f64) -> SynthSpec {
        SynthSpec {
            n_devices: 3,
            n_controls_per_device: 2,
            n_sessions: 20,
            session_len: 12,
            rules: vec![PatternRule {
                trigger_control: 0,
                context: None,
                next_control: 5,
                fire_p,
            }],
            routine_specs: vec![],
            n_routines: 0,
            capricious_p: cap,
            context_skew: 1.0,
            window_length: 10,
            gap_minutes: (5, 180),
            seed: 4,
        }
    }

    #[test]
    fn distributions_are_normalized() {
        let spec = SynthSpec::grouped_example(10, 20, 0.9, 0.1, 1);
        let oracle = SynthOracle::new(&spec).unwrap();
        for prev in [None, Some(0), Some(13), Some(39)] {
            for dow in 0..7 {
                for h in 0..8 {
                    let p = oracle.next_distribution(prev, dow, h);
                    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(p.iter().all(|&x| x >= 0.0));
                }
            }
        }
    }

    #[test]
    fn deterministic_rule_is_forced() {
        let oracle = SynthOracle::new(&single_rule_spec(1.0, 0.0)).unwrap();
        let p = oracle.next_distribution(Some(0), 3, 3);
        assert_eq!(p[5], 1.0);
        let (map, hr) = expected_metrics(&p);
        assert_eq!(map[0], 1.0);
        assert_eq!(hr[0], 1.0);
    }

    #[test]
    fn capricious_mass_avoids_rule_devices() {
        let oracle = SynthOracle::new(&single_rule_spec(1.0, 0.3)).unwrap();
        let p = oracle.next_distribution(Some(0), 0, 0);
        // devices 0 (trigger) and 2 (next) are excluded; only device 1 remains.
        assert!((p[2] - 0.15).abs() < 1e-12 && (p[3] - 0.15).abs() < 1e-12);
        assert!((p[5] - 0.7).abs() < 1e-12);
        assert_eq!(p[0] + p[1] + p[4], 0.0);
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SynthSpec::grouped_example(30, 12, 0.9, 0.1, 7);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.log_csv, b.log_csv);
        assert_eq!(a.routine_csv, b.routine_csv);
        let c = generate(&SynthSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.log_csv, c.log_csv);
    }

    #[test]
    fn invalid_specs_list_every_problem() {
        let mut spec = single_rule_spec(1.5, -0.1);
        spec.session_len = 3;
        match spec.validate() {
            Err(Error::SynthSpec(problems)) => assert_eq!(problems.len(), 3, "{problems:?}"),
            other => panic!("{other:?}"),
        }
    }
}
