use smartsense::data::{make_windows, parse_log_reader, parse_routines_reader, Instance};
use smartsense::eval::evaluate_model;
use smartsense::synth::{expected_metrics, generate, PatternRule, SynthOracle, SynthSpec};

fn deterministic_cycle(n_devices: usize, cpd: usize) -> SynthSpec {
    let nc = n_devices * cpd;
    SynthSpec {
        n_devices,
        n_controls_per_device: cpd,
        n_sessions: 50,
        session_len: 15,
        rules: (0..nc)
            .map(|c| PatternRule {
                trigger_control: c,
                context: None,
                next_control: (c + cpd + 1) % nc,
                fire_p: 1.0,
            })
            .collect(),
        routine_specs: vec![],
        n_routines: 0,
        capricious_p: 0.0,
        context_skew: 1.0,
        window_length: 10,
        gap_minutes: (5, 180),
        seed: 3,
    }
}

/// Instances from a generated log, with the oracle's probabilities in vocabulary order.
fn scored_windows(spec: &SynthSpec, log: &str) -> (Vec<Instance>, Vec<Vec<f64>>) {
    let oracle = SynthOracle::new(spec).unwrap();
    let parsed = parse_log_reader(log.as_bytes(), "log", 0, None).unwrap();
    let mapping = oracle.control_mapping(&parsed.vocab).unwrap();
    let instances: Vec<Instance> = parsed
        .sessions
        .iter()
        .flat_map(|s| make_windows(s, spec.window_length))
        .collect();
    let probs = instances.iter().map(|i| oracle.score_instance(i, &mapping)).collect();
    (instances, probs)
}

#[test]
fn covering_deterministic_rules_give_a_perfect_ceiling() {
    let spec = deterministic_cycle(4, 3);
    let out = generate(&spec).unwrap();
    assert_eq!(out.bayes_optimal.map(), [1.0; 3]);
    assert_eq!(out.bayes_optimal.hr(), [1.0; 3]);
    let (instances, probs) = scored_windows(&spec, &out.log_csv);
    let mut it = probs.iter();
    let report = evaluate_model("oracle", |_| Ok(it.next().unwrap().clone()), &instances).unwrap();
    assert_eq!(report.map1, 1.0);
}

#[test]
fn generated_files_parse_without_skips() {
    let spec = SynthSpec::grouped_example(40, 20, 0.9, 0.1, 5);
    let out = generate(&spec).unwrap();
    let parsed = parse_log_reader(out.log_csv.as_bytes(), "log", 0, None).unwrap();
    assert_eq!(parsed.sessions.len(), 40);
    assert!(parsed.sessions.iter().all(|s| s.events.len() == 20));
    let again = parse_log_reader(out.log_csv.as_bytes(), "log", 0, Some(&parsed.vocab)).unwrap();
    assert_eq!(again.skipped, 0);
    let routines = parse_routines_reader(out.routine_csv.as_bytes(), "routines", &parsed.vocab).unwrap();
    assert_eq!(routines.len(), spec.n_routines);
    for r in &routines {
        let names: Vec<&str> = r.devices.iter().map(|&d| parsed.vocab.device_name(d).unwrap()).collect();
        assert!(
            [vec!["dev00", "dev01", "dev02", "dev03"], vec!["dev04", "dev05", "dev06"], vec!["dev07", "dev08", "dev09"]]
                .contains(&names)
        );
    }
}

#[test]
fn empirical_frequencies_match_the_conditional() {
    // 5,000 sessions of 20 events: 10^5 events.
    let spec = SynthSpec {
        window_length: 2,
        ..SynthSpec::grouped_example(5_000, 20, 0.7, 0.2, 17)
    };
    let out = generate(&spec).unwrap();
    let (instances, probs) = scored_windows(&spec, &out.log_csv);
    assert_eq!(instances.len(), 5_000 * 19);

    let nc = spec.num_controls();
    let mut observed = vec![0.0; nc];
    let mut expected = vec![0.0; nc];
    let (mut top_hits, mut top_expected, mut top_var) = (0.0, 0.0, 0.0);
    for (inst, p) in instances.iter().zip(&probs) {
        observed[inst.target_control_id] += 1.0;
        for (e, &pc) in expected.iter_mut().zip(p) {
            *e += pc;
        }
        let top = smartsense::eval::top_k(p, 1)[0];
        top_hits += f64::from(u8::from(top == inst.target_control_id));
        top_expected += p[top];
        top_var += p[top] * (1.0 - p[top]);
    }
    let chi2: f64 = observed.iter().zip(&expected).map(|(o, e)| (o - e) * (o - e) / e).sum();
    // 39 degrees of freedom; the 99.99th percentile is about 80.
    assert!(chi2 < 80.0, "chi-square {chi2:.1}");
    let z = (top_hits - top_expected) / top_var.sqrt();
    assert!(z.abs() < 4.0, "argmax hit rate z = {z:.2}");
}

#[test]
fn ceiling_matches_realized_oracle_accuracy() {
    let spec = SynthSpec::grouped_example(600, 20, 0.9, 0.1, 23);
    let out = generate(&spec).unwrap();
    let (instances, probs) = scored_windows(&spec, &out.log_csv);
    assert!(instances.len() >= 5_000);
    assert_eq!(out.bayes_optimal.instances, instances.len());
    let mut it = probs.iter();
    let realized = evaluate_model("oracle", |_| Ok(it.next().unwrap().clone()), &instances).unwrap();
    for (r, b) in realized.map().iter().zip(out.bayes_optimal.map()) {
        assert!((r - b).abs() < 0.02, "{r} vs {b}");
    }
    // Expected metrics of the popularity ranking can never beat the ceiling.
    let mut pop = vec![0.0; spec.num_controls()];
    for p in &probs {
        for (a, b) in pop.iter_mut().zip(p) {
            *a += b;
        }
    }
    let mut pop_map1 = 0.0;
    for p in &probs {
        let top = smartsense::eval::top_k(&pop, 1)[0];
        pop_map1 += p[top];
    }
    assert!(pop_map1 / probs.len() as f64 <= out.bayes_optimal.map1);
}

#[test]
fn expected_metrics_of_a_known_distribution() {
    let (map, hr) = expected_metrics(&[0.1, 0.5, 0.2, 0.05, 0.15]);
    assert!((hr[0] - 0.5).abs() < 1e-15);
    assert!((hr[1] - 0.85).abs() < 1e-15);
    assert!((hr[2] - 1.0).abs() < 1e-15);
    assert!((map[1] - (0.5 + 0.2 / 2.0 + 0.15 / 3.0)).abs() < 1e-15);
}
