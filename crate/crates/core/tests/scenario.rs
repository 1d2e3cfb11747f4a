use std::collections::HashMap;
use std::path::Path;

use mixsense_core::attack::AttackSpec;
use mixsense_core::bench::monte_carlo;
use mixsense_core::config::{RampRate, ScenarioConfig};
use mixsense_core::report::emit_traces;
use mixsense_core::scenario::{calibrate_attack, run_scenario, simulate, RunOptions};
use mixsense_core::SimError;

fn cfg(json: &str) -> ScenarioConfig {
    ScenarioConfig::from_json(json).unwrap()
}

fn read_dir_bytes(dir: &Path) -> HashMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let c =
        cfg(r#"{"seed": 11, "duration_s": 40, "attack": {"t_on_s": 10, "ramp_rate_mps": 0.05}}"#);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let run = run_scenario(&c, None).unwrap();
        emit_traces(&run.trace, &run.metrics, d.path()).unwrap();
    }
    let (a, b) = (
        read_dir_bytes(dirs[0].path()),
        read_dir_bytes(dirs[1].path()),
    );
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    let other = run_scenario(&c, Some(12)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_traces(&other.trace, &other.metrics, dir.path()).unwrap();
    assert_ne!(read_dir_bytes(dir.path())["gnss.csv"], a["gnss.csv"]);
}

#[test]
fn sixty_second_run_logs_every_tick_inclusive() {
    let c = cfg(r#"{"duration_s": 60, "attack": {"mode": "off"}}"#);
    let run = run_scenario(&c, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_traces(&run.trace, &run.metrics, dir.path()).unwrap();
    let truth = std::fs::read_to_string(dir.path().join("truth.csv")).unwrap();
    assert_eq!(truth.lines().count() - 1, 6001);
    assert!(truth.lines().last().unwrap().starts_with("60,"));
    let gnss = std::fs::read_to_string(dir.path().join("gnss.csv")).unwrap();
    assert_eq!(gnss.lines().count() - 1, 600);
}

#[test]
fn zero_duration_writes_headers_only() {
    let c = cfg(r#"{"duration_s": 0, "attack": {"mode": "off"}}"#);
    let run = run_scenario(&c, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_traces(&run.trace, &run.metrics, dir.path()).unwrap();
    for f in [
        "truth.csv",
        "gnss.csv",
        "residuals.csv",
        "detector.csv",
        "track.csv",
    ] {
        let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
        assert_eq!(text.lines().count(), 1, "{f}");
    }
}

fn parse_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines
        .next()
        .unwrap()
        .split(',')
        .map(str::to_owned)
        .collect();
    (
        header,
        lines
            .map(|l| l.split(',').map(str::to_owned).collect())
            .collect(),
    )
}

fn col(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap()
}

fn num(row: &[String], i: usize) -> f64 {
    row[i].parse().unwrap()
}

/// Recomputes the run metrics from the CSV files alone.
#[test]
fn metrics_can_be_recomputed_from_traces() {
    let c =
        cfg(r#"{"seed": 5, "duration_s": 70, "attack": {"t_on_s": 20, "ramp_rate_mps": 0.04}}"#);
    let run = run_scenario(&c, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_traces(&run.trace, &run.metrics, dir.path()).unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap())
            .unwrap();
    let t_on = 20.0;

    let (h, truth) = parse_csv(&dir.path().join("truth.csv"));
    let dev = |r: &Vec<String>| {
        let d: Vec<f64> = ["px", "py", "pz"]
            .iter()
            .zip(["prx", "pry", "prz"])
            .map(|(p, q)| num(r, col(&h, p)) - num(r, col(&h, q)))
            .collect();
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    };
    let t_of = |r: &Vec<String>| num(r, 0);
    let max_dev = truth.iter().map(dev).fold(0.0, f64::max);
    let dev60 = truth
        .iter()
        .filter(|r| t_of(r) >= t_on && t_of(r) <= t_on + 60.0)
        .map(dev)
        .fold(0.0, f64::max);
    let post = truth
        .iter()
        .filter(|r| t_of(r) >= 60.0)
        .map(dev)
        .fold(0.0, f64::max);
    assert_eq!(json["max_deviation_m"].as_f64().unwrap(), max_dev);
    assert_eq!(json["max_deviation_60s_m"].as_f64().unwrap(), dev60);
    assert_eq!(json["post_mitigation_error_m"].as_f64().unwrap(), post);

    let (h, res) = parse_csv(&dir.path().join("residuals.csv"));
    let gnss: Vec<&Vec<String>> = res
        .iter()
        .filter(|r| r[col(&h, "sensor_id")] == "1")
        .collect();
    let flagged = |r: &&&Vec<String>| r[col(&h, "flagged")] == "true";
    assert_eq!(json["gnss_fusions"].as_u64().unwrap(), gnss.len() as u64);
    assert_eq!(
        json["onboard_flags"].as_u64().unwrap(),
        gnss.iter().filter(flagged).count() as u64
    );
    let during: Vec<&&Vec<String>> = gnss.iter().filter(|r| num(r, 0) >= t_on).collect();
    assert_eq!(
        json["onboard_flags_during_attack"].as_u64().unwrap(),
        during
            .iter()
            .filter(|r| r[col(&h, "flagged")] == "true")
            .count() as u64
    );
    let q = col(&h, "q");
    let mean_q = gnss.iter().map(|r| num(r, q)).sum::<f64>() / gnss.len() as f64;
    assert_eq!(json["onboard_mean_q"].as_f64().unwrap(), mean_q);
    let max_q = during
        .iter()
        .map(|r| num(r, q))
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(json["max_gate_stat_during_attack"].as_f64().unwrap(), max_q);

    let (h, det) = parse_csv(&dir.path().join("detector.csv"));
    let first_flag = det
        .iter()
        .find(|r| r[col(&h, "flag")] == "true")
        .map(|r| num(r, 0));
    assert_eq!(json["detector_windows"].as_u64().unwrap(), det.len() as u64);
    match first_flag {
        Some(f) if f >= t_on => assert_eq!(json["time_to_detect_s"].as_f64().unwrap(), f - t_on),
        Some(_) => assert!(json["offboard_false_alarm"].as_bool().unwrap()),
        None => assert!(json["time_to_detect_s"].is_null()),
    }

    let (h, track) = parse_csv(&dir.path().join("track.csv"));
    let (_, truth_rows) = parse_csv(&dir.path().join("truth.csv"));
    let sq: Vec<f64> = track
        .iter()
        .map(|r| {
            let idx = (num(r, 0) / 0.01).round() as usize;
            let tr = &truth_rows[idx];
            (1..=3)
                .map(|i| (num(r, col(&h, ["px", "py", "pz"][i - 1])) - num(tr, i)).powi(2))
                .sum::<f64>()
        })
        .collect();
    let rms = (sq.iter().sum::<f64>() / sq.len() as f64).sqrt();
    assert_eq!(json["rms_track_error_m"].as_f64().unwrap(), rms);
}

#[test]
fn perfect_sensing_without_process_noise_tracks_the_plan() {
    let c = cfg(r#"{
        "duration_s": 120,
        "dynamics": {"accel_noise_psd": 0},
        "gnss": {"r_m2": [[1e-12, 0, 0], [0, 1e-12, 0], [0, 0, 1e-12]]},
        "cameras": {"enabled": false},
        "detector": {"enabled": false},
        "attack": {"mode": "off"}
    }"#);
    let run = run_scenario(&c, None).unwrap();
    // Corners at multiples of 40 s; allow 10 s of transient after each.
    let settled = run.trace.truth.iter().filter(|r| r.t % 40.0 >= 10.0);
    let worst = settled.map(|r| (r.p - r.p_ref).norm()).fold(0.0, f64::max);
    assert!(worst < 0.05, "worst settled tracking error {worst}");
}

#[test]
fn nominal_runs_stay_inside_the_envelope() {
    let c = cfg(r#"{"attack": {"mode": "off"}}"#);
    let mut false_alarms = 0;
    for seed in 1..=20 {
        let m = run_scenario(&c, Some(seed)).unwrap().metrics;
        assert!(
            m.max_deviation_m < 1.2,
            "seed {seed}: {}",
            m.max_deviation_m
        );
        assert_eq!(m.onboard_flags, 0, "alpha = 1e-6 over ~1200 fusions");
        false_alarms += m.offboard_false_alarm as usize;
    }
    assert!(false_alarms <= 1);
}

#[test]
fn calibrated_rate_is_bracketed_by_resimulation() {
    let c = ScenarioConfig::default();
    let cal = calibrate_attack(&c, 0.1).unwrap();
    assert!(!cal.saturated && cal.ramp_rate > 0.0);
    let opts = RunOptions {
        cameras: false,
        detector: false,
        mitigation: false,
    };
    let (_, at) = simulate(&c, c.seed, c.attack_spec_with(cal.ramp_rate), opts).unwrap();
    assert_eq!(at.onboard_flags_during_attack, 0);
    assert!(at.max_gate_stat_during_attack.unwrap() <= cal.limit);
    let (_, twice) = simulate(&c, c.seed, c.attack_spec_with(2.0 * cal.ramp_rate), opts).unwrap();
    assert!(
        twice.onboard_flags_during_attack > 0
            || twice.max_gate_stat_during_attack.unwrap() > cal.limit
    );
    // A zero ramp reproduces the nominal statistic exactly.
    let (_, zero) = simulate(&c, c.seed, c.attack_spec_with(0.0), opts).unwrap();
    assert_eq!(zero.max_gate_stat_during_attack.unwrap(), cal.nominal_max_q);
}

#[test]
fn tight_gate_makes_calibration_infeasible() {
    // 900 fusions at alpha = 0.01 exceed 0.9 * chi2_0.99(3) almost surely.
    let c = cfg(r#"{"monitor": {"alpha": 0.01}}"#);
    let err = calibrate_attack(&c, 0.1).unwrap_err();
    assert!(matches!(err, SimError::Calibration(_)), "{err}");
}

#[test]
fn offboard_residual_grows_with_ramp_rate() {
    let mut c = cfg(r#"{"duration_s": 60, "mitigation": {"enabled": false}}"#);
    c.attack.ramp_rate_mps = RampRate::Fixed(0.0);
    let r = 0.04;
    let mean_q = |rate: f64| {
        let mut total = 0.0;
        let mut n = 0;
        for seed in 1..=4 {
            let (trace, _) = simulate(
                &c,
                seed,
                c.attack_spec_with(rate),
                RunOptions::from_config(&c),
            )
            .unwrap();
            for d in trace.detector.iter().filter(|d| d.t > c.attack.t_on_s) {
                total += d.q_off;
                n += 1;
            }
        }
        total / n as f64
    };
    let qs: Vec<f64> = [0.0, r / 2.0, r, 2.0 * r]
        .iter()
        .map(|&x| mean_q(x))
        .collect();
    assert!(qs.windows(2).all(|w| w[0] <= w[1]), "{qs:?}");
}

#[test]
fn singleton_bench_matches_single_run() {
    let c =
        cfg(r#"{"seed": 21, "duration_s": 50, "attack": {"t_on_s": 15, "ramp_rate_mps": 0.04}}"#);
    let report = monte_carlo(&c, 1, false).unwrap();
    let single = run_scenario(&c, None).unwrap().metrics;
    assert_eq!(report.attack_runs, vec![single]);
    let control = simulate(&c, 21, AttackSpec::off(), RunOptions::from_config(&c))
        .unwrap()
        .1;
    assert_eq!(report.control_runs, vec![control]);
}
