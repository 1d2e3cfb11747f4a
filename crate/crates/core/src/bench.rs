//! Monte Carlo harness over independent seeds.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::attack::{AttackSpec, Calibration};
use crate::chi2::chi2_threshold;
use crate::config::ScenarioConfig;
use crate::error::{Result, SimError};
use crate::scenario::{resolve_attack, simulate, RunMetrics, RunOptions};
use crate::sensor::quantile_sorted;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Attack,
    Control,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub kind: RunKind,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

fn quartiles(values: &[f64]) -> Option<Quartiles> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(Quartiles {
        q1: quantile_sorted(&v, 0.25),
        median: quantile_sorted(&v, 0.5),
        q3: quantile_sorted(&v, 0.75),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub runs: usize,
    pub detected: usize,
    pub detection_rate: f64,
    pub time_to_detect_s: Option<Quartiles>,
    pub max_deviation_m: Option<Quartiles>,
    pub post_mitigation_error_m: Option<Quartiles>,
    /// Detected runs whose post-mitigation error is under 1 m.
    pub mitigated_below_1m: usize,
    pub onboard_flags_during_attack: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSummary {
    pub runs: usize,
    pub false_alarms: usize,
    pub false_alarm_rate: f64,
    pub onboard_flag_rate: f64,
    pub max_deviation_m: Option<Quartiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub first_seed: u64,
    pub n_runs: usize,
    pub attack_spec: Option<AttackRecord>,
    pub calibration: Option<Calibration>,
    pub attack: Option<AttackSummary>,
    pub control: ControlSummary,
    pub failures: Vec<RunFailure>,
    pub attack_runs: Vec<RunMetrics>,
    pub control_runs: Vec<RunMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub t_on_s: f64,
    pub direction: [f64; 3],
    pub ramp_rate_mps: f64,
}

/// Maps seeds in parallel when enabled; output order follows input order.
#[cfg(feature = "parallel")]
fn map_seeds<T, F>(seeds: Vec<u64>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    use rayon::prelude::*;
    seeds.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_seeds<T, F>(seeds: Vec<u64>, f: F) -> Vec<T>
where
    F: Fn(u64) -> T,
{
    seeds.into_iter().map(f).collect()
}

fn run_batch(
    cfg: &ScenarioConfig,
    seeds: Vec<u64>,
    attack: AttackSpec,
    kind: RunKind,
    failures: &mut Vec<RunFailure>,
) -> Vec<RunMetrics> {
    let opts = RunOptions::from_config(cfg);
    let results = map_seeds(seeds, |s| {
        (s, simulate(cfg, s, attack, opts).map(|(_, m)| m))
    });
    let mut ok = Vec::with_capacity(results.len());
    for (seed, r) in results {
        match r {
            Ok(m) => ok.push(m),
            Err(e) => failures.push(RunFailure {
                kind,
                seed,
                error: e.to_string(),
            }),
        }
    }
    ok
}

pub fn summarize_control(runs: &[RunMetrics]) -> ControlSummary {
    let false_alarms = runs.iter().filter(|m| m.offboard_false_alarm).count();
    let flags: u64 = runs.iter().map(|m| m.onboard_flags).sum();
    let fusions: u64 = runs.iter().map(|m| m.gnss_fusions).sum();
    let devs: Vec<f64> = runs.iter().map(|m| m.max_deviation_m).collect();
    ControlSummary {
        runs: runs.len(),
        false_alarms,
        false_alarm_rate: if runs.is_empty() {
            0.0
        } else {
            false_alarms as f64 / runs.len() as f64
        },
        onboard_flag_rate: if fusions == 0 {
            0.0
        } else {
            flags as f64 / fusions as f64
        },
        max_deviation_m: quartiles(&devs),
    }
}

pub fn summarize_attack(runs: &[RunMetrics]) -> AttackSummary {
    let detected: Vec<&RunMetrics> = runs
        .iter()
        .filter(|m| m.time_to_detect_s.is_some())
        .collect();
    let ttd: Vec<f64> = detected.iter().filter_map(|m| m.time_to_detect_s).collect();
    let post: Vec<f64> = detected.iter().map(|m| m.post_mitigation_error_m).collect();
    let devs: Vec<f64> = runs.iter().map(|m| m.max_deviation_m).collect();
    AttackSummary {
        runs: runs.len(),
        detected: detected.len(),
        detection_rate: if runs.is_empty() {
            0.0
        } else {
            detected.len() as f64 / runs.len() as f64
        },
        time_to_detect_s: quartiles(&ttd),
        max_deviation_m: quartiles(&devs),
        post_mitigation_error_m: quartiles(&post),
        mitigated_below_1m: post.iter().filter(|&&e| e < 1.0).count(),
        onboard_flags_during_attack: runs.iter().map(|m| m.onboard_flags_during_attack).sum(),
    }
}

/// Runs seeds `seed .. seed + n_runs` with the configured attack and as
/// attack-free controls. With `attack_off` only the controls are run.
/// Results are gathered in seed order, so the report is deterministic.
pub fn monte_carlo(cfg: &ScenarioConfig, n_runs: usize, attack_off: bool) -> Result<BenchReport> {
    if n_runs == 0 {
        return Err(SimError::Config("bench needs at least one run".into()));
    }
    let seeds: Vec<u64> = (0..n_runs as u64)
        .map(|i| cfg.seed.wrapping_add(i))
        .collect();
    let mut failures = Vec::new();
    let (attack, calibration) = if attack_off {
        (AttackSpec::off(), None)
    } else {
        resolve_attack(cfg)?
    };
    let attack_on = attack.mode != crate::attack::AttackMode::Off;

    let attack_runs = if attack_on {
        run_batch(cfg, seeds.clone(), attack, RunKind::Attack, &mut failures)
    } else {
        Vec::new()
    };
    let control_runs = run_batch(
        cfg,
        seeds,
        AttackSpec::off(),
        RunKind::Control,
        &mut failures,
    );
    Ok(BenchReport {
        first_seed: cfg.seed,
        n_runs,
        attack_spec: attack_on.then(|| AttackRecord {
            t_on_s: attack.t_on,
            direction: attack.direction.into(),
            ramp_rate_mps: attack.ramp_rate,
        }),
        calibration,
        attack: attack_on.then(|| summarize_attack(&attack_runs)),
        control: summarize_control(&control_runs),
        failures,
        attack_runs,
        control_runs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullCalibration {
    pub runs: usize,
    pub alarms: usize,
    pub rate: f64,
    pub windows: u64,
    pub window_exceed_rate: f64,
}

pub const NULL_SEED_OFFSET: u64 = 1 << 32;

/// Persistence-gated null false-alarm rate from a dedicated block of
/// attack-free runs on seeds disjoint from any bench seeds.
///
/// The flag is recomputed from the raw per-window `q_off` sequence with
/// fresh chi-squared thresholds rather than taken from the detector's own
/// decision rule.
pub fn null_calibration(cfg: &ScenarioConfig, n_runs: usize) -> Result<NullCalibration> {
    let opts = RunOptions::from_config(cfg);
    if !opts.detector {
        return Err(SimError::Config(
            "null calibration needs detector.enabled".into(),
        ));
    }
    let seeds: Vec<u64> = (0..n_runs as u64)
        .map(|i| cfg.seed.wrapping_add(NULL_SEED_OFFSET + i))
        .collect();
    let per_run: Vec<Result<(bool, u64, u64)>> = map_seeds(seeds, |s| {
        let (trace, _) = simulate(cfg, s, AttackSpec::off(), opts)?;
        let mut streak = 0;
        let mut alarm = false;
        let mut exceeded = 0;
        for d in &trace.detector {
            let gamma = chi2_threshold(d.dof, cfg.detector.alpha_off)?;
            if d.q_off > gamma {
                streak += 1;
                exceeded += 1;
            } else {
                streak = 0;
            }
            alarm |= streak >= cfg.detector.persistence;
        }
        Ok((alarm, exceeded, trace.detector.len() as u64))
    });
    let mut alarms = 0;
    let mut windows = 0;
    let mut exceeded = 0;
    for r in per_run {
        let (a, e, w) = r?;
        alarms += a as usize;
        exceeded += e;
        windows += w;
    }
    Ok(NullCalibration {
        runs: n_runs,
        alarms,
        rate: alarms as f64 / n_runs.max(1) as f64,
        windows,
        window_exceed_rate: exceeded as f64 / windows.max(1) as f64,
    })
}

/// Two-sided Clopper-Pearson interval for a binomial proportion.
pub fn clopper_pearson(successes: usize, n: usize, confidence: f64) -> (f64, f64) {
    let a = 1.0 - confidence;
    let k = successes as f64;
    let n = n as f64;
    let lo = if successes == 0 {
        0.0
    } else {
        Beta::new(k, n - k + 1.0)
            .expect("valid beta")
            .inverse_cdf(a / 2.0)
    };
    let hi = if successes as f64 == n {
        1.0
    } else {
        Beta::new(k + 1.0, n - k)
            .expect("valid beta")
            .inverse_cdf(1.0 - a / 2.0)
    };
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles_of_small_sets() {
        assert!(quartiles(&[]).is_none());
        let q = quartiles(&[3.0, 1.0, 2.0, 4.0, 5.0]).unwrap();
        assert_eq!((q.q1, q.median, q.q3), (2.0, 3.0, 4.0));
    }

    #[test]
    fn clopper_pearson_reference_values() {
        let (lo, hi) = clopper_pearson(0, 200, 0.95);
        assert_eq!(lo, 0.0);
        // 1 - 0.025^(1/200)
        assert!((hi - (1.0 - 0.025f64.powf(1.0 / 200.0))).abs() < 1e-9);
        let (lo, hi) = clopper_pearson(5, 10, 0.95);
        assert!(
            (lo - 0.187_086).abs() < 1e-5 && (hi - 0.812_914).abs() < 1e-5,
            "{lo} {hi}"
        );
    }

    #[test]
    fn zero_runs_is_a_config_error() {
        assert!(monte_carlo(&ScenarioConfig::default(), 0, true)
            .unwrap_err()
            .is_config());
    }
}
