//! End-to-end closed loop: plant, GNSS emulation and attack, onboard
//! estimator and monitor, camera tracking, offboard detector, mitigation.

use nalgebra::{Matrix6, Vector3, Vector6};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attack::{
    calibrate_stealth_rate, AttackMode, AttackSpec, Calibration, MeaconingInjector,
};
use crate::camera::{detect, pf_init, pf_step, publish_track, Aabb};
use crate::config::{RampRate, ScenarioConfig};
use crate::detector::{OffboardDecision, OffboardDetector};
use crate::error::{Result, SimError};
use crate::estimator::{
    EstimatorState, FuseOutcome, MonitorConfig, OnboardMonitor, ResidualRecord, Source,
};
use crate::rng::{stream, Stream};
use crate::sensor::{emulate_gnss, GnssInjector, Measurement, NoAttack, GNSS_SENSOR_ID};
use crate::sim::{controller_cmd, step_dynamics, EventClass, EventQueue, SimEvent, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthRow {
    pub t: f64,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub p_ref: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRow {
    pub t: f64,
    pub p: Vector3<f64>,
    pub cov_trace: f64,
    pub n_detections_used: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub truth: Vec<TruthRow>,
    /// Every emulated GNSS fix in stamp order, spoofed or not.
    pub gnss: Vec<Measurement>,
    pub residuals: Vec<ResidualRecord>,
    pub detector: Vec<OffboardDecision>,
    pub track: Vec<TrackRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    /// Onset time; absent for attack-free runs.
    pub t_on_s: Option<f64>,
    pub ramp_rate_mps: f64,
    pub max_deviation_m: f64,
    /// Largest deviation in `[t_on, t_on + 60 s]`.
    pub max_deviation_60s_m: Option<f64>,
    pub time_to_detect_s: Option<f64>,
    pub onboard_flags: u64,
    pub onboard_flags_during_attack: u64,
    pub gnss_fusions: u64,
    pub onboard_mean_q: Option<f64>,
    /// Largest onboard gate statistic over GNSS fusions at or after onset.
    pub max_gate_stat_during_attack: Option<f64>,
    pub offboard_false_alarm: bool,
    /// Largest deviation over the last 10 s.
    pub post_mitigation_error_m: f64,
    pub rms_track_error_m: Option<f64>,
    pub detector_windows: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub trace: Trace,
    pub metrics: RunMetrics,
    pub calibration: Option<Calibration>,
}

/// Which subsystems a run wires in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub cameras: bool,
    pub detector: bool,
    pub mitigation: bool,
}

impl RunOptions {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        Self {
            cameras: cfg.cameras.enabled,
            detector: cfg.detector.enabled,
            mitigation: cfg.mitigation.enabled && cfg.cameras.enabled && cfg.detector.enabled,
        }
    }
}

enum Payload {
    Tick(u64),
    Gnss(Measurement),
    Track(Measurement),
    Window(i64),
}

fn sample_initial_estimate(
    cfg: &ScenarioConfig,
    truth: &VehicleState,
    seed: u64,
) -> (Vector6<f64>, Matrix6<f64>) {
    let mut rng = stream(seed, Stream::Init);
    let sp = cfg.estimator.init_pos_std_m;
    let sv = cfg.estimator.init_vel_std_mps;
    let sd = Vector6::new(sp, sp, sp, sv, sv, sv);
    let x0 = truth.stacked() + sd.map(|s| s * rng.sample::<f64, _>(StandardNormal));
    (x0, Matrix6::from_diagonal(&sd.component_mul(&sd)))
}

/// Runs one closed-loop scenario with an already resolved attack.
pub fn simulate(
    cfg: &ScenarioConfig,
    seed: u64,
    attack: AttackSpec,
    opts: RunOptions,
) -> Result<(Trace, RunMetrics)> {
    let model = cfg.dynamics_model()?;
    let plan = cfg.plan()?;
    let gains = cfg.gains();
    let a_max = cfg.controller.a_max_mps2;
    let gnss = cfg.gnss_config()?;
    let cams = cfg.camera_models();
    let pf_params = cfg.pf_params();
    let track_noise = cfg.track_noise();
    let monitor_cfg = MonitorConfig::new(cfg.monitor.alpha, 3, cfg.monitor.window)?;
    let mut monitor = OnboardMonitor::new(monitor_cfg);
    let dt = model.dt;
    let steps = cfg.base_steps();
    let gnss_div = (1.0 / (cfg.gnss.rate_hz * dt)).round() as u64;
    let cam_div = (1.0 / (cfg.cameras.rate_hz * dt)).round() as u64;

    let mut trace = Trace::default();
    if steps == 0 {
        return Ok((trace.clone(), compute_metrics(&trace, cfg, seed, &attack)));
    }

    let (p0, v0) = plan.reference_at(0.0);
    let mut truth = VehicleState {
        t: 0.0,
        p: p0,
        v: v0,
    };
    let (x0, p0_cov) = sample_initial_estimate(cfg, &truth, seed);
    let mut est = EstimatorState::new(model.clone(), 0.0, x0, p0_cov, cfg.buffer_steps())?
        .with_gnss_r_inflation(cfg.mitigation.gnss_r_inflation);

    let mut dyn_rng = stream(seed, Stream::Dynamics);
    let mut gnss_noise_rng = stream(seed, Stream::GnssNoise);
    let mut gnss_latency_rng = stream(seed, Stream::GnssLatency);
    let mut cam_rngs: Vec<_> = cams
        .iter()
        .map(|c| stream(seed, Stream::Camera(c.id)))
        .collect();
    let mut cam_latency_rng = stream(seed, Stream::CameraLatency);
    let mut pf_rng = stream(seed, Stream::ParticleFilter);

    let mut injector: Box<dyn GnssInjector> = match attack.mode {
        AttackMode::Off => Box::new(NoAttack),
        AttackMode::Meaconing => Box::new(MeaconingInjector::new(
            attack,
            plan.clone(),
            gnss.clone(),
            stream(seed, Stream::Attack),
        )),
    };

    let mut particles = opts.cameras.then(|| {
        let half = Vector3::repeat(cfg.cameras.pf.init_half_width_m);
        pf_init(
            &Aabb::centered(p0, half),
            cfg.cameras.pf.particles,
            cfg.cameras.pf.init_vel_std_mps,
            &mut pf_rng,
        )
    });
    let mut detector = if opts.detector {
        Some(OffboardDetector::new(cfg.detector_config(), &model)?)
    } else {
        None
    };
    let det = cfg.detector.clone();

    let mut queue = EventQueue::new();
    queue.push(
        SimEvent {
            deliver_time: 0.0,
            class: EventClass::Dynamics,
            sensor_id: 0,
            seq: 0,
        },
        Payload::Tick(0),
    )?;
    let horizon = steps as f64 * dt;
    let mut gnss_seq = 0u64;
    let mut track_seq = 0u64;

    while let Some((ev, payload)) = queue.next_event() {
        let now = ev.deliver_time;
        match payload {
            Payload::Tick(k) => {
                let t = k as f64 * dt;
                let (p_ref, v_ref) = plan.reference_at(t);
                trace.truth.push(TruthRow {
                    t,
                    p: truth.p,
                    v: truth.v,
                    p_ref,
                });
                if k == steps {
                    continue;
                }

                if k % gnss_div == 0 {
                    let m = emulate_gnss(
                        &truth,
                        gnss_seq,
                        &gnss,
                        &cfg.gnss.latency,
                        injector.as_mut(),
                        &mut gnss_noise_rng,
                        &mut gnss_latency_rng,
                    )?;
                    trace.gnss.push(m);
                    if m.deliver_time <= horizon {
                        let e = SimEvent {
                            deliver_time: m.deliver_time,
                            class: EventClass::Delivery,
                            sensor_id: m.sensor_id,
                            seq: m.seq,
                        };
                        queue.push(e, Payload::Gnss(m))?;
                    }
                    gnss_seq += 1;
                }

                if let Some(ps) = particles.as_mut() {
                    if k > 0 && k % cam_div == 0 {
                        let dets: Vec<_> = cams
                            .iter()
                            .zip(cam_rngs.iter_mut())
                            .filter_map(|(c, r)| detect(c, t, &truth.p, r))
                            .collect();
                        let (track, _) = pf_step(ps, t, &dets, &cams, &pf_params, &mut pf_rng);
                        trace.track.push(TrackRow {
                            t,
                            p: track.p_mean,
                            cov_trace: track.p_cov.trace(),
                            n_detections_used: track.n_detections_used,
                        });
                        let m = publish_track(
                            &track,
                            track_seq,
                            &cfg.cameras.latency,
                            &track_noise,
                            &mut cam_latency_rng,
                        );
                        track_seq += 1;
                        if m.deliver_time <= horizon {
                            let e = SimEvent {
                                deliver_time: m.deliver_time,
                                class: EventClass::Delivery,
                                sensor_id: m.sensor_id,
                                seq: m.seq,
                            };
                            queue.push(e, Payload::Track(m))?;
                        }
                    }
                }

                if detector.is_some() {
                    let (n, slide) = (det.window_steps as u64, det.slide_steps as u64);
                    if k >= n && (k - n) % slide == 0 {
                        let start = (k - n) as i64;
                        let decide_at = t + det.decision_delay_s;
                        if decide_at <= horizon {
                            let e = SimEvent {
                                deliver_time: decide_at,
                                class: EventClass::Detector,
                                sensor_id: 0,
                                seq: start as u64,
                            };
                            queue.push(e, Payload::Window(start))?;
                        }
                    }
                }

                let cmd = controller_cmd(
                    &est.position(),
                    &est.velocity(),
                    &p_ref,
                    &v_ref,
                    gains,
                    a_max,
                );
                if let Some(d) = detector.as_mut() {
                    d.record_input(k as i64, &cmd.u);
                }
                truth = step_dynamics(&truth, &cmd, &model, &mut dyn_rng)?;
                est.predict(&cmd)?;
                let next = SimEvent {
                    deliver_time: (k + 1) as f64 * dt,
                    class: EventClass::Dynamics,
                    sensor_id: 0,
                    seq: k + 1,
                };
                queue.push(next, Payload::Tick(k + 1))?;
            }
            Payload::Gnss(m) => {
                if let Some(d) = detector.as_mut() {
                    d.record_measurement(&m);
                }
                if let FuseOutcome::Fused(mut rec) =
                    est.fuse(&m, Source::Onboard, now, monitor_cfg.gamma)?
                {
                    rec.flagged = monitor.check(rec.q);
                    trace.residuals.push(rec);
                }
            }
            Payload::Track(m) => {
                if let Some(d) = detector.as_mut() {
                    d.record_measurement(&m);
                }
                if let FuseOutcome::Fused(rec) =
                    est.fuse(&m, Source::External, now, monitor_cfg.gamma)?
                {
                    trace.residuals.push(rec);
                }
            }
            Payload::Window(start) => {
                let d = detector
                    .as_mut()
                    .expect("window events only with a detector");
                if let Some(decision) = d.evaluate(start, now)? {
                    trace.detector.push(decision);
                    if decision.flag && opts.mitigation {
                        est.reconfigure(true);
                    }
                }
            }
        }
    }
    let metrics = compute_metrics(&trace, cfg, seed, &attack);
    Ok((trace, metrics))
}

/// Derives every metric from the trace alone.
pub fn compute_metrics(
    trace: &Trace,
    cfg: &ScenarioConfig,
    seed: u64,
    attack: &AttackSpec,
) -> RunMetrics {
    let on = attack.mode == AttackMode::Meaconing;
    let t_on = on.then_some(attack.t_on);
    let dev = |r: &TruthRow| (r.p - r.p_ref).norm();
    let max_over = |lo: f64, hi: f64| {
        trace
            .truth
            .iter()
            .filter(|r| r.t >= lo && r.t <= hi)
            .map(dev)
            .fold(0.0, f64::max)
    };
    let max_deviation_m = trace.truth.iter().map(dev).fold(0.0, f64::max);
    let max_deviation_60s_m = t_on.map(|t| max_over(t, t + 60.0));
    let post_mitigation_error_m = max_over(cfg.duration_s - 10.0, f64::INFINITY);

    let gnss_rows: Vec<&ResidualRecord> = trace
        .residuals
        .iter()
        .filter(|r| r.sensor_id == GNSS_SENSOR_ID)
        .collect();
    let onboard_flags = gnss_rows.iter().filter(|r| r.flagged).count() as u64;
    let during = |r: &&&ResidualRecord| t_on.is_some_and(|t| r.t >= t);
    let onboard_flags_during_attack = gnss_rows
        .iter()
        .filter(during)
        .filter(|r| r.flagged)
        .count() as u64;
    let gnss_fusions = gnss_rows.len() as u64;
    let onboard_mean_q = (gnss_fusions > 0)
        .then(|| gnss_rows.iter().map(|r| r.q).sum::<f64>() / gnss_fusions as f64);
    let w = cfg.monitor.window;
    let gate_stats: Vec<(f64, f64)> = gnss_rows
        .windows(w)
        .map(|win| (win[w - 1].t, win.iter().map(|r| r.q).sum::<f64>()))
        .collect();
    let max_gate_stat_during_attack = t_on.and_then(|t| {
        gate_stats
            .iter()
            .filter(|(rt, _)| *rt >= t)
            .map(|(_, s)| *s)
            .reduce(f64::max)
    });

    let first_flag = trace.detector.iter().find(|d| d.flag).map(|d| d.t);
    let (time_to_detect_s, offboard_false_alarm) = match (first_flag, t_on) {
        (None, _) => (None, false),
        (Some(_), None) => (None, true),
        (Some(f), Some(t)) if f < t => (None, true),
        (Some(f), Some(t)) => (Some(f - t), false),
    };

    let dt = cfg.dynamics.dt_s;
    let track_err: Vec<f64> = trace
        .track
        .iter()
        .filter_map(|row| {
            let idx = (row.t / dt).round() as usize;
            trace
                .truth
                .get(idx)
                .map(|truth| (row.p - truth.p).norm_squared())
        })
        .collect();
    let rms_track_error_m = (!track_err.is_empty())
        .then(|| (track_err.iter().sum::<f64>() / track_err.len() as f64).sqrt());

    RunMetrics {
        seed,
        t_on_s: t_on,
        ramp_rate_mps: if on { attack.ramp_rate } else { 0.0 },
        max_deviation_m,
        max_deviation_60s_m,
        time_to_detect_s,
        onboard_flags,
        onboard_flags_during_attack,
        gnss_fusions,
        onboard_mean_q,
        max_gate_stat_during_attack,
        offboard_false_alarm,
        post_mitigation_error_m,
        rms_track_error_m,
        detector_windows: trace.detector.len() as u64,
    }
}

/// Onboard gate threshold for the configured monitor.
pub fn monitor_gamma(cfg: &ScenarioConfig) -> Result<f64> {
    Ok(MonitorConfig::new(cfg.monitor.alpha, 3, cfg.monitor.window)?.gamma)
}

/// Stealth calibration by closed-loop bisection at the calibration seed.
///
/// Calibration runs have mitigation off, so cameras and the detector cannot
/// influence the onboard loop and are left out.
pub fn calibrate_attack(cfg: &ScenarioConfig, margin: f64) -> Result<Calibration> {
    if cfg.attack.mode == AttackMode::Off {
        return Err(SimError::Config(
            "attack.mode is off; nothing to calibrate".into(),
        ));
    }
    let seed = cfg.attack.calibration_seed.unwrap_or(cfg.seed);
    let opts = RunOptions {
        cameras: false,
        detector: false,
        mitigation: false,
    };
    let gamma = monitor_gamma(cfg)?;
    let max_q_at = |rate: f64| -> Result<f64> {
        let (_, m) = simulate(cfg, seed, cfg.attack_spec_with(rate), opts)?;
        Ok(m.max_gate_stat_during_attack.unwrap_or(0.0))
    };
    calibrate_stealth_rate(
        max_q_at,
        gamma,
        margin,
        cfg.attack.r_max_mps,
        cfg.attack.iters,
    )
}

/// Attack spec with the ramp rate resolved, calibrating when it is `"auto"`.
pub fn resolve_attack(cfg: &ScenarioConfig) -> Result<(AttackSpec, Option<Calibration>)> {
    match (cfg.attack.mode, cfg.attack.ramp_rate_mps) {
        (AttackMode::Off, _) => Ok((AttackSpec::off(), None)),
        (_, RampRate::Fixed(r)) => Ok((cfg.attack_spec_with(r), None)),
        (_, RampRate::Auto) => {
            let cal = calibrate_attack(cfg, cfg.attack.margin)?;
            Ok((cfg.attack_spec_with(cal.ramp_rate), Some(cal)))
        }
    }
}

pub fn run_scenario(cfg: &ScenarioConfig, seed: Option<u64>) -> Result<RunOutput> {
    let (attack, calibration) = resolve_attack(cfg)?;
    let (trace, metrics) = simulate(
        cfg,
        seed.unwrap_or(cfg.seed),
        attack,
        RunOptions::from_config(cfg),
    )?;
    Ok(RunOutput {
        trace,
        metrics,
        calibration,
    })
}
